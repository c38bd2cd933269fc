// core/src/corpus.cpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ustr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ustr {

namespace {

using nlohmann::json;

const char kFeatureMagic[4] = {'U', 'S', 'T', 'F'};

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

double Distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

std::string JoinWords(const std::vector<std::string>& words) {
  std::ostringstream os;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) os << ' ';
    os << words[i];
  }
  return os.str();
}

std::vector<std::string> SplitWords(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

const std::vector<double>& PhonemeInventory::Prototype(
    const std::string& phoneme) const {
  auto it = prototypes.find(phoneme);
  if (it == prototypes.end()) Fail("unknown phoneme: " + phoneme);
  return it->second;
}

const std::vector<std::string>& Lexicon::Pronounce(
    const std::string& word) const {
  auto it = entries.find(word);
  if (it == entries.end()) Fail("word not in lexicon: " + word);
  return it->second;
}

void DomainSpec::Validate() const {
  if (vocabulary.empty()) Fail("domain spec " + name + ": empty vocabulary");
  if (min_sentence_len < 1 || max_sentence_len < min_sentence_len)
    Fail("domain spec " + name + ": bad sentence length range");
  for (const auto& [pair, w] : bigram_weights) {
    if (w <= 0.0) Fail("domain spec " + name + ": non-positive bigram weight");
    auto in_vocab = [&](const std::string& s) {
      return s == kSentenceStart ||
             std::find(vocabulary.begin(), vocabulary.end(), s) != vocabulary.end();
    };
    if (!in_vocab(pair.first) || !in_vocab(pair.second))
      Fail("domain spec " + name + ": bigram endpoint not in vocabulary: " +
           pair.first + "|" + pair.second);
  }
}

PhonemeInventory BuildInventory(int num_phonemes, int dim, double separation,
                                uint64_t seed) {
  if (num_phonemes < 2 || dim < 2 || separation <= 0.0)
    Fail("build_inventory: need num_phonemes >= 2, dim >= 2, separation > 0");
  Rng rng(seed);
  const int kMaxRounds = 1000;
  for (int round = 0; round < kMaxRounds; ++round) {
    std::vector<std::vector<double>> protos;
    protos.reserve(num_phonemes);
    bool ok = true;
    for (int i = 0; i < num_phonemes && ok; ++i) {
      // Per-vector rejection with a bounded retry count.
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        std::vector<double> cand(dim);
        for (double& x : cand) x = rng.Gaussian();
        placed = true;
        for (const auto& p : protos)
          if (Distance(p, cand) < separation) {
            placed = false;
            break;
          }
        if (placed) protos.push_back(std::move(cand));
      }
      if (!placed) ok = false;
    }
    if (ok) {
      PhonemeInventory inv;
      inv.dim = dim;
      for (int i = 0; i < num_phonemes; ++i) {
        std::string sym = "ph" + std::to_string(i);
        inv.phonemes.push_back(sym);
        inv.prototypes[sym] = protos[i];
      }
      return inv;
    }
  }
  Fail("build_inventory: separation " + std::to_string(separation) +
       " infeasible for dim " + std::to_string(dim));
}

Lexicon BuildLexicon(const PhonemeInventory& inventory,
                     const std::vector<std::string>& vocabulary, uint64_t seed) {
  if (vocabulary.empty()) Fail("build_lexicon: empty vocabulary");
  Rng rng(seed);
  int n_ph = static_cast<int>(inventory.phonemes.size());

  // Pronunciations are compositional: every distinct letter of the
  // vocabulary gets a fixed seeded block of one or two phonemes, and a
  // word's pronunciation is the concatenation of its letter blocks. Each
  // block opens with a phoneme unique to its letter, and optional second
  // phonemes come from the disjoint remainder of the inventory, so block
  // sequences parse uniquely and distinct words get distinct
  // pronunciations.
  std::set<char> letter_set;
  for (const auto& w : vocabulary)
    for (char c : w) letter_set.insert(c);
  std::vector<char> letters(letter_set.begin(), letter_set.end());
  int n_letters = static_cast<int>(letters.size());
  if (n_letters > n_ph)
    Fail("build_lexicon: vocabulary uses " + std::to_string(n_letters) +
         " letters but the inventory has only " + std::to_string(n_ph) +
         " phonemes");

  std::vector<int> perm(n_ph);
  for (int i = 0; i < n_ph; ++i) perm[i] = i;
  for (int i = n_ph - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.UniformInt(0, i)]);

  std::map<char, std::vector<std::string>> block;
  int n_coda = n_ph - n_letters;
  for (int i = 0; i < n_letters; ++i) {
    std::vector<std::string> b{inventory.phonemes[perm[i]]};
    bool coda = rng.Bernoulli(0.5);
    int pick = n_coda > 0 ? rng.UniformInt(0, n_coda - 1) : 0;
    if (coda && n_coda > 0)
      b.push_back(inventory.phonemes[perm[n_letters + pick]]);
    block[letters[i]] = std::move(b);
  }

  Lexicon lex;
  std::set<std::vector<std::string>> used;
  for (const std::string& word : vocabulary) {
    if (lex.entries.count(word)) continue;
    std::vector<std::string> pron;
    for (char c : word) {
      const auto& b = block.at(c);
      pron.insert(pron.end(), b.begin(), b.end());
    }
    // Single-letter words are padded to the two-phoneme minimum.
    while (pron.size() < 2) pron.push_back(pron.back());
    if (used.count(pron))
      Fail("build_lexicon: could not find a distinct pronunciation for '" +
           word + "'");
    used.insert(pron);
    lex.entries[word] = std::move(pron);
  }
  return lex;
}

std::vector<std::string> SampleSentence(const DomainSpec& spec, Rng& rng) {
  spec.Validate();
  int len = rng.UniformInt(spec.min_sentence_len, spec.max_sentence_len);
  std::vector<std::string> out;
  std::string prev = kSentenceStart;
  for (int i = 0; i < len; ++i) {
    // Normalize weights for the row of `prev`.
    std::vector<double> weights(spec.vocabulary.size());
    double total = 0.0;
    for (size_t j = 0; j < spec.vocabulary.size(); ++j) {
      auto it = spec.bigram_weights.find({prev, spec.vocabulary[j]});
      weights[j] = it == spec.bigram_weights.end() ? spec.default_weight
                                                   : it->second;
      total += weights[j];
    }
    double r = rng.Uniform() * total;
    size_t pick = 0;
    for (; pick + 1 < weights.size(); ++pick) {
      if (r < weights[pick]) break;
      r -= weights[pick];
    }
    out.push_back(spec.vocabulary[pick]);
    prev = spec.vocabulary[pick];
  }
  return out;
}

Matrix SynthesizeAudio(const std::vector<std::string>& words,
                       const Lexicon& lexicon, const PhonemeInventory& inventory,
                       const AcousticConfig& acoustics, Rng& rng) {
  if (acoustics.min_duration < 1 ||
      acoustics.max_duration < acoustics.min_duration)
    Fail("synthesize_audio: bad duration range");
  std::vector<const std::vector<double>*> frames;
  std::vector<int> durations;
  for (const std::string& word : words) {
    if (!lexicon.Has(word)) Fail("synthesize_audio: word not in lexicon: " + word);
    for (const std::string& ph : lexicon.Pronounce(word)) {
      frames.push_back(&inventory.Prototype(ph));
      durations.push_back(
          rng.UniformInt(acoustics.min_duration, acoustics.max_duration));
    }
  }
  int total = 0;
  for (int d : durations) total += d;
  Matrix m(total, inventory.dim);
  int row = 0;
  for (size_t i = 0; i < frames.size(); ++i) {
    for (int d = 0; d < durations[i]; ++d, ++row)
      for (int c = 0; c < inventory.dim; ++c)
        m.At(row, c) = (*frames[i])[c] +
                       (acoustics.noise_sigma > 0.0
                            ? acoustics.noise_sigma * rng.Gaussian()
                            : 0.0);
  }
  return m;
}

Manifest GenerateCorpus(const DomainSpec& spec, const Lexicon& lexicon,
                        const PhonemeInventory& inventory, int n_utterances,
                        bool paired, const AcousticConfig& acoustics,
                        uint64_t seed, const std::string& out_dir,
                        const std::string& id_prefix) {
  if (n_utterances < 1) Fail("generate_corpus: n_utterances must be >= 1");
  spec.Validate();
  std::filesystem::create_directories(out_dir);
  Rng rng(seed);
  Manifest manifest;
  manifest.feature_dim = inventory.dim;
  for (int i = 0; i < n_utterances; ++i) {
    Rng utt_rng = rng.Fork(static_cast<uint64_t>(i));
    ManifestRecord rec;
    rec.id = id_prefix + std::to_string(i);
    rec.domain = spec.name;
    rec.transcript = SampleSentence(spec, utt_rng);
    if (paired) {
      Matrix audio =
          SynthesizeAudio(rec.transcript, lexicon, inventory, acoustics, utt_rng);
      std::string path = out_dir + "/" + rec.id + ".feat";
      WriteFeatureFile(audio, path);
      rec.audio_path = path;
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void SaveManifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open manifest for writing: " + path);
  json header = {{"version", manifest.version},
                 {"feature_dim", manifest.feature_dim}};
  out << header.dump() << "\n";
  for (const auto& rec : manifest.records) {
    json j = {{"id", rec.id},
              {"domain", rec.domain},
              {"transcript", JoinWords(rec.transcript)}};
    if (rec.audio_path)
      j["audio"] = *rec.audio_path;
    else
      j["audio"] = nullptr;
    out << j.dump() << "\n";
  }
}

Manifest LoadManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open manifest: " + path);
  Manifest manifest;
  std::string line;
  int line_no = 0;
  bool have_header = false;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      Fail("manifest " + path + " line " + std::to_string(line_no) +
           ": malformed record: " + e.what());
    }
    if (!have_header) {
      if (!j.contains("version") || !j.contains("feature_dim"))
        Fail("manifest " + path + " line 1: missing header");
      manifest.version = j["version"].get<std::string>();
      manifest.feature_dim = j["feature_dim"].get<int>();
      have_header = true;
      continue;
    }
    ManifestRecord rec;
    try {
      rec.id = j.at("id").get<std::string>();
      rec.domain = j.at("domain").get<std::string>();
      rec.transcript = SplitWords(j.at("transcript").get<std::string>());
      if (!j.at("audio").is_null())
        rec.audio_path = j.at("audio").get<std::string>();
    } catch (const std::exception& e) {
      Fail("manifest " + path + " line " + std::to_string(line_no) +
           ": malformed record: " + e.what());
    }
    if (rec.transcript.empty())
      Fail("manifest " + path + " line " + std::to_string(line_no) +
           ": empty transcript");
    if (!seen_ids.insert(rec.id).second)
      Fail("manifest " + path + ": duplicate id " + rec.id);
    manifest.records.push_back(std::move(rec));
  }
  if (!have_header || manifest.records.empty())
    Fail("manifest " + path + ": no utterances");
  return manifest;
}

void WriteFeatureFile(const Matrix& features, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail("cannot open feature file for writing: " + path);
  uint16_t t = static_cast<uint16_t>(features.rows);
  uint16_t d = static_cast<uint16_t>(features.cols);
  out.write(kFeatureMagic, 4);
  out.write(reinterpret_cast<const char*>(&t), 2);
  out.write(reinterpret_cast<const char*>(&d), 2);
  for (double x : features.v) {
    float f = static_cast<float>(x);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

Matrix ReadFeatureFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail("cannot open feature file: " + path);
  char magic[4];
  uint16_t t = 0, d = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&t), 2);
  in.read(reinterpret_cast<char*>(&d), 2);
  if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0)
    Fail("feature file " + path + ": bad header");
  Matrix m(t, d);
  for (auto& x : m.v) {
    float f;
    in.read(reinterpret_cast<char*>(&f), 4);
    if (!in) Fail("feature file " + path + ": truncated payload");
    x = static_cast<double>(f);
  }
  return m;
}

Matrix LoadUtteranceAudio(const Manifest& manifest, const ManifestRecord& rec) {
  if (!rec.audio_path) Fail("utterance " + rec.id + ": no audio");
  Matrix m;
  try {
    m = ReadFeatureFile(*rec.audio_path);
  } catch (const std::exception& e) {
    Fail("utterance " + rec.id + ": " + e.what());
  }
  if (m.cols != manifest.feature_dim)
    Fail("utterance " + rec.id + ": feature dim " + std::to_string(m.cols) +
         " does not match manifest dim " + std::to_string(manifest.feature_dim));
  return m;
}

DomainSpec LoadDomainSpec(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open domain spec: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    Fail("domain spec " + path + ": " + e.what());
  }
  DomainSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  spec.default_weight = j.value("default_bigram_weight", 1.0);
  auto range = j.at("sentence_length_range").get<std::vector<int>>();
  if (range.size() != 2) Fail("domain spec " + path + ": bad length range");
  spec.min_sentence_len = range[0];
  spec.max_sentence_len = range[1];
  if (j.contains("bigram_weights")) {
    for (const auto& [key, w] : j["bigram_weights"].items()) {
      auto bar = key.find('|');
      if (bar == std::string::npos)
        Fail("domain spec " + path + ": bigram key must be 'prev|word': " + key);
      spec.bigram_weights[{key.substr(0, bar), key.substr(bar + 1)}] =
          w.get<double>();
    }
  }
  spec.Validate();
  return spec;
}

void SaveDomainSpec(const DomainSpec& spec, const std::string& path) {
  json j;
  j["name"] = spec.name;
  j["vocabulary"] = spec.vocabulary;
  j["default_bigram_weight"] = spec.default_weight;
  j["sentence_length_range"] = {spec.min_sentence_len, spec.max_sentence_len};
  json weights = json::object();
  for (const auto& [pair, w] : spec.bigram_weights)
    weights[pair.first + "|" + pair.second] = w;
  j["bigram_weights"] = weights;
  std::ofstream out(path);
  if (!out) Fail("cannot open domain spec for writing: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace ustr
