// core/include/ustr/corpus.hpp
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
//
// Deterministic synthetic two-domain speech/text corpora. Audio is a
// sequence of per-phoneme prototype vectors plus Gaussian noise, so a
// closed lexicon fully determines the acoustics of a sentence.

#ifndef USTR_CORPUS_HPP
#define USTR_CORPUS_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ustr/rng.hpp"

namespace ustr {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
  double& At(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double At(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
};

struct PhonemeInventory {
  std::vector<std::string> phonemes;              // ordered, unique
  std::map<std::string, std::vector<double>> prototypes;
  int dim = 0;

  const std::vector<double>& Prototype(const std::string& phoneme) const;
};

struct Lexicon {
  std::map<std::string, std::vector<std::string>> entries;

  const std::vector<std::string>& Pronounce(const std::string& word) const;
  bool Has(const std::string& word) const { return entries.count(word) > 0; }
};

struct DomainSpec {
  std::string name;
  std::vector<std::string> vocabulary;
  // Sparse bigram weights keyed (previous word, word); previous may be the
  // sentence-start marker kSentenceStart. Unlisted pairs get default_weight.
  std::map<std::pair<std::string, std::string>, double> bigram_weights;
  double default_weight = 1.0;
  int min_sentence_len = 1;
  int max_sentence_len = 1;

  void Validate() const;
};

inline constexpr const char* kSentenceStart = "<s>";

struct Utterance {
  std::string id;
  std::string domain;
  std::vector<std::string> transcript;
  std::optional<Matrix> audio;
};

struct ManifestRecord {
  std::string id;
  std::string domain;
  std::vector<std::string> transcript;
  std::optional<std::string> audio_path;
};

struct Manifest {
  std::string version = "1";
  int feature_dim = 0;
  std::vector<ManifestRecord> records;
};

struct AcousticConfig {
  double noise_sigma = 0.1;
  int min_duration = 2;
  int max_duration = 5;
};

// Rejection-samples prototype vectors until all pairwise distances reach
// `separation`; throws after a bounded number of rounds.
PhonemeInventory BuildInventory(int num_phonemes, int dim, double separation,
                                uint64_t seed);

// Random pronunciations of length 2..6; distinct words get distinct
// pronunciations or the call fails.
Lexicon BuildLexicon(const PhonemeInventory& inventory,
                     const std::vector<std::string>& vocabulary, uint64_t seed);

std::vector<std::string> SampleSentence(const DomainSpec& spec, Rng& rng);

Matrix SynthesizeAudio(const std::vector<std::string>& words,
                       const Lexicon& lexicon, const PhonemeInventory& inventory,
                       const AcousticConfig& acoustics, Rng& rng);

// Writes one feature file per utterance when paired; returns the manifest.
Manifest GenerateCorpus(const DomainSpec& spec, const Lexicon& lexicon,
                        const PhonemeInventory& inventory, int n_utterances,
                        bool paired, const AcousticConfig& acoustics,
                        uint64_t seed, const std::string& out_dir,
                        const std::string& id_prefix);

void SaveManifest(const Manifest& manifest, const std::string& path);
Manifest LoadManifest(const std::string& path);

void WriteFeatureFile(const Matrix& features, const std::string& path);
Matrix ReadFeatureFile(const std::string& path);

// Loads the audio for a manifest record; errors name the utterance id.
Matrix LoadUtteranceAudio(const Manifest& manifest, const ManifestRecord& rec);

// Domain spec config I/O (JSON; bigram keys written "prev|word").
DomainSpec LoadDomainSpec(const std::string& path);
void SaveDomainSpec(const DomainSpec& spec, const std::string& path);

}  // namespace ustr

#endif  // USTR_CORPUS_HPP
