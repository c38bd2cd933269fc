// core/src/textfeat.cpp
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

#include "ustr/textfeat.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace ustr {

namespace {

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

TextVocab BuildVocab(const std::vector<std::string>& symbols) {
  TextVocab v;
  v.symbols.push_back(kMaskSymbol);
  for (const auto& s : symbols) v.symbols.push_back(s);
  for (size_t i = 0; i < v.symbols.size(); ++i) {
    if (!v.index.emplace(v.symbols[i], static_cast<int>(i)).second)
      Fail("duplicate vocabulary symbol: " + v.symbols[i]);
  }
  v.mask_id = 0;
  return v;
}

bool EndsWithWordEnd(const std::string& s) {
  const std::string suffix = kWordEndSuffix;
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> WordToBaseSymbols(const std::string& word) {
  if (word.empty()) Fail("empty word");
  std::vector<std::string> syms;
  for (size_t i = 0; i < word.size(); ++i)
    syms.push_back(std::string(1, word[i]));
  syms.back() += kWordEndSuffix;
  return syms;
}

}  // namespace

std::string TextUnitName(TextUnit unit) {
  switch (unit) {
    case TextUnit::kGrapheme: return "grapheme";
    case TextUnit::kSubword: return "subword";
    case TextUnit::kPhoneme: return "phoneme";
  }
  Fail("bad text unit");
}

TextUnit TextUnitFromName(const std::string& name) {
  if (name == "grapheme") return TextUnit::kGrapheme;
  if (name == "subword") return TextUnit::kSubword;
  if (name == "phoneme") return TextUnit::kPhoneme;
  Fail("unknown text unit: " + name);
}

int TextVocab::Id(const std::string& symbol) const {
  auto it = index.find(symbol);
  if (it == index.end()) Fail("symbol not in vocabulary: " + symbol);
  return it->second;
}

const std::string& TextVocab::Symbol(int id) const {
  if (id < 0 || id >= Size())
    Fail("vocabulary id out of range: " + std::to_string(id));
  return symbols[static_cast<size_t>(id)];
}

TextVocab MakeGraphemeVocab(const std::vector<std::string>& corpus_words) {
  std::set<char> chars;
  for (const auto& w : corpus_words)
    for (char c : w) chars.insert(c);
  std::vector<std::string> symbols;
  symbols.push_back(kSpaceSymbol);
  for (char c : chars) symbols.push_back(std::string(1, c));
  return BuildVocab(symbols);
}

TokenSequence GraphemeTokenize(const std::vector<std::string>& words,
                               const TextVocab& vocab) {
  if (words.empty()) Fail("grapheme_tokenize: empty transcript");
  TokenSequence out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out.ids.push_back(vocab.Id(kSpaceSymbol));
    for (char c : words[i]) out.ids.push_back(vocab.Id(std::string(1, c)));
  }
  return out;
}

std::vector<std::string> GraphemeDetokenize(const TokenSequence& tokens,
                                            const TextVocab& vocab) {
  std::vector<std::string> words;
  std::string cur;
  for (int id : tokens.ids) {
    const std::string& sym = vocab.Symbol(id);
    if (sym == kSpaceSymbol) {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
    } else if (sym != kMaskSymbol) {
      cur += sym;
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

BpeModel BpeTrain(const std::vector<std::vector<std::string>>& transcripts,
                  int num_merges) {
  if (num_merges < 0) Fail("bpe_train: num_merges must be >= 0");
  std::map<std::string, long> word_freq;
  for (const auto& t : transcripts)
    for (const auto& w : t) word_freq[w] += 1;
  if (word_freq.empty()) Fail("bpe_train: empty corpus");

  std::map<std::string, std::vector<std::string>> segmentations;
  std::set<std::string> base;
  for (const auto& [word, _] : word_freq) {
    segmentations[word] = WordToBaseSymbols(word);
    // Both plain and word-final forms of every character, so any word over
    // the observed alphabet stays encodable after a grapheme fallback.
    for (char c : word) {
      base.insert(std::string(1, c));
      base.insert(std::string(1, c) + kWordEndSuffix);
    }
  }

  BpeModel model;
  model.vocab.assign(base.begin(), base.end());
  for (int round = 0; round < num_merges; ++round) {
    std::map<std::pair<std::string, std::string>, long> pair_freq;
    for (const auto& [word, freq] : word_freq) {
      const auto& seg = segmentations[word];
      for (size_t i = 0; i + 1 < seg.size(); ++i)
        pair_freq[{seg[i], seg[i + 1]}] += freq;
    }
    if (pair_freq.empty()) break;
    // Highest frequency; lexicographically smallest pair on ties. std::map
    // iteration order makes the first max the smallest pair already.
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;
    model.merges.push_back(best->first);
    model.vocab.push_back(best->first.first + best->first.second);
    for (auto& [word, seg] : segmentations) {
      std::vector<std::string> merged;
      for (size_t i = 0; i < seg.size(); ++i) {
        if (i + 1 < seg.size() && seg[i] == best->first.first &&
            seg[i + 1] == best->first.second) {
          merged.push_back(seg[i] + seg[i + 1]);
          ++i;
        } else {
          merged.push_back(seg[i]);
        }
      }
      seg = std::move(merged);
    }
  }
  return model;
}

std::vector<std::string> BpeSegmentWord(const BpeModel& model,
                                        const std::string& word) {
  std::vector<std::string> seg = WordToBaseSymbols(word);
  for (const auto& merge : model.merges) {
    std::vector<std::string> merged;
    for (size_t i = 0; i < seg.size(); ++i) {
      if (i + 1 < seg.size() && seg[i] == merge.first &&
          seg[i + 1] == merge.second) {
        merged.push_back(seg[i] + seg[i + 1]);
        ++i;
      } else {
        merged.push_back(seg[i]);
      }
    }
    seg = std::move(merged);
  }
  return seg;
}

TextVocab MakeBpeVocab(const BpeModel& model) {
  return BuildVocab(model.vocab);
}

TokenSequence BpeEncode(const BpeModel& model, const TextVocab& vocab,
                        const std::vector<std::string>& words) {
  if (words.empty()) Fail("bpe_encode: empty transcript");
  TokenSequence out;
  for (const auto& word : words)
    for (const auto& sym : BpeSegmentWord(model, word))
      out.ids.push_back(vocab.Id(sym));
  return out;
}

std::vector<std::string> BpeDecode(const TokenSequence& tokens,
                                   const TextVocab& vocab) {
  std::vector<std::string> words;
  std::string cur;
  for (int id : tokens.ids) {
    const std::string& sym = vocab.Symbol(id);
    if (sym == kMaskSymbol) continue;
    cur += sym;
    if (EndsWithWordEnd(cur)) {
      words.push_back(cur.substr(0, cur.size() - std::string(kWordEndSuffix).size()));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

void SaveBpeModel(const BpeModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open BPE model for writing: " + path);
  out << "USTR-BPE v1\n";
  for (const auto& [a, b] : model.merges) out << a << " " << b << "\n";
}

BpeModel LoadBpeModel(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open BPE model: " + path);
  std::string header;
  std::getline(in, header);
  if (header != "USTR-BPE v1")
    Fail("BPE model " + path + ": unknown format header '" + header + "'");
  BpeModel model;
  std::set<std::string> vocab;
  std::string a, b;
  while (in >> a >> b) {
    model.merges.emplace_back(a, b);
    // Base symbols are recoverable from merge endpoints.
    vocab.insert(a);
    vocab.insert(b);
    vocab.insert(a + b);
  }
  model.vocab.assign(vocab.begin(), vocab.end());
  return model;
}

TextVocab MakePhonemeVocab(const PhonemeInventory& inventory) {
  return BuildVocab(inventory.phonemes);
}

TokenSequence G2p(const Lexicon& lexicon, const TextVocab& vocab,
                  const std::vector<std::string>& words) {
  if (words.empty()) Fail("g2p: empty transcript");
  TokenSequence out;
  for (const auto& word : words) {
    if (!lexicon.Has(word)) Fail("g2p: word not in lexicon: " + word);
    for (const auto& ph : lexicon.Pronounce(word))
      out.ids.push_back(vocab.Id(ph));
  }
  return out;
}

TextFeatureSequence MaskThenRepeat(const TokenSequence& tokens,
                                   const TextRepConfig& cfg, int mask_id,
                                   Rng& rng) {
  if (tokens.ids.empty()) Fail("mask_then_repeat: empty token sequence");
  if (cfg.repeat < 1) Fail("mask_then_repeat: repeat must be >= 1");
  TextFeatureSequence out;
  out.repeat = cfg.repeat;
  out.ids.reserve(tokens.ids.size() * static_cast<size_t>(cfg.repeat));
  for (int id : tokens.ids) {
    int emit = rng.Bernoulli(cfg.mask_prob) ? mask_id : id;
    for (int r = 0; r < cfg.repeat; ++r) out.ids.push_back(emit);
  }
  return out;
}

TextFeatureSequence RepeatThenMask(const TokenSequence& tokens,
                                   const TextRepConfig& cfg, int mask_id,
                                   Rng& rng) {
  if (tokens.ids.empty()) Fail("repeat_then_mask: empty token sequence");
  if (cfg.repeat < 1) Fail("repeat_then_mask: repeat must be >= 1");
  TextFeatureSequence out;
  out.repeat = cfg.repeat;
  for (int id : tokens.ids)
    for (int r = 0; r < cfg.repeat; ++r)
      out.ids.push_back(rng.Bernoulli(cfg.mask_prob) ? mask_id : id);
  return out;
}

void SaveTextVocab(const TextVocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open vocabulary for writing: " + path);
  for (const auto& s : vocab.symbols) out << s << "\n";
}

TextVocab LoadTextVocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open vocabulary: " + path);
  TextVocab v;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) v.symbols.push_back(line);
  if (v.symbols.empty() || v.symbols[0] != kMaskSymbol)
    Fail("vocabulary " + path + ": first symbol must be " +
         std::string(kMaskSymbol));
  for (size_t i = 0; i < v.symbols.size(); ++i)
    v.index.emplace(v.symbols[i], static_cast<int>(i));
  v.mask_id = 0;
  return v;
}

}  // namespace ustr
