// core/include/ustr/textfeat.hpp
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
// Text-feature pipelines: grapheme, subword (internal BPE) and phoneme
// tokenization, plus the mask/repeat transform that turns a transcript
// into text-encoder input.

#ifndef USTR_TEXTFEAT_HPP
#define USTR_TEXTFEAT_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "ustr/corpus.hpp"
#include "ustr/rng.hpp"

namespace ustr {

enum class TextUnit { kGrapheme, kSubword, kPhoneme };

std::string TextUnitName(TextUnit unit);
TextUnit TextUnitFromName(const std::string& name);

// Bijective id<->symbol table with a reserved mask token at id 0.
struct TextVocab {
  std::vector<std::string> symbols;
  std::unordered_map<std::string, int> index;
  int mask_id = 0;

  int Size() const { return static_cast<int>(symbols.size()); }
  int Id(const std::string& symbol) const;  // error names the symbol
  const std::string& Symbol(int id) const;
};

inline constexpr const char* kMaskSymbol = "<mask>";
inline constexpr const char* kSpaceSymbol = "<sp>";
inline constexpr const char* kWordEndSuffix = "</w>";

struct TokenSequence {
  std::vector<int> ids;
};

struct TextRepConfig {
  TextUnit unit = TextUnit::kPhoneme;
  int repeat = 4;
  double mask_prob = 0.15;
};

struct TextFeatureSequence {
  std::vector<int> ids;
  int repeat = 1;
};

// ---- grapheme features ----
// Vocab: <mask>, <sp>, then the distinct characters of the corpus words.
TextVocab MakeGraphemeVocab(const std::vector<std::string>& corpus_words);
TokenSequence GraphemeTokenize(const std::vector<std::string>& words,
                               const TextVocab& vocab);
std::vector<std::string> GraphemeDetokenize(const TokenSequence& tokens,
                                            const TextVocab& vocab);

// ---- subword features (byte-pair encoding) ----
struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;  // training order
  std::vector<std::string> vocab;  // base graphemes + merge products
};

// Most-frequent adjacent pair merged per round; frequency ties broken by
// lexicographically smallest pair, so training is deterministic.
BpeModel BpeTrain(const std::vector<std::vector<std::string>>& transcripts,
                  int num_merges);
// Segment one word into model symbols (word-end marker on the last symbol).
std::vector<std::string> BpeSegmentWord(const BpeModel& model,
                                        const std::string& word);
TextVocab MakeBpeVocab(const BpeModel& model);
TokenSequence BpeEncode(const BpeModel& model, const TextVocab& vocab,
                        const std::vector<std::string>& words);
std::vector<std::string> BpeDecode(const TokenSequence& tokens,
                                   const TextVocab& vocab);
void SaveBpeModel(const BpeModel& model, const std::string& path);
BpeModel LoadBpeModel(const std::string& path);

// ---- phoneme features ----
TextVocab MakePhonemeVocab(const PhonemeInventory& inventory);
// Strict: an out-of-lexicon word is an error naming the word.
TokenSequence G2p(const Lexicon& lexicon, const TextVocab& vocab,
                  const std::vector<std::string>& words);

// ---- mask / repeat ----
// Mask each pre-repeat token with mask_prob, then repeat: blocks of size
// `repeat` are constant by construction.
TextFeatureSequence MaskThenRepeat(const TokenSequence& tokens,
                                   const TextRepConfig& cfg, int mask_id,
                                   Rng& rng);
// Ablation order: repeat first, then mask each expanded position.
TextFeatureSequence RepeatThenMask(const TokenSequence& tokens,
                                   const TextRepConfig& cfg, int mask_id,
                                   Rng& rng);

void SaveTextVocab(const TextVocab& vocab, const std::string& path);
TextVocab LoadTextVocab(const std::string& path);

}  // namespace ustr

#endif  // USTR_TEXTFEAT_HPP
