// core/include/ustr/decode.hpp
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
// Greedy and frame-synchronous beam decoding with decomposed hypothesis
// scores (transducer / internal LM / external LM) for subtractive
// internal-LM fusion.

#ifndef USTR_DECODE_HPP
#define USTR_DECODE_HPP

#include <map>
#include <string>
#include <vector>

#include "ustr/corpus.hpp"
#include "ustr/model.hpp"

namespace ustr {

struct Hypothesis {
  std::vector<int> tokens;  // no blanks
  double score_am = 0.0;    // alignment-summed transducer log-prob
  double score_ilm = 0.0;   // internal LM log-prob of tokens
  double score_elm = 0.0;   // external LM log-prob of tokens
};

struct FusionConfig {
  double lambda_ilm = 0.0;
  double lambda_elm = 0.0;
  int beam_width = 4;
};

inline double FusedScore(const Hypothesis& h, const FusionConfig& cfg) {
  return h.score_am + cfg.lambda_elm * h.score_elm -
         cfg.lambda_ilm * h.score_ilm;
}

// Per frame: argmax until blank, at most 10 labels per frame.
std::vector<int> GreedyDecode(const UstrModel& model, const Matrix& audio);

// Duplicate prefixes are merged by log-adding score_am; label expansions
// accumulate ILM/ELM scores; blanks touch only score_am. Ranked by
// FusedScore, best first. Total labels capped at 2*T'.
std::vector<Hypothesis> BeamSearch(const UstrModel& model, const Matrix& audio,
                                   const FusionConfig& fusion,
                                   const ExternalLm* elm = nullptr);

struct UtteranceDecode {
  std::string id;
  Hypothesis best;
};

// Applies BeamSearch per utterance; results keyed by id, order independent.
std::map<std::string, UtteranceDecode> BatchDecode(const UstrModel& model,
                                                   const Manifest& manifest,
                                                   const FusionConfig& fusion,
                                                   const ExternalLm* elm = nullptr);

}  // namespace ustr

#endif  // USTR_DECODE_HPP
