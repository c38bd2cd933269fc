// core/include/ustr/wer.hpp
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

#ifndef USTR_WER_HPP
#define USTR_WER_HPP

#include <string>
#include <vector>

namespace ustr {

struct UtteranceErrors {
  std::string id;
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long reference_words = 0;
};

struct WerReport {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long reference_words = 0;
  std::vector<UtteranceErrors> per_utterance;

  double Wer() const {
    return reference_words == 0
               ? 0.0
               : static_cast<double>(substitutions + insertions + deletions) /
                     static_cast<double>(reference_words);
  }
  void Accumulate(const UtteranceErrors& u);
};

// Levenshtein alignment with unit costs; backtrace ties prefer
// substitution over insertion over deletion. Empty reference is an error.
UtteranceErrors AlignWords(const std::vector<std::string>& reference,
                           const std::vector<std::string>& hypothesis);

}  // namespace ustr

#endif  // USTR_WER_HPP
