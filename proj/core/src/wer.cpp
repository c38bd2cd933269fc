// core/src/wer.cpp
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

#include "ustr/wer.hpp"

#include <stdexcept>

namespace ustr {

void WerReport::Accumulate(const UtteranceErrors& u) {
  substitutions += u.substitutions;
  insertions += u.insertions;
  deletions += u.deletions;
  reference_words += u.reference_words;
  per_utterance.push_back(u);
}

UtteranceErrors AlignWords(const std::vector<std::string>& reference,
                           const std::vector<std::string>& hypothesis) {
  if (reference.empty())
    throw std::runtime_error("wer: empty reference");
  size_t n = reference.size(), m = hypothesis.size();
  // d[i][j] = edit distance between ref[0:i) and hyp[0:j).
  std::vector<std::vector<long>> d(n + 1, std::vector<long>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) d[i][0] = static_cast<long>(i);
  for (size_t j = 0; j <= m; ++j) d[0][j] = static_cast<long>(j);
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j) {
      long sub = d[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      long ins = d[i][j - 1] + 1;
      long del = d[i - 1][j] + 1;
      d[i][j] = std::min({sub, ins, del});
    }
  UtteranceErrors e;
  e.reference_words = static_cast<long>(n);
  size_t i = n, j = m;
  // Deterministic backtrace: substitution/match first, then insertion,
  // then deletion.
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[i][j] == d[i - 1][j - 1] +
                       (reference[i - 1] == hypothesis[j - 1] ? 0 : 1)) {
      if (reference[i - 1] != hypothesis[j - 1]) ++e.substitutions;
      --i;
      --j;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++e.insertions;
      --j;
    } else {
      ++e.deletions;
      --i;
    }
  }
  return e;
}

}  // namespace ustr
