// core/include/ustr/loss.hpp
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
// Transducer loss in log space. Convention: emitting blank (id 0) advances
// the time axis, emitting a label advances the label axis, and every
// complete alignment ends with a blank taken at the last frame. alpha/beta
// are (T'+1)x(U+1); node (t,u) means t frames consumed, u labels emitted.

#ifndef USTR_LOSS_HPP
#define USTR_LOSS_HPP

#include <vector>

#include "ustr/tensor.hpp"

namespace ustr {

inline constexpr int kBlankId = 0;

struct TransducerLattice {
  int t_len = 0;  // T'
  int u_len = 0;  // U
  int classes = 0;  // V + 1
  std::vector<double> log_probs;  // [T', U+1, V+1] log-softmax of the logits
  std::vector<double> alpha;      // [T'+1, U+1]
  std::vector<double> beta;       // [T'+1, U+1]
  double total_log_prob = 0.0;

  double LogProb(int t, int u, int k) const {
    return log_probs[(static_cast<size_t>(t) * (u_len + 1) + u) * classes + k];
  }
  double Alpha(int t, int u) const {
    return alpha[static_cast<size_t>(t) * (u_len + 1) + u];
  }
  double Beta(int t, int u) const {
    return beta[static_cast<size_t>(t) * (u_len + 1) + u];
  }
};

struct LossConfig {
  double ilmt_weight = 0.2;
};

// Plain-array forward-backward. `joint_logits` is [T', U+1, V+1] row-major,
// unnormalized. Throws on non-finite logits or a label/axis mismatch.
TransducerLattice ComputeLattice(const std::vector<double>& joint_logits,
                                 int t_len, int u_len, int classes,
                                 const std::vector<int>& labels);

inline double TransducerLossValue(const TransducerLattice& lat) {
  return -lat.total_log_prob;
}

// d(-log P)/d logits, same layout as the logits, via alpha/beta occupancies
// composed with the log-softmax Jacobian.
std::vector<double> TransducerGrad(const TransducerLattice& lat,
                                   const std::vector<int>& labels);

// Graph node: scalar loss differentiable w.r.t. the joint logits tensor
// [T', U+1, V+1]. Uses the analytic gradient above in backward.
TensorPtr TransducerLossOp(const TensorPtr& joint_logits,
                           const std::vector<int>& labels);

// Test oracle: explicit enumeration of every complete alignment. Errors if
// T' + U exceeds `max_steps` (default keeps the path count small).
double BruteForceLoss(const std::vector<double>& joint_logits, int t_len,
                      int u_len, int classes, const std::vector<int>& labels,
                      int max_steps = 12);

// Number of complete alignments, by recursion on the lattice.
long CountAlignmentPaths(int t_len, int u_len);

// Mean per-token cross-entropy of the internal LM predicting the next
// label, blank excluded by renormalizing rows over the V label classes.
// ilm_logits is a [U+1, V+1] tensor.
TensorPtr IlmtLoss(const TensorPtr& ilm_logits, const std::vector<int>& labels);

inline double TotalLoss(double rnnt, double ilmt, const LossConfig& cfg) {
  return rnnt + cfg.ilmt_weight * ilmt;
}

}  // namespace ustr

#endif  // USTR_LOSS_HPP
