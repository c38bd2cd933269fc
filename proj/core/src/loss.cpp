// core/src/loss.cpp
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

#include "ustr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ustr {

namespace {

constexpr double kLogZero = -1e30;

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

double LogAdd(double a, double b) {
  if (a <= kLogZero) return b;
  if (b <= kLogZero) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

void CheckInstance(const std::vector<double>& joint_logits, int t_len,
                   int u_len, int classes, const std::vector<int>& labels) {
  if (t_len < 1) Fail("transducer_loss: T' must be >= 1");
  if (static_cast<int>(labels.size()) != u_len)
    Fail("transducer_loss: label count " + std::to_string(labels.size()) +
         " does not match U axis " + std::to_string(u_len));
  if (joint_logits.size() !=
      static_cast<size_t>(t_len) * (u_len + 1) * classes)
    Fail("transducer_loss: logits size does not match (T',U+1,V+1)");
  for (double x : joint_logits)
    if (!std::isfinite(x)) Fail("transducer_loss: non-finite logit");
  for (int y : labels)
    if (y <= kBlankId || y >= classes)
      Fail("transducer_loss: label id " + std::to_string(y) + " out of range");
}

}  // namespace

TransducerLattice ComputeLattice(const std::vector<double>& joint_logits,
                                 int t_len, int u_len, int classes,
                                 const std::vector<int>& labels) {
  CheckInstance(joint_logits, t_len, u_len, classes, labels);
  TransducerLattice lat;
  lat.t_len = t_len;
  lat.u_len = u_len;
  lat.classes = classes;

  // Log-softmax per node, in 64-bit.
  lat.log_probs.resize(joint_logits.size());
  size_t nodes = static_cast<size_t>(t_len) * (u_len + 1);
  for (size_t n = 0; n < nodes; ++n) {
    const double* x = joint_logits.data() + n * classes;
    double* y = lat.log_probs.data() + n * classes;
    double mx = *std::max_element(x, x + classes);
    double z = 0.0;
    for (int k = 0; k < classes; ++k) z += std::exp(x[k] - mx);
    double lz = mx + std::log(z);
    for (int k = 0; k < classes; ++k) y[k] = x[k] - lz;
  }

  int u1 = u_len + 1;
  lat.alpha.assign(static_cast<size_t>(t_len + 1) * u1, kLogZero);
  lat.beta.assign(static_cast<size_t>(t_len + 1) * u1, kLogZero);
  auto a = [&](int t, int u) -> double& {
    return lat.alpha[static_cast<size_t>(t) * u1 + u];
  };
  auto b = [&](int t, int u) -> double& {
    return lat.beta[static_cast<size_t>(t) * u1 + u];
  };

  a(0, 0) = 0.0;
  for (int t = 0; t <= t_len; ++t)
    for (int u = 0; u <= u_len; ++u) {
      if (t == 0 && u == 0) continue;
      double acc = kLogZero;
      if (t > 0)  // blank taken at node (t-1, u)
        acc = LogAdd(acc, a(t - 1, u) + lat.LogProb(t - 1, u, kBlankId));
      if (u > 0 && t < t_len)  // label y[u-1] emitted at node (t, u-1)
        acc = LogAdd(acc, a(t, u - 1) + lat.LogProb(t, u - 1, labels[u - 1]));
      a(t, u) = acc;
    }

  b(t_len, u_len) = 0.0;
  for (int t = t_len; t >= 0; --t)
    for (int u = u_len; u >= 0; --u) {
      if (t == t_len && u == u_len) continue;
      double acc = kLogZero;
      if (t < t_len)
        acc = LogAdd(acc, lat.LogProb(t, u, kBlankId) + b(t + 1, u));
      if (u < u_len && t < t_len)
        acc = LogAdd(acc, lat.LogProb(t, u, labels[u]) + b(t, u + 1));
      b(t, u) = acc;
    }

  lat.total_log_prob = a(t_len, u_len);
  return lat;
}

std::vector<double> TransducerGrad(const TransducerLattice& lat,
                                   const std::vector<int>& labels) {
  int t_len = lat.t_len, u_len = lat.u_len, classes = lat.classes;
  std::vector<double> grad(lat.log_probs.size(), 0.0);
  double total = lat.total_log_prob;
  // dL/d log_prob first (L = -log P), then chain through log-softmax.
  for (int t = 0; t < t_len; ++t)
    for (int u = 0; u <= u_len; ++u) {
      if (lat.Alpha(t, u) <= kLogZero / 2) continue;  // unreachable node
      size_t base = (static_cast<size_t>(t) * (u_len + 1) + u) * classes;
      double occ_blank = lat.Alpha(t, u) + lat.LogProb(t, u, kBlankId) +
                         lat.Beta(t + 1, u) - total;
      double dlp_blank = -std::exp(occ_blank);
      double dlp_label = 0.0;
      if (u < u_len) {
        double occ_label = lat.Alpha(t, u) + lat.LogProb(t, u, labels[u]) +
                           lat.Beta(t, u + 1) - total;
        dlp_label = -std::exp(occ_label);
      }
      double gsum = dlp_blank + dlp_label;
      for (int k = 0; k < classes; ++k) {
        double dlp = 0.0;
        if (k == kBlankId) dlp = dlp_blank;
        if (u < u_len && k == labels[u]) dlp += dlp_label;
        grad[base + k] = dlp - std::exp(lat.LogProb(t, u, k)) * gsum;
      }
    }
  return grad;
}

TensorPtr TransducerLossOp(const TensorPtr& joint_logits,
                           const std::vector<int>& labels) {
  if (joint_logits->shape.size() != 3)
    Fail("transducer_loss: logits tensor must be [T',U+1,V+1]");
  int t_len = joint_logits->shape[0];
  int u1 = joint_logits->shape[1];
  int classes = joint_logits->shape[2];
  TransducerLattice lat =
      ComputeLattice(joint_logits->v, t_len, u1 - 1, classes, labels);
  auto out = Tensor::Scalar(TransducerLossValue(lat));
  out->needs_grad = joint_logits->needs_grad;
  out->parents = {joint_logits};
  Tensor* pj = joint_logits.get();
  Tensor* po = out.get();
  auto grad = std::make_shared<std::vector<double>>(TransducerGrad(lat, labels));
  out->backprop = [pj, po, grad] {
    for (size_t i = 0; i < pj->g.size(); ++i)
      pj->g[i] += po->g[0] * (*grad)[i];
  };
  return out;
}

long CountAlignmentPaths(int t_len, int u_len) {
  // Paths to (t,u) whose label emissions all happen at t < t_len and whose
  // final step is the forced blank; equals C(t_len - 1 + u_len, u_len).
  long n = 1;
  for (int i = 1; i <= u_len; ++i)
    n = n * (t_len - 1 + i) / i;
  return n;
}

namespace {

void Enumerate(const TransducerLattice& lat, const std::vector<int>& labels,
               int t, int u, double score, double* acc, long* count) {
  if (t == lat.t_len && u == lat.u_len) {
    *acc = LogAdd(*acc, score);
    ++(*count);
    return;
  }
  if (t < lat.t_len)
    Enumerate(lat, labels, t + 1, u, score + lat.LogProb(t, u, kBlankId), acc,
              count);
  if (u < lat.u_len && t < lat.t_len)
    Enumerate(lat, labels, t, u + 1, score + lat.LogProb(t, u, labels[u]), acc,
              count);
}

}  // namespace

double BruteForceLoss(const std::vector<double>& joint_logits, int t_len,
                      int u_len, int classes, const std::vector<int>& labels,
                      int max_steps) {
  if (t_len + u_len > max_steps)
    Fail("brute_force_loss: instance too large (" + std::to_string(t_len) +
         "+" + std::to_string(u_len) + " steps > " + std::to_string(max_steps) +
         ")");
  TransducerLattice lat =
      ComputeLattice(joint_logits, t_len, u_len, classes, labels);
  double acc = kLogZero;
  long count = 0;
  Enumerate(lat, labels, 0, 0, 0.0, &acc, &count);
  if (count != CountAlignmentPaths(t_len, u_len))
    Fail("brute_force_loss: path count " + std::to_string(count) +
         " disagrees with closed form " +
         std::to_string(CountAlignmentPaths(t_len, u_len)));
  return -acc;
}

TensorPtr IlmtLoss(const TensorPtr& ilm_logits, const std::vector<int>& labels) {
  if (ilm_logits->shape.size() != 2)
    Fail("ilmt_loss: logits must be [U+1, V+1]");
  int u1 = ilm_logits->shape[0];
  int classes = ilm_logits->shape[1];
  if (static_cast<int>(labels.size()) != u1 - 1)
    Fail("ilmt_loss: label count does not match logits rows");
  if (labels.empty()) return Tensor::Scalar(0.0);
  for (int y : labels)
    if (y <= kBlankId || y >= classes) Fail("ilmt_loss: label out of range");
  // Drop the blank column, renormalize over labels, pick the gold class.
  auto label_logits = SliceCols(ilm_logits, 1, classes);
  auto rows = SliceRows(label_logits, 0, u1 - 1);
  auto logp = LogSoftmax(rows);
  std::vector<int> shifted(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) shifted[i] = labels[i] - 1;
  auto gold = GatherPairs(logp, shifted);
  return Scale(ReduceMean(gold), -1.0);
}

}  // namespace ustr
