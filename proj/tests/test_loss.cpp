// tests/test_loss.cpp
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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ustr/loss.hpp"
#include "ustr/rng.hpp"

using namespace ustr;

namespace {

struct Instance {
  int t_len, u_len, classes;
  std::vector<double> logits;
  std::vector<int> labels;
};

Instance RandomInstance(Rng& rng, int max_t = 4, int max_u = 3,
                        int max_classes = 5) {
  Instance in;
  in.t_len = rng.UniformInt(1, max_t);
  in.u_len = rng.UniformInt(0, max_u);
  in.classes = rng.UniformInt(2, max_classes);
  in.logits.resize(static_cast<size_t>(in.t_len) * (in.u_len + 1) * in.classes);
  for (double& x : in.logits) x = rng.Gaussian();
  for (int u = 0; u < in.u_len; ++u)
    in.labels.push_back(rng.UniformInt(1, in.classes - 1));
  return in;
}

double LogAdd(double a, double b) {
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

}  // namespace

TEST_CASE("single blank path gives log K for uniform logits") {
  std::vector<double> logits(5, 0.0);
  auto lat = ComputeLattice(logits, 1, 0, 5, {});
  CHECK(TransducerLossValue(lat) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("dp equals enumeration oracle on 200 random instances") {
  Rng rng(2024);
  double max_diff = 0.0;
  for (int i = 0; i < 200; ++i) {
    Instance in = RandomInstance(rng);
    auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                              in.labels);
    double oracle =
        BruteForceLoss(in.logits, in.t_len, in.u_len, in.classes, in.labels);
    max_diff = std::max(max_diff,
                        std::abs(TransducerLossValue(lat) - oracle));
  }
  CHECK(max_diff <= 1e-9);
}

TEST_CASE("per-node constant logit shift leaves loss unchanged") {
  Rng rng(5);
  Instance in = RandomInstance(rng, 3, 2, 4);
  auto before = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                               in.labels);
  // Shift all logits of node (0, 0) by a constant.
  std::vector<double> shifted = in.logits;
  for (int k = 0; k < in.classes; ++k) shifted[k] += 17.5;
  auto after = ComputeLattice(shifted, in.t_len, in.u_len, in.classes,
                              in.labels);
  CHECK(std::abs(before.total_log_prob - after.total_log_prob) <= 1e-9);
}

TEST_CASE("alpha total equals beta total") {
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    Instance in = RandomInstance(rng);
    auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                              in.labels);
    CHECK(std::abs(lat.Alpha(in.t_len, in.u_len) - lat.Beta(0, 0)) <= 1e-9);
  }
}

TEST_CASE("per-frame blank cut invariant") {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    Instance in = RandomInstance(rng);
    auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                              in.labels);
    for (int t = 0; t < in.t_len; ++t) {
      double cut = -1e30;
      for (int u = 0; u <= in.u_len; ++u)
        cut = LogAdd(cut, lat.Alpha(t, u) + lat.LogProb(t, u, kBlankId) +
                              lat.Beta(t + 1, u));
      CHECK(std::abs(cut - lat.total_log_prob) <= 1e-9);
    }
  }
}

TEST_CASE("lattice gradient matches central finite differences to 1e-6") {
  Rng rng(8);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    Instance in = RandomInstance(rng, 3, 2, 4);
    auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                              in.labels);
    auto grad = TransducerGrad(lat, in.labels);
    const double eps = 1e-4;
    for (size_t j = 0; j < in.logits.size(); ++j) {
      std::vector<double> plus = in.logits, minus = in.logits;
      plus[j] += eps;
      minus[j] -= eps;
      double lp = TransducerLossValue(ComputeLattice(
          plus, in.t_len, in.u_len, in.classes, in.labels));
      double lm = TransducerLossValue(ComputeLattice(
          minus, in.t_len, in.u_len, in.classes, in.labels));
      double fd = (lp - lm) / (2 * eps);
      double rel = std::abs(fd - grad[j]) /
                   std::max({std::abs(fd), std::abs(grad[j]), 1e-3});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("gradient sums to zero over the class axis") {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    Instance in = RandomInstance(rng);
    auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                              in.labels);
    auto grad = TransducerGrad(lat, in.labels);
    size_t nodes = grad.size() / in.classes;
    for (size_t n = 0; n < nodes; ++n) {
      double s = 0.0;
      for (int k = 0; k < in.classes; ++k) s += grad[n * in.classes + k];
      CHECK(std::abs(s) <= 1e-9);
    }
  }
}

TEST_CASE("uniform logits give the closed-form path-count loss") {
  // Every alignment has probability K^-(T'+U), so the total is
  // paths * K^-(T'+U) and the loss is (T'+U) ln K - ln paths.
  Rng rng(10);
  for (int i = 0; i < 20; ++i) {
    Instance in = RandomInstance(rng, 4, 3, 5);
    std::fill(in.logits.begin(), in.logits.end(), 0.0);
    double loss = TransducerLossValue(ComputeLattice(
        in.logits, in.t_len, in.u_len, in.classes, in.labels));
    double expected =
        (in.t_len + in.u_len) * std::log(static_cast<double>(in.classes)) -
        std::log(static_cast<double>(CountAlignmentPaths(in.t_len, in.u_len)));
    CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("transducer loss op backward matches analytic gradient") {
  Rng rng(11);
  Instance in = RandomInstance(rng, 3, 2, 4);
  auto logits = Tensor::FromValues(
      {in.t_len, in.u_len + 1, in.classes}, in.logits, true);
  auto loss = TransducerLossOp(logits, in.labels);
  Backward(loss);
  auto lat = ComputeLattice(in.logits, in.t_len, in.u_len, in.classes,
                            in.labels);
  auto grad = TransducerGrad(lat, in.labels);
  REQUIRE(logits->g.size() == grad.size());
  for (size_t j = 0; j < grad.size(); ++j)
    CHECK(logits->g[j] == doctest::Approx(grad[j]).epsilon(1e-12));
}

TEST_CASE("path counts match the closed form") {
  CHECK(CountAlignmentPaths(1, 0) == 1);
  CHECK(CountAlignmentPaths(2, 1) == 2);
  CHECK(CountAlignmentPaths(3, 2) == 6);
  CHECK(CountAlignmentPaths(4, 3) == 20);
  // Lattice recursion: paths(t,u) = paths(t-1,u) + paths(t,u-1) with label
  // emission barred from the final frame boundary.
  auto recurse = [](auto&& self, int t, int u) -> long {
    if (t == 0) return u == 0 ? 1 : 0;
    if (u == 0) return 1;
    long n = self(self, t - 1, u);
    if (t >= 1) n += self(self, t, u - 1);
    return n;
  };
  for (int t = 1; t <= 5; ++t)
    for (int u = 0; u <= 4; ++u)
      CHECK(CountAlignmentPaths(t, u) == recurse(recurse, t, u));
}

TEST_CASE("errors: non-finite logits, label mismatch, out of range") {
  std::vector<double> logits(2 * 2 * 3, 0.0);
  CHECK_THROWS_AS(ComputeLattice(logits, 2, 1, 3, {}), std::runtime_error);
  CHECK_THROWS_AS(ComputeLattice(logits, 2, 1, 3, {0}), std::runtime_error);
  CHECK_THROWS_AS(ComputeLattice(logits, 2, 1, 3, {3}), std::runtime_error);
  logits[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ComputeLattice(logits, 2, 1, 3, {1}), std::runtime_error);
}

TEST_CASE("brute force rejects oversized instances") {
  std::vector<double> logits(20 * 11 * 3, 0.0);
  std::vector<int> labels(10, 1);
  CHECK_THROWS_AS(BruteForceLoss(logits, 20, 10, 3, labels),
                  std::runtime_error);
}

TEST_CASE("ilmt loss uniform and one-hot limits") {
  auto uniform = Tensor::FromValues({3, 5}, std::vector<double>(15, 0.0));
  auto loss = IlmtLoss(uniform, {2, 4});
  CHECK(loss->Item() == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  auto sharp = Tensor::Create({3, 5});
  // Give the gold class a huge margin at each predicting row.
  sharp->v[0 * 5 + 2] = 50.0;
  sharp->v[1 * 5 + 4] = 50.0;
  auto near_zero = IlmtLoss(sharp, {2, 4});
  CHECK(near_zero->Item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ilmt loss gradient vs finite differences") {
  Rng rng(12);
  auto logits = Tensor::Create({4, 5}, true);
  for (double& x : logits->v) x = rng.Gaussian();
  std::vector<int> labels = {1, 3, 2};
  auto f = [&] { return IlmtLoss(logits, labels); };
  auto report = FiniteDifferenceCheck(f, {logits});
  CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("total loss composition") {
  LossConfig cfg;
  cfg.ilmt_weight = 0.0;
  CHECK(TotalLoss(2.5, 9.0, cfg) == 2.5);
  cfg.ilmt_weight = 0.2;
  CHECK(TotalLoss(1.0, 0.5, cfg) == doctest::Approx(1.1).epsilon(1e-12));
  cfg.ilmt_weight = 1.0;
  CHECK(TotalLoss(3.0, 0.0, cfg) == 3.0);
}
