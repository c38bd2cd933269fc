// tests/test_nn.cpp
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

#include <cmath>

#include "ustr/nn.hpp"

using namespace ustr;

TEST_CASE("param set add, freeze, prefixes") {
  ParamSet p;
  Rng rng(1);
  p.Add("enc.w", InitUniform({2, 2}, 2, rng));
  p.Add("enc.b", InitZeros({2}));
  p.Add("dec.w", InitUniform({2, 2}, 2, rng));
  CHECK(p.TotalParameterCount() == 10);
  CHECK(p.NamesWithPrefix("enc.").size() == 2);
  CHECK(p.Trainable("enc.w"));
  p.FreezePrefix("enc.");
  CHECK_FALSE(p.Trainable("enc.w"));
  CHECK(p.Trainable("dec.w"));
  p.UnfreezeAll();
  CHECK(p.Trainable("enc.b"));
  CHECK_THROWS_AS(p.At("nope"), std::runtime_error);
  CHECK_THROWS_AS(p.Add("enc.w", InitZeros({1})), std::runtime_error);
}

TEST_CASE("adam single scalar matches hand computed first step") {
  ParamSet p;
  auto w = p.Add("w", Tensor::FromValues({1}, {0.5}, true));
  w->g = {2.0};
  AdamState state;
  state.cfg.lr = 1e-3;
  state.cfg.beta1 = 0.9;
  state.cfg.beta2 = 0.98;
  state.cfg.eps = 1e-9;
  AdamStep(p, state);
  // Step 1: m_hat = g, s_hat = g^2, update = lr * g / (|g| + eps).
  double expected = 0.5 - 1e-3 * 2.0 / (std::sqrt(4.0) + 1e-9);
  CHECK(w->v[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adam leaves frozen parameters bit identical") {
  ParamSet p;
  auto w = p.Add("w", Tensor::FromValues({2}, {0.25, -0.75}, true));
  auto frozen = p.Add("f", Tensor::FromValues({2}, {1.0, 2.0}, true));
  p.SetTrainable("f", false);
  std::vector<double> before = frozen->v;
  w->g = {1.0, -1.0};
  frozen->g = {5.0, 5.0};
  AdamState state;
  for (int i = 0; i < 10; ++i) AdamStep(p, state);
  CHECK(frozen->v == before);
  CHECK(w->v[0] != 0.25);
}

TEST_CASE("adam with all parameters frozen changes nothing") {
  ParamSet p;
  auto w = p.Add("w", Tensor::FromValues({2}, {1.0, -1.0}, true));
  p.FreezePrefix("");
  std::vector<double> before = w->v;
  AdamState state;
  AdamStep(p, state);
  CHECK(w->v == before);
}

TEST_CASE("adam missing gradient names the parameter") {
  ParamSet p;
  p.Add("layer.w", Tensor::FromValues({2}, {1.0, 2.0}, true));
  AdamState state;
  CHECK_THROWS_WITH_AS(AdamStep(p, state), doctest::Contains("layer.w"),
                       std::runtime_error);
}

TEST_CASE("adam trajectories are deterministic") {
  auto run = [] {
    ParamSet p;
    auto w = p.Add("w", Tensor::FromValues({3}, {0.1, 0.2, 0.3}, true));
    AdamState state;
    for (int i = 0; i < 25; ++i) {
      w->g = {0.5 * (i + 1), -0.25, 1.0 / (i + 1)};
      AdamStep(p, state);
    }
    return w->v;
  };
  CHECK(run() == run());
}

TEST_CASE("init uniform bounded by fan-in limit") {
  Rng rng(3);
  auto t = InitUniform({64, 16}, 64, rng);
  double limit = std::sqrt(1.0 / 64);
  for (double x : t->v) {
    CHECK(std::abs(x) <= limit);
    CHECK(std::isfinite(x));
  }
}

TEST_CASE("gru cell with zero weights gives zero state") {
  ParamSet p;
  Rng rng(4);
  AddGruParams(p, "gru", 3, 2, rng);
  for (const auto& name : p.NamesWithPrefix("gru"))
    p.At(name)->v.assign(p.At(name)->v.size(), 0.0);
  auto x = Tensor::FromValues({3}, {1.0, -2.0, 0.5});
  auto h0 = Constant({2}, 0.0);
  auto h = GruCell(p, "gru", x, h0);
  for (double v : h->v) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("gru cell gradient vs finite differences") {
  ParamSet p;
  Rng rng(5);
  AddGruParams(p, "gru", 3, 4, rng);
  auto x = Tensor::FromValues({3}, {0.3, -0.1, 0.7}, true);
  auto h0 = Tensor::FromValues({4}, {0.1, 0.2, -0.3, 0.05}, true);
  std::vector<TensorPtr> wrt = {x, h0};
  for (const auto& name : p.NamesWithPrefix("gru")) wrt.push_back(p.At(name));
  auto f = [&] { return ReduceSum(GruCell(p, "gru", x, h0)); };
  CHECK(FiniteDifferenceCheck(f, wrt).Pass(1e-4));
}

TEST_CASE("gru sequence gradient and determinism") {
  ParamSet p;
  Rng rng(6);
  AddGruParams(p, "g", 2, 3, rng);
  auto x = Tensor::FromValues({3, 2}, {0.1, 0.2, -0.4, 0.3, 0.9, -0.7}, true);
  auto f = [&] { return ReduceSum(GruSequence(p, "g", x, 3)); };
  CHECK(FiniteDifferenceCheck(f, {x, p.At("g.wz"), p.At("g.un")}).Pass(1e-4));
  auto a = GruSequence(p, "g", x, 3);
  auto b = GruSequence(p, "g", x, 3);
  CHECK(a->v == b->v);
}

TEST_CASE("attention with one position returns its value projection") {
  ParamSet p;
  Rng rng(7);
  AddAttentionParams(p, "att", 4, rng);
  auto x = Tensor::FromValues({1, 4}, {0.5, -0.5, 1.0, 0.25});
  auto out = MultiHeadAttention(p, "att", x, 2);
  auto expected = Linear(p, "att.o", Linear(p, "att.v", x));
  REQUIRE(out->Size() == expected->Size());
  for (size_t i = 0; i < out->v.size(); ++i)
    CHECK(out->v[i] == doctest::Approx(expected->v[i]).epsilon(1e-9));
}

TEST_CASE("attention divisibility error") {
  ParamSet p;
  Rng rng(8);
  AddAttentionParams(p, "att", 4, rng);
  auto x = Tensor::FromValues({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK_THROWS_AS(MultiHeadAttention(p, "att", x, 3), std::runtime_error);
}

TEST_CASE("attention gradient vs finite differences") {
  ParamSet p;
  Rng rng(9);
  AddAttentionParams(p, "att", 4, rng);
  auto x = Tensor::Create({3, 4}, true);
  Rng vals(10);
  for (double& v : x->v) v = 0.5 * vals.Gaussian();
  std::vector<TensorPtr> wrt = {x, p.At("att.q.w"), p.At("att.k.w"),
                                p.At("att.v.w"), p.At("att.o.w")};
  auto f = [&] { return ReduceSum(Tanh(MultiHeadAttention(p, "att", x, 2))); };
  CHECK(FiniteDifferenceCheck(f, wrt).Pass(1e-4));
}

TEST_CASE("linear and layer norm layers differentiate") {
  ParamSet p;
  Rng rng(12);
  AddLinearParams(p, "lin", 3, 2, rng);
  AddLayerNormParams(p, "ln", 2);
  auto x = Tensor::FromValues({2, 3}, {0.1, -0.2, 0.3, 0.7, 0.5, -0.9}, true);
  auto f = [&] { return ReduceSum(LayerNormed(p, "ln", Linear(p, "lin", x))); };
  std::vector<TensorPtr> wrt = {x, p.At("lin.w"), p.At("lin.b"),
                                p.At("ln.gain"), p.At("ln.bias")};
  CHECK(FiniteDifferenceCheck(f, wrt).Pass(1e-4));
}
