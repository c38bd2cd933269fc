// benchmarks/bench_main.cpp
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

#include <benchmark/benchmark.h>

#include "ustr/decode.hpp"
#include "ustr/loss.hpp"
#include "ustr/model.hpp"

using namespace ustr;

namespace {

UstrModel BenchModel() {
  UstrConfig cfg;
  cfg.feature_dim = 16;
  cfg.model_dim = 16;
  cfg.shared_blocks = 1;
  cfg.attention_heads = 2;
  cfg.subsampling = 4;
  cfg.conv_channels = 2;
  cfg.text_vocab_size = 25;
  cfg.output_classes = 12;
  cfg.predictor_dim = 16;
  cfg.predictor_layers = 1;
  cfg.joint_hidden = 16;
  cfg.conv_kernel = 3;
  return InitModel(cfg, 1);
}

Matrix BenchAudio(int t, int d) {
  Matrix m(t, d);
  Rng rng(2);
  for (double& x : m.v) x = rng.Gaussian();
  return m;
}

void BM_TransducerLoss(benchmark::State& state) {
  int t_len = static_cast<int>(state.range(0));
  int u_len = 8, classes = 12;
  std::vector<double> logits(static_cast<size_t>(t_len) * (u_len + 1) *
                             classes);
  Rng rng(3);
  for (double& x : logits) x = rng.Gaussian();
  std::vector<int> labels;
  for (int u = 0; u < u_len; ++u) labels.push_back(1 + u % (classes - 1));
  for (auto _ : state) {
    auto lat = ComputeLattice(logits, t_len, u_len, classes, labels);
    benchmark::DoNotOptimize(lat.total_log_prob);
  }
}
BENCHMARK(BM_TransducerLoss)->Arg(8)->Arg(16)->Arg(32);

void BM_ForwardBackward(benchmark::State& state) {
  UstrModel model = BenchModel();
  Matrix audio = BenchAudio(static_cast<int>(state.range(0)), 16);
  std::vector<int> labels = {1, 3, 2, 5, 4};
  for (auto _ : state) {
    auto enc = SharedEncode(model, AudioEncode(model, audio));
    auto pred = Predict(model, labels);
    auto loss = TransducerLossOp(Join(model, enc, pred), labels);
    Backward(loss);
    benchmark::DoNotOptimize(loss->Item());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(32)->Arg(64);

void BM_BeamSearch(benchmark::State& state) {
  UstrModel model = BenchModel();
  Matrix audio = BenchAudio(32, 16);
  FusionConfig fusion;
  fusion.beam_width = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto hyps = BeamSearch(model, audio, fusion);
    benchmark::DoNotOptimize(hyps.size());
  }
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(4)->Arg(8);

}  // namespace

BENCHMARK_MAIN();
