// tests/acceptance_main.cpp
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
// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fail. Criteria 4-8 share a single trained pipeline.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ustr/decode.hpp"
#include "ustr/experiment.hpp"
#include "ustr/loss.hpp"
#include "ustr/nn.hpp"
#include "ustr/textfeat.hpp"

using namespace ustr;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void Report(int n, const std::string& what, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", n,
              what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double Seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

struct OracleInstance {
  int t_len, u_len, classes;
  std::vector<double> logits;
  std::vector<int> labels;
};

std::vector<OracleInstance> MakeOracleInstances(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<OracleInstance> out;
  for (int i = 0; i < n; ++i) {
    OracleInstance in;
    in.t_len = rng.UniformInt(1, 4);
    in.u_len = rng.UniformInt(0, 3);
    in.classes = rng.UniformInt(2, 5);
    in.logits.resize(static_cast<size_t>(in.t_len) * (in.u_len + 1) *
                     in.classes);
    for (double& x : in.logits) x = rng.Gaussian();
    for (int u = 0; u < in.u_len; ++u)
      in.labels.push_back(rng.UniformInt(1, in.classes - 1));
    out.push_back(std::move(in));
  }
  return out;
}

// Criterion 1: DP loss vs path enumeration on 200 random instances.
void Criterion1(const std::vector<OracleInstance>& instances) {
  auto start = std::chrono::steady_clock::now();
  double max_diff = 0.0;
  for (const auto& in : instances) {
    auto lat =
        ComputeLattice(in.logits, in.t_len, in.u_len, in.classes, in.labels);
    double oracle =
        BruteForceLoss(in.logits, in.t_len, in.u_len, in.classes, in.labels);
    max_diff = std::max(max_diff,
                        std::abs(TransducerLossValue(lat) - oracle));
  }
  double secs = Seconds(start);
  char detail[128];
  std::snprintf(detail, sizeof(detail), "max |dp - enum| = %.3e, %.2f s",
                max_diff, secs);
  Report(1, "transducer loss oracle equivalence",
         max_diff <= 1e-9 && secs < 10.0, detail);
}

// Criterion 2: lattice gradient vs finite differences, plus nn-layer ops.
void Criterion2(const std::vector<OracleInstance>& instances) {
  double worst_lattice = 0.0;
  const double eps = 1e-4;
  for (int i = 0; i < 20; ++i) {
    const auto& in = instances[i];
    auto lat =
        ComputeLattice(in.logits, in.t_len, in.u_len, in.classes, in.labels);
    auto grad = TransducerGrad(lat, in.labels);
    for (size_t j = 0; j < in.logits.size(); ++j) {
      std::vector<double> plus = in.logits, minus = in.logits;
      plus[j] += eps;
      minus[j] -= eps;
      double fd = (TransducerLossValue(ComputeLattice(
                       plus, in.t_len, in.u_len, in.classes, in.labels)) -
                   TransducerLossValue(ComputeLattice(
                       minus, in.t_len, in.u_len, in.classes, in.labels))) /
                  (2 * eps);
      double rel = std::abs(fd - grad[j]) /
                   std::max({std::abs(fd), std::abs(grad[j]), 1e-3});
      worst_lattice = std::max(worst_lattice, rel);
    }
  }

  double worst_nn = 0.0;
  auto check = [&](const std::function<TensorPtr()>& f,
                   const std::vector<TensorPtr>& wrt) {
    worst_nn = std::max(worst_nn, FiniteDifferenceCheck(f, wrt).max_rel_err);
  };
  {
    Rng rng(101);
    ParamSet p;
    AddLinearParams(p, "lin", 4, 3, rng);
    AddLayerNormParams(p, "ln", 3);
    AddGruParams(p, "gru", 3, 4, rng);
    AddAttentionParams(p, "att", 4, rng);
    auto x = Tensor::Create({3, 4}, true);
    for (double& v : x->v) v = 0.5 * rng.Gaussian();
    check([&] { return ReduceSum(Tanh(MatMul(x, Transpose(x)))); }, {x});
    check([&] { return ReduceSum(LogSoftmax(x)); }, {x});
    check(
        [&] {
          return ReduceSum(LayerNormed(p, "ln", Linear(p, "lin", x)));
        },
        {x, p.At("lin.w"), p.At("lin.b"), p.At("ln.gain"), p.At("ln.bias")});
    check([&] { return ReduceSum(GruSequence(p, "gru", Linear(p, "lin", x), 4)); },
          {x, p.At("gru.wz"), p.At("gru.un"), p.At("gru.bn")});
    check([&] { return ReduceSum(Tanh(MultiHeadAttention(p, "att", x, 2))); },
          {x, p.At("att.q.w"), p.At("att.o.w")});
    auto img = Tensor::Create({1, 6, 4}, true);
    for (double& v : img->v) v = 0.3 * rng.Gaussian();
    auto kern = Tensor::Create({2, 1, 3, 3}, true);
    for (double& v : kern->v) v = 0.3 * rng.Gaussian();
    check([&] { return ReduceSum(Sigmoid(Conv2d(img, kern, 2, 1, 1, 1))); },
          {img, kern});
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail),
                "lattice max rel %.3e, nn max rel %.3e", worst_lattice,
                worst_nn);
  Report(2, "gradient exactness", worst_lattice <= 1e-6 && worst_nn <= 1e-4,
         detail);
}

// Criterion 3: per-frame blank-cut logsumexp equals the total log-prob.
void Criterion3(const std::vector<OracleInstance>& instances) {
  auto log_add = [](double a, double b) {
    double m = std::max(a, b);
    return m + std::log1p(std::exp(std::min(a, b) - m));
  };
  double worst = 0.0;
  for (const auto& in : instances) {
    auto lat =
        ComputeLattice(in.logits, in.t_len, in.u_len, in.classes, in.labels);
    for (int t = 0; t < in.t_len; ++t) {
      double cut = -1e300;
      for (int u = 0; u <= in.u_len; ++u)
        cut = log_add(cut, lat.Alpha(t, u) + lat.LogProb(t, u, kBlankId) +
                               lat.Beta(t + 1, u));
      worst = std::max(worst, std::abs(cut - lat.total_log_prob));
    }
  }
  char detail[64];
  std::snprintf(detail, sizeof(detail), "max cut error %.3e", worst);
  Report(3, "lattice cut invariant", worst <= 1e-9, detail);
}

ExperimentConfig AcceptanceConfig(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 2024;
  cfg.out_dir = out_dir;

  cfg.inventory.num_phonemes = 24;
  cfg.inventory.dim = 16;
  cfg.inventory.separation = 2.0;

  cfg.model.model_dim = 32;
  cfg.model.shared_blocks = 1;
  cfg.model.attention_heads = 2;
  cfg.model.subsampling = 4;
  cfg.model.conv_channels = 2;
  cfg.model.predictor_dim = 32;
  cfg.model.predictor_layers = 1;
  cfg.model.joint_hidden = 32;
  cfg.model.conv_kernel = 3;

  cfg.repeat = 4;
  cfg.mask_prob = 0.15;
  cfg.counts.target_text = 600;

  cfg.train_base.batch_size = 16;
  cfg.train_base.steps = 3500;
  cfg.train_base.swap_prob = 0.15;
  cfg.train_base.ilmt_enabled = true;
  cfg.train_base.ilmt_weight = 0.2;
  cfg.train_base.eval_every = 200;
  cfg.train_base.keep_best_eval = true;
  cfg.train_base.optimizer.lr = 3e-3;

  cfg.adapt.batch_size = 8;
  cfg.adapt.steps = 1500;
  cfg.adapt.ratio_paired = 1;
  cfg.adapt.ratio_text = 2;
  cfg.adapt.swap_prob = 0.15;
  cfg.adapt.ilmt_enabled = true;
  cfg.adapt.ilmt_weight = 0.2;
  cfg.adapt.eval_every = 150;
  cfg.adapt.keep_best_eval = true;
  cfg.adapt.optimizer.lr = 1e-3;

  cfg.train_single.batch_size = 8;
  cfg.train_single.steps = 6000;
  cfg.train_single.ratio_paired = 1;
  cfg.train_single.ratio_text = 2;
  cfg.train_single.swap_prob = 0.15;
  cfg.train_single.eval_every = 300;
  cfg.train_single.keep_best_eval = true;
  cfg.train_single.optimizer.lr = 3e-3;
  cfg.train_single.final_lr_scale = 0.1;

  cfg.fusion.beam_width = 4;
  cfg.ilme_lambda_grid = {0.0, 0.1, 0.2, 0.3};
  cfg.elm_lambda_grid = {0.0, 0.3, 0.6};
  cfg.lm_steps = 800;
  cfg.lm_batch = 8;
  return cfg;
}

double FindWer(const std::vector<ResultRow>& rows, const std::string& variant,
               const std::string& split) {
  for (const auto& r : rows)
    if (r.variant == variant && r.split == split) return r.wer;
  throw std::runtime_error("missing result row: " + variant + "/" + split);
}

// Criteria 4-8 share the trained pipeline in `result` / `out_dir`.
void Criteria4to8(const ExperimentResult& result, const std::string& out_dir,
                  double train_seconds) {
  char detail[256];

  // The trainability bound is on the training trajectory: some periodic
  // source-dev evaluation within the first 2,000 steps must reach 10%.
  // Training is allowed to continue past that point.
  double best_early = 1e9;
  long best_early_step = -1;
  {
    std::ifstream metrics(out_dir + "/base_metrics.csv");
    std::string line;
    std::getline(metrics, line);  // header: step,loss,...,eval_wer
    while (std::getline(metrics, line)) {
      std::istringstream ss(line);
      std::string field;
      std::vector<std::string> fields;
      while (std::getline(ss, field, ',')) fields.push_back(field);
      if (fields.size() < 6 || fields[5].empty()) continue;
      long step = std::stol(fields[0]);
      double wer = std::stod(fields[5]);
      if (step < 2000 && wer < best_early) {
        best_early = wer;
        best_early_step = step;
      }
    }
  }
  std::snprintf(detail, sizeof(detail),
                "source-dev WER %.4f at step %ld, %.0f s", best_early,
                best_early_step, train_seconds);
  Report(4, "base trainability", best_early <= 0.10 && train_seconds <= 1800.0,
         detail);

  double base_tv = FindWer(result.rows, "base", "target_val");
  double base_st = FindWer(result.rows, "base", "source_test");
  double multi_tv = FindWer(result.rows, "multi-step", "target_val");
  double multi_st = FindWer(result.rows, "multi-step", "source_test");
  double rel_drop = base_tv > 0.0 ? (base_tv - multi_tv) / base_tv : 0.0;
  std::snprintf(detail, sizeof(detail),
                "target-val %.4f -> %.4f (%.1f%% rel), source-test %.4f -> "
                "%.4f",
                base_tv, multi_tv, 100.0 * rel_drop, base_st, multi_st);
  Report(5, "multi-step adaptation effect",
         rel_drop >= 0.20 && multi_st <= base_st + 0.01, detail);

  double single_tv = FindWer(result.rows, "single-step", "target_val");
  std::snprintf(detail, sizeof(detail),
                "single-step %.4f vs multi-step %.4f", single_tv, multi_tv);
  Report(6, "single-step competitiveness", single_tv <= multi_tv + 0.01,
         detail);

  double ilme_tv = FindWer(result.rows, "multi-step-ilme", "target_val");
  bool ilme_ok = multi_tv > 0.0 ? ilme_tv <= 0.95 * multi_tv
                                : ilme_tv == 0.0;
  std::snprintf(detail, sizeof(detail),
                "unfused %.4f -> fused %.4f (lambda_ilm %.2f, lambda_elm %.2f)",
                multi_tv, ilme_tv, result.chosen_lambda_ilm,
                result.chosen_lambda_elm);
  Report(7, "ilme gain with dev-tuned lambda", ilme_ok, detail);

  // Criterion 8: stripped checkpoint decodes identically.
  UstrModel full = LoadCheckpoint((fs::path(out_dir) / "base.ckpt").string());
  UstrModel stripped =
      LoadCheckpoint((fs::path(out_dir) / "base_stripped.ckpt").string());
  Manifest val =
      LoadManifest((fs::path(out_dir) / "data" / "target_val.jsonl").string());
  FusionConfig fusion;
  fusion.beam_width = 4;
  bool identical = true;
  double max_score_diff = 0.0;
  for (const auto& rec : val.records) {
    Matrix audio = LoadUtteranceAudio(val, rec);
    auto a = BeamSearch(full, audio, fusion);
    auto b = BeamSearch(stripped, audio, fusion);
    if (a.size() != b.size()) {
      identical = false;
      break;
    }
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i].tokens != b[i].tokens) identical = false;
      max_score_diff = std::max(
          max_score_diff, std::abs(a[i].score_am - b[i].score_am));
    }
  }
  std::snprintf(detail, sizeof(detail),
                "tokens identical %s, max score diff %.3e",
                identical ? "yes" : "no", max_score_diff);
  Report(8, "deployment invariance of stripped checkpoints",
         identical && max_score_diff <= 1e-12, detail);
}

void Criterion9() {
  bool ok = true;
  std::string note = "all featurization examples hold";
  try {
    auto bpe = BpeTrain({{"abab"}}, 1);
    if (bpe.merges.size() != 1 || bpe.merges[0].first != "a" ||
        bpe.merges[0].second != "b") {
      ok = false;
      note = "bpe first merge mismatch";
    }
    auto bpe2 = BpeTrain({{"abab"}}, 1);
    if (bpe.merges != bpe2.merges) {
      ok = false;
      note = "bpe nondeterministic";
    }
    TextVocab bv = MakeBpeVocab(bpe);
    if (BpeDecode(BpeEncode(bpe, bv, {"abab"}), bv) !=
        std::vector<std::string>{"abab"}) {
      ok = false;
      note = "bpe round trip failed";
    }

    TokenSequence seq{{3, 7}};
    TextRepConfig rep;
    rep.repeat = 4;
    rep.mask_prob = 0.0;
    Rng rng(1);
    auto plain = MaskThenRepeat(seq, rep, 0, rng);
    if (plain.ids != std::vector<int>{3, 3, 3, 3, 7, 7, 7, 7}) {
      ok = false;
      note = "mask_then_repeat expansion mismatch";
    }
    rep.mask_prob = 0.5;
    for (int trial = 0; trial < 100 && ok; ++trial) {
      auto out = MaskThenRepeat(seq, rep, 0, rng);
      for (size_t b = 0; b < out.ids.size(); b += 4)
        for (size_t k = 1; k < 4; ++k)
          if (out.ids[b + k] != out.ids[b]) {
            ok = false;
            note = "mask_then_repeat not block-constant";
          }
    }
    // repeat_then_mask must be able to break blocks.
    bool mixed = false;
    for (int trial = 0; trial < 500 && !mixed; ++trial) {
      auto out = RepeatThenMask(seq, rep, 0, rng);
      for (size_t b = 0; b < out.ids.size(); b += 4)
        for (size_t k = 1; k < 4; ++k)
          if (out.ids[b + k] != out.ids[b]) mixed = true;
    }
    if (!mixed) {
      ok = false;
      note = "repeat_then_mask indistinguishable from mask_then_repeat";
    }

    Lexicon lex;
    lex.entries["cat"] = {"K", "AE", "T"};
    PhonemeInventory inv;
    inv.phonemes = {"K", "AE", "T"};
    TextVocab pv = MakePhonemeVocab(inv);
    if (G2p(lex, pv, {"cat"}).ids.size() != 3) {
      ok = false;
      note = "g2p lookup mismatch";
    }
    bool threw = false;
    try {
      G2p(lex, pv, {"dog"});
    } catch (const std::runtime_error& e) {
      threw = std::string(e.what()).find("dog") != std::string::npos;
    }
    if (!threw) {
      ok = false;
      note = "g2p oov error missing";
    }
  } catch (const std::exception& e) {
    ok = false;
    note = e.what();
  }
  Report(9, "featurization examples", ok, note);
}

std::string Slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig DeterminismConfig(const std::string& out_dir) {
  ExperimentConfig cfg = AcceptanceConfig(out_dir);
  cfg.counts.source_train = 16;
  cfg.counts.source_dev = 4;
  cfg.counts.source_test = 4;
  cfg.counts.target_dev = 3;
  cfg.counts.target_val = 4;
  cfg.counts.target_text = 10;
  cfg.inventory.num_phonemes = 10;
  cfg.inventory.dim = 8;
  cfg.inventory.separation = 1.0;
  cfg.model.subsampling = 2;
  cfg.train_base.steps = 3;
  cfg.train_base.eval_every = 0;
  cfg.train_base.stop_at_eval_wer = -1.0;
  cfg.adapt.steps = 3;
  cfg.train_single.steps = 3;
  cfg.fusion.beam_width = 2;
  cfg.ilme_lambda_grid = {0.0, 0.2};
  cfg.elm_lambda_grid = {0.0, 0.3};
  cfg.lm_steps = 3;
  return cfg;
}

void Criterion10(const std::string& scratch) {
  std::string a = scratch + "/det_a", b = scratch + "/det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  try {
    ExperimentResult ra = RunExperiment(DeterminismConfig(a));
    ExperimentResult rb = RunExperiment(DeterminismConfig(b));
    bool same = Slurp(ra.results_csv) == Slurp(rb.results_csv) &&
                !Slurp(ra.results_csv).empty();
    Report(10, "byte-identical experiment tables", same,
           same ? "two runs, identical results.csv" : "csv contents differ");
  } catch (const std::exception& e) {
    Report(10, "byte-identical experiment tables", false, e.what());
  }
}

void Criterion11(const std::string& scratch) {
  try {
    ExperimentConfig cfg = DeterminismConfig(scratch + "/sweep");
    fs::remove_all(cfg.out_dir);
    cfg.train_base.steps = 3;
    cfg.bpe_merges = 20;
    auto cells = RunUnitSweep(
        cfg, {TextUnit::kGrapheme, TextUnit::kSubword, TextUnit::kPhoneme},
        {3, 4, 5});
    bool ok = cells.size() == 9 &&
              fs::exists(fs::path(cfg.out_dir) / "sweep.csv") &&
              fs::exists(fs::path(cfg.out_dir) / "sweep.md");
    for (const auto& c : cells)
      if (!std::isfinite(c.source_dev_wer)) ok = false;
    char detail[64];
    std::snprintf(detail, sizeof(detail), "%zu cells completed", cells.size());
    Report(11, "representation-unit sweep", ok, detail);
  } catch (const std::exception& e) {
    Report(11, "representation-unit sweep", false, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::string scratch = (fs::temp_directory_path() / "ustr_acceptance").string();
  if (argc > 1) scratch = argv[1];
  fs::create_directories(scratch);

  auto instances = MakeOracleInstances(200, 424242);
  Criterion1(instances);
  Criterion2(instances);
  Criterion3(instances);

  std::string exp_dir = scratch + "/pipeline";
  fs::remove_all(exp_dir);
  try {
    auto start = std::chrono::steady_clock::now();
    ExperimentResult result = RunExperiment(AcceptanceConfig(exp_dir));
    double train_seconds = result.stage_seconds.count("train-base")
                               ? result.stage_seconds.at("train-base")
                               : Seconds(start);
    Criteria4to8(result, exp_dir, train_seconds);
  } catch (const std::exception& e) {
    for (int n = 4; n <= 8; ++n)
      Report(n, "shared training pipeline", false, e.what());
  }

  Criterion9();
  Criterion10(scratch);
  Criterion11(scratch);

  std::printf("%s: %d of 11 criteria failed\n",
              g_failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL",
              g_failures);
  return g_failures == 0 ? 0 : 1;
}
