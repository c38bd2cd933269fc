// tools/ustr_main.cpp
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
// Command-line front end. Most subcommands take an experiment config
// (JSON); data preparation is a pure function of the config, so stages can
// be re-run independently and still agree on vocabularies and manifests.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ustr/decode.hpp"
#include "ustr/experiment.hpp"
#include "ustr/loss.hpp"
#include "ustr/nn.hpp"

using namespace ustr;
namespace fs = std::filesystem;

namespace {

struct Prepared {
  ExperimentConfig cfg;
  ExperimentData data;
  UstrConfig mcfg;
};

Prepared Prepare(const std::string& config_path) {
  Prepared p;
  p.cfg = LoadExperimentConfig(config_path);
  p.data = PrepareData(p.cfg);
  p.mcfg = p.cfg.model;
  p.mcfg.feature_dim = p.data.inventory.dim;
  p.mcfg.text_vocab_size = p.data.featurizer.text_vocab.Size();
  p.mcfg.output_classes = p.data.featurizer.label_vocab.Size();
  p.mcfg.Validate();
  return p;
}

int GenData(const std::string& config_path, const std::string& domain_out) {
  if (!domain_out.empty()) {
    SaveDomainSpec(BuiltinSourceDomain(),
                   (fs::path(domain_out) / "source_domain.json").string());
    SaveDomainSpec(BuiltinTargetDomain(),
                   (fs::path(domain_out) / "target_domain.json").string());
    std::printf("wrote builtin domain specs to %s\n", domain_out.c_str());
    return 0;
  }
  Prepared p = Prepare(config_path);
  std::printf("prepared data under %s\n",
              (fs::path(p.cfg.out_dir) / "data").string().c_str());
  std::printf("  source_train %zu, source_dev %zu, source_test %zu\n",
              p.data.source_train.records.size(),
              p.data.source_dev.records.size(),
              p.data.source_test.records.size());
  std::printf("  target_dev %zu, target_val %zu, target_text %zu\n",
              p.data.target_dev.records.size(),
              p.data.target_val.records.size(),
              p.data.target_text.records.size());
  return 0;
}

int BpeTrainCmd(const std::vector<std::string>& manifests, int merges,
                const std::string& out_path) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& path : manifests) {
    Manifest m = LoadManifest(path);
    for (const auto& rec : m.records) corpus.push_back(rec.transcript);
  }
  BpeModel model = BpeTrain(corpus, merges);
  SaveBpeModel(model, out_path);
  std::printf("trained %zu merges over %zu sentences -> %s\n",
              model.merges.size(), corpus.size(), out_path.c_str());
  return 0;
}

int TrainBaseCmd(const std::string& config_path) {
  Prepared p = Prepare(config_path);
  fs::path out(p.cfg.out_dir);
  UstrModel model = InitModel(p.mcfg, p.cfg.seed ^ 0xB00ull);
  TrainConfig tc = p.cfg.train_base;
  tc.seed = p.cfg.seed ^ 0xBA5Eull;
  auto utts = LoadUtterances(p.data.source_train);
  EvalFn eval;
  if (tc.eval_every > 0)
    eval = [&](const UstrModel& m) {
      return EvaluateWer(m, p.data.source_dev, p.data.featurizer, p.cfg.fusion)
          .Wer();
    };
  TrainResult res = TrainBase(model, utts, tc, p.data.featurizer, eval,
                              (out / "base_metrics.csv").string());
  SaveCheckpoint(model, (out / "base.ckpt").string());
  SaveCheckpoint(model, (out / "base_stripped.ckpt").string(), true);
  std::printf("base training: %ld steps, loss %.4f -> %.4f\n", res.steps_run,
              res.first_loss, res.final_loss);
  if (res.final_eval_wer)
    std::printf("final source-dev WER %.4f\n", *res.final_eval_wer);
  return 0;
}

int AdaptCmd(const std::string& config_path, const std::string& base_ckpt) {
  Prepared p = Prepare(config_path);
  fs::path out(p.cfg.out_dir);
  std::string ckpt =
      base_ckpt.empty() ? (out / "base.ckpt").string() : base_ckpt;
  UstrModel model = LoadCheckpoint(ckpt);
  TrainConfig tc = p.cfg.adapt;
  tc.seed = p.cfg.seed ^ 0xADA7ull;
  auto paired = LoadUtterances(p.data.source_train);
  auto text = LoadUtterances(p.data.target_text);
  TrainResult res = AdaptMultistep(model, paired, text, tc, p.data.featurizer,
                                   EvalFn{}, (out / "adapt_metrics.csv").string());
  SaveCheckpoint(model, (out / "adapted.ckpt").string());
  SaveCheckpoint(model, (out / "adapted_stripped.ckpt").string(), true);
  std::printf("adaptation: %ld steps, loss %.4f -> %.4f\n", res.steps_run,
              res.first_loss, res.final_loss);
  return 0;
}

int TrainSingleCmd(const std::string& config_path) {
  Prepared p = Prepare(config_path);
  fs::path out(p.cfg.out_dir);
  UstrModel model = InitModel(p.mcfg, p.cfg.seed ^ 0x51E0ull);
  TrainConfig tc = p.cfg.train_single;
  tc.seed = p.cfg.seed ^ 0x517Dull;
  auto paired = LoadUtterances(p.data.source_train);
  auto text = LoadUtterances(p.data.target_text);
  TrainResult res =
      TrainSinglestep(model, paired, text, tc, p.data.featurizer, EvalFn{},
                      (out / "single_metrics.csv").string());
  SaveCheckpoint(model, (out / "single.ckpt").string());
  std::printf("single-step training: %ld steps, loss %.4f -> %.4f\n",
              res.steps_run, res.first_loss, res.final_loss);
  return 0;
}

int TrainLmCmd(const std::string& config_path, int steps, int batch,
               int embed_dim, int hidden_dim, const std::string& out_path) {
  Prepared p = Prepare(config_path);
  LmConfig lm_cfg;
  lm_cfg.vocab_classes = p.mcfg.output_classes;
  lm_cfg.embed_dim = embed_dim;
  lm_cfg.hidden_dim = hidden_dim;
  ExternalLm lm = InitExternalLm(lm_cfg, p.cfg.seed ^ 0xE17Full);
  auto text = LoadUtterances(p.data.target_text);
  AdamConfig opt;
  LmTrainResult res = TrainExternalLm(lm, text, p.data.featurizer, steps,
                                      batch, p.cfg.seed ^ 0xE17Eull, opt);
  std::string path = out_path.empty()
                         ? (fs::path(p.cfg.out_dir) / "elm.ckpt").string()
                         : out_path;
  SaveLmCheckpoint(lm, path);
  std::printf("lm training: perplexity %.3f -> %.3f, saved %s\n",
              res.initial_perplexity, res.final_perplexity, path.c_str());
  return 0;
}

int DecodeCmd(const std::string& config_path, const std::string& ckpt,
              const std::string& manifest_path, const std::string& out_path,
              double lambda_ilm, double lambda_elm, int beam,
              const std::string& elm_path) {
  Prepared p = Prepare(config_path);
  UstrModel model = LoadCheckpoint(ckpt);
  Manifest manifest = LoadManifest(manifest_path);
  FusionConfig fusion;
  fusion.beam_width = beam;
  fusion.lambda_ilm = lambda_ilm;
  fusion.lambda_elm = lambda_elm;
  ExternalLm elm;
  const ExternalLm* elm_ptr = nullptr;
  if (!elm_path.empty()) {
    elm = LoadLmCheckpoint(elm_path);
    elm_ptr = &elm;
  }
  auto decodes = BatchDecode(model, manifest, fusion, elm_ptr);
  std::FILE* out = out_path.empty() ? stdout : std::fopen(out_path.c_str(), "w");
  if (!out) throw std::runtime_error("cannot open " + out_path);
  for (const auto& [id, d] : decodes) {
    auto words = p.data.featurizer.LabelWords(d.best.tokens);
    std::string joined;
    for (const auto& w : words) joined += (joined.empty() ? "" : " ") + w;
    std::fprintf(out, "%s\t%s\n", id.c_str(), joined.c_str());
  }
  if (out != stdout) std::fclose(out);
  return 0;
}

int EvalCmd(const std::string& config_path, const std::string& ckpt,
            const std::string& manifest_path, const std::string& hyp_path,
            double lambda_ilm, double lambda_elm, int beam,
            const std::string& elm_path) {
  Prepared p = Prepare(config_path);
  UstrModel model = LoadCheckpoint(ckpt);
  Manifest manifest = LoadManifest(manifest_path);
  if (manifest.records.empty())
    throw std::runtime_error("eval: manifest has no utterances: " +
                             manifest_path);
  FusionConfig fusion;
  fusion.beam_width = beam;
  fusion.lambda_ilm = lambda_ilm;
  fusion.lambda_elm = lambda_elm;
  ExternalLm elm;
  const ExternalLm* elm_ptr = nullptr;
  if (!elm_path.empty()) {
    elm = LoadLmCheckpoint(elm_path);
    elm_ptr = &elm;
  }
  WerReport r = EvaluateWer(model, manifest, p.data.featurizer, fusion,
                            elm_ptr, hyp_path);
  std::printf("WER %.4f  (S %ld, I %ld, D %ld, N %ld)\n", r.Wer(),
              r.substitutions, r.insertions, r.deletions, r.reference_words);
  return 0;
}

int ExperimentCmd(const std::string& config_path, bool sweep) {
  ExperimentConfig cfg = LoadExperimentConfig(config_path);
  if (sweep) {
    auto cells = RunUnitSweep(
        cfg, {TextUnit::kGrapheme, TextUnit::kSubword, TextUnit::kPhoneme},
        {3, 4, 5});
    for (const auto& c : cells)
      std::printf("%-9s x%d  source-dev WER %.4f\n",
                  TextUnitName(c.unit).c_str(), c.repeat, c.source_dev_wer);
    return 0;
  }
  ExperimentResult res = RunExperiment(cfg);
  for (const auto& row : res.rows)
    std::printf("%-16s %-12s WER %.4f\n", row.variant.c_str(),
                row.split.c_str(), row.wer);
  std::printf("tables: %s, %s\n", res.results_csv.c_str(),
              res.results_md.c_str());
  return 0;
}

int LossOracleCmd(int trials, uint64_t seed) {
  Rng rng(seed);
  double max_diff = 0.0;
  for (int i = 0; i < trials; ++i) {
    int t_len = rng.UniformInt(1, 4);
    int u_len = rng.UniformInt(0, 3);
    int classes = rng.UniformInt(2, 5);
    std::vector<double> logits(static_cast<size_t>(t_len) * (u_len + 1) *
                               classes);
    for (double& x : logits) x = rng.Gaussian();
    std::vector<int> labels;
    for (int u = 0; u < u_len; ++u)
      labels.push_back(rng.UniformInt(1, classes - 1));
    auto lat = ComputeLattice(logits, t_len, u_len, classes, labels);
    double oracle = BruteForceLoss(logits, t_len, u_len, classes, labels);
    max_diff = std::max(max_diff, std::abs(TransducerLossValue(lat) - oracle));
  }
  std::printf("loss oracle: %d trials, max |dp - enum| = %.3e\n", trials,
              max_diff);
  return max_diff <= 1e-9 ? 0 : 1;
}

int GradCheckCmd() {
  double worst = 0.0;
  Rng rng(7);
  // Lattice gradient vs finite differences.
  for (int i = 0; i < 10; ++i) {
    int t_len = rng.UniformInt(1, 3);
    int u_len = rng.UniformInt(0, 2);
    int classes = rng.UniformInt(2, 4);
    std::vector<double> logits(static_cast<size_t>(t_len) * (u_len + 1) *
                               classes);
    for (double& x : logits) x = rng.Gaussian();
    std::vector<int> labels;
    for (int u = 0; u < u_len; ++u)
      labels.push_back(rng.UniformInt(1, classes - 1));
    auto lat = ComputeLattice(logits, t_len, u_len, classes, labels);
    auto grad = TransducerGrad(lat, labels);
    const double eps = 1e-4;
    for (size_t j = 0; j < logits.size(); ++j) {
      auto plus = logits, minus = logits;
      plus[j] += eps;
      minus[j] -= eps;
      double fd =
          (TransducerLossValue(
               ComputeLattice(plus, t_len, u_len, classes, labels)) -
           TransducerLossValue(
               ComputeLattice(minus, t_len, u_len, classes, labels))) /
          (2 * eps);
      double rel = std::abs(fd - grad[j]) /
                   std::max({std::abs(fd), std::abs(grad[j]), 1e-3});
      worst = std::max(worst, rel);
    }
  }
  std::printf("lattice gradient: max rel err %.3e\n", worst);
  bool ok = worst <= 1e-6;

  // Layer gradients through the autodiff graph.
  ParamSet p;
  AddLinearParams(p, "lin", 4, 3, rng);
  AddLayerNormParams(p, "ln", 3);
  AddGruParams(p, "gru", 4, 4, rng);
  AddAttentionParams(p, "att", 4, rng);
  auto x = Tensor::Create({3, 4}, true);
  for (double& v : x->v) v = 0.5 * rng.Gaussian();
  double nn_worst = 0.0;
  auto check = [&](const char* name, const std::function<TensorPtr()>& f,
                   const std::vector<TensorPtr>& wrt) {
    double e = FiniteDifferenceCheck(f, wrt).max_rel_err;
    std::printf("%-10s max rel err %.3e\n", name, e);
    nn_worst = std::max(nn_worst, e);
  };
  check("linear+ln",
        [&] { return ReduceSum(LayerNormed(p, "ln", Linear(p, "lin", x))); },
        {x, p.At("lin.w"), p.At("lin.b"), p.At("ln.gain")});
  check("gru", [&] { return ReduceSum(GruSequence(p, "gru", x, 4)); },
        {x, p.At("gru.wz"), p.At("gru.un")});
  check("attention",
        [&] { return ReduceSum(Tanh(MultiHeadAttention(p, "att", x, 2))); },
        {x, p.At("att.q.w"), p.At("att.o.w")});
  ok = ok && nn_worst <= 1e-4;
  std::printf("grad-check %s\n", ok ? "ok" : "FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"USTR-CT: transducer ASR with a removable text encoder"};
  app.require_subcommand(1);

  std::string config, domain_out, base_ckpt, ckpt, manifest, out_path, hyp;
  std::string elm_path;
  std::vector<std::string> manifests;
  int merges = 60, lm_steps = 200, lm_batch = 8, lm_embed = 16, lm_hidden = 32;
  int beam = 4, trials = 200;
  double lambda_ilm = 0.0, lambda_elm = 0.0;
  uint64_t seed = 424242;
  bool sweep = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->add_option("--config", config, "experiment config (JSON)");
  gen->add_option("--write-domains", domain_out,
                  "write the builtin domain specs to this directory and exit");

  auto* bpe = app.add_subcommand("bpe-train", "train a BPE subword model");
  bpe->add_option("--manifest", manifests, "training manifests")->required();
  bpe->add_option("--merges", merges, "number of merges");
  bpe->add_option("--out", out_path, "output model path")->required();

  auto* tb = app.add_subcommand("train-base", "base USTR training");
  tb->add_option("--config", config)->required();

  auto* ad = app.add_subcommand("adapt", "multi-step text-only adaptation");
  ad->add_option("--config", config)->required();
  ad->add_option("--base", base_ckpt, "base checkpoint (default out/base.ckpt)");

  auto* ts = app.add_subcommand("train-single", "single-step training");
  ts->add_option("--config", config)->required();

  auto* tl = app.add_subcommand("train-lm", "train the external label LM");
  tl->add_option("--config", config)->required();
  tl->add_option("--steps", lm_steps);
  tl->add_option("--batch", lm_batch);
  tl->add_option("--embed-dim", lm_embed);
  tl->add_option("--hidden-dim", lm_hidden);
  tl->add_option("--out", out_path);

  auto* de = app.add_subcommand("decode", "beam-search a manifest");
  de->add_option("--config", config)->required();
  de->add_option("--ckpt", ckpt)->required();
  de->add_option("--manifest", manifest)->required();
  de->add_option("--out", out_path, "hypothesis file (default stdout)");
  de->add_option("--lambda-ilm", lambda_ilm);
  de->add_option("--lambda-elm", lambda_elm);
  de->add_option("--beam", beam);
  de->add_option("--elm", elm_path, "external LM checkpoint");

  auto* ev = app.add_subcommand("eval", "decode and score a manifest");
  ev->add_option("--config", config)->required();
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--manifest", manifest)->required();
  ev->add_option("--hyp", hyp, "also write hypotheses here");
  ev->add_option("--lambda-ilm", lambda_ilm);
  ev->add_option("--lambda-elm", lambda_elm);
  ev->add_option("--beam", beam);
  ev->add_option("--elm", elm_path);

  auto* ex = app.add_subcommand("experiment", "run the full pipeline");
  ex->add_option("--config", config)->required();
  ex->add_flag("--sweep", sweep, "run the representation-unit sweep instead");

  auto* gc = app.add_subcommand("grad-check", "finite-difference checks");
  (void)gc;

  auto* lo = app.add_subcommand("loss-oracle",
                                "DP loss vs brute-force enumeration");
  lo->add_option("--trials", trials);
  lo->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return GenData(config, domain_out);
    if (bpe->parsed()) return BpeTrainCmd(manifests, merges, out_path);
    if (tb->parsed()) return TrainBaseCmd(config);
    if (ad->parsed()) return AdaptCmd(config, base_ckpt);
    if (ts->parsed()) return TrainSingleCmd(config);
    if (tl->parsed())
      return TrainLmCmd(config, lm_steps, lm_batch, lm_embed, lm_hidden,
                        out_path);
    if (de->parsed())
      return DecodeCmd(config, ckpt, manifest, out_path, lambda_ilm,
                       lambda_elm, beam, elm_path);
    if (ev->parsed())
      return EvalCmd(config, ckpt, manifest, hyp, lambda_ilm, lambda_elm, beam,
                     elm_path);
    if (ex->parsed()) return ExperimentCmd(config, sweep);
    if (gc->parsed()) return GradCheckCmd();
    if (lo->parsed()) return LossOracleCmd(trials, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
