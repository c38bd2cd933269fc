// core/src/experiment.cpp
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

#include "ustr/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <chrono>
#include <map>
#include <stdexcept>
#include <type_traits>

#include <json.hpp>

namespace ustr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

std::vector<std::string> SharedWords() {
  return {"ba", "be", "bi", "bo", "da", "de", "di", "do", "fa",
          "fe", "fi", "fo", "ga", "ge", "gi", "go", "ka", "ke"};
}

std::vector<std::string> SourceOnlyWords() {
  return {"ki", "ko", "bad", "bed", "dig", "dog",
          "fog", "gab", "kid", "keg", "bib", "gag"};
}

std::vector<std::string> TargetOnlyWords() {
  return {"ab", "eb", "ib", "ob", "ad", "ed",
          "id", "od", "ag", "eg", "ig", "og"};
}

DomainSpec MakeDomain(const std::string& name,
                      const std::vector<std::string>& unique) {
  DomainSpec d;
  d.name = name;
  d.vocabulary = SharedWords();
  d.vocabulary.insert(d.vocabulary.end(), unique.begin(), unique.end());
  std::sort(d.vocabulary.begin(), d.vocabulary.end());
  d.default_weight = 1.0;
  d.min_sentence_len = 2;
  d.max_sentence_len = 4;
  // Emphasis falls only on the domain-unique words, so the two domains
  // never emphasize the same bigram.
  for (size_t i = 0; i < unique.size(); ++i) {
    d.bigram_weights[{kSentenceStart, unique[i]}] = 3.0;
    d.bigram_weights[{unique[i], unique[(i + 1) % unique.size()]}] = 4.0;
  }
  return d;
}

TrainConfig ParseTrain(const json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.swap_prob = j.value("swap_prob", c.swap_prob);
  c.ratio_paired = j.value("ratio_paired", c.ratio_paired);
  c.ratio_text = j.value("ratio_text", c.ratio_text);
  c.ilmt_enabled = j.value("ilmt_enabled", c.ilmt_enabled);
  c.ilmt_weight = j.value("ilmt_weight", c.ilmt_weight);
  c.augment.max_time_width = j.value("augment_time_width", c.augment.max_time_width);
  c.augment.max_freq_width = j.value("augment_freq_width", c.augment.max_freq_width);
  c.optimizer.lr = j.value("lr", c.optimizer.lr);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.final_lr_scale = j.value("final_lr_scale", c.final_lr_scale);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.stop_at_eval_wer = j.value("stop_at_eval_wer", c.stop_at_eval_wer);
  c.keep_best_eval = j.value("keep_best_eval", c.keep_best_eval);
  return c;
}

json TrainToJson(const TrainConfig& c) {
  json j;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["swap_prob"] = c.swap_prob;
  j["ratio_paired"] = c.ratio_paired;
  j["ratio_text"] = c.ratio_text;
  j["ilmt_enabled"] = c.ilmt_enabled;
  j["ilmt_weight"] = c.ilmt_weight;
  j["augment_time_width"] = c.augment.max_time_width;
  j["augment_freq_width"] = c.augment.max_freq_width;
  j["lr"] = c.optimizer.lr;
  j["warmup_fraction"] = c.warmup_fraction;
  j["final_lr_scale"] = c.final_lr_scale;
  j["eval_every"] = c.eval_every;
  j["stop_at_eval_wer"] = c.stop_at_eval_wer;
  j["keep_best_eval"] = c.keep_best_eval;
  return j;
}

DomainSpec ResolveDomain(const json& j, const std::string& key,
                         const DomainSpec& builtin,
                         const std::string& config_path) {
  if (!j.contains(key)) return builtin;
  std::string v = j.at(key).get<std::string>();
  if (v == "builtin") return builtin;
  fs::path p(v);
  if (p.is_relative()) p = fs::path(config_path).parent_path() / p;
  return LoadDomainSpec(p.string());
}

std::string FormatWer(double wer) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", wer);
  return buf;
}

ResultRow MakeRow(const std::string& variant, const std::string& split,
                  const WerReport& r) {
  ResultRow row;
  row.variant = variant;
  row.split = split;
  row.wer = r.Wer();
  row.substitutions = r.substitutions;
  row.insertions = r.insertions;
  row.deletions = r.deletions;
  row.reference_words = r.reference_words;
  return row;
}

template <typename Fn>
auto Stage(const std::string& name, Fn&& fn,
           std::map<std::string, double>* seconds = nullptr) {
  auto start = std::chrono::steady_clock::now();
  try {
    auto done = [&] {
      if (seconds)
        (*seconds)[name] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          start)
                .count();
    };
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      done();
    } else {
      auto value = fn();
      done();
      return value;
    }
  } catch (const std::exception& e) {
    throw std::runtime_error("experiment stage '" + name + "' failed: " +
                             e.what());
  }
}

}  // namespace

DomainSpec BuiltinSourceDomain() { return MakeDomain("source", SourceOnlyWords()); }
DomainSpec BuiltinTargetDomain() { return MakeDomain("target", TargetOnlyWords()); }

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open experiment config: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    Fail("experiment config " + path + ": " + e.what());
  }
  ExperimentConfig cfg;
  if (!j.contains("seed")) Fail("experiment config " + path + ": seed missing");
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (j.contains("inventory")) {
    const auto& ji = j["inventory"];
    cfg.inventory.num_phonemes = ji.value("num_phonemes", cfg.inventory.num_phonemes);
    cfg.inventory.dim = ji.value("dim", cfg.inventory.dim);
    cfg.inventory.separation = ji.value("separation", cfg.inventory.separation);
  }
  if (j.contains("acoustics")) {
    const auto& ja = j["acoustics"];
    cfg.acoustics.noise_sigma = ja.value("noise_sigma", cfg.acoustics.noise_sigma);
    cfg.acoustics.min_duration = ja.value("min_duration", cfg.acoustics.min_duration);
    cfg.acoustics.max_duration = ja.value("max_duration", cfg.acoustics.max_duration);
  }
  cfg.source_domain = ResolveDomain(j, "source_domain", BuiltinSourceDomain(), path);
  cfg.target_domain = ResolveDomain(j, "target_domain", BuiltinTargetDomain(), path);
  if (j.contains("counts")) {
    const auto& jc = j["counts"];
    cfg.counts.source_train = jc.value("source_train", cfg.counts.source_train);
    cfg.counts.source_dev = jc.value("source_dev", cfg.counts.source_dev);
    cfg.counts.source_test = jc.value("source_test", cfg.counts.source_test);
    cfg.counts.target_dev = jc.value("target_dev", cfg.counts.target_dev);
    cfg.counts.target_val = jc.value("target_val", cfg.counts.target_val);
    cfg.counts.target_text = jc.value("target_text", cfg.counts.target_text);
  }
  if (j.contains("model")) {
    const auto& jm = j["model"];
    cfg.model.model_dim = jm.value("model_dim", cfg.model.model_dim);
    cfg.model.shared_blocks = jm.value("shared_blocks", cfg.model.shared_blocks);
    cfg.model.attention_heads = jm.value("attention_heads", cfg.model.attention_heads);
    cfg.model.subsampling = jm.value("subsampling", cfg.model.subsampling);
    cfg.model.conv_channels = jm.value("conv_channels", cfg.model.conv_channels);
    cfg.model.predictor_dim = jm.value("predictor_dim", cfg.model.predictor_dim);
    cfg.model.predictor_layers = jm.value("predictor_layers", cfg.model.predictor_layers);
    cfg.model.joint_hidden = jm.value("joint_hidden", cfg.model.joint_hidden);
    cfg.model.conv_kernel = jm.value("conv_kernel", cfg.model.conv_kernel);
  }
  cfg.label_unit = TextUnitFromName(j.value("label_unit", "grapheme"));
  cfg.text_unit = TextUnitFromName(j.value("text_unit", "phoneme"));
  cfg.repeat = j.value("repeat", cfg.repeat);
  cfg.mask_prob = j.value("mask_prob", cfg.mask_prob);
  cfg.bpe_merges = j.value("bpe_merges", cfg.bpe_merges);
  cfg.train_base = ParseTrain(j.value("train_base", json::object()), cfg.train_base);
  cfg.adapt = ParseTrain(j.value("adapt", json::object()), cfg.adapt);
  cfg.train_single = ParseTrain(j.value("train_single", json::object()), cfg.train_single);
  cfg.run_adapt = j.value("run_adapt", cfg.run_adapt);
  cfg.run_single = j.value("run_single", cfg.run_single);
  if (j.contains("fusion")) {
    const auto& jf = j["fusion"];
    cfg.fusion.lambda_ilm = jf.value("lambda_ilm", cfg.fusion.lambda_ilm);
    cfg.fusion.lambda_elm = jf.value("lambda_elm", cfg.fusion.lambda_elm);
    cfg.fusion.beam_width = jf.value("beam_width", cfg.fusion.beam_width);
  }
  if (j.contains("ilme_lambda_grid"))
    cfg.ilme_lambda_grid = j["ilme_lambda_grid"].get<std::vector<double>>();
  if (j.contains("elm_lambda_grid"))
    cfg.elm_lambda_grid = j["elm_lambda_grid"].get<std::vector<double>>();
  cfg.lm_steps = j.value("lm_steps", cfg.lm_steps);
  cfg.lm_batch = j.value("lm_batch", cfg.lm_batch);
  if (j.contains("lm")) {
    const auto& jl = j["lm"];
    cfg.lm.embed_dim = jl.value("embed_dim", cfg.lm.embed_dim);
    cfg.lm.hidden_dim = jl.value("hidden_dim", cfg.lm.hidden_dim);
  }
  return cfg;
}

void SaveExperimentConfig(const ExperimentConfig& cfg, const std::string& path) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["inventory"] = {{"num_phonemes", cfg.inventory.num_phonemes},
                    {"dim", cfg.inventory.dim},
                    {"separation", cfg.inventory.separation}};
  j["acoustics"] = {{"noise_sigma", cfg.acoustics.noise_sigma},
                    {"min_duration", cfg.acoustics.min_duration},
                    {"max_duration", cfg.acoustics.max_duration}};
  j["counts"] = {{"source_train", cfg.counts.source_train},
                 {"source_dev", cfg.counts.source_dev},
                 {"source_test", cfg.counts.source_test},
                 {"target_dev", cfg.counts.target_dev},
                 {"target_val", cfg.counts.target_val},
                 {"target_text", cfg.counts.target_text}};
  j["model"] = {{"model_dim", cfg.model.model_dim},
                {"shared_blocks", cfg.model.shared_blocks},
                {"attention_heads", cfg.model.attention_heads},
                {"subsampling", cfg.model.subsampling},
                {"conv_channels", cfg.model.conv_channels},
                {"predictor_dim", cfg.model.predictor_dim},
                {"predictor_layers", cfg.model.predictor_layers},
                {"joint_hidden", cfg.model.joint_hidden},
                {"conv_kernel", cfg.model.conv_kernel}};
  j["label_unit"] = TextUnitName(cfg.label_unit);
  j["text_unit"] = TextUnitName(cfg.text_unit);
  j["repeat"] = cfg.repeat;
  j["mask_prob"] = cfg.mask_prob;
  j["bpe_merges"] = cfg.bpe_merges;
  j["train_base"] = TrainToJson(cfg.train_base);
  j["adapt"] = TrainToJson(cfg.adapt);
  j["train_single"] = TrainToJson(cfg.train_single);
  j["run_adapt"] = cfg.run_adapt;
  j["run_single"] = cfg.run_single;
  j["fusion"] = {{"lambda_ilm", cfg.fusion.lambda_ilm},
                 {"lambda_elm", cfg.fusion.lambda_elm},
                 {"beam_width", cfg.fusion.beam_width}};
  j["ilme_lambda_grid"] = cfg.ilme_lambda_grid;
  j["elm_lambda_grid"] = cfg.elm_lambda_grid;
  j["lm_steps"] = cfg.lm_steps;
  j["lm_batch"] = cfg.lm_batch;
  j["lm"] = {{"embed_dim", cfg.lm.embed_dim},
             {"hidden_dim", cfg.lm.hidden_dim}};
  std::ofstream out(path);
  if (!out) Fail("cannot open experiment config for writing: " + path);
  out << j.dump(2) << "\n";
}

ExperimentData PrepareData(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  // Configs built in code usually leave the domains empty; fall back to the
  // builtins, matching the JSON loader.
  if (cfg.source_domain.vocabulary.empty())
    cfg.source_domain = BuiltinSourceDomain();
  if (cfg.target_domain.vocabulary.empty())
    cfg.target_domain = BuiltinTargetDomain();
  ExperimentData data;
  std::set<std::string> words(cfg.source_domain.vocabulary.begin(),
                              cfg.source_domain.vocabulary.end());
  words.insert(cfg.target_domain.vocabulary.begin(),
               cfg.target_domain.vocabulary.end());
  std::vector<std::string> vocab(words.begin(), words.end());

  data.inventory = BuildInventory(cfg.inventory.num_phonemes, cfg.inventory.dim,
                                  cfg.inventory.separation, cfg.seed ^ 0x101ull);
  data.lexicon = BuildLexicon(data.inventory, vocab, cfg.seed ^ 0x202ull);

  auto gen = [&](const DomainSpec& domain, int n, bool paired, uint64_t stream,
                 const std::string& split) {
    fs::path dir = fs::path(cfg.out_dir) / "data" / split;
    fs::create_directories(dir);
    Manifest m = GenerateCorpus(domain, data.lexicon, data.inventory, n, paired,
                                cfg.acoustics, cfg.seed ^ stream, dir.string(),
                                split);
    SaveManifest(m, (dir.string() + ".jsonl"));
    return m;
  };
  data.source_train = gen(cfg.source_domain, cfg.counts.source_train, true,
                          0x1000ull, "source_train");
  data.source_dev = gen(cfg.source_domain, cfg.counts.source_dev, true,
                        0x2000ull, "source_dev");
  data.source_test = gen(cfg.source_domain, cfg.counts.source_test, true,
                         0x3000ull, "source_test");
  data.target_dev = gen(cfg.target_domain, cfg.counts.target_dev, true,
                        0x4000ull, "target_dev");
  data.target_val = gen(cfg.target_domain, cfg.counts.target_val, true,
                        0x5000ull, "target_val");
  data.target_text = gen(cfg.target_domain, cfg.counts.target_text, false,
                         0x6000ull, "target_text");

  Featurizer& feat = data.featurizer;
  feat.label_unit = cfg.label_unit;
  feat.text_unit = cfg.text_unit;
  feat.rep.unit = cfg.text_unit;
  feat.rep.repeat = cfg.repeat;
  feat.rep.mask_prob = cfg.mask_prob;
  feat.lexicon = data.lexicon;
  bool need_bpe = cfg.label_unit == TextUnit::kSubword ||
                  cfg.text_unit == TextUnit::kSubword;
  if (need_bpe) {
    std::vector<std::vector<std::string>> transcripts;
    for (const auto& r : data.source_train.records)
      transcripts.push_back(r.transcript);
    for (const auto& r : data.target_text.records)
      transcripts.push_back(r.transcript);
    feat.bpe = BpeTrain(transcripts, cfg.bpe_merges);
  }
  TextVocab graphemes = MakeGraphemeVocab(vocab);
  switch (cfg.label_unit) {
    case TextUnit::kGrapheme:
      feat.label_vocab = graphemes;
      break;
    case TextUnit::kSubword:
      feat.label_vocab = MakeBpeVocab(feat.bpe);
      break;
    case TextUnit::kPhoneme:
      Fail("prepare_data: phoneme output units are not decodable to words");
  }
  switch (cfg.text_unit) {
    case TextUnit::kGrapheme:
      feat.text_vocab = graphemes;
      break;
    case TextUnit::kSubword:
      feat.text_vocab = MakeBpeVocab(feat.bpe);
      break;
    case TextUnit::kPhoneme:
      feat.text_vocab = MakePhonemeVocab(data.inventory);
      break;
  }
  return data;
}

WerReport EvaluateWer(const UstrModel& model, const Manifest& manifest,
                      const Featurizer& feat, const FusionConfig& fusion,
                      const ExternalLm* elm, const std::string& hyp_path) {
  std::ofstream hyp_out;
  if (!hyp_path.empty()) {
    hyp_out.open(hyp_path);
    if (!hyp_out) Fail("cannot open hypothesis file: " + hyp_path);
  }
  WerReport report;
  for (const auto& rec : manifest.records) {
    Matrix audio = LoadUtteranceAudio(manifest, rec);
    auto hyps = BeamSearch(model, audio, fusion, elm);
    std::vector<std::string> words;
    if (!hyps.empty()) words = feat.LabelWords(hyps.front().tokens);
    UtteranceErrors e = AlignWords(rec.transcript, words);
    e.id = rec.id;
    report.Accumulate(e);
    if (hyp_out.is_open()) {
      hyp_out << rec.id << "\t";
      for (size_t i = 0; i < words.size(); ++i)
        hyp_out << (i ? " " : "") << words[i];
      hyp_out << "\n";
    }
  }
  return report;
}

void WriteResultsCsv(const std::vector<ResultRow>& rows,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open results csv: " + path);
  out << "variant,split,wer,S,I,D,N_ref\n";
  for (const auto& r : rows)
    out << r.variant << "," << r.split << "," << FormatWer(r.wer) << ","
        << r.substitutions << "," << r.insertions << "," << r.deletions << ","
        << r.reference_words << "\n";
}

void WriteResultsMarkdown(const std::vector<ResultRow>& rows,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open results markdown: " + path);
  out << "| variant | split | WER | S | I | D | N_ref |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    out << "| " << r.variant << " | " << r.split << " | " << FormatWer(r.wer)
        << " | " << r.substitutions << " | " << r.insertions << " | "
        << r.deletions << " | " << r.reference_words << " |\n";
}

ExperimentResult RunExperiment(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  fs::path out(cfg.out_dir);
  fs::create_directories(out / "decodes");

  ExperimentResult result;
  ExperimentData data = Stage("data", [&] { return PrepareData(cfg); });
  const Featurizer& feat = data.featurizer;

  UstrConfig mcfg = cfg.model;
  mcfg.feature_dim = data.inventory.dim;
  mcfg.text_vocab_size = feat.text_vocab.Size();
  mcfg.output_classes = feat.label_vocab.Size();
  mcfg.Validate();

  auto eval_all = [&](const UstrModel& model, const std::string& variant,
                      const FusionConfig& fusion) {
    struct Split {
      const char* name;
      const Manifest* manifest;
    } splits[] = {{"source_dev", &data.source_dev},
                  {"source_test", &data.source_test},
                  {"target_val", &data.target_val}};
    for (const auto& s : splits) {
      std::string hyp =
          (out / "decodes" / (variant + "_" + s.name + ".txt")).string();
      WerReport r = EvaluateWer(model, *s.manifest, feat, fusion, nullptr, hyp);
      result.rows.push_back(MakeRow(variant, s.name, r));
    }
  };

  UstrModel base = Stage("init", [&] { return InitModel(mcfg, cfg.seed ^ 0xB00ull); });
  bool trained = cfg.train_base.steps > 0;
  if (trained) {
    Stage("train-base", [&] {
      TrainConfig tc = cfg.train_base;
      tc.seed = cfg.seed ^ 0xBA5Eull;
      auto utts = LoadUtterances(data.source_train);
      EvalFn eval;
      if (tc.eval_every > 0)
        eval = [&](const UstrModel& m) {
          return EvaluateWer(m, data.source_dev, feat, cfg.fusion).Wer();
        };
      return TrainBase(base, utts, tc, feat, eval,
                       (out / "base_metrics.csv").string());
    }, &result.stage_seconds);
  }
  std::string base_ckpt = (out / "base.ckpt").string();
  Stage("save-base", [&] {
    SaveCheckpoint(base, base_ckpt);
    SaveCheckpoint(base, (out / "base_stripped.ckpt").string(), true);
    return 0;
  });
  Stage("eval-base", [&] {
    eval_all(base, trained ? "base" : "random-init", cfg.fusion);
    return 0;
  });

  std::optional<UstrModel> adapted;
  if (trained && cfg.run_adapt && cfg.adapt.steps > 0) {
    adapted = Stage("adapt", [&] {
      UstrModel m = LoadCheckpoint(base_ckpt);
      TrainConfig tc = cfg.adapt;
      tc.seed = cfg.seed ^ 0xADA7ull;
      auto paired = LoadUtterances(data.source_train);
      auto text = LoadUtterances(data.target_text);
      EvalFn eval;
      if (tc.eval_every > 0)
        eval = [&](const UstrModel& mm) {
          // Guard both domains: adaptation should help the target without
          // giving up the source.
          return 0.5 * (EvaluateWer(mm, data.target_dev, feat, cfg.fusion).Wer() +
                        EvaluateWer(mm, data.source_dev, feat, cfg.fusion).Wer());
        };
      AdaptMultistep(m, paired, text, tc, feat, eval,
                     (out / "adapt_metrics.csv").string());
      SaveCheckpoint(m, (out / "adapted.ckpt").string());
      SaveCheckpoint(m, (out / "adapted_stripped.ckpt").string(), true);
      return m;
    }, &result.stage_seconds);
    Stage("eval-adapt", [&] {
      eval_all(*adapted, "multi-step", cfg.fusion);
      return 0;
    });
  }

  if (trained && cfg.run_single && cfg.train_single.steps > 0) {
    UstrModel single = Stage("train-single", [&] {
      UstrModel m = InitModel(mcfg, cfg.seed ^ 0x51E0ull);
      TrainConfig tc = cfg.train_single;
      tc.seed = cfg.seed ^ 0x517Dull;
      auto paired = LoadUtterances(data.source_train);
      auto text = LoadUtterances(data.target_text);
      EvalFn eval;
      if (tc.eval_every > 0)
        eval = [&](const UstrModel& mm) {
          // Single-step training exists to serve the target domain; select
          // its checkpoint on the target dev split.
          return EvaluateWer(mm, data.target_dev, feat, cfg.fusion).Wer();
        };
      TrainSinglestep(m, paired, text, tc, feat, eval,
                      (out / "single_metrics.csv").string());
      SaveCheckpoint(m, (out / "single.ckpt").string());
      return m;
    }, &result.stage_seconds);
    Stage("eval-single", [&] {
      eval_all(single, "single-step", cfg.fusion);
      return 0;
    });
  }

  if (adapted && !cfg.ilme_lambda_grid.empty()) {
    Stage("ilme", [&] {
      // Fusion follows the usual ILME recipe: an external label LM trained
      // on the target text corpus is added with weight lambda_elm while the
      // internal LM estimate is subtracted with weight lambda_ilm. Both
      // weights are tuned jointly on target-dev; an empty elm grid degrades
      // to pure subtractive ILME.
      std::optional<ExternalLm> elm;
      std::vector<double> elm_grid = cfg.elm_lambda_grid;
      if (elm_grid.empty()) {
        elm_grid = {0.0};
      } else {
        LmConfig lm_cfg = cfg.lm;
        lm_cfg.vocab_classes = mcfg.output_classes;
        elm = InitExternalLm(lm_cfg, cfg.seed ^ 0xE17Full);
        auto text = LoadUtterances(data.target_text);
        AdamConfig lm_opt;
        TrainExternalLm(*elm, text, feat, cfg.lm_steps, cfg.lm_batch,
                        cfg.seed ^ 0xE17Eull, lm_opt);
        SaveLmCheckpoint(*elm, (out / "elm.ckpt").string());
      }
      const ExternalLm* elm_ptr = elm ? &*elm : nullptr;
      double best_ilm = cfg.ilme_lambda_grid.front();
      double best_elm = elm_grid.front();
      double best_wer = -1.0;
      for (double le : elm_grid) {
        for (double li : cfg.ilme_lambda_grid) {
          FusionConfig f = cfg.fusion;
          f.lambda_elm = le;
          f.lambda_ilm = li;
          double w =
              EvaluateWer(*adapted, data.target_dev, feat, f, elm_ptr).Wer();
          if (best_wer < 0.0 || w < best_wer) {
            best_wer = w;
            best_ilm = li;
            best_elm = le;
          }
        }
      }
      result.chosen_lambda_ilm = best_ilm;
      result.chosen_lambda_elm = best_elm;
      FusionConfig f = cfg.fusion;
      f.lambda_ilm = best_ilm;
      f.lambda_elm = best_elm;
      std::string hyp = (out / "decodes" / "multi-step-ilme_target_val.txt").string();
      WerReport r = EvaluateWer(*adapted, data.target_val, feat, f, elm_ptr, hyp);
      result.rows.push_back(MakeRow("multi-step-ilme", "target_val", r));
      return 0;
    });
  }

  Stage("results", [&] {
    result.results_csv = (out / "results.csv").string();
    result.results_md = (out / "results.md").string();
    WriteResultsCsv(result.rows, result.results_csv);
    WriteResultsMarkdown(result.rows, result.results_md);
    return 0;
  });
  return result;
}

std::vector<SweepCell> RunUnitSweep(const ExperimentConfig& cfg,
                                    const std::vector<TextUnit>& units,
                                    const std::vector<int>& repeats) {
  fs::create_directories(cfg.out_dir);
  std::vector<SweepCell> cells;
  for (TextUnit unit : units) {
    for (int repeat : repeats) {
      ExperimentConfig c = cfg;
      c.text_unit = unit;
      c.repeat = repeat;
      c.out_dir = (fs::path(cfg.out_dir) /
                   (TextUnitName(unit) + "_r" + std::to_string(repeat)))
                      .string();
      std::string cell_name = TextUnitName(unit) + " x" + std::to_string(repeat);
      ExperimentData data = Stage("sweep-data " + cell_name,
                                  [&] { return PrepareData(c); });
      UstrConfig mcfg = c.model;
      mcfg.feature_dim = data.inventory.dim;
      mcfg.text_vocab_size = data.featurizer.text_vocab.Size();
      mcfg.output_classes = data.featurizer.label_vocab.Size();
      mcfg.Validate();
      UstrModel model = InitModel(mcfg, c.seed ^ 0xB00ull);
      Stage("sweep-train " + cell_name, [&] {
        TrainConfig tc = c.train_base;
        tc.seed = c.seed ^ 0xBA5Eull;
        auto utts = LoadUtterances(data.source_train);
        return TrainBase(model, utts, tc, data.featurizer, EvalFn{}, "");
      });
      SweepCell cell;
      cell.unit = unit;
      cell.repeat = repeat;
      cell.source_dev_wer = Stage("sweep-eval " + cell_name, [&] {
        return EvaluateWer(model, data.source_dev, data.featurizer, c.fusion)
            .Wer();
      });
      cells.push_back(cell);
    }
  }
  std::ofstream csv(fs::path(cfg.out_dir) / "sweep.csv");
  if (!csv) Fail("cannot open sweep csv in " + cfg.out_dir);
  csv << "text_unit,repeat,source_dev_wer\n";
  for (const auto& c : cells)
    csv << TextUnitName(c.unit) << "," << c.repeat << ","
        << FormatWer(c.source_dev_wer) << "\n";
  std::ofstream md(fs::path(cfg.out_dir) / "sweep.md");
  md << "| text unit | repeat | source-dev WER |\n|---|---|---|\n";
  for (const auto& c : cells)
    md << "| " << TextUnitName(c.unit) << " | " << c.repeat << " | "
       << FormatWer(c.source_dev_wer) << " |\n";
  return cells;
}

}  // namespace ustr
