// tests/test_harness.cpp
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

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ustr/experiment.hpp"

using namespace ustr;
namespace fs = std::filesystem;

namespace {

std::string Slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Desk-scale experiment: a few utterances, a small model, a couple of
// training steps. Exercises every stage without taking minutes.
ExperimentConfig TinyConfig(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.out_dir = out_dir;
  cfg.inventory.num_phonemes = 10;
  cfg.inventory.dim = 6;
  cfg.inventory.separation = 1.0;
  cfg.counts.source_train = 12;
  cfg.counts.source_dev = 3;
  cfg.counts.source_test = 3;
  cfg.counts.target_dev = 2;
  cfg.counts.target_val = 3;
  cfg.counts.target_text = 8;

  cfg.model.feature_dim = 6;
  cfg.model.model_dim = 8;
  cfg.model.shared_blocks = 1;
  cfg.model.attention_heads = 2;
  cfg.model.subsampling = 2;
  cfg.model.conv_channels = 2;
  cfg.model.predictor_dim = 8;
  cfg.model.predictor_layers = 1;
  cfg.model.joint_hidden = 8;
  cfg.model.conv_kernel = 3;

  cfg.repeat = 2;
  cfg.train_base.batch_size = 3;
  cfg.train_base.steps = 2;
  cfg.adapt.batch_size = 4;
  cfg.adapt.steps = 2;
  cfg.train_single.batch_size = 4;
  cfg.train_single.steps = 2;
  cfg.fusion.beam_width = 2;
  cfg.ilme_lambda_grid = {0.0, 0.2};
  return cfg;
}

}  // namespace

TEST_CASE("wer basics") {
  auto same = AlignWords({"a", "b", "c"}, {"a", "b", "c"});
  CHECK(same.substitutions == 0);
  CHECK(same.insertions == 0);
  CHECK(same.deletions == 0);
  CHECK(same.reference_words == 3);

  auto sub = AlignWords({"a", "b", "c"}, {"a", "x", "c"});
  CHECK(sub.substitutions == 1);
  CHECK(sub.insertions == 0);
  CHECK(sub.deletions == 0);

  auto ins = AlignWords({"a", "b"}, {"a", "x", "b"});
  CHECK(ins.insertions == 1);
  CHECK(ins.substitutions == 0);

  auto del = AlignWords({"a", "b", "c"}, {"a", "c"});
  CHECK(del.deletions == 1);

  auto empty_hyp = AlignWords({"a", "b"}, {});
  CHECK(empty_hyp.deletions == 2);

  WerReport r;
  r.Accumulate(sub);
  r.Accumulate(ins);
  CHECK(r.substitutions == 1);
  CHECK(r.insertions == 1);
  CHECK(r.reference_words == 5);
  CHECK(r.Wer() == doctest::Approx(2.0 / 5.0));
}

TEST_CASE("wer swap of arguments swaps insertions and deletions") {
  std::vector<std::string> ref = {"a", "b", "c", "d"};
  std::vector<std::string> hyp = {"a", "x", "c"};
  auto fwd = AlignWords(ref, hyp);
  auto rev = AlignWords(hyp, ref);
  CHECK(fwd.substitutions == rev.substitutions);
  CHECK(fwd.insertions == rev.deletions);
  CHECK(fwd.deletions == rev.insertions);
}

TEST_CASE("wer empty reference is an error") {
  CHECK_THROWS_AS(AlignWords({}, {"a"}), std::runtime_error);
}

TEST_CASE("wer above one hundred percent is possible") {
  auto e = AlignWords({"a"}, {"x", "y", "z"});
  WerReport r;
  r.Accumulate(e);
  CHECK(r.Wer() > 1.0);
}

TEST_CASE("builtin domains overlap but emphasize different bigrams") {
  DomainSpec src = BuiltinSourceDomain();
  DomainSpec tgt = BuiltinTargetDomain();
  std::set<std::string> sv(src.vocabulary.begin(), src.vocabulary.end());
  std::set<std::string> tv(tgt.vocabulary.begin(), tgt.vocabulary.end());
  std::vector<std::string> shared;
  for (const auto& w : sv)
    if (tv.count(w)) shared.push_back(w);
  CHECK(shared.size() * 10 == sv.size() * 6);  // 60% overlap
  CHECK(shared.size() * 10 == tv.size() * 6);
  for (const auto& [pair, weight] : src.bigram_weights)
    CHECK(tgt.bigram_weights.count(pair) == 0);
  src.Validate();
  tgt.Validate();
}

TEST_CASE("experiment config file round trip") {
  ExperimentConfig cfg = TinyConfig("unused");
  cfg.ilme_lambda_grid = {0.0, 0.1, 0.4};
  cfg.text_unit = TextUnit::kSubword;
  cfg.bpe_merges = 17;
  fs::path p = fs::temp_directory_path() / "ustr_test_expcfg.json";
  SaveExperimentConfig(cfg, p.string());
  ExperimentConfig loaded = LoadExperimentConfig(p.string());
  CHECK(loaded.seed == cfg.seed);
  CHECK(loaded.counts.source_train == 12);
  CHECK(loaded.counts.target_text == 8);
  CHECK(loaded.inventory.num_phonemes == 10);
  CHECK(loaded.model.model_dim == 8);
  CHECK(loaded.text_unit == TextUnit::kSubword);
  CHECK(loaded.bpe_merges == 17);
  CHECK(loaded.repeat == 2);
  CHECK(loaded.train_base.steps == 2);
  CHECK(loaded.adapt.batch_size == 4);
  CHECK(loaded.ilme_lambda_grid == std::vector<double>{0.0, 0.1, 0.4});
}

TEST_CASE("prepared data matches the configured counts") {
  fs::path dir = fs::temp_directory_path() / "ustr_test_prep";
  fs::remove_all(dir);
  ExperimentConfig cfg = TinyConfig(dir.string());
  ExperimentData data = PrepareData(cfg);
  CHECK(data.source_train.records.size() == 12);
  CHECK(data.source_dev.records.size() == 3);
  CHECK(data.target_text.records.size() == 8);
  // Paired splits carry audio, the text split does not.
  for (const auto& rec : data.source_train.records)
    CHECK(rec.audio_path.has_value());
  for (const auto& rec : data.target_text.records)
    CHECK_FALSE(rec.audio_path.has_value());
  // Featurizer covers both domains.
  for (const auto& rec : data.target_val.records)
    CHECK_FALSE(data.featurizer.LabelIds(rec.transcript).empty());
}

TEST_CASE("evaluate wer is deterministic") {
  fs::path dir = fs::temp_directory_path() / "ustr_test_evalwer";
  fs::remove_all(dir);
  ExperimentConfig cfg = TinyConfig(dir.string());
  ExperimentData data = PrepareData(cfg);
  UstrConfig mcfg = cfg.model;
  mcfg.text_vocab_size =
      static_cast<int>(data.featurizer.text_vocab.symbols.size());
  mcfg.output_classes =
      static_cast<int>(data.featurizer.label_vocab.symbols.size());
  UstrModel model = InitModel(mcfg, 5);
  auto r1 = EvaluateWer(model, data.source_dev, data.featurizer, cfg.fusion);
  auto r2 = EvaluateWer(model, data.source_dev, data.featurizer, cfg.fusion);
  CHECK(r1.Wer() == r2.Wer());
  CHECK(r1.substitutions == r2.substitutions);
  CHECK(r1.reference_words > 0);
}

TEST_CASE("zero training steps leaves only random-init rows") {
  fs::path dir = fs::temp_directory_path() / "ustr_test_zerosteps";
  fs::remove_all(dir);
  ExperimentConfig cfg = TinyConfig(dir.string());
  cfg.train_base.steps = 0;
  cfg.ilme_lambda_grid.clear();
  ExperimentResult res = RunExperiment(cfg);
  REQUIRE_FALSE(res.rows.empty());
  for (const auto& row : res.rows) CHECK(row.variant == "random-init");
}

TEST_CASE("full tiny pipeline emits byte-identical tables across runs") {
  fs::path a = fs::temp_directory_path() / "ustr_test_pipe_a";
  fs::path b = fs::temp_directory_path() / "ustr_test_pipe_b";
  fs::remove_all(a);
  fs::remove_all(b);
  ExperimentResult ra = RunExperiment(TinyConfig(a.string()));
  ExperimentResult rb = RunExperiment(TinyConfig(b.string()));
  CHECK(Slurp(ra.results_csv) == Slurp(rb.results_csv));
  CHECK(ra.chosen_lambda_ilm == rb.chosen_lambda_ilm);

  // All configured variants are present.
  std::set<std::string> variants;
  for (const auto& row : ra.rows) variants.insert(row.variant);
  CHECK(variants.count("base"));
  CHECK(variants.count("multi-step"));
  CHECK(variants.count("single-step"));
  CHECK(variants.count("multi-step-ilme"));

  // The stripped base checkpoint exists and loads without a text encoder.
  UstrModel stripped =
      LoadCheckpoint((a / "base_stripped.ckpt").string());
  CHECK_FALSE(stripped.has_text_encoder);
}

TEST_CASE("results csv layout") {
  std::vector<ResultRow> rows;
  ResultRow r;
  r.variant = "base";
  r.split = "source_dev";
  r.wer = 0.125;
  r.substitutions = 1;
  r.reference_words = 8;
  rows.push_back(r);
  fs::path p = fs::temp_directory_path() / "ustr_test_results.csv";
  WriteResultsCsv(rows, p.string());
  std::string text = Slurp(p.string());
  CHECK(text.find("variant,split,wer,S,I,D,N_ref") != std::string::npos);
  CHECK(text.find("base,source_dev,0.125000,1,0,0,8") != std::string::npos);
}
