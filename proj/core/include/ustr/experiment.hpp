// core/include/ustr/experiment.hpp
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
// End-to-end experiment orchestration: synthetic corpus generation, the
// training recipes, fusion tuning, and results tables (CSV + Markdown).

#ifndef USTR_EXPERIMENT_HPP
#define USTR_EXPERIMENT_HPP

#include <optional>
#include <string>
#include <vector>

#include "ustr/corpus.hpp"
#include "ustr/decode.hpp"
#include "ustr/model.hpp"
#include "ustr/training.hpp"
#include "ustr/wer.hpp"

namespace ustr {

// Two fixed domains sharing 60% of their vocabulary, with disjoint sets of
// emphasized bigrams. These are also what `gen-data --domain` writes out.
DomainSpec BuiltinSourceDomain();
DomainSpec BuiltinTargetDomain();

struct CorpusCounts {
  int source_train = 1000;
  int source_dev = 50;
  int source_test = 50;
  int target_dev = 30;     // fusion tuning split
  int target_val = 50;
  int target_text = 400;   // text-only adaptation data
};

struct InventoryConfig {
  int num_phonemes = 24;
  int dim = 16;
  double separation = 2.0;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  std::string out_dir = "exp";

  InventoryConfig inventory;
  AcousticConfig acoustics;
  DomainSpec source_domain;  // defaults to the builtins
  DomainSpec target_domain;
  CorpusCounts counts;

  UstrConfig model;  // vocab sizes filled in from the featurizer
  TextUnit label_unit = TextUnit::kGrapheme;
  TextUnit text_unit = TextUnit::kPhoneme;
  int repeat = 4;
  double mask_prob = 0.15;
  int bpe_merges = 60;

  TrainConfig train_base;
  TrainConfig adapt;
  TrainConfig train_single;
  bool run_adapt = true;
  bool run_single = true;

  FusionConfig fusion;                     // beam width for all decoding
  std::vector<double> ilme_lambda_grid;    // empty disables ILME rows
  std::vector<double> elm_lambda_grid;     // shallow-fusion weights; empty
                                           // tunes ILME without an ELM
  int lm_steps = 800;                      // external-LM training budget
  int lm_batch = 8;
  LmConfig lm;                             // vocab_classes filled in
};

ExperimentConfig LoadExperimentConfig(const std::string& path);
void SaveExperimentConfig(const ExperimentConfig& cfg, const std::string& path);

// All generated data for one experiment, plus the featurizer built from it.
struct ExperimentData {
  PhonemeInventory inventory;
  Lexicon lexicon;
  Manifest source_train, source_dev, source_test;
  Manifest target_dev, target_val, target_text;
  Featurizer featurizer;
};

ExperimentData PrepareData(const ExperimentConfig& cfg);

// Beam-search every utterance, detokenize, score against the transcripts.
// Iterates in manifest order, so the report is deterministic.
// When `hyp_path` is non-empty the per-utterance hypotheses are written
// there as "id<TAB>words".
WerReport EvaluateWer(const UstrModel& model, const Manifest& manifest,
                      const Featurizer& feat, const FusionConfig& fusion,
                      const ExternalLm* elm = nullptr,
                      const std::string& hyp_path = "");

struct ResultRow {
  std::string variant;
  std::string split;
  double wer = 0.0;
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long reference_words = 0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  double chosen_lambda_ilm = 0.0;
  double chosen_lambda_elm = 0.0;
  std::map<std::string, double> stage_seconds;  // wall time per stage
  std::string results_csv;  // paths of the emitted files
  std::string results_md;
};

// Full pipeline: data -> base training -> (multi-step adaptation) ->
// (single-step training) -> (ILME tuning on target-dev) -> tables.
// A failing stage is rethrown as "experiment stage '<name>' failed: ...".
ExperimentResult RunExperiment(const ExperimentConfig& cfg);

// Representation grid: every (text unit, repeat) cell runs base training
// with that featurization and reports source-dev WER. Emits sweep.csv and
// sweep.md under cfg.out_dir.
struct SweepCell {
  TextUnit unit = TextUnit::kPhoneme;
  int repeat = 0;
  double source_dev_wer = 0.0;
};

std::vector<SweepCell> RunUnitSweep(const ExperimentConfig& cfg,
                                    const std::vector<TextUnit>& units,
                                    const std::vector<int>& repeats);

void WriteResultsCsv(const std::vector<ResultRow>& rows,
                     const std::string& path);
void WriteResultsMarkdown(const std::vector<ResultRow>& rows,
                          const std::string& path);

}  // namespace ustr

#endif  // USTR_EXPERIMENT_HPP
