// core/include/ustr/training.hpp
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
// Mixed-modality batching, augmentation, and the training recipes:
// base training with unspoken-text swapping, multi-step adaptation with
// frozen encoders, single-step training from scratch, and external LM
// training.

#ifndef USTR_TRAINING_HPP
#define USTR_TRAINING_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ustr/corpus.hpp"
#include "ustr/loss.hpp"
#include "ustr/model.hpp"
#include "ustr/textfeat.hpp"

namespace ustr {

// Bundles label tokenization (output vocabulary) and text featurization
// (text-encoder input) for one experiment.
struct Featurizer {
  TextUnit label_unit = TextUnit::kGrapheme;  // grapheme or subword only
  TextVocab label_vocab;                       // reserved id 0 = blank
  TextUnit text_unit = TextUnit::kPhoneme;
  TextVocab text_vocab;                        // reserved id 0 = mask
  TextRepConfig rep;
  BpeModel bpe;      // used when either unit is subword
  Lexicon lexicon;   // used when text unit is phoneme

  std::vector<int> LabelIds(const std::vector<std::string>& words) const;
  std::vector<std::string> LabelWords(const std::vector<int>& ids) const;
  TokenSequence TextTokens(const std::vector<std::string>& words) const;
  TextFeatureSequence TextFeatures(const std::vector<std::string>& words,
                                   Rng& rng) const;
};

enum class Modality { kSpeech, kText };

struct BatchItem {
  Modality modality = Modality::kSpeech;
  Matrix audio;                 // speech items
  TextFeatureSequence text;     // text items
  std::vector<int> labels;      // output-vocabulary ids, no blank
};

struct SpecAugmentConfig {
  int max_time_width = 0;
  int max_freq_width = 0;
};

// One time mask and one frequency mask, zeroed; widths 0 disable.
Matrix SpecAugment(const Matrix& audio, const SpecAugmentConfig& cfg, Rng& rng);

struct TrainConfig {
  int batch_size = 16;
  int steps = 2000;
  uint64_t seed = 1;
  double swap_prob = 0.15;     // unspoken-text probability p
  int ratio_paired = 1;        // adaptation batch composition
  int ratio_text = 1;
  bool ilmt_enabled = false;
  double ilmt_weight = 0.2;
  SpecAugmentConfig augment;
  AdamConfig optimizer;
  double warmup_fraction = 0.1;
  double final_lr_scale = 1.0;  // linear decay target after warmup, 1 = off
  int eval_every = 0;          // 0 disables periodic eval
  double stop_at_eval_wer = -1.0;  // early stop threshold, < 0 disables
  bool keep_best_eval = false;     // restore the lowest-eval-WER params
};

// Linear ramp over the first warmup_fraction of total_steps, then 1.0.
// step is zero-based.
double WarmupScale(long step, int total_steps, double warmup_fraction);

// Linear decay from 1.0 after warmup down to final_scale at the last step;
// final_scale >= 1.0 disables the decay.
double DecayScale(long step, int total_steps, double warmup_fraction,
                  double final_scale);

// Deterministic per-epoch shuffled order over [0, size).
class Sampler {
 public:
  Sampler(size_t size, uint64_t seed);
  size_t Next();

 private:
  void Reshuffle();
  size_t size_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
  Rng rng_;
};

std::vector<Utterance> LoadUtterances(const Manifest& manifest);

// Paired data only; each sample independently becomes a text item with
// probability p (audio discarded for this step).
std::vector<BatchItem> MakeBaseBatch(const std::vector<Utterance>& paired,
                                     Sampler& sampler, int batch_size, double p,
                                     const Featurizer& feat,
                                     const SpecAugmentConfig& aug, Rng& rng);

// ratio_paired : ratio_text split between paired source items (still
// subject to the p swap) and text-only target items.
std::vector<BatchItem> MakeAdaptBatch(const std::vector<Utterance>& paired,
                                      Sampler& paired_sampler,
                                      const std::vector<Utterance>& text_only,
                                      Sampler& text_sampler, int batch_size,
                                      int ratio_paired, int ratio_text, double p,
                                      const Featurizer& feat,
                                      const SpecAugmentConfig& aug, Rng& rng);

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double rnnt = 0.0;
  double ilmt = 0.0;
  double grad_norm = 0.0;
};

// Forward each item along its modality path, average the total loss,
// backward, Adam update excluding frozen parameters.
StepMetrics TrainStep(UstrModel& model, const std::vector<BatchItem>& batch,
                      const LossConfig& loss_cfg, bool ilmt_enabled,
                      AdamState& adam, double lr_scale);

using EvalFn = std::function<double(const UstrModel&)>;

struct TrainResult {
  long steps_run = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::optional<double> final_eval_wer;
};

// Base recipe: paired data with the p swap; stage tag "base".
TrainResult TrainBase(UstrModel& model, const std::vector<Utterance>& paired,
                      const TrainConfig& cfg, const Featurizer& feat,
                      const EvalFn& eval_fn, const std::string& metrics_csv);

// Multi-step stage 2: audio and shared encoders frozen (bit-identity
// asserted), mixed paired/text-only batches; stage tag "adapt_multistep".
TrainResult AdaptMultistep(UstrModel& model,
                           const std::vector<Utterance>& paired_source,
                           const std::vector<Utterance>& text_target,
                           const TrainConfig& cfg, const Featurizer& feat,
                           const EvalFn& eval_fn,
                           const std::string& metrics_csv);

// Single-step recipe: fresh random init, mixed batches from step 0,
// nothing frozen; stage tag "singlestep".
TrainResult TrainSinglestep(UstrModel& model,
                            const std::vector<Utterance>& paired_source,
                            const std::vector<Utterance>& text_target,
                            const TrainConfig& cfg, const Featurizer& feat,
                            const EvalFn& eval_fn,
                            const std::string& metrics_csv);

struct LmTrainResult {
  double initial_perplexity = 0.0;
  double final_perplexity = 0.0;
};

// Next-token cross-entropy over output-vocabulary sequences.
LmTrainResult TrainExternalLm(ExternalLm& lm,
                              const std::vector<Utterance>& text_corpus,
                              const Featurizer& feat, int steps, int batch_size,
                              uint64_t seed, const AdamConfig& opt);

double LmPerplexity(const ExternalLm& lm,
                    const std::vector<Utterance>& corpus,
                    const Featurizer& feat);

}  // namespace ustr

#endif  // USTR_TRAINING_HPP
