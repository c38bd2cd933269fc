// core/src/training.cpp
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

#include "ustr/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace ustr {

namespace {

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

void ZeroTrainableGrads(UstrModel& model) {
  for (const auto& [name, t] : model.params.All())
    if (model.params.Trainable(name)) t->g.assign(t->v.size(), 0.0);
}

std::map<std::string, std::vector<double>> SnapshotPrefix(
    const ParamSet& params, const std::string& prefix) {
  std::map<std::string, std::vector<double>> snap;
  for (const auto& name : params.NamesWithPrefix(prefix))
    snap[name] = params.At(name)->v;
  return snap;
}

void AssertUnchanged(const ParamSet& params,
                     const std::map<std::string, std::vector<double>>& snap,
                     const std::string& what) {
  for (const auto& [name, values] : snap)
    if (params.At(name)->v != values)
      Fail("frozen parameter changed during " + what + ": " + name);
}

struct MetricsWriter {
  std::ofstream out;
  explicit MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    out.open(path);
    if (!out) Fail("cannot open metrics file: " + path);
    out << "step,loss,rnnt,ilmt,grad_norm,eval_wer\n";
  }
  void Write(const StepMetrics& m, double eval_wer) {
    if (!out.is_open()) return;
    out << m.step << "," << m.loss << "," << m.rnnt << "," << m.ilmt << ","
        << m.grad_norm << ",";
    if (eval_wer >= 0.0) out << eval_wer;
    out << "\n";
  }
};

TrainResult RunLoop(UstrModel& model, const TrainConfig& cfg,
                    const Featurizer& feat,
                    const std::function<std::vector<BatchItem>(Rng&)>& next_batch,
                    const EvalFn& eval_fn, const std::string& metrics_csv) {
  LossConfig loss_cfg;
  loss_cfg.ilmt_weight = cfg.ilmt_weight;
  AdamState adam;
  adam.cfg = cfg.optimizer;
  Rng rng(cfg.seed);
  MetricsWriter metrics(metrics_csv);
  TrainResult result;
  // Best-checkpoint selection: the lowest-dev-WER parameters seen during
  // training are restored at the end.
  double best_eval = -1.0;
  std::map<std::string, std::vector<double>> best_params;
  (void)feat;
  for (long step = 0; step < cfg.steps; ++step) {
    auto batch = next_batch(rng);
    double lr_scale =
        WarmupScale(step, cfg.steps, cfg.warmup_fraction) *
        DecayScale(step, cfg.steps, cfg.warmup_fraction, cfg.final_lr_scale);
    StepMetrics m = TrainStep(model, batch, loss_cfg, cfg.ilmt_enabled, adam,
                              lr_scale);
    m.step = step;
    if (step == 0) result.first_loss = m.loss;
    result.final_loss = m.loss;
    result.steps_run = step + 1;
    model.meta.step += 1;
    double eval_wer = -1.0;
    bool last = step + 1 == cfg.steps;
    if (eval_fn && cfg.eval_every > 0 &&
        ((step + 1) % cfg.eval_every == 0 || last)) {
      eval_wer = eval_fn(model);
      result.final_eval_wer = eval_wer;
      if (cfg.keep_best_eval &&
          (best_eval < 0.0 || eval_wer < best_eval)) {
        best_eval = eval_wer;
        best_params.clear();
        for (const auto& [name, t] : model.params.All())
          best_params[name] = t->v;
      }
    }
    metrics.Write(m, eval_wer);
    if (eval_wer >= 0.0 && cfg.stop_at_eval_wer >= 0.0 &&
        eval_wer <= cfg.stop_at_eval_wer)
      break;
  }
  if (cfg.keep_best_eval && best_eval >= 0.0) {
    for (auto& [name, values] : best_params)
      model.params.At(name)->v = values;
    result.final_eval_wer = best_eval;
  }
  return result;
}

}  // namespace

double WarmupScale(long step, int total_steps, double warmup_fraction) {
  long warmup = static_cast<long>(total_steps * warmup_fraction);
  if (warmup < 1 || step >= warmup) return 1.0;
  return static_cast<double>(step + 1) / static_cast<double>(warmup);
}

double DecayScale(long step, int total_steps, double warmup_fraction,
                  double final_scale) {
  if (final_scale >= 1.0) return 1.0;
  long warmup = static_cast<long>(total_steps * warmup_fraction);
  if (step < warmup) return 1.0;
  long span = total_steps - 1 - warmup;
  if (span <= 0) return final_scale;
  double frac =
      static_cast<double>(step - warmup) / static_cast<double>(span);
  return 1.0 + (final_scale - 1.0) * frac;
}

std::vector<int> Featurizer::LabelIds(
    const std::vector<std::string>& words) const {
  TokenSequence t;
  switch (label_unit) {
    case TextUnit::kGrapheme:
      t = GraphemeTokenize(words, label_vocab);
      break;
    case TextUnit::kSubword:
      t = BpeEncode(bpe, label_vocab, words);
      break;
    case TextUnit::kPhoneme:
      Fail("phoneme output units are not word-decodable");
  }
  return t.ids;
}

std::vector<std::string> Featurizer::LabelWords(
    const std::vector<int>& ids) const {
  TokenSequence t{ids};
  switch (label_unit) {
    case TextUnit::kGrapheme:
      return GraphemeDetokenize(t, label_vocab);
    case TextUnit::kSubword:
      return BpeDecode(t, label_vocab);
    case TextUnit::kPhoneme:
      Fail("phoneme output units are not word-decodable");
  }
  return {};
}

TokenSequence Featurizer::TextTokens(
    const std::vector<std::string>& words) const {
  switch (text_unit) {
    case TextUnit::kGrapheme:
      return GraphemeTokenize(words, text_vocab);
    case TextUnit::kSubword:
      return BpeEncode(bpe, text_vocab, words);
    case TextUnit::kPhoneme:
      return G2p(lexicon, text_vocab, words);
  }
  Fail("bad text unit");
}

TextFeatureSequence Featurizer::TextFeatures(
    const std::vector<std::string>& words, Rng& rng) const {
  return MaskThenRepeat(TextTokens(words), rep, text_vocab.mask_id, rng);
}

Matrix SpecAugment(const Matrix& audio, const SpecAugmentConfig& cfg, Rng& rng) {
  Matrix out = audio;
  if (cfg.max_time_width > 0 && audio.rows > cfg.max_time_width) {
    int width = rng.UniformInt(1, cfg.max_time_width);
    int start = rng.UniformInt(0, audio.rows - width);
    for (int t = start; t < start + width; ++t)
      for (int c = 0; c < audio.cols; ++c) out.At(t, c) = 0.0;
  }
  if (cfg.max_freq_width > 0 && audio.cols > cfg.max_freq_width) {
    int width = rng.UniformInt(1, cfg.max_freq_width);
    int start = rng.UniformInt(0, audio.cols - width);
    for (int t = 0; t < audio.rows; ++t)
      for (int c = start; c < start + width; ++c) out.At(t, c) = 0.0;
  }
  return out;
}

Sampler::Sampler(size_t size, uint64_t seed) : size_(size), rng_(seed) {
  if (size_ == 0) Fail("sampler: empty data source");
  Reshuffle();
}

void Sampler::Reshuffle() {
  order_.resize(size_);
  std::iota(order_.begin(), order_.end(), size_t{0});
  for (size_t i = size_; i > 1; --i) {
    size_t j = static_cast<size_t>(rng_.UniformInt(0, static_cast<int>(i) - 1));
    std::swap(order_[i - 1], order_[j]);
  }
  pos_ = 0;
}

size_t Sampler::Next() {
  if (pos_ >= order_.size()) Reshuffle();
  return order_[pos_++];
}

std::vector<Utterance> LoadUtterances(const Manifest& manifest) {
  std::vector<Utterance> out;
  out.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    Utterance u;
    u.id = rec.id;
    u.domain = rec.domain;
    u.transcript = rec.transcript;
    if (rec.audio_path) u.audio = LoadUtteranceAudio(manifest, rec);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<BatchItem> MakeBaseBatch(const std::vector<Utterance>& paired,
                                     Sampler& sampler, int batch_size, double p,
                                     const Featurizer& feat,
                                     const SpecAugmentConfig& aug, Rng& rng) {
  std::vector<BatchItem> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const Utterance& u = paired[sampler.Next()];
    if (!u.audio) Fail("base batch: utterance " + u.id + " has no audio");
    BatchItem item;
    item.labels = feat.LabelIds(u.transcript);
    if (rng.Bernoulli(p)) {
      item.modality = Modality::kText;
      item.text = feat.TextFeatures(u.transcript, rng);
    } else {
      item.modality = Modality::kSpeech;
      item.audio = SpecAugment(*u.audio, aug, rng);
    }
    batch.push_back(std::move(item));
  }
  return batch;
}

std::vector<BatchItem> MakeAdaptBatch(const std::vector<Utterance>& paired,
                                      Sampler& paired_sampler,
                                      const std::vector<Utterance>& text_only,
                                      Sampler& text_sampler, int batch_size,
                                      int ratio_paired, int ratio_text, double p,
                                      const Featurizer& feat,
                                      const SpecAugmentConfig& aug, Rng& rng) {
  if (paired.empty() || text_only.empty())
    Fail("adapt batch: both data sources must be non-empty");
  if (ratio_paired < 1 || ratio_text < 1)
    Fail("adapt batch: ratio parts must be positive");
  int paired_count = batch_size * ratio_paired / (ratio_paired + ratio_text);
  paired_count = std::max(1, std::min(batch_size - 1, paired_count));
  std::vector<BatchItem> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < paired_count; ++i) {
    const Utterance& u = paired[paired_sampler.Next()];
    if (!u.audio) Fail("adapt batch: utterance " + u.id + " has no audio");
    BatchItem item;
    item.labels = feat.LabelIds(u.transcript);
    if (rng.Bernoulli(p)) {
      item.modality = Modality::kText;
      item.text = feat.TextFeatures(u.transcript, rng);
    } else {
      item.modality = Modality::kSpeech;
      item.audio = SpecAugment(*u.audio, aug, rng);
    }
    batch.push_back(std::move(item));
  }
  for (int i = paired_count; i < batch_size; ++i) {
    const Utterance& u = text_only[text_sampler.Next()];
    BatchItem item;
    item.modality = Modality::kText;
    item.labels = feat.LabelIds(u.transcript);
    item.text = feat.TextFeatures(u.transcript, rng);
    batch.push_back(std::move(item));
  }
  return batch;
}

StepMetrics TrainStep(UstrModel& model, const std::vector<BatchItem>& batch,
                      const LossConfig& loss_cfg, bool ilmt_enabled,
                      AdamState& adam, double lr_scale) {
  if (batch.empty()) Fail("train_step: empty batch");
  StepMetrics metrics;
  std::vector<TensorPtr> losses;
  double rnnt_sum = 0.0, ilmt_sum = 0.0;
  for (const auto& item : batch) {
    TensorPtr enc = item.modality == Modality::kSpeech
                        ? SharedEncode(model, AudioEncode(model, item.audio))
                        : SharedEncode(model, TextEncode(model, item.text));
    TensorPtr pred = Predict(model, item.labels);
    TensorPtr joint = Join(model, enc, pred);
    TensorPtr rnnt = TransducerLossOp(joint, item.labels);
    rnnt_sum += rnnt->Item();
    TensorPtr item_loss = rnnt;
    if (ilmt_enabled) {
      TensorPtr ilmt = IlmtLoss(IlmLogits(model, pred), item.labels);
      ilmt_sum += ilmt->Item();
      item_loss = Add(rnnt, Scale(ilmt, loss_cfg.ilmt_weight));
    }
    losses.push_back(item_loss);
  }
  TensorPtr total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = Add(total, losses[i]);
  total = Scale(total, 1.0 / static_cast<double>(losses.size()));
  metrics.rnnt = rnnt_sum / static_cast<double>(batch.size());
  metrics.ilmt = ilmt_sum / static_cast<double>(batch.size());
  metrics.loss = total->Item();
  if (!std::isfinite(metrics.loss))
    Fail("train_step: non-finite loss on a batch of " +
         std::to_string(batch.size()) + " items (rnnt " +
         std::to_string(metrics.rnnt) + ")");
  ZeroTrainableGrads(model);
  Backward(total);
  double gnorm = 0.0;
  for (const auto& [name, t] : model.params.All())
    if (model.params.Trainable(name))
      for (double g : t->g) gnorm += g * g;
  metrics.grad_norm = std::sqrt(gnorm);
  AdamStep(model.params, adam, lr_scale);
  return metrics;
}

TrainResult TrainBase(UstrModel& model, const std::vector<Utterance>& paired,
                      const TrainConfig& cfg, const Featurizer& feat,
                      const EvalFn& eval_fn, const std::string& metrics_csv) {
  Sampler sampler(paired.size(), cfg.seed ^ 0xA5A5A5A5ull);
  auto next = [&](Rng& rng) {
    return MakeBaseBatch(paired, sampler, cfg.batch_size, cfg.swap_prob, feat,
                         cfg.augment, rng);
  };
  auto result = RunLoop(model, cfg, feat, next, eval_fn, metrics_csv);
  model.meta.stage = "base";
  return result;
}

TrainResult AdaptMultistep(UstrModel& model,
                           const std::vector<Utterance>& paired_source,
                           const std::vector<Utterance>& text_target,
                           const TrainConfig& cfg, const Featurizer& feat,
                           const EvalFn& eval_fn,
                           const std::string& metrics_csv) {
  if (model.meta.stage != "base")
    Fail("adapt_multistep: expected a base-stage checkpoint, got stage '" +
         model.meta.stage + "'");
  model.params.FreezePrefix(kAudioEncoderPrefix);
  model.params.FreezePrefix(kSharedEncoderPrefix);
  auto frozen_audio = SnapshotPrefix(model.params, kAudioEncoderPrefix);
  auto frozen_shared = SnapshotPrefix(model.params, kSharedEncoderPrefix);
  Sampler paired_sampler(paired_source.size(), cfg.seed ^ 0x1111ull);
  Sampler text_sampler(text_target.size(), cfg.seed ^ 0x2222ull);
  auto next = [&](Rng& rng) {
    return MakeAdaptBatch(paired_source, paired_sampler, text_target,
                          text_sampler, cfg.batch_size, cfg.ratio_paired,
                          cfg.ratio_text, cfg.swap_prob, feat, cfg.augment, rng);
  };
  auto result = RunLoop(model, cfg, feat, next, eval_fn, metrics_csv);
  AssertUnchanged(model.params, frozen_audio, "multi-step adaptation");
  AssertUnchanged(model.params, frozen_shared, "multi-step adaptation");
  model.meta.stage = "adapt_multistep";
  return result;
}

TrainResult TrainSinglestep(UstrModel& model,
                            const std::vector<Utterance>& paired_source,
                            const std::vector<Utterance>& text_target,
                            const TrainConfig& cfg, const Featurizer& feat,
                            const EvalFn& eval_fn,
                            const std::string& metrics_csv) {
  Sampler paired_sampler(paired_source.size(), cfg.seed ^ 0x3333ull);
  Sampler text_sampler(text_target.size(), cfg.seed ^ 0x4444ull);
  auto next = [&](Rng& rng) {
    return MakeAdaptBatch(paired_source, paired_sampler, text_target,
                          text_sampler, cfg.batch_size, cfg.ratio_paired,
                          cfg.ratio_text, cfg.swap_prob, feat, cfg.augment, rng);
  };
  auto result = RunLoop(model, cfg, feat, next, eval_fn, metrics_csv);
  model.meta.stage = "singlestep";
  return result;
}

double LmPerplexity(const ExternalLm& lm, const std::vector<Utterance>& corpus,
                    const Featurizer& feat) {
  double logp = 0.0;
  long tokens = 0;
  for (const auto& u : corpus) {
    auto ids = feat.LabelIds(u.transcript);
    auto scores = ElmScore(lm, ids);  // [U+1, V]
    int v = scores->shape[1];
    for (size_t i = 0; i < ids.size(); ++i) {
      logp += scores->v[i * static_cast<size_t>(v) + (ids[i] - 1)];
      ++tokens;
    }
  }
  return std::exp(-logp / static_cast<double>(std::max(1L, tokens)));
}

LmTrainResult TrainExternalLm(ExternalLm& lm,
                              const std::vector<Utterance>& text_corpus,
                              const Featurizer& feat, int steps, int batch_size,
                              uint64_t seed, const AdamConfig& opt) {
  if (text_corpus.empty()) Fail("train_external_lm: empty text corpus");
  LmTrainResult result;
  result.initial_perplexity = LmPerplexity(lm, text_corpus, feat);
  AdamState adam;
  adam.cfg = opt;
  Sampler sampler(text_corpus.size(), seed);
  for (int step = 0; step < steps; ++step) {
    std::vector<TensorPtr> losses;
    for (int i = 0; i < batch_size; ++i) {
      const Utterance& u = text_corpus[sampler.Next()];
      auto ids = feat.LabelIds(u.transcript);
      auto scores = ElmScore(lm, ids);
      auto rows = SliceRows(scores, 0, static_cast<int>(ids.size()));
      std::vector<int> shifted(ids.size());
      for (size_t k = 0; k < ids.size(); ++k) shifted[k] = ids[k] - 1;
      losses.push_back(Scale(ReduceMean(GatherPairs(rows, shifted)), -1.0));
    }
    TensorPtr total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = Add(total, losses[i]);
    total = Scale(total, 1.0 / static_cast<double>(losses.size()));
    for (const auto& [name, t] : lm.params.All())
      if (lm.params.Trainable(name)) t->g.assign(t->v.size(), 0.0);
    Backward(total);
    AdamStep(lm.params, adam, 1.0);
  }
  result.final_perplexity = LmPerplexity(lm, text_corpus, feat);
  return result;
}

}  // namespace ustr
