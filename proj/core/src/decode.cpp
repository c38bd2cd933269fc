// core/src/decode.cpp
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

#include "ustr/decode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ustr/loss.hpp"

namespace ustr {

namespace {

constexpr int kMaxLabelsPerFrameGreedy = 10;

double LogAdd(double a, double b) {
  double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

// Log-softmax of the joint output for a single (frame, predictor) pair.
std::vector<double> JointLogProbs(const UstrModel& model,
                                  const TensorPtr& enc_proj_row,
                                  const TensorPtr& pred_proj_row) {
  const ParamSet& p = model.params;
  auto z = Tanh(AddBias(
      Reshape(Add(enc_proj_row, pred_proj_row), {1, model.cfg.joint_hidden}),
      p.At("jointer.bias")));
  auto logits = Linear(p, "jointer.out", z);
  auto lp = LogSoftmax(logits);
  return lp->v;
}

// ILM next-token log-probs, renormalized over labels (blank excluded).
std::vector<double> IlmLogProbs(const UstrModel& model,
                                const TensorPtr& pred_row) {
  auto q = Reshape(MatMul(Reshape(pred_row, {1, model.cfg.predictor_dim}),
                          model.params.At("jointer.pred.w")),
                   {1, model.cfg.joint_hidden});
  auto z = Tanh(AddBias(q, model.params.At("jointer.bias")));
  auto logits = Linear(model.params, "jointer.out", z);
  auto lp = LogSoftmax(SliceCols(logits, 1, model.cfg.output_classes));
  return lp->v;
}

TensorPtr ProjectEncoder(const UstrModel& model, const Matrix& audio) {
  auto enc = SharedEncode(model, AudioEncode(model, audio));
  return MatMul(enc, model.params.At("jointer.enc.w"));
}

struct BeamEntry {
  Hypothesis hyp;
  PredictorState pred_state;
  TensorPtr pred_proj;  // [joint_hidden] projection of the predictor output
  LmState lm_state;
  bool has_lm = false;
  std::vector<double> elm_logp;  // next-token log-probs over labels 1..V
};

TensorPtr PredProj(const UstrModel& model, const PredictorState& s) {
  return Reshape(MatMul(Reshape(s.hidden.back(), {1, model.cfg.predictor_dim}),
                        model.params.At("jointer.pred.w")),
                 {model.cfg.joint_hidden});
}

}  // namespace

std::vector<int> GreedyDecode(const UstrModel& model, const Matrix& audio) {
  TensorPtr enc_proj = ProjectEncoder(model, audio);
  int t_len = enc_proj->shape[0];
  PredictorState state = PredictorStart(model);
  TensorPtr pred_proj = PredProj(model, state);
  std::vector<int> tokens;
  for (int t = 0; t < t_len; ++t) {
    for (int emitted = 0; emitted < kMaxLabelsPerFrameGreedy; ++emitted) {
      auto lp = JointLogProbs(model, Row(enc_proj, t), pred_proj);
      int best = static_cast<int>(
          std::max_element(lp.begin(), lp.end()) - lp.begin());
      if (best == kBlankId) break;
      tokens.push_back(best);
      state = PredictorStep(model, state, best);
      pred_proj = PredProj(model, state);
    }
  }
  return tokens;
}

std::vector<Hypothesis> BeamSearch(const UstrModel& model, const Matrix& audio,
                                   const FusionConfig& fusion,
                                   const ExternalLm* elm) {
  if (fusion.beam_width < 1)
    throw std::runtime_error("beam_search: beam width must be >= 1");
  TensorPtr enc_proj = ProjectEncoder(model, audio);
  int t_len = enc_proj->shape[0];
  int classes = model.cfg.output_classes;
  size_t max_labels = static_cast<size_t>(2 * t_len);

  BeamEntry start;
  start.pred_state = PredictorStart(model);
  start.pred_proj = PredProj(model, start.pred_state);
  if (elm) {
    start.has_lm = true;
    TensorPtr lp;
    start.lm_state = ElmStart(*elm);
    // Start state scores the first token.
    LmState fresh;
    fresh.hidden = Constant({elm->cfg.hidden_dim}, 0.0);
    start.lm_state = ElmStep(*elm, fresh, -1, &lp);
    start.elm_logp = lp->v;
  }

  auto partial_rank = [&fusion](const BeamEntry& e) {
    return FusedScore(e.hyp, fusion);
  };
  auto merge_into = [](std::vector<BeamEntry>& pool, BeamEntry&& e) {
    for (auto& existing : pool)
      if (existing.hyp.tokens == e.hyp.tokens) {
        existing.hyp.score_am = LogAdd(existing.hyp.score_am, e.hyp.score_am);
        return;
      }
    pool.push_back(std::move(e));
  };

  std::vector<BeamEntry> beam{std::move(start)};
  for (int t = 0; t < t_len; ++t) {
    TensorPtr enc_row = Row(enc_proj, t);
    std::vector<BeamEntry> next_frame;
    std::vector<BeamEntry> frontier = std::move(beam);
    while (!frontier.empty()) {
      std::vector<BeamEntry> label_expanded;
      for (auto& entry : frontier) {
        auto lp = JointLogProbs(model, enc_row, entry.pred_proj);
        // Blank: advance to the next frame, merging duplicate prefixes.
        BeamEntry blank = entry;
        blank.hyp.score_am += lp[kBlankId];
        merge_into(next_frame, std::move(blank));
        if (entry.hyp.tokens.size() >= max_labels) continue;
        std::vector<double> ilm_lp;
        if (fusion.lambda_ilm != 0.0)
          ilm_lp = IlmLogProbs(model, entry.pred_state.hidden.back());
        for (int k = 1; k < classes; ++k) {
          BeamEntry ext = entry;
          ext.hyp.tokens.push_back(k);
          ext.hyp.score_am += lp[k];
          if (!ilm_lp.empty()) ext.hyp.score_ilm += ilm_lp[k - 1];
          if (ext.has_lm) ext.hyp.score_elm += ext.elm_logp[k - 1];
          ext.pred_state = PredictorStep(model, ext.pred_state, k);
          ext.pred_proj = PredProj(model, ext.pred_state);
          if (ext.has_lm) {
            TensorPtr lmp;
            ext.lm_state = ElmStep(*elm, ext.lm_state, k, &lmp);
            ext.elm_logp = lmp->v;
          }
          label_expanded.push_back(std::move(ext));
        }
      }
      std::sort(label_expanded.begin(), label_expanded.end(),
                [&](const BeamEntry& a, const BeamEntry& b) {
                  return partial_rank(a) > partial_rank(b);
                });
      if (static_cast<int>(label_expanded.size()) > fusion.beam_width)
        label_expanded.resize(static_cast<size_t>(fusion.beam_width));
      frontier = std::move(label_expanded);
    }
    std::sort(next_frame.begin(), next_frame.end(),
              [&](const BeamEntry& a, const BeamEntry& b) {
                return partial_rank(a) > partial_rank(b);
              });
    if (static_cast<int>(next_frame.size()) > fusion.beam_width)
      next_frame.resize(static_cast<size_t>(fusion.beam_width));
    beam = std::move(next_frame);
  }

  std::sort(beam.begin(), beam.end(),
            [&](const BeamEntry& a, const BeamEntry& b) {
              return FusedScore(a.hyp, fusion) > FusedScore(b.hyp, fusion);
            });
  std::vector<Hypothesis> out;
  out.reserve(beam.size());
  for (auto& e : beam) out.push_back(std::move(e.hyp));
  return out;
}

std::map<std::string, UtteranceDecode> BatchDecode(const UstrModel& model,
                                                   const Manifest& manifest,
                                                   const FusionConfig& fusion,
                                                   const ExternalLm* elm) {
  std::vector<std::string> missing;
  for (const auto& rec : manifest.records)
    if (!rec.audio_path) missing.push_back(rec.id);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw std::runtime_error("batch_decode: utterances without audio: " + ids);
  }
  std::map<std::string, UtteranceDecode> out;
  for (const auto& rec : manifest.records) {
    Matrix audio = LoadUtteranceAudio(manifest, rec);
    auto hyps = BeamSearch(model, audio, fusion, elm);
    UtteranceDecode d;
    d.id = rec.id;
    if (!hyps.empty()) d.best = hyps.front();
    out[rec.id] = std::move(d);
  }
  return out;
}

}  // namespace ustr
