// core/include/ustr/model.hpp
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
// The transducer with separated audio/text front-ends and a shared
// encoder stack. The text encoder exists only for training; checkpoints
// can be saved without it and still decode speech.

#ifndef USTR_MODEL_HPP
#define USTR_MODEL_HPP

#include <optional>
#include <string>
#include <vector>

#include "ustr/corpus.hpp"
#include "ustr/nn.hpp"
#include "ustr/textfeat.hpp"

namespace ustr {

// Parameter path prefixes, used for freezing and checkpoint stripping.
inline constexpr const char* kAudioEncoderPrefix = "audio_encoder.";
inline constexpr const char* kTextEncoderPrefix = "text_encoder.";
inline constexpr const char* kSharedEncoderPrefix = "shared_encoder.";
inline constexpr const char* kPredictorPrefix = "predictor.";
inline constexpr const char* kJointerPrefix = "jointer.";

struct UstrConfig {
  int feature_dim = 16;    // D
  int model_dim = 64;      // d
  int shared_blocks = 2;
  int attention_heads = 2;
  int subsampling = 2;     // 2 or 4
  int conv_channels = 4;   // audio front-end channels
  int text_vocab_size = 0;   // text-feature vocabulary (mask included)
  int output_classes = 0;    // V + 1, blank at id 0
  int predictor_dim = 64;
  int predictor_layers = 1;
  int joint_hidden = 64;
  int conv_kernel = 7;       // depthwise kernel in shared blocks

  void Validate() const;
};

struct TrainingMeta {
  long step = 0;
  std::string stage = "init";  // init | base | adapt_multistep | singlestep
};

struct UstrModel {
  UstrConfig cfg;
  ParamSet params;
  TrainingMeta meta;
  bool has_text_encoder = true;
};

// Deterministic initialization; every submodule present.
UstrModel InitModel(const UstrConfig& cfg, uint64_t seed);

// Closed-form parameter count for a config (checked against enumeration).
size_t ExpectedParameterCount(const UstrConfig& cfg);

// Speech path: [T,D] -> [T', d] with T' = ceil(T / subsampling).
TensorPtr AudioEncode(const UstrModel& model, const Matrix& audio);
// Text path: embedding + one transformer block, length preserving.
TensorPtr TextEncode(const UstrModel& model, const TextFeatureSequence& text);
// Shared conformer-style stack, length preserving, used by both paths.
TensorPtr SharedEncode(const UstrModel& model, const TensorPtr& x);

// (U+1) predictor states; row 0 is the learned start state.
TensorPtr Predict(const UstrModel& model, const std::vector<int>& labels);
// Single recurrence step for incremental decoding. `state` holds one
// hidden vector per predictor layer; empty state means "start".
struct PredictorState {
  std::vector<TensorPtr> hidden;
};
PredictorState PredictorStart(const UstrModel& model);
// Consumes `token` (or the start symbol when token < 0): returns the new
// state; the joint-ready output vector is state.hidden.back().
PredictorState PredictorStep(const UstrModel& model, const PredictorState& state,
                             int token);

// enc [T,d] x pred [U+1,dp] -> logits [T, U+1, V+1].
TensorPtr Join(const UstrModel& model, const TensorPtr& enc,
               const TensorPtr& pred);
// Encoder contribution zeroed: [U+1, V+1], independent of any audio.
TensorPtr IlmLogits(const UstrModel& model, const TensorPtr& pred);

// ---- external LM ----
struct LmConfig {
  int vocab_classes = 0;  // V + 1 (blank id unused, kept for shared ids)
  int embed_dim = 32;
  int hidden_dim = 64;
};

struct ExternalLm {
  LmConfig cfg;
  ParamSet params;
};

ExternalLm InitExternalLm(const LmConfig& cfg, uint64_t seed);
// Per-prefix next-token log-probabilities over labels 1..V, rows
// log-normalized: [U+1, V] for label sequence of length U.
TensorPtr ElmScore(const ExternalLm& lm, const std::vector<int>& labels);
struct LmState {
  TensorPtr hidden;
};
LmState ElmStart(const ExternalLm& lm);
LmState ElmStep(const ExternalLm& lm, const LmState& state, int token,
                TensorPtr* log_probs);  // log_probs over labels 1..V

// ---- checkpoints ----
void SaveCheckpoint(const UstrModel& model, const std::string& path,
                    bool strip_text_encoder = false);
UstrModel LoadCheckpoint(const std::string& path);
void SaveLmCheckpoint(const ExternalLm& lm, const std::string& path);
ExternalLm LoadLmCheckpoint(const std::string& path);

UstrConfig LoadUstrConfig(const std::string& path);
void SaveUstrConfig(const UstrConfig& cfg, const std::string& path);

}  // namespace ustr

#endif  // USTR_MODEL_HPP
