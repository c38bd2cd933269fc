// core/src/model.cpp
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

#include "ustr/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ustr/loss.hpp"

namespace ustr {

namespace {

using nlohmann::json;

constexpr char kCkptMagic[8] = {'U', 'S', 'T', 'R', 'C', 'K', 'P', '1'};
constexpr char kLmMagic[8] = {'U', 'S', 'T', 'R', 'L', 'M', '0', '1'};

[[noreturn]] void Fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

json ConfigToJson(const UstrConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"model_dim", c.model_dim},
              {"shared_blocks", c.shared_blocks},
              {"attention_heads", c.attention_heads},
              {"subsampling", c.subsampling},
              {"conv_channels", c.conv_channels},
              {"text_vocab_size", c.text_vocab_size},
              {"output_classes", c.output_classes},
              {"predictor_dim", c.predictor_dim},
              {"predictor_layers", c.predictor_layers},
              {"joint_hidden", c.joint_hidden},
              {"conv_kernel", c.conv_kernel}};
}

UstrConfig ConfigFromJson(const json& j) {
  UstrConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.shared_blocks = j.at("shared_blocks").get<int>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.subsampling = j.at("subsampling").get<int>();
  c.conv_channels = j.at("conv_channels").get<int>();
  c.text_vocab_size = j.at("text_vocab_size").get<int>();
  c.output_classes = j.at("output_classes").get<int>();
  c.predictor_dim = j.at("predictor_dim").get<int>();
  c.predictor_layers = j.at("predictor_layers").get<int>();
  c.joint_hidden = j.at("joint_hidden").get<int>();
  c.conv_kernel = j.value("conv_kernel", 7);
  return c;
}

void WriteString(std::ofstream& out, const std::string& s) {
  uint64_t n = s.size();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(s.data(), static_cast<std::streamsize>(n));
}

std::string ReadString(std::ifstream& in) {
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in) Fail("checkpoint: truncated string header");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) Fail("checkpoint: truncated string payload");
  return s;
}

void WriteParams(std::ofstream& out, const ParamSet& params,
                 const std::string& skip_prefix) {
  uint64_t count = 0;
  for (const auto& [name, _] : params.All())
    if (skip_prefix.empty() || name.rfind(skip_prefix, 0) != 0) ++count;
  out.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& [name, t] : params.All()) {
    if (!skip_prefix.empty() && name.rfind(skip_prefix, 0) == 0) continue;
    WriteString(out, name);
    uint32_t ndim = static_cast<uint32_t>(t->shape.size());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int d : t->shape) {
      int32_t di = d;
      out.write(reinterpret_cast<const char*>(&di), 4);
    }
    out.write(reinterpret_cast<const char*>(t->v.data()),
              static_cast<std::streamsize>(t->v.size() * 8));
  }
}

// Overwrites values of existing parameters; returns the set of loaded names.
std::set<std::string> ReadParamsInto(std::ifstream& in, ParamSet& params) {
  uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  std::set<std::string> seen;
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = ReadString(in);
    uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    std::vector<int> shape(ndim);
    for (auto& d : shape) {
      int32_t di = 0;
      in.read(reinterpret_cast<char*>(&di), 4);
      d = di;
    }
    if (!params.Has(name)) Fail("checkpoint: unexpected parameter " + name);
    TensorPtr t = params.At(name);
    if (t->shape != shape) Fail("checkpoint: shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(t->v.data()),
            static_cast<std::streamsize>(t->v.size() * 8));
    if (!in) Fail("checkpoint: truncated tensor " + name);
    seen.insert(name);
  }
  return seen;
}

TensorPtr MatrixToTensor(const Matrix& m) {
  return Tensor::FromValues({m.rows, m.cols}, m.v);
}

// Pre-norm transformer feed-forward with expansion 4.
TensorPtr FeedForward(const ParamSet& p, const std::string& prefix,
                      const TensorPtr& x) {
  return Linear(p, prefix + ".ff2", Relu(Linear(p, prefix + ".ff1", x)));
}

}  // namespace

void UstrConfig::Validate() const {
  if (feature_dim < 1 || model_dim < 1 || shared_blocks < 1)
    Fail("ustr config: bad dimensions");
  if (subsampling != 2 && subsampling != 4)
    Fail("ustr config: subsampling must be 2 or 4");
  if (model_dim % attention_heads != 0)
    Fail("ustr config: model_dim not divisible by attention_heads");
  if (text_vocab_size < 2 || output_classes < 2)
    Fail("ustr config: vocabulary sizes unset");
  if (predictor_layers < 1 || predictor_dim < 1 || joint_hidden < 1)
    Fail("ustr config: bad predictor/jointer dims");
}

UstrModel InitModel(const UstrConfig& cfg, uint64_t seed) {
  cfg.Validate();
  UstrModel model;
  model.cfg = cfg;
  Rng rng(seed);
  ParamSet& p = model.params;
  int d = cfg.model_dim, c = cfg.conv_channels;

  // Audio front-end.
  p.Add("audio_encoder.conv0.w", InitUniform({c, 1, 3, 3}, 9, rng));
  if (cfg.subsampling == 4)
    p.Add("audio_encoder.conv1.w", InitUniform({c, c, 3, 3}, 9 * c, rng));
  AddLinearParams(p, "audio_encoder.proj", c * cfg.feature_dim, d, rng);

  // Text front-end: embedding + one transformer block.
  p.Add("text_encoder.embed", InitUniform({cfg.text_vocab_size, d}, d, rng));
  AddLayerNormParams(p, "text_encoder.ln1", d);
  AddAttentionParams(p, "text_encoder.attn", d, rng);
  AddLayerNormParams(p, "text_encoder.ln2", d);
  AddLinearParams(p, "text_encoder.ff1", d, 4 * d, rng);
  AddLinearParams(p, "text_encoder.ff2", 4 * d, d, rng);

  // Shared stack.
  for (int b = 0; b < cfg.shared_blocks; ++b) {
    std::string pre = std::string(kSharedEncoderPrefix) + "block" +
                      std::to_string(b);
    AddLayerNormParams(p, pre + ".ln_att", d);
    AddAttentionParams(p, pre + ".attn", d, rng);
    AddLayerNormParams(p, pre + ".ln_conv", d);
    p.Add(pre + ".dwconv.w", InitUniform({d, cfg.conv_kernel}, cfg.conv_kernel, rng));
    AddLinearParams(p, pre + ".pwconv", d, d, rng);
    AddLayerNormParams(p, pre + ".ln_ff", d);
    AddLinearParams(p, pre + ".ff1", d, 4 * d, rng);
    AddLinearParams(p, pre + ".ff2", 4 * d, d, rng);
  }

  // Predictor: embedding (row 0 doubles as the start symbol) + GRU stack.
  p.Add("predictor.embed",
        InitUniform({cfg.output_classes, cfg.predictor_dim}, cfg.predictor_dim, rng));
  for (int l = 0; l < cfg.predictor_layers; ++l)
    AddGruParams(p, "predictor.gru" + std::to_string(l), cfg.predictor_dim,
                 cfg.predictor_dim, rng);

  // Jointer.
  p.Add("jointer.enc.w", InitUniform({d, cfg.joint_hidden}, d, rng));
  p.Add("jointer.pred.w",
        InitUniform({cfg.predictor_dim, cfg.joint_hidden}, cfg.predictor_dim, rng));
  p.Add("jointer.bias", InitZeros({cfg.joint_hidden}));
  AddLinearParams(p, "jointer.out", cfg.joint_hidden, cfg.output_classes, rng);

  return model;
}

size_t ExpectedParameterCount(const UstrConfig& cfg) {
  size_t d = cfg.model_dim, c = cfg.conv_channels, h = cfg.joint_hidden;
  size_t dp = cfg.predictor_dim, v1 = cfg.output_classes;
  size_t n = 0;
  n += c * 9;                                    // conv0
  if (cfg.subsampling == 4) n += c * c * 9;      // conv1
  n += c * cfg.feature_dim * d + d;              // proj
  n += static_cast<size_t>(cfg.text_vocab_size) * d;  // text embed
  n += 2 * d + 4 * (d * d + d) + 2 * d;          // ln1, attn, ln2
  n += d * 4 * d + 4 * d + 4 * d * d + d;        // ff1, ff2
  n += static_cast<size_t>(cfg.shared_blocks) *
       (6 * d + 4 * (d * d + d) + d * cfg.conv_kernel + d * d + d +
        d * 4 * d + 4 * d + 4 * d * d + d);
  n += v1 * dp;                                  // predictor embed
  n += static_cast<size_t>(cfg.predictor_layers) * 3 * (dp * dp + dp * dp + dp);
  n += d * h + dp * h + h + h * v1 + v1;         // jointer
  return n;
}

TensorPtr AudioEncode(const UstrModel& model, const Matrix& audio) {
  const UstrConfig& cfg = model.cfg;
  if (audio.cols != cfg.feature_dim)
    Fail("audio_encode: feature dim " + std::to_string(audio.cols) +
         " does not match config dim " + std::to_string(cfg.feature_dim));
  if (audio.rows < cfg.subsampling)
    Fail("audio_encode: utterance shorter than subsampling factor");
  auto x = Tensor::FromValues({1, audio.rows, audio.cols}, audio.v);
  x = Relu(Conv2d(x, model.params.At("audio_encoder.conv0.w"), 2, 1, 1, 1));
  if (cfg.subsampling == 4)
    x = Relu(Conv2d(x, model.params.At("audio_encoder.conv1.w"), 2, 1, 1, 1));
  // [C,T',D] -> [T', D*C] frame-major, then project to model_dim.
  int t_out = x->shape[1];
  x = Reshape(x, {cfg.conv_channels, t_out * cfg.feature_dim});
  x = Transpose(x);
  x = Reshape(x, {t_out, cfg.feature_dim * cfg.conv_channels});
  return Linear(model.params, "audio_encoder.proj", x);
}

TensorPtr TextEncode(const UstrModel& model, const TextFeatureSequence& text) {
  if (!model.has_text_encoder)
    Fail("text_encode: text encoder absent from this checkpoint");
  const ParamSet& p = model.params;
  int d = model.cfg.model_dim;
  for (int id : text.ids)
    if (id < 0 || id >= model.cfg.text_vocab_size)
      Fail("text_encode: token id " + std::to_string(id) + " out of range");
  auto x = EmbeddingLookup(p.At("text_encoder.embed"), text.ids);
  x = Add(x, SinusoidalPositions(static_cast<int>(text.ids.size()), d));
  x = Add(x, MultiHeadAttention(p, "text_encoder.attn",
                                LayerNormed(p, "text_encoder.ln1", x),
                                model.cfg.attention_heads));
  x = Add(x, FeedForward(p, "text_encoder",
                         LayerNormed(p, "text_encoder.ln2", x)));
  return x;
}

TensorPtr SharedEncode(const UstrModel& model, const TensorPtr& x_in) {
  const ParamSet& p = model.params;
  if (x_in->shape.size() != 2 || x_in->shape[1] != model.cfg.model_dim)
    Fail("shared_encode: input dim does not match model_dim");
  TensorPtr x = Add(x_in, SinusoidalPositions(x_in->shape[0], model.cfg.model_dim));
  for (int b = 0; b < model.cfg.shared_blocks; ++b) {
    std::string pre = std::string(kSharedEncoderPrefix) + "block" +
                      std::to_string(b);
    x = Add(x, MultiHeadAttention(p, pre + ".attn",
                                  LayerNormed(p, pre + ".ln_att", x),
                                  model.cfg.attention_heads));
    auto conv_in = LayerNormed(p, pre + ".ln_conv", x);
    x = Add(x, Linear(p, pre + ".pwconv",
                      DepthwiseConv1d(conv_in, p.At(pre + ".dwconv.w"))));
    x = Add(x, FeedForward(p, pre, LayerNormed(p, pre + ".ln_ff", x)));
  }
  return x;
}

TensorPtr Predict(const UstrModel& model, const std::vector<int>& labels) {
  const ParamSet& p = model.params;
  std::vector<int> inputs;
  inputs.push_back(kBlankId);  // learned start symbol
  for (int y : labels) {
    if (y == kBlankId) Fail("predict: blank id in label sequence");
    if (y < 0 || y >= model.cfg.output_classes)
      Fail("predict: label id out of range");
    inputs.push_back(y);
  }
  TensorPtr x = EmbeddingLookup(p.At("predictor.embed"), inputs);
  for (int l = 0; l < model.cfg.predictor_layers; ++l)
    x = GruSequence(p, "predictor.gru" + std::to_string(l), x,
                    model.cfg.predictor_dim);
  return x;
}

PredictorState PredictorStart(const UstrModel& model) {
  PredictorState s;
  for (int l = 0; l < model.cfg.predictor_layers; ++l)
    s.hidden.push_back(Constant({model.cfg.predictor_dim}, 0.0));
  // Feed the start symbol so hidden.back() matches Predict row 0.
  return PredictorStep(model, s, -1);
}

PredictorState PredictorStep(const UstrModel& model, const PredictorState& state,
                             int token) {
  const ParamSet& p = model.params;
  int id = token < 0 ? kBlankId : token;
  if (id >= model.cfg.output_classes) Fail("predictor_step: token out of range");
  TensorPtr x =
      Reshape(EmbeddingLookup(p.At("predictor.embed"), {id}),
              {model.cfg.predictor_dim});
  PredictorState next;
  for (int l = 0; l < model.cfg.predictor_layers; ++l) {
    x = GruCell(p, "predictor.gru" + std::to_string(l), x, state.hidden[l]);
    next.hidden.push_back(x);
  }
  return next;
}

TensorPtr Join(const UstrModel& model, const TensorPtr& enc,
               const TensorPtr& pred) {
  const ParamSet& p = model.params;
  auto e = MatMul(enc, p.At("jointer.enc.w"));
  auto q = MatMul(pred, p.At("jointer.pred.w"));
  auto z = Tanh(JointCombine(e, q, p.At("jointer.bias")));
  int t = enc->shape[0], u1 = pred->shape[0];
  auto flat = Reshape(z, {t * u1, model.cfg.joint_hidden});
  auto logits = Linear(p, "jointer.out", flat);
  return Reshape(logits, {t, u1, model.cfg.output_classes});
}

TensorPtr IlmLogits(const UstrModel& model, const TensorPtr& pred) {
  const ParamSet& p = model.params;
  auto q = MatMul(pred, p.At("jointer.pred.w"));
  auto z = Tanh(AddBias(q, p.At("jointer.bias")));
  return Linear(p, "jointer.out", z);
}

ExternalLm InitExternalLm(const LmConfig& cfg, uint64_t seed) {
  if (cfg.vocab_classes < 2) Fail("lm config: vocab_classes unset");
  ExternalLm lm;
  lm.cfg = cfg;
  Rng rng(seed);
  lm.params.Add("elm.embed",
                InitUniform({cfg.vocab_classes, cfg.embed_dim}, cfg.embed_dim, rng));
  AddGruParams(lm.params, "elm.gru", cfg.embed_dim, cfg.hidden_dim, rng);
  AddLinearParams(lm.params, "elm.out", cfg.hidden_dim, cfg.vocab_classes - 1,
                  rng);
  return lm;
}

TensorPtr ElmScore(const ExternalLm& lm, const std::vector<int>& labels) {
  std::vector<int> inputs;
  inputs.push_back(0);  // start symbol (blank slot reused)
  for (int y : labels) {
    if (y < 1 || y >= lm.cfg.vocab_classes)
      Fail("elm_score: label id out of range");
    inputs.push_back(y);
  }
  TensorPtr x = EmbeddingLookup(lm.params.At("elm.embed"), inputs);
  x = GruSequence(lm.params, "elm.gru", x, lm.cfg.hidden_dim);
  return LogSoftmax(Linear(lm.params, "elm.out", x));
}

LmState ElmStart(const ExternalLm& lm) {
  LmState s;
  s.hidden = Constant({lm.cfg.hidden_dim}, 0.0);
  return s;
}

LmState ElmStep(const ExternalLm& lm, const LmState& state, int token,
                TensorPtr* log_probs) {
  int id = token < 0 ? 0 : token;
  TensorPtr x = Reshape(EmbeddingLookup(lm.params.At("elm.embed"), {id}),
                        {lm.cfg.embed_dim});
  LmState next;
  next.hidden = GruCell(lm.params, "elm.gru", x, state.hidden);
  if (log_probs) {
    auto h = Reshape(next.hidden, {1, lm.cfg.hidden_dim});
    *log_probs = Reshape(LogSoftmax(Linear(lm.params, "elm.out", h)),
                         {lm.cfg.vocab_classes - 1});
  }
  return next;
}

void SaveCheckpoint(const UstrModel& model, const std::string& path,
                    bool strip_text_encoder) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail("cannot open checkpoint for writing: " + path);
  out.write(kCkptMagic, 8);
  json meta = {{"step", model.meta.step},
               {"stage", model.meta.stage},
               {"has_text_encoder",
                model.has_text_encoder && !strip_text_encoder}};
  WriteString(out, ConfigToJson(model.cfg).dump());
  WriteString(out, meta.dump());
  bool strip = strip_text_encoder || !model.has_text_encoder;
  WriteParams(out, model.params, strip ? kTextEncoderPrefix : "");
}

UstrModel LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    Fail("checkpoint " + path + ": bad magic or version");
  UstrConfig cfg;
  json meta;
  try {
    cfg = ConfigFromJson(json::parse(ReadString(in)));
    meta = json::parse(ReadString(in));
  } catch (const std::exception& e) {
    Fail("checkpoint " + path + ": corrupt header: " + e.what());
  }
  UstrModel model = InitModel(cfg, 0);
  model.meta.step = meta.value("step", 0L);
  model.meta.stage = meta.value("stage", "init");
  model.has_text_encoder = meta.value("has_text_encoder", true);
  if (!model.has_text_encoder)
    for (const auto& name : model.params.NamesWithPrefix(kTextEncoderPrefix))
      model.params.Remove(name);
  auto seen = ReadParamsInto(in, model.params);
  for (const auto& [name, _] : model.params.All())
    if (!seen.count(name)) Fail("checkpoint " + path + ": missing " + name);
  return model;
}

void SaveLmCheckpoint(const ExternalLm& lm, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail("cannot open LM checkpoint for writing: " + path);
  out.write(kLmMagic, 8);
  json cfg = {{"vocab_classes", lm.cfg.vocab_classes},
              {"embed_dim", lm.cfg.embed_dim},
              {"hidden_dim", lm.cfg.hidden_dim}};
  WriteString(out, cfg.dump());
  WriteParams(out, lm.params, "");
}

ExternalLm LoadLmCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail("cannot open LM checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kLmMagic, 8) != 0)
    Fail("LM checkpoint " + path + ": bad magic or version");
  json j = json::parse(ReadString(in));
  LmConfig cfg;
  cfg.vocab_classes = j.at("vocab_classes").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.hidden_dim = j.at("hidden_dim").get<int>();
  ExternalLm lm = InitExternalLm(cfg, 0);
  ReadParamsInto(in, lm.params);
  return lm;
}

UstrConfig LoadUstrConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail("cannot open model config: " + path);
  json j;
  in >> j;
  return ConfigFromJson(j);
}

void SaveUstrConfig(const UstrConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) Fail("cannot open model config for writing: " + path);
  out << ConfigToJson(cfg).dump(2) << "\n";
}

}  // namespace ustr
