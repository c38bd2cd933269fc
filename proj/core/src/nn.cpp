// core/src/nn.cpp
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

#include "ustr/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ustr {

TensorPtr ParamSet::Add(const std::string& name, TensorPtr t) {
  if (params_.count(name))
    throw std::runtime_error("duplicate parameter name: " + name);
  t->needs_grad = true;
  params_[name] = t;
  trainable_[name] = true;
  return t;
}

TensorPtr ParamSet::At(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::runtime_error("unknown parameter: " + name);
  return it->second;
}

bool ParamSet::Has(const std::string& name) const {
  return params_.count(name) > 0;
}

void ParamSet::Remove(const std::string& name) {
  params_.erase(name);
  trainable_.erase(name);
}

void ParamSet::SetTrainable(const std::string& name, bool trainable) {
  if (!params_.count(name))
    throw std::runtime_error("unknown parameter: " + name);
  trainable_[name] = trainable;
}

void ParamSet::FreezePrefix(const std::string& prefix) {
  for (auto& [name, _] : params_)
    if (name.rfind(prefix, 0) == 0) trainable_[name] = false;
}

void ParamSet::UnfreezeAll() {
  for (auto& [name, _] : trainable_) trainable_[name] = true;
}

bool ParamSet::Trainable(const std::string& name) const {
  auto it = trainable_.find(name);
  if (it == trainable_.end())
    throw std::runtime_error("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParamSet::NamesWithPrefix(
    const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_)
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  return out;
}

size_t ParamSet::TotalParameterCount() const {
  size_t n = 0;
  for (const auto& [_, t] : params_) n += t->Size();
  return n;
}

void AdamStep(ParamSet& params, AdamState& state, double lr_scale) {
  state.step += 1;
  const AdamConfig& c = state.cfg;
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  double lr = c.lr * lr_scale;
  for (const auto& [name, t] : params.All()) {
    if (!params.Trainable(name)) continue;
    if (t->g.size() != t->v.size())
      throw std::runtime_error("missing gradient for trainable parameter " +
                               name);
    auto& m = state.m[name];
    auto& s = state.s[name];
    if (m.size() != t->v.size()) m.assign(t->v.size(), 0.0);
    if (s.size() != t->v.size()) s.assign(t->v.size(), 0.0);
    for (size_t i = 0; i < t->v.size(); ++i) {
      double gi = t->g[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * gi * gi;
      double mhat = m[i] / bc1;
      double shat = s[i] / bc2;
      t->v[i] -= lr * mhat / (std::sqrt(shat) + c.eps);
    }
  }
}

TensorPtr InitUniform(std::vector<int> shape, int fan_in, Rng& rng) {
  double limit = std::sqrt(1.0 / std::max(1, fan_in));
  auto t = Tensor::Create(std::move(shape));
  for (auto& x : t->v) x = rng.Uniform(-limit, limit);
  return t;
}

TensorPtr InitZeros(std::vector<int> shape) {
  return Tensor::Create(std::move(shape));
}

void AddLinearParams(ParamSet& p, const std::string& prefix, int in, int out,
                     Rng& rng) {
  p.Add(prefix + ".w", InitUniform({in, out}, in, rng));
  p.Add(prefix + ".b", InitZeros({out}));
}

TensorPtr Linear(const ParamSet& p, const std::string& prefix,
                 const TensorPtr& x) {
  return AddBias(MatMul(x, p.At(prefix + ".w")), p.At(prefix + ".b"));
}

void AddLayerNormParams(ParamSet& p, const std::string& prefix, int dim) {
  p.Add(prefix + ".gain", Constant({dim}, 1.0));
  p.Add(prefix + ".bias", InitZeros({dim}));
}

TensorPtr LayerNormed(const ParamSet& p, const std::string& prefix,
                      const TensorPtr& x) {
  return LayerNorm(x, p.At(prefix + ".gain"), p.At(prefix + ".bias"));
}

void AddGruParams(ParamSet& p, const std::string& prefix, int in, int hidden,
                  Rng& rng) {
  for (const char* gate : {"z", "r", "n"}) {
    p.Add(prefix + ".w" + gate, InitUniform({in, hidden}, in, rng));
    p.Add(prefix + ".u" + gate, InitUniform({hidden, hidden}, hidden, rng));
    p.Add(prefix + ".b" + gate, InitZeros({hidden}));
  }
}

TensorPtr GruCell(const ParamSet& p, const std::string& prefix,
                  const TensorPtr& x, const TensorPtr& h_prev) {
  int hidden = h_prev->shape.back();
  auto xm = Reshape(x, {1, x->shape.back()});
  auto hm = Reshape(h_prev, {1, hidden});
  auto gate = [&](const char* g, const TensorPtr& hin) {
    return AddBias(Add(MatMul(xm, p.At(prefix + ".w" + g)),
                       MatMul(hin, p.At(prefix + ".u" + g))),
                   p.At(prefix + ".b" + g));
  };
  auto z = Sigmoid(gate("z", hm));
  auto r = Sigmoid(gate("r", hm));
  auto n = Tanh(gate("n", Mul(r, hm)));
  // h' = z * h_prev + (1 - z) * n
  auto h = Add(Mul(z, hm), Mul(Affine(z, -1.0, 1.0), n));
  return Reshape(h, {hidden});
}

TensorPtr GruSequence(const ParamSet& p, const std::string& prefix,
                      const TensorPtr& x, int hidden) {
  int t = x->shape[0];
  TensorPtr h = Constant({hidden}, 0.0);
  std::vector<TensorPtr> states;
  states.reserve(t);
  for (int i = 0; i < t; ++i) {
    h = GruCell(p, prefix, Row(x, i), h);
    states.push_back(h);
  }
  return StackRows(states);
}

void AddAttentionParams(ParamSet& p, const std::string& prefix, int dim,
                        Rng& rng) {
  AddLinearParams(p, prefix + ".q", dim, dim, rng);
  AddLinearParams(p, prefix + ".k", dim, dim, rng);
  AddLinearParams(p, prefix + ".v", dim, dim, rng);
  AddLinearParams(p, prefix + ".o", dim, dim, rng);
}

TensorPtr MultiHeadAttention(const ParamSet& p, const std::string& prefix,
                             const TensorPtr& x, int num_heads) {
  int dim = x->shape.back();
  if (dim % num_heads != 0)
    throw std::runtime_error("attention dim " + std::to_string(dim) +
                             " not divisible by heads " +
                             std::to_string(num_heads));
  int dh = dim / num_heads;
  auto q = Linear(p, prefix + ".q", x);
  auto k = Linear(p, prefix + ".k", x);
  auto v = Linear(p, prefix + ".v", x);
  std::vector<TensorPtr> heads;
  heads.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    auto qh = SliceCols(q, h * dh, (h + 1) * dh);
    auto kh = SliceCols(k, h * dh, (h + 1) * dh);
    auto vh = SliceCols(v, h * dh, (h + 1) * dh);
    auto scores = Scale(MatMul(qh, Transpose(kh)), 1.0 / std::sqrt(dh));
    heads.push_back(MatMul(Softmax(scores), vh));
  }
  return Linear(p, prefix + ".o", ConcatCols(heads));
}

}  // namespace ustr
