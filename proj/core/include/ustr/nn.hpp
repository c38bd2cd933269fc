// core/include/ustr/nn.hpp
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
// Named parameter sets, layer building blocks and the Adam optimizer.

#ifndef USTR_NN_HPP
#define USTR_NN_HPP

#include <map>
#include <string>
#include <vector>

#include "ustr/rng.hpp"
#include "ustr/tensor.hpp"

namespace ustr {

// Named map of trainable tensors. Freezing a parameter keeps it in every
// forward pass but excludes it from optimizer updates.
class ParamSet {
 public:
  TensorPtr Add(const std::string& name, TensorPtr t);
  TensorPtr At(const std::string& name) const;
  bool Has(const std::string& name) const;
  void Remove(const std::string& name);

  void SetTrainable(const std::string& name, bool trainable);
  void FreezePrefix(const std::string& prefix);
  void UnfreezeAll();
  bool Trainable(const std::string& name) const;

  const std::map<std::string, TensorPtr>& All() const { return params_; }
  std::vector<std::string> NamesWithPrefix(const std::string& prefix) const;
  size_t TotalParameterCount() const;

 private:
  std::map<std::string, TensorPtr> params_;
  std::map<std::string, bool> trainable_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

struct AdamState {
  AdamConfig cfg;
  long step = 0;
  std::map<std::string, std::vector<double>> m;  // first moments
  std::map<std::string, std::vector<double>> s;  // second moments
};

// One Adam update from the gradients currently stored in the parameters.
// Frozen parameters are untouched; a trainable parameter with no gradient
// buffer is an error. `lr_scale` implements warmup schedules.
void AdamStep(ParamSet& params, AdamState& state, double lr_scale = 1.0);

// ---- initialization ----
// Uniform in [-limit, limit] with limit = sqrt(1 / fan_in).
TensorPtr InitUniform(std::vector<int> shape, int fan_in, Rng& rng);
TensorPtr InitZeros(std::vector<int> shape);

// ---- layers ----
// Adds W [in,out] and b [out] under `prefix`.
void AddLinearParams(ParamSet& p, const std::string& prefix, int in, int out,
                     Rng& rng);
TensorPtr Linear(const ParamSet& p, const std::string& prefix,
                 const TensorPtr& x);

void AddLayerNormParams(ParamSet& p, const std::string& prefix, int dim);
TensorPtr LayerNormed(const ParamSet& p, const std::string& prefix,
                      const TensorPtr& x);

// Gated recurrent cell. Parameters under `prefix`: update/reset/candidate
// gates, each with input and recurrent weights and a bias.
void AddGruParams(ParamSet& p, const std::string& prefix, int in, int hidden,
                  Rng& rng);
// x [in], h_prev [hidden] -> h [hidden]
TensorPtr GruCell(const ParamSet& p, const std::string& prefix,
                  const TensorPtr& x, const TensorPtr& h_prev);
// Convenience: run the cell over a sequence, h0 = 0. x [T,in] -> [T,hidden].
TensorPtr GruSequence(const ParamSet& p, const std::string& prefix,
                      const TensorPtr& x, int hidden);

// Non-causal scaled dot-product self-attention. x [T,d] -> [T,d].
void AddAttentionParams(ParamSet& p, const std::string& prefix, int dim,
                        Rng& rng);
TensorPtr MultiHeadAttention(const ParamSet& p, const std::string& prefix,
                             const TensorPtr& x, int num_heads);

}  // namespace ustr

#endif  // USTR_NN_HPP
