// core/include/ustr/tensor.hpp
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
// Dense double-precision tensors with define-by-run reverse-mode
// differentiation. The graph is rebuilt on every forward pass; Backward()
// topologically sorts reachable nodes and accumulates gradients.

#ifndef USTR_TENSOR_HPP
#define USTR_TENSOR_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ustr {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor {
 public:
  std::vector<int> shape;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient, sized lazily by Backward()
  bool needs_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void()> backprop;  // adds into parents' g

  static TensorPtr Create(std::vector<int> shape, bool needs_grad = false);
  static TensorPtr FromValues(std::vector<int> shape, std::vector<double> values,
                              bool needs_grad = false);
  static TensorPtr Scalar(double value);

  size_t Size() const;
  int Dim(int axis) const { return shape[static_cast<size_t>(axis)]; }
  std::string ShapeStr() const;
  double Item() const;  // value of a one-element tensor
};

// Runs reverse-mode accumulation from a scalar root. Gradients of every
// node reachable through `parents` are zeroed first, then populated.
void Backward(const TensorPtr& root);

// ---- construction helpers ----
TensorPtr Constant(std::vector<int> shape, double value);
// Fixed sinusoidal positional encoding, shape [len, dim], no gradient.
TensorPtr SinusoidalPositions(int len, int dim);

// ---- elementwise / shape ----
TensorPtr Add(const TensorPtr& a, const TensorPtr& b);
TensorPtr Sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr Mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr Affine(const TensorPtr& x, double scale, double shift);  // scale*x + shift
TensorPtr Scale(const TensorPtr& x, double c);
TensorPtr Tanh(const TensorPtr& x);
TensorPtr Sigmoid(const TensorPtr& x);
TensorPtr Relu(const TensorPtr& x);
TensorPtr Reshape(const TensorPtr& x, std::vector<int> shape);
TensorPtr Transpose(const TensorPtr& x);  // 2-D

// ---- linear algebra ----
TensorPtr MatMul(const TensorPtr& a, const TensorPtr& b);      // [m,k]x[k,n]
TensorPtr AddBias(const TensorPtr& x, const TensorPtr& bias);  // bias over last axis

// ---- reductions / normalizations (over the last axis unless stated) ----
TensorPtr Softmax(const TensorPtr& x);
TensorPtr LogSoftmax(const TensorPtr& x);
TensorPtr LogSumExp(const TensorPtr& x);  // drops the last axis
TensorPtr ReduceSum(const TensorPtr& x);  // scalar
TensorPtr ReduceMean(const TensorPtr& x); // scalar
TensorPtr LayerNorm(const TensorPtr& x, const TensorPtr& gain,
                    const TensorPtr& bias, double eps = 1e-6);

// ---- indexing ----
TensorPtr EmbeddingLookup(const TensorPtr& table, const std::vector<int>& ids);
TensorPtr Row(const TensorPtr& x, int i);              // [m,n] -> [n]
TensorPtr SliceRows(const TensorPtr& x, int b, int e); // [m,n] -> [e-b,n]
TensorPtr SliceCols(const TensorPtr& x, int b, int e); // [m,n] -> [m,e-b]
TensorPtr ConcatRows(const std::vector<TensorPtr>& xs);
TensorPtr ConcatCols(const std::vector<TensorPtr>& xs);
TensorPtr StackRows(const std::vector<TensorPtr>& xs);  // 1-D [n] each -> [m,n]
// GatherPairs: x is [m,n], result [m] with result[i] = x[i, ids[i]].
TensorPtr GatherPairs(const TensorPtr& x, const std::vector<int>& ids);

// ---- convolutions ----
// x [Cin,H,W], w [Cout,Cin,kh,kw] -> [Cout,H',W'], zero padding.
TensorPtr Conv2d(const TensorPtr& x, const TensorPtr& w, int stride_h,
                 int stride_w, int pad_h, int pad_w);
// x [T,Cin], w [Cout,Cin,K] -> [T',Cout], zero padding.
TensorPtr Conv1d(const TensorPtr& x, const TensorPtr& w, int stride, int pad);
// Depthwise: x [T,C], w [C,K] -> [T,C], stride 1, 'same' padding.
TensorPtr DepthwiseConv1d(const TensorPtr& x, const TensorPtr& w);

// ---- transducer-specific broadcast ----
// enc [T,H], pred [U1,H], bias [H] -> [T,U1,H] with out[t,u,:]=enc[t]+pred[u]+bias.
TensorPtr JointCombine(const TensorPtr& enc, const TensorPtr& pred,
                       const TensorPtr& bias);

// ---- finite differences ----
struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_coordinate;
  bool Pass(double tol) const { return max_rel_err <= tol; }
};

// Central-difference check of d f / d leaf for every coordinate of every
// tensor in `wrt`. `f` must rebuild the graph from current leaf values.
FdReport FiniteDifferenceCheck(const std::function<TensorPtr()>& f,
                               const std::vector<TensorPtr>& wrt,
                               double eps = 1e-4);

}  // namespace ustr

#endif  // USTR_TENSOR_HPP
