// core/src/tensor.cpp
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

#include "ustr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ustr {

namespace {

[[noreturn]] void Fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error("tensor op " + op + ": " + msg);
}

size_t ShapeSize(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

std::string ShapeToStr(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void CheckSameShape(const std::string& op, const TensorPtr& a,
                    const TensorPtr& b) {
  if (a->shape != b->shape)
    Fail(op, "shape mismatch " + a->ShapeStr() + " vs " + b->ShapeStr());
}

void Check2d(const std::string& op, const TensorPtr& x) {
  if (x->shape.size() != 2) Fail(op, "expected 2-D, got " + x->ShapeStr());
}

// Rows = product of all leading axes, cols = last axis.
void RowsCols(const TensorPtr& x, int* rows, int* cols) {
  if (x->shape.empty()) Fail("rowscols", "scalar has no last axis");
  *cols = x->shape.back();
  size_t r = 1;
  for (size_t i = 0; i + 1 < x->shape.size(); ++i)
    r *= static_cast<size_t>(x->shape[i]);
  *rows = static_cast<int>(r);
}

TensorPtr MakeOut(std::vector<int> shape, std::vector<TensorPtr> parents) {
  TensorPtr out = Tensor::Create(std::move(shape));
  for (const auto& p : parents)
    if (p->needs_grad) out->needs_grad = true;
  out->parents = std::move(parents);
  return out;
}

}  // namespace

TensorPtr Tensor::Create(std::vector<int> shape, bool needs_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v.assign(ShapeSize(t->shape), 0.0);
  t->needs_grad = needs_grad;
  return t;
}

TensorPtr Tensor::FromValues(std::vector<int> shape, std::vector<double> values,
                             bool needs_grad) {
  if (ShapeSize(shape) != values.size())
    Fail("from_values", "value count " + std::to_string(values.size()) +
                            " does not match shape " + ShapeToStr(shape));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v = std::move(values);
  t->needs_grad = needs_grad;
  return t;
}

TensorPtr Tensor::Scalar(double value) {
  return FromValues({1}, {value});
}

size_t Tensor::Size() const { return ShapeSize(shape); }

std::string Tensor::ShapeStr() const { return ShapeToStr(shape); }

double Tensor::Item() const {
  if (v.size() != 1)
    throw std::runtime_error("Item() on tensor of size " +
                             std::to_string(v.size()));
  return v[0];
}

void Backward(const TensorPtr& root) {
  if (root->v.size() != 1) Fail("backward", "root must be scalar");
  // Iterative post-order topological sort.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<Tensor*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Tensor* p = node->parents[idx++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Tensor* t : order) t->g.assign(t->v.size(), 0.0);
  root->g[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

TensorPtr Constant(std::vector<int> shape, double value) {
  auto t = Tensor::Create(std::move(shape));
  std::fill(t->v.begin(), t->v.end(), value);
  return t;
}

TensorPtr SinusoidalPositions(int len, int dim) {
  auto t = Tensor::Create({len, dim});
  for (int p = 0; p < len; ++p) {
    for (int i = 0; i < dim; ++i) {
      double rate = std::pow(10000.0, -2.0 * (i / 2) / dim);
      double angle = p * rate;
      t->v[static_cast<size_t>(p) * dim + i] =
          (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

TensorPtr Add(const TensorPtr& a, const TensorPtr& b) {
  CheckSameShape("add", a, b);
  auto out = MakeOut(a->shape, {a, b});
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po] {
    for (size_t i = 0; i < po->g.size(); ++i) {
      pa->g[i] += po->g[i];
      pb->g[i] += po->g[i];
    }
  };
  return out;
}

TensorPtr Sub(const TensorPtr& a, const TensorPtr& b) {
  return Add(a, Scale(b, -1.0));
}

TensorPtr Mul(const TensorPtr& a, const TensorPtr& b) {
  CheckSameShape("mul", a, b);
  auto out = MakeOut(a->shape, {a, b});
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = a->v[i] * b->v[i];
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po] {
    for (size_t i = 0; i < po->g.size(); ++i) {
      pa->g[i] += po->g[i] * pb->v[i];
      pb->g[i] += po->g[i] * pa->v[i];
    }
  };
  return out;
}

TensorPtr Affine(const TensorPtr& x, double scale, double shift) {
  auto out = MakeOut(x->shape, {x});
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = scale * x->v[i] + shift;
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, scale] {
    for (size_t i = 0; i < po->g.size(); ++i) px->g[i] += scale * po->g[i];
  };
  return out;
}

TensorPtr Scale(const TensorPtr& x, double c) { return Affine(x, c, 0.0); }

namespace {

template <typename F, typename DF>
TensorPtr Unary(const std::string&, const TensorPtr& x, F f, DF df) {
  auto out = MakeOut(x->shape, {x});
  for (size_t i = 0; i < out->v.size(); ++i) out->v[i] = f(x->v[i]);
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, df] {
    for (size_t i = 0; i < po->g.size(); ++i)
      px->g[i] += po->g[i] * df(px->v[i], po->v[i]);
  };
  return out;
}

}  // namespace

TensorPtr Tanh(const TensorPtr& x) {
  return Unary("tanh", x, [](double a) { return std::tanh(a); },
               [](double, double y) { return 1.0 - y * y; });
}

TensorPtr Sigmoid(const TensorPtr& x) {
  return Unary("sigmoid", x,
               [](double a) { return 1.0 / (1.0 + std::exp(-a)); },
               [](double, double y) { return y * (1.0 - y); });
}

TensorPtr Relu(const TensorPtr& x) {
  return Unary("relu", x, [](double a) { return a > 0.0 ? a : 0.0; },
               [](double a, double) { return a > 0.0 ? 1.0 : 0.0; });
}

TensorPtr Reshape(const TensorPtr& x, std::vector<int> shape) {
  if (ShapeSize(shape) != x->Size())
    Fail("reshape", x->ShapeStr() + " to incompatible " + ShapeToStr(shape));
  auto out = MakeOut(std::move(shape), {x});
  out->v = x->v;
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po] {
    for (size_t i = 0; i < po->g.size(); ++i) px->g[i] += po->g[i];
  };
  return out;
}

TensorPtr Transpose(const TensorPtr& x) {
  Check2d("transpose", x);
  int m = x->shape[0], n = x->shape[1];
  auto out = MakeOut({n, m}, {x});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->v[static_cast<size_t>(j) * m + i] = x->v[static_cast<size_t>(i) * n + j];
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, m, n] {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        px->g[static_cast<size_t>(i) * n + j] +=
            po->g[static_cast<size_t>(j) * m + i];
  };
  return out;
}

TensorPtr MatMul(const TensorPtr& a, const TensorPtr& b) {
  Check2d("matmul", a);
  Check2d("matmul", b);
  int m = a->shape[0], k = a->shape[1], k2 = b->shape[0], n = b->shape[1];
  if (k != k2)
    Fail("matmul", "inner dims differ: " + a->ShapeStr() + " x " + b->ShapeStr());
  auto out = MakeOut({m, n}, {a, b});
  const double* av = a->v.data();
  const double* bv = b->v.data();
  double* ov = out->v.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double aip = av[static_cast<size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + static_cast<size_t>(p) * n;
      double* orow = ov + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po, m, k, n] {
    // dA = dC * B^T ; dB = A^T * dC
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* grow = po->g.data() + static_cast<size_t>(i) * n;
        const double* brow = pb->v.data() + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
        pa->g[static_cast<size_t>(i) * k + p] += acc;
      }
    for (int p = 0; p < k; ++p)
      for (int i = 0; i < m; ++i) {
        double aip = pa->v[static_cast<size_t>(i) * k + p];
        if (aip == 0.0) continue;
        const double* grow = po->g.data() + static_cast<size_t>(i) * n;
        double* brow = pb->g.data() + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
      }
  };
  return out;
}

TensorPtr AddBias(const TensorPtr& x, const TensorPtr& bias) {
  if (bias->shape.size() != 1) Fail("add_bias", "bias must be 1-D");
  int rows, cols;
  RowsCols(x, &rows, &cols);
  if (cols != bias->shape[0])
    Fail("add_bias", "last axis " + x->ShapeStr() + " vs bias " + bias->ShapeStr());
  auto out = MakeOut(x->shape, {x, bias});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out->v[static_cast<size_t>(r) * cols + c] =
          x->v[static_cast<size_t>(r) * cols + c] + bias->v[c];
  Tensor *px = x.get(), *pbias = bias.get(), *po = out.get();
  out->backprop = [px, pbias, po, rows, cols] {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        double gr = po->g[static_cast<size_t>(r) * cols + c];
        px->g[static_cast<size_t>(r) * cols + c] += gr;
        pbias->g[c] += gr;
      }
  };
  return out;
}

TensorPtr Softmax(const TensorPtr& x) {
  int rows, cols;
  RowsCols(x, &rows, &cols);
  auto out = MakeOut(x->shape, {x});
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->v.data() + static_cast<size_t>(r) * cols;
    double* yr = out->v.data() + static_cast<size_t>(r) * cols;
    double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (int c = 0; c < cols; ++c) yr[c] /= z;
  }
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, rows, cols] {
    for (int r = 0; r < rows; ++r) {
      const double* yr = po->v.data() + static_cast<size_t>(r) * cols;
      const double* gr = po->g.data() + static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      for (int c = 0; c < cols; ++c)
        px->g[static_cast<size_t>(r) * cols + c] += yr[c] * (gr[c] - dot);
    }
  };
  return out;
}

TensorPtr LogSoftmax(const TensorPtr& x) {
  int rows, cols;
  RowsCols(x, &rows, &cols);
  auto out = MakeOut(x->shape, {x});
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->v.data() + static_cast<size_t>(r) * cols;
    double* yr = out->v.data() + static_cast<size_t>(r) * cols;
    double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    double lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) yr[c] = xr[c] - lz;
  }
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, rows, cols] {
    for (int r = 0; r < rows; ++r) {
      const double* yr = po->v.data() + static_cast<size_t>(r) * cols;
      const double* gr = po->g.data() + static_cast<size_t>(r) * cols;
      double gsum = 0.0;
      for (int c = 0; c < cols; ++c) gsum += gr[c];
      for (int c = 0; c < cols; ++c)
        px->g[static_cast<size_t>(r) * cols + c] +=
            gr[c] - std::exp(yr[c]) * gsum;
    }
  };
  return out;
}

TensorPtr LogSumExp(const TensorPtr& x) {
  int rows, cols;
  RowsCols(x, &rows, &cols);
  std::vector<int> out_shape(x->shape.begin(), x->shape.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto out = MakeOut(out_shape, {x});
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->v.data() + static_cast<size_t>(r) * cols;
    double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    out->v[r] = mx + std::log(z);
  }
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, rows, cols] {
    for (int r = 0; r < rows; ++r) {
      double lse = po->v[r];
      double gr = po->g[r];
      for (int c = 0; c < cols; ++c)
        px->g[static_cast<size_t>(r) * cols + c] +=
            gr * std::exp(px->v[static_cast<size_t>(r) * cols + c] - lse);
    }
  };
  return out;
}

TensorPtr ReduceSum(const TensorPtr& x) {
  auto out = MakeOut({1}, {x});
  double acc = 0.0;
  for (double a : x->v) acc += a;
  out->v[0] = acc;
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po] {
    for (size_t i = 0; i < px->g.size(); ++i) px->g[i] += po->g[0];
  };
  return out;
}

TensorPtr ReduceMean(const TensorPtr& x) {
  return Scale(ReduceSum(x), 1.0 / static_cast<double>(x->Size()));
}

TensorPtr LayerNorm(const TensorPtr& x, const TensorPtr& gain,
                    const TensorPtr& bias, double eps) {
  int rows, cols;
  RowsCols(x, &rows, &cols);
  if (gain->shape != std::vector<int>{cols} || bias->shape != std::vector<int>{cols})
    Fail("layer_norm", "gain/bias must be [" + std::to_string(cols) + "]");
  auto out = MakeOut(x->shape, {x, gain, bias});
  std::vector<double> inv_std(rows), mean(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->v.data() + static_cast<size_t>(r) * cols;
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xr[c];
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= cols;
    mean[r] = mu;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      out->v[static_cast<size_t>(r) * cols + c] =
          (xr[c] - mu) * inv_std[r] * gain->v[c] + bias->v[c];
  }
  Tensor *px = x.get(), *pg = gain.get(), *pb = bias.get(), *po = out.get();
  out->backprop = [px, pg, pb, po, rows, cols, mean, inv_std] {
    for (int r = 0; r < rows; ++r) {
      const double* xr = px->v.data() + static_cast<size_t>(r) * cols;
      const double* gr = po->g.data() + static_cast<size_t>(r) * cols;
      double is = inv_std[r], mu = mean[r];
      // dxhat, then the standard layer-norm backward.
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = 0; c < cols; ++c) {
        double xhat = (xr[c] - mu) * is;
        double dxhat = gr[c] * pg->v[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        pg->g[c] += gr[c] * xhat;
        pb->g[c] += gr[c];
      }
      for (int c = 0; c < cols; ++c) {
        double xhat = (xr[c] - mu) * is;
        double dxhat = gr[c] * pg->v[c];
        px->g[static_cast<size_t>(r) * cols + c] +=
            is * (dxhat - sum_dxhat / cols - xhat * sum_dxhat_xhat / cols);
      }
    }
  };
  return out;
}

TensorPtr EmbeddingLookup(const TensorPtr& table, const std::vector<int>& ids) {
  Check2d("embedding_lookup", table);
  int vocab = table->shape[0], dim = table->shape[1];
  for (int id : ids)
    if (id < 0 || id >= vocab)
      Fail("embedding_lookup", "id " + std::to_string(id) +
                                   " out of range for vocab " + std::to_string(vocab));
  auto out = MakeOut({static_cast<int>(ids.size()), dim}, {table});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->v.data() + static_cast<size_t>(ids[i]) * dim, dim,
                out->v.data() + i * dim);
  Tensor *pt = table.get(), *po = out.get();
  out->backprop = [pt, po, ids, dim] {
    for (size_t i = 0; i < ids.size(); ++i)
      for (int c = 0; c < dim; ++c)
        pt->g[static_cast<size_t>(ids[i]) * dim + c] += po->g[i * dim + c];
  };
  return out;
}

TensorPtr Row(const TensorPtr& x, int i) {
  Check2d("row", x);
  auto s = SliceRows(x, i, i + 1);
  return Reshape(s, {x->shape[1]});
}

TensorPtr SliceRows(const TensorPtr& x, int b, int e) {
  Check2d("slice_rows", x);
  int m = x->shape[0], n = x->shape[1];
  if (b < 0 || e > m || b >= e)
    Fail("slice_rows", "range [" + std::to_string(b) + "," + std::to_string(e) +
                           ") invalid for " + x->ShapeStr());
  auto out = MakeOut({e - b, n}, {x});
  std::copy_n(x->v.data() + static_cast<size_t>(b) * n,
              static_cast<size_t>(e - b) * n, out->v.data());
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, b, n] {
    for (size_t i = 0; i < po->g.size(); ++i)
      px->g[static_cast<size_t>(b) * n + i] += po->g[i];
  };
  return out;
}

TensorPtr SliceCols(const TensorPtr& x, int b, int e) {
  Check2d("slice_cols", x);
  int m = x->shape[0], n = x->shape[1];
  if (b < 0 || e > n || b >= e)
    Fail("slice_cols", "range invalid for " + x->ShapeStr());
  int w = e - b;
  auto out = MakeOut({m, w}, {x});
  for (int r = 0; r < m; ++r)
    std::copy_n(x->v.data() + static_cast<size_t>(r) * n + b, w,
                out->v.data() + static_cast<size_t>(r) * w);
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, m, n, b, w] {
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < w; ++c)
        px->g[static_cast<size_t>(r) * n + b + c] +=
            po->g[static_cast<size_t>(r) * w + c];
  };
  return out;
}

TensorPtr ConcatRows(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) Fail("concat_rows", "empty input list");
  int n = xs[0]->shape.size() == 2 ? xs[0]->shape[1] : -1;
  int m = 0;
  for (const auto& x : xs) {
    Check2d("concat_rows", x);
    if (x->shape[1] != n) Fail("concat_rows", "column mismatch");
    m += x->shape[0];
  }
  auto out = MakeOut({m, n}, xs);
  size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->v.begin(), x->v.end(), out->v.begin() + off);
    off += x->v.size();
  }
  std::vector<Tensor*> ps;
  for (const auto& x : xs) ps.push_back(x.get());
  Tensor* po = out.get();
  out->backprop = [ps, po] {
    size_t off = 0;
    for (Tensor* p : ps) {
      for (size_t i = 0; i < p->g.size(); ++i) p->g[i] += po->g[off + i];
      off += p->g.size();
    }
  };
  return out;
}

TensorPtr ConcatCols(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) Fail("concat_cols", "empty input list");
  int m = xs[0]->shape.size() == 2 ? xs[0]->shape[0] : -1;
  int n = 0;
  for (const auto& x : xs) {
    Check2d("concat_cols", x);
    if (x->shape[0] != m) Fail("concat_cols", "row mismatch");
    n += x->shape[1];
  }
  auto out = MakeOut({m, n}, xs);
  int coff = 0;
  for (const auto& x : xs) {
    int w = x->shape[1];
    for (int r = 0; r < m; ++r)
      std::copy_n(x->v.data() + static_cast<size_t>(r) * w, w,
                  out->v.data() + static_cast<size_t>(r) * n + coff);
    coff += w;
  }
  std::vector<Tensor*> ps;
  for (const auto& x : xs) ps.push_back(x.get());
  Tensor* po = out.get();
  out->backprop = [ps, po, m, n] {
    int coff = 0;
    for (Tensor* p : ps) {
      int w = p->shape[1];
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
          p->g[static_cast<size_t>(r) * w + c] +=
              po->g[static_cast<size_t>(r) * n + coff + c];
      coff += w;
    }
  };
  return out;
}

TensorPtr StackRows(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) Fail("stack_rows", "empty input list");
  int n = static_cast<int>(xs[0]->Size());
  for (const auto& x : xs) {
    if (x->shape.size() != 1 || static_cast<int>(x->Size()) != n)
      Fail("stack_rows", "expected 1-D tensors of equal length");
  }
  auto out = MakeOut({static_cast<int>(xs.size()), n}, xs);
  for (size_t i = 0; i < xs.size(); ++i)
    std::copy(xs[i]->v.begin(), xs[i]->v.end(),
              out->v.begin() + i * static_cast<size_t>(n));
  std::vector<Tensor*> ps;
  for (const auto& x : xs) ps.push_back(x.get());
  Tensor* po = out.get();
  out->backprop = [ps, po, n] {
    for (size_t i = 0; i < ps.size(); ++i)
      for (int c = 0; c < n; ++c)
        ps[i]->g[c] += po->g[i * static_cast<size_t>(n) + c];
  };
  return out;
}

TensorPtr GatherPairs(const TensorPtr& x, const std::vector<int>& ids) {
  Check2d("gather_pairs", x);
  int m = x->shape[0], n = x->shape[1];
  if (static_cast<int>(ids.size()) != m)
    Fail("gather_pairs", "need one index per row");
  for (int id : ids)
    if (id < 0 || id >= n) Fail("gather_pairs", "index out of range");
  auto out = MakeOut({m}, {x});
  for (int r = 0; r < m; ++r)
    out->v[r] = x->v[static_cast<size_t>(r) * n + ids[r]];
  Tensor *px = x.get(), *po = out.get();
  out->backprop = [px, po, ids, n] {
    for (size_t r = 0; r < ids.size(); ++r)
      px->g[r * static_cast<size_t>(n) + ids[r]] += po->g[r];
  };
  return out;
}

TensorPtr Conv2d(const TensorPtr& x, const TensorPtr& w, int stride_h,
                 int stride_w, int pad_h, int pad_w) {
  if (x->shape.size() != 3) Fail("conv2d", "input must be [Cin,H,W]");
  if (w->shape.size() != 4) Fail("conv2d", "weight must be [Cout,Cin,kh,kw]");
  int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
  int cout = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[1] != cin)
    Fail("conv2d", "channel mismatch " + x->ShapeStr() + " vs " + w->ShapeStr());
  int oh = (h + 2 * pad_h - kh) / stride_h + 1;
  int ow = (wd + 2 * pad_w - kw) / stride_w + 1;
  if (oh < 1 || ow < 1) Fail("conv2d", "output would be empty");
  auto out = MakeOut({cout, oh, ow}, {x, w});
  auto xat = [&](int c, int i, int j) -> double {
    if (i < 0 || i >= h || j < 0 || j >= wd) return 0.0;
    return x->v[(static_cast<size_t>(c) * h + i) * wd + j];
  };
  for (int oc = 0; oc < cout; ++oc)
    for (int oi = 0; oi < oh; ++oi)
      for (int oj = 0; oj < ow; ++oj) {
        double acc = 0.0;
        for (int ic = 0; ic < cin; ++ic)
          for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj)
              acc += xat(ic, oi * stride_h - pad_h + ki,
                         oj * stride_w - pad_w + kj) *
                     w->v[((static_cast<size_t>(oc) * cin + ic) * kh + ki) * kw + kj];
        out->v[(static_cast<size_t>(oc) * oh + oi) * ow + oj] = acc;
      }
  Tensor *px = x.get(), *pw = w.get(), *po = out.get();
  out->backprop = [px, pw, po, cin, h, wd, cout, kh, kw, oh, ow, stride_h,
                   stride_w, pad_h, pad_w] {
    for (int oc = 0; oc < cout; ++oc)
      for (int oi = 0; oi < oh; ++oi)
        for (int oj = 0; oj < ow; ++oj) {
          double go = po->g[(static_cast<size_t>(oc) * oh + oi) * ow + oj];
          if (go == 0.0) continue;
          for (int ic = 0; ic < cin; ++ic)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                int i = oi * stride_h - pad_h + ki;
                int j = oj * stride_w - pad_w + kj;
                if (i < 0 || i >= h || j < 0 || j >= wd) continue;
                size_t xi = (static_cast<size_t>(ic) * h + i) * wd + j;
                size_t wi =
                    ((static_cast<size_t>(oc) * cin + ic) * kh + ki) * kw + kj;
                px->g[xi] += go * pw->v[wi];
                pw->g[wi] += go * px->v[xi];
              }
        }
  };
  return out;
}

TensorPtr Conv1d(const TensorPtr& x, const TensorPtr& w, int stride, int pad) {
  Check2d("conv1d", x);
  if (w->shape.size() != 3) Fail("conv1d", "weight must be [Cout,Cin,K]");
  int t = x->shape[0], cin = x->shape[1];
  int cout = w->shape[0], k = w->shape[2];
  if (w->shape[1] != cin)
    Fail("conv1d", "channel mismatch " + x->ShapeStr() + " vs " + w->ShapeStr());
  int ot = (t + 2 * pad - k) / stride + 1;
  if (ot < 1) Fail("conv1d", "output would be empty");
  auto out = MakeOut({ot, cout}, {x, w});
  for (int oi = 0; oi < ot; ++oi)
    for (int oc = 0; oc < cout; ++oc) {
      double acc = 0.0;
      for (int ki = 0; ki < k; ++ki) {
        int i = oi * stride - pad + ki;
        if (i < 0 || i >= t) continue;
        for (int ic = 0; ic < cin; ++ic)
          acc += x->v[static_cast<size_t>(i) * cin + ic] *
                 w->v[(static_cast<size_t>(oc) * cin + ic) * k + ki];
      }
      out->v[static_cast<size_t>(oi) * cout + oc] = acc;
    }
  Tensor *px = x.get(), *pw = w.get(), *po = out.get();
  out->backprop = [px, pw, po, t, cin, cout, k, ot, stride, pad] {
    for (int oi = 0; oi < ot; ++oi)
      for (int oc = 0; oc < cout; ++oc) {
        double go = po->g[static_cast<size_t>(oi) * cout + oc];
        if (go == 0.0) continue;
        for (int ki = 0; ki < k; ++ki) {
          int i = oi * stride - pad + ki;
          if (i < 0 || i >= t) continue;
          for (int ic = 0; ic < cin; ++ic) {
            size_t xi = static_cast<size_t>(i) * cin + ic;
            size_t wi = (static_cast<size_t>(oc) * cin + ic) * k + ki;
            px->g[xi] += go * pw->v[wi];
            pw->g[wi] += go * px->v[xi];
          }
        }
      }
  };
  return out;
}

TensorPtr DepthwiseConv1d(const TensorPtr& x, const TensorPtr& w) {
  Check2d("depthwise_conv1d", x);
  Check2d("depthwise_conv1d", w);
  int t = x->shape[0], ch = x->shape[1];
  int k = w->shape[1];
  if (w->shape[0] != ch)
    Fail("depthwise_conv1d",
         "channel mismatch " + x->ShapeStr() + " vs " + w->ShapeStr());
  int pad = (k - 1) / 2;
  auto out = MakeOut({t, ch}, {x, w});
  for (int oi = 0; oi < t; ++oi)
    for (int c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (int ki = 0; ki < k; ++ki) {
        int i = oi - pad + ki;
        if (i < 0 || i >= t) continue;
        acc += x->v[static_cast<size_t>(i) * ch + c] *
               w->v[static_cast<size_t>(c) * k + ki];
      }
      out->v[static_cast<size_t>(oi) * ch + c] = acc;
    }
  Tensor *px = x.get(), *pw = w.get(), *po = out.get();
  out->backprop = [px, pw, po, t, ch, k, pad] {
    for (int oi = 0; oi < t; ++oi)
      for (int c = 0; c < ch; ++c) {
        double go = po->g[static_cast<size_t>(oi) * ch + c];
        if (go == 0.0) continue;
        for (int ki = 0; ki < k; ++ki) {
          int i = oi - pad + ki;
          if (i < 0 || i >= t) continue;
          size_t xi = static_cast<size_t>(i) * ch + c;
          size_t wi = static_cast<size_t>(c) * k + ki;
          px->g[xi] += go * pw->v[wi];
          pw->g[wi] += go * px->v[xi];
        }
      }
  };
  return out;
}

TensorPtr JointCombine(const TensorPtr& enc, const TensorPtr& pred,
                       const TensorPtr& bias) {
  Check2d("joint_combine", enc);
  Check2d("joint_combine", pred);
  int t = enc->shape[0], hd = enc->shape[1], u1 = pred->shape[0];
  if (pred->shape[1] != hd || bias->shape != std::vector<int>{hd})
    Fail("joint_combine", "dims differ: " + enc->ShapeStr() + " vs " +
                              pred->ShapeStr() + " vs " + bias->ShapeStr());
  auto out = MakeOut({t, u1, hd}, {enc, pred, bias});
  for (int ti = 0; ti < t; ++ti)
    for (int ui = 0; ui < u1; ++ui)
      for (int c = 0; c < hd; ++c)
        out->v[(static_cast<size_t>(ti) * u1 + ui) * hd + c] =
            enc->v[static_cast<size_t>(ti) * hd + c] +
            pred->v[static_cast<size_t>(ui) * hd + c] + bias->v[c];
  Tensor *pe = enc.get(), *pp = pred.get(), *pb = bias.get(), *po = out.get();
  out->backprop = [pe, pp, pb, po, t, u1, hd] {
    for (int ti = 0; ti < t; ++ti)
      for (int ui = 0; ui < u1; ++ui)
        for (int c = 0; c < hd; ++c) {
          double go = po->g[(static_cast<size_t>(ti) * u1 + ui) * hd + c];
          pe->g[static_cast<size_t>(ti) * hd + c] += go;
          pp->g[static_cast<size_t>(ui) * hd + c] += go;
          pb->g[c] += go;
        }
  };
  return out;
}

FdReport FiniteDifferenceCheck(const std::function<TensorPtr()>& f,
                               const std::vector<TensorPtr>& wrt, double eps) {
  TensorPtr loss = f();
  Backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& t : wrt) analytic.push_back(t->g);
  FdReport report;
  for (size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor* t = wrt[ti].get();
    for (size_t i = 0; i < t->v.size(); ++i) {
      double keep = t->v[i];
      t->v[i] = keep + eps;
      double up = f()->Item();
      t->v[i] = keep - eps;
      double down = f()->Item();
      t->v[i] = keep;
      double fd = (up - down) / (2.0 * eps);
      double an = analytic[ti].empty() ? 0.0 : analytic[ti][i];
      double denom = std::max({std::fabs(fd), std::fabs(an), 1e-3});
      double rel = std::fabs(fd - an) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_coordinate = "tensor " + std::to_string(ti) + " coord " +
                                  std::to_string(i) + " analytic " +
                                  std::to_string(an) + " fd " + std::to_string(fd);
      }
    }
  }
  return report;
}

}  // namespace ustr
