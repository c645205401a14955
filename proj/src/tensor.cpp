#include "erp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "erp/errors.hpp"

namespace erp {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// Builds the output node; records history only when some input needs grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   std::function<void(Node&)> bw) {
  auto out = new_node(std::move(shape), std::move(data));
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) track = track || p->requires_grad;
  }
  if (track) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward = std::move(bw);
  }
  return Tensor(out);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

}  // namespace

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto n = new_node(std::move(shape), std::move(values));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return data().size(); }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->ensure_grad();
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (defined() && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor::from(shape(), std::vector<double>(data().begin(), data().end()), false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) {
    throw ContractError("backward: loss was not produced by a recorded computation");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are rebuilt on every sweep; leaves accumulate.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    for (Node* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  Node* pa = a.node().get();
  return make_result(a.shape(), std::move(out), {a.node()}, [pa, factor](Node& self) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  // Exact erf form: x * Phi(x).
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v / kSqrt2));
  }
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x.node()}, [px](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / kSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x.node()}, [px](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = self.data[i];
      g[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  const std::size_t n = bias.numel();
  if (bias.rank() != 1 || x.shape().back() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs bias " + shape_str(bias.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  Node* px = x.node().get();
  Node* pb = bias.node().get();
  return make_result(x.shape(), std::move(out), {x.node(), bias.node()}, [px, pb, n](Node& self) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

// ---- matrix products ---------------------------------------------------------

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * n;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result({m, n}, std::move(out), {a.node(), b.node()}, [pa, pb, m, k, n](Node& self) {
    if (pa->requires_grad) gemm_nt(self.grad.data(), pb->data.data(), pa->ensure_grad().data(), m, n, k);
    if (pb->requires_grad) gemm_tn(pa->data.data(), self.grad.data(), pb->ensure_grad().data(), m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  (transpose_b ? a.dim(2) == b.dim(2) : a.dim(2) == b.dim(1));
  if (!ok) {
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* ap = a.data().data() + s * m * k;
    const double* bp = b.data().data() + s * k * n;
    double* cp = out.data() + s * m * n;
    if (transpose_b) {
      gemm_nt(ap, bp, cp, m, k, n);
    } else {
      gemm_nn(ap, bp, cp, m, k, n);
    }
  }
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result({batch, m, n}, std::move(out), {a.node(), b.node()},
                     [pa, pb, batch, m, k, n, transpose_b](Node& self) {
                       for (std::size_t s = 0; s < batch; ++s) {
                         const double* g = self.grad.data() + s * m * n;
                         const double* ap = pa->data.data() + s * m * k;
                         const double* bp = pb->data.data() + s * k * n;
                         if (pa->requires_grad) {
                           double* ga = pa->ensure_grad().data() + s * m * k;
                           if (transpose_b) {
                             gemm_nn(g, bp, ga, m, n, k);  // dA = G B
                           } else {
                             gemm_nt(g, bp, ga, m, n, k);  // dA = G B^T
                           }
                         }
                         if (pb->requires_grad) {
                           double* gb = pb->ensure_grad().data() + s * k * n;
                           if (transpose_b) {
                             gemm_tn(g, ap, gb, m, n, k);  // dB = G^T A
                           } else {
                             gemm_tn(ap, g, gb, m, k, n);  // dB = A^T G
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  require_defined(bias, "linear");
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0) || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  const std::size_t rows = x.numel() / in;
  std::vector<double> out(rows * out_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  }
  gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, out_dim);
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Node* px = x.node().get();
  Node* pw = weight.node().get();
  Node* pb = bias.node().get();
  return make_result(std::move(out_shape), std::move(out), {x.node(), weight.node(), bias.node()},
                     [px, pw, pb, rows, in, out_dim](Node& self) {
                       if (px->requires_grad) {
                         gemm_nt(self.grad.data(), pw->data.data(), px->ensure_grad().data(), rows,
                                 out_dim, in);
                       }
                       if (pw->requires_grad) {
                         gemm_tn(px->data.data(), self.grad.data(), pw->ensure_grad().data(), rows,
                                 in, out_dim);
                       }
                       if (pb->requires_grad) {
                         auto& gb = pb->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < out_dim; ++j) {
                             gb[j] += self.grad[r * out_dim + j];
                           }
                         }
                       }
                     });
}

// ---- layout ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Node* px = x.node().get();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                     {x.node()}, [px](Node& self) {
                       auto& g = px->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw DimensionError("permute: axes do not match rank of " + shape_str(x.shape()));
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axis list");
    seen[ax] = true;
  }
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

  // src_index[o] = flat input offset of output element o.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += counter[i] * in_strides[axes[i]];
    src_index[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = x.data()[src_index[o]];
  Node* px = x.node().get();
  return make_result(std::move(out_shape), std::move(out), {x.node()},
                     [px, idx = std::move(src_index)](Node& self) {
                       auto& g = px->ensure_grad();
                       for (std::size_t o = 0; o < idx.size(); ++o) g[idx[o]] += self.grad[o];
                     });
}

// ---- softmax family ------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  if (axis >= x.rank()) {
    throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = -INFINITY;
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, in[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(in[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= z;
    }
  }
  Node* px = x.node().get();
  return make_result(s, std::move(out), {x.node()}, [px, outer, len, inner](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * len * inner + j;
        double dot = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          dot += self.grad[base + t * inner] * self.data[base + t * inner];
        }
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = base + t * inner;
          g[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_defined(x, "masked_softmax");
  if (keep.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(keep.size()) +
                         " entries for " + shape_str(x.shape()));
  }
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  std::vector<double> out(x.numel(), 0.0);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * len;
    double mx = -INFINITY;
    for (std::size_t t = 0; t < len; ++t) {
      if (keep[base + t]) mx = std::max(mx, in[base + t]);
    }
    if (mx == -INFINITY) throw ContractError("masked_softmax: a row has no unmasked entries");
    double z = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      if (!keep[base + t]) continue;
      out[base + t] = std::exp(in[base + t] - mx);
      z += out[base + t];
    }
    for (std::size_t t = 0; t < len; ++t) out[base + t] /= z;
  }
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x.node()}, [px, rows, len](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * len;
      double dot = 0.0;
      for (std::size_t t = 0; t < len; ++t) dot += self.grad[base + t] * self.data[base + t];
      // Masked entries have probability 0, hence zero gradient.
      for (std::size_t t = 0; t < len; ++t) {
        g[base + t] += self.data[base + t] * (self.grad[base + t] - dot);
      }
    }
  });
}

// ---- normalization, dropout --------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  Node* px = x.node().get();
  Node* pg = gamma.node().get();
  Node* pb = beta.node().get();
  return make_result(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->ensure_grad();
          auto& gb = pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += self.grad[r * d + j] * xhat[r * d + j];
              gb[j] += self.grad[r * d + j];
            }
          }
        }
        if (px->requires_grad) {
          auto& gx = px->ensure_grad();
          const double dd = static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[r * d + j] * pg->data[j];
              sum_g += gh;
              sum_gx += gh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[r * d + j] * pg->data[j];
              gx[r * d + j] += inv_std[r] / dd * (dd * gh - sum_g - xhat[r * d + j] * sum_gx);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  require_defined(x, "dropout");
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0,1)");
  if (rate == 0.0 || rng == nullptr) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng->uniform() < rate ? 0.0 : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x.node()}, [px, mask = std::move(mask)](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---- gather ------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw ContractError("embedding: empty id list");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= rows) {
      throw IndexError("embedding: id " + std::to_string(idx[i]) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().begin() + idx[i] * d, d, out.begin() + i * d);
  }
  Node* pt = table.node().get();
  const std::size_t n = idx.size();
  return make_result({n, d}, std::move(out), {table.node()},
                     [pt, d, idx = std::move(idx)](Node& self) {
                       auto& g = pt->ensure_grad();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                       }
                     });
}

Tensor select_position(const Tensor& x, std::size_t position) {
  require_defined(x, "select_position");
  if (x.rank() != 3) throw DimensionError("select_position: expected [B,L,d], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (position >= l) throw IndexError("select_position: position " + std::to_string(position) + " >= " + std::to_string(l));
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(x.data().begin() + (i * l + position) * d, d, out.begin() + i * d);
  }
  Node* px = x.node().get();
  return make_result({b, d}, std::move(out), {x.node()}, [px, b, l, d, position](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < d; ++j) g[(i * l + position) * d + j] += self.grad[i * d + j];
    }
  });
}

// ---- reductions and losses -----------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node* px = x.node().get();
  return make_result({1}, {s}, {x.node()}, [px](Node& self) {
    auto& g = px->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                              std::span<const double> weights) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(weights.size()) + " weights for " + shape_str(logits.shape()));
  }
  double total_w = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," +
                       std::to_string(k) + ")");
    }
    total_w += weights[i];
  }
  if (total_w <= 0.0) throw ContractError("cross_entropy: weights sum to zero");

  // Softmax probabilities are kept for the backward pass.
  std::vector<double> probs(n * k, 0.0);
  double loss = 0.0;
  const auto in = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    const double* row = in.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - log_z);
    loss += weights[i] * (log_z - row[targets[i]]);
  }
  loss /= total_w;

  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  Node* pl = logits.node().get();
  return make_result({1}, {loss}, {logits.node()},
                     [pl, n, k, total_w, probs = std::move(probs), tgt = std::move(tgt),
                      w = std::move(w)](Node& self) {
                       auto& g = pl->ensure_grad();
                       const double up = self.grad[0] / total_w;
                       for (std::size_t i = 0; i < n; ++i) {
                         if (w[i] == 0.0) continue;
                         for (std::size_t j = 0; j < k; ++j) g[i * k + j] += up * w[i] * probs[i * k + j];
                         g[i * k + tgt[i]] -= up * w[i];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  require_defined(logits, "cross_entropy");
  const std::vector<double> ones(logits.rank() == 2 ? logits.dim(0) : 0, 1.0);
  if (logits.rank() == 2 && targets.empty()) throw ContractError("cross_entropy: empty batch");
  return weighted_cross_entropy(logits, targets, ones);
}

}  // namespace erp
