#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "erp/rng.hpp"

namespace erp {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this->grad into the parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& ensure_grad();
};

}  // namespace detail

// Dense row-major tensor of doubles with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage. Operations that
// see at least one operand with requires_grad record a node in the
// computation graph; backward() walks that graph in reverse.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls until zeroed.
void backward(const Tensor& loss);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
// a[B,m,k] x b[B,k,n], or b[B,n,k] transposed when transpose_b is set.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// x[..., in] W[in,out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis where keep[i] == 0 forces probability 0.
// Every row must keep at least one entry.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Inverted dropout. rate 0 or a null rng returns x unchanged.
Tensor dropout(const Tensor& x, double rate, Rng* rng);

// Rows of table[V,d] selected by ids, shaped [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
// x[B,L,d] -> x[:, position, :]
Tensor select_position(const Tensor& x, std::size_t position);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean over the batch of -log softmax(logits)[target]; logits[B,K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);
// sum_i w_i * nll_i / sum_i w_i over rows of logits[N,K].
Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                              std::span<const double> weights);

}  // namespace erp
