// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap, shared handle onto a node of the computation graph.
// Every op that sees an input with requires_grad() (while grad mode is on)
// records a backward closure on its output. backward(loss) sorts the graph
// reachable from the loss topologically and replays it in reverse.
//
// Gradient semantics:
//   * leaf gradients accumulate across backward() calls until zero_grad();
//   * interior gradients are reset at the start of every backward() call, so
//     calling backward() twice on the same graph doubles the leaf gradients.
//
// Graphs are confined to the thread that built them. Grad mode is
// thread-local, so concurrent forward passes over shared parameters are
// safe under NoGradGuard.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cofs {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

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
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;
  // Row/column counts of a 2-D tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Writable access to the storage; only meaningful for leaves (parameters,
  // inputs). Mutating an interior node invalidates its recorded backward.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient buffer; empty span if no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Copy of the values with no graph history.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>);
  friend struct detail::Node;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op output. When grad mode is on and any input requires grad the
// result is an interior node that remembers the inputs; otherwise it is a
// constant leaf.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs);

// Attaches the backward closure to an op result (no-op for constants).
void set_backward(const Tensor& out, std::function<void(detail::Node&)> fn);

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Throws std::invalid_argument if loss is not a single element.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. All shapes are checked; mismatches throw std::invalid_argument.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a[m x n] + bias[n], bias broadcast over rows. The only broadcast supported.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
// x[m x k] * w[k x n] + b[n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& x);
// Exact form: x * Phi(x) with Phi the standard normal CDF (erf based).
Tensor gelu(const Tensor& x);

// Softmax over `axis` of a 1-D or 2-D tensor (max-subtracted).
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
// Mean over rows of a 2-D tensor -> [1 x n].
Tensor mean_rows(const Tensor& a);

// Concatenate 2-D tensors vertically (same column count).
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(std::initializer_list<Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
// out[i] = table[indices[i]] (embedding lookup); gradients scatter-add.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

// Row-wise multi-head attention over packed sequences.
//
// q is [Nq x d], k and v are [Nk x d]; d is split into `heads` contiguous
// column blocks of d/heads. Each segment pairs a block of query rows with a
// block of key rows, and queries only attend within their segment. With
// `causal`, query row i of a segment sees key rows j <= i.
// An explicit mask (only for a single segment) marks allowed (true) entries;
// masked entries receive -inf bias and contribute exactly zero weight.
struct AttentionSegment {
  std::size_t q_begin = 0, q_len = 0;
  std::size_t k_begin = 0, k_len = 0;
};

struct AttentionSpec {
  std::size_t heads = 1;
  std::vector<AttentionSegment> segments;  // empty -> one segment over everything
  bool causal = false;
  std::optional<std::vector<std::vector<bool>>> mask;
};

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec);
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::optional<std::vector<std::vector<bool>>>& mask = std::nullopt,
                 std::size_t heads = 1);

// 2-D convolution of x[Cin x H x W] with w[Cout x Cin x kh x kw] and b[Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);
// Mean over spatial positions of x[C x H x W] -> [1 x C].
Tensor global_avg_pool(const Tensor& x);

// Sum over rows of -log softmax(logits[r])[target[r]].
Tensor cross_entropy_sum(const Tensor& logits, std::span<const std::size_t> targets);

}  // namespace cofs
