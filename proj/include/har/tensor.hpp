#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "har/common.hpp"

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// Every op returns a new Tensor. When any input requires a gradient the result
// records its inputs and a backward rule; backward() walks that graph once in
// reverse topological order and then releases it.
namespace har::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;     // set on the loss node once backward() has run
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient, or an empty span when none has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history.
  Tensor detach() const;
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered operation records reachable from a root.
struct Graph {
  std::vector<Node*> order;  // inputs before outputs
};

Graph build_graph(const Tensor& root);

/// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from `loss`.
/// The loss must be a scalar; the graph is released afterwards, so a second call
/// without a fresh forward pass throws.
void backward(const Tensor& loss);

/// While alive on this thread, ops record no history (inference mode).
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

// ---- elementwise (NumPy-style broadcasting for binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log of max(a, floor).
Tensor log(const Tensor& a, double floor = 0.0);
Tensor square(const Tensor& a);
/// sqrt with a zero subgradient at 0.
Tensor sqrt(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- linear algebra ----
/// a: [..., k], b: [k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a: [B, m, k], b: [B, k, n] -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);
/// x: [..., in], weight: [in, out], bias: [out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Removes `axis` by taking `index` along it.
Tensor select(const Tensor& a, std::size_t axis, std::size_t index);
/// Stacks equally shaped tensors along a new axis.
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);

// ---- normalization / probability ----
Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);  // over the last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// rows: [B, C] -> [B], picking rows[b, index[b]].
Tensor pick(const Tensor& rows, std::span<const int> index);
/// Inverted dropout; identity unless `training` and p > 0.
Tensor dropout(const Tensor& a, double p, bool training, Rng& rng);

// ---- convolution / pooling (channels-last) ----
/// x: [B, S, Cin], w: [k, Cin, Cout]; stride 1, same padding.
Tensor conv1d(const Tensor& x, const Tensor& w);
/// x: [B, H, W, Cin], w: [kh, kw, Cin, Cout]; padding (k - 1) / 2.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1);
/// x: [B, S, C] -> [B, (S - window) / stride + 1, C]
Tensor max_pool1d(const Tensor& x, std::size_t window, std::size_t stride);

// ---- optimizer ----
struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {});

  /// One bias-corrected update from the accumulated gradients, then zeroes them.
  void step();
  void zero_grad();
  long steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long step_ = 0;
};

}  // namespace har::ad
