#include "har/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <Eigen/Dense>

namespace har::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(Shape shape, const char* op) {
  auto n = std::make_shared<Node>();
  n->value.assign(numel(shape), 0.0);
  n->shape = std::move(shape);
  n->op = op;
  return n;
}

// Attaches history to `out` when gradients are enabled and some input needs one.
Tensor finish(std::shared_ptr<Node> out, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> backward_fn) {
  if (g_grad_enabled) {
    bool any = false;
    for (const auto* t : inputs) any = any || t->requires_grad();
    if (any) {
      out->requires_grad = true;
      for (const auto* t : inputs) out->inputs.push_back(t->shared());
      out->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(out));
}

Tensor finish_many(std::shared_ptr<Node> out, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      out->requires_grad = true;
      for (const auto& t : inputs) out->inputs.push_back(t.shared());
      out->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(out));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::string shapes_msg(const char* op, const Tensor& a, const Tensor& b) {
  return std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape());
}

// ---- broadcasting ----

enum class BroadcastMode { same, b_tiles, a_tiles, general };

struct Broadcast {
  Shape out;
  BroadcastMode mode = BroadcastMode::same;
  std::shared_ptr<std::vector<std::size_t>> a_index;  // general mode only
  std::shared_ptr<std::vector<std::size_t>> b_index;
};

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  const Shape s = strip_leading_ones(small);
  if (s.size() > big.size()) return false;
  return std::equal(s.begin(), s.end(), big.end() - static_cast<std::ptrdiff_t>(s.size()));
}

Broadcast plan_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  Broadcast plan;
  if (a.shape() == b.shape()) {
    plan.out = a.shape();
    return plan;
  }
  if (a.rank() >= b.rank() && is_suffix(b.shape(), a.shape())) {
    plan.out = a.shape();
    plan.mode = BroadcastMode::b_tiles;
    return plan;
  }
  if (b.rank() >= a.rank() && is_suffix(a.shape(), b.shape())) {
    plan.out = b.shape();
    plan.mode = BroadcastMode::a_tiles;
    return plan;
  }
  const std::size_t rank = std::max(a.rank(), b.rank());
  Shape sa(rank, 1), sb(rank, 1);
  std::copy(a.shape().begin(), a.shape().end(), sa.begin() + static_cast<std::ptrdiff_t>(rank - a.rank()));
  std::copy(b.shape().begin(), b.shape().end(), sb.begin() + static_cast<std::ptrdiff_t>(rank - b.rank()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    require(sa[i] == sb[i] || sa[i] == 1 || sb[i] == 1, shapes_msg(op, a, b));
    plan.out[i] = std::max(sa[i], sb[i]);
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto st_a = strides(sa), st_b = strides(sb);
  const std::size_t n = numel(plan.out);
  plan.a_index = std::make_shared<std::vector<std::size_t>>(n);
  plan.b_index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*plan.a_index)[k] = ia;
    (*plan.b_index)[k] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += st_a[d];
      ib += st_b[d];
      if (idx[d] < plan.out[d]) break;
      ia -= st_a[d] * idx[d];
      ib -= st_b[d] * idx[d];
      idx[d] = 0;
    }
  }
  plan.mode = BroadcastMode::general;
  return plan;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_pair(const Broadcast& plan, std::size_t na, std::size_t nb, F&& f) {
  const std::size_t n = numel(plan.out);
  switch (plan.mode) {
    case BroadcastMode::same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      break;
    case BroadcastMode::b_tiles:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
      break;
    case BroadcastMode::a_tiles:
      for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
      break;
    case BroadcastMode::general: {
      const auto& ai = *plan.a_index;
      const auto& bi = *plan.b_index;
      for (std::size_t i = 0; i < n; ++i) f(i, ai[i], bi[i]);
      break;
    }
  }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  auto plan = plan_broadcast(op, a, b);
  auto out = make_node(plan.out, op);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  auto& ov = out->value;
  for_each_pair(plan, av.size(), bv.size(), [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = fwd(av[i], bv[j]); });
  return finish(std::move(out), {&a, &b}, [plan, da, db](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for_each_pair(plan, na.value.size(), nb.value.size(),
                    [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += da(g[o], na.value[i], nb.value[j]); });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for_each_pair(plan, na.value.size(), nb.value.size(),
                    [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += db(g[o], na.value[i], nb.value[j]); });
    }
  });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename Fwd, typename D>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, D dydx) {
  auto out = make_node(a.shape(), op);
  const auto& av = a.node()->value;
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i]);
  return finish(std::move(out), {&a}, [dydx](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * dydx(in.value[i], self.value[i]);
  });
}

// Splits a shape around `axis` into (outer, dim, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// ---- convolution core (channels-last, im2col per sample) ----

struct ConvGeom {
  std::size_t batch, height, width, cin, kh, kw, cout, stride, pad_top, pad_left, out_h, out_w;
  std::size_t patch() const { return kh * kw * cin; }
  std::size_t positions() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      double* row = cols + (oy * g.out_w + ox) * patch;
      for (std::size_t i = 0; i < g.kh; ++i) {
        const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad_top);
        for (std::size_t j = 0; j < g.kw; ++j) {
          const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad_left);
          double* dst = row + (i * g.kw + j) * g.cin;
          if (y < 0 || xx < 0 || y >= static_cast<std::ptrdiff_t>(g.height) || xx >= static_cast<std::ptrdiff_t>(g.width)) {
            std::fill(dst, dst + g.cin, 0.0);
          } else {
            const double* src = x + (static_cast<std::size_t>(y) * g.width + static_cast<std::size_t>(xx)) * g.cin;
            std::copy(src, src + g.cin, dst);
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t patch = g.patch();
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const double* row = cols + (oy * g.out_w + ox) * patch;
      for (std::size_t i = 0; i < g.kh; ++i) {
        const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad_top);
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
        for (std::size_t j = 0; j < g.kw; ++j) {
          const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad_left);
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.width)) continue;
          const double* src = row + (i * g.kw + j) * g.cin;
          double* dst = dx + (static_cast<std::size_t>(y) * g.width + static_cast<std::size_t>(xx)) * g.cin;
          for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

Tensor conv_core(const char* op, const Tensor& x, const Tensor& w, const ConvGeom& g, Shape out_shape) {
  auto out = make_node(std::move(out_shape), op);
  const std::size_t in_size = g.height * g.width * g.cin;
  const std::size_t out_size = g.positions() * g.cout;
  std::vector<double> cols(g.positions() * g.patch());
  const ConstMap W(w.node()->value.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.cout));
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.node()->value.data() + b * in_size, g, cols.data());
    MutMap Y(out->value.data() + b * out_size, static_cast<Eigen::Index>(g.positions()), static_cast<Eigen::Index>(g.cout));
    Y.noalias() = ConstMap(cols.data(), static_cast<Eigen::Index>(g.positions()), static_cast<Eigen::Index>(g.patch())) * W;
  }
  return finish(std::move(out), {&x, &w}, [g, in_size, out_size](Node& self) {
    Node& nx = *self.inputs[0];
    Node& nw = *self.inputs[1];
    const auto P = static_cast<Eigen::Index>(g.positions());
    const auto K = static_cast<Eigen::Index>(g.patch());
    const auto Co = static_cast<Eigen::Index>(g.cout);
    std::vector<double> cols(g.positions() * g.patch());
    std::vector<double> dcols(nx.requires_grad ? cols.size() : 0);
    const ConstMap W(nw.value.data(), K, Co);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const ConstMap dY(self.grad.data() + b * out_size, P, Co);
      if (nw.requires_grad) {
        im2col(nx.value.data() + b * in_size, g, cols.data());
        MutMap dW(nw.grad_buffer().data(), K, Co);
        dW.noalias() += ConstMap(cols.data(), P, K).transpose() * dY;
      }
      if (nx.requires_grad) {
        MutMap dC(dcols.data(), P, K);
        dC.noalias() = dY * W.transpose();
        col2im_add(dcols.data(), g, nx.grad_buffer().data() + b * in_size);
      }
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = make_node(std::move(shape), "leaf");
  std::fill(n->value.begin(), n->value.end(), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  require(numel(shape) == values.size(),
          "Tensor::from: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

double Tensor::item() const {
  require(size() == 1, "item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Graph build_graph(const Tensor& root) {
  Graph g;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (loss.node()->consumed) throw Error("backward called twice on the same graph; run a fresh forward pass");
  if (!loss.requires_grad()) throw Error("loss does not depend on any tensor that requires a gradient");
  const Graph graph = build_graph(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : graph.order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      if (n != loss.node()) n->grad.clear();
    }
  }
  loss.node()->consumed = true;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op("scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op("add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a, double floor) {
  return unary_op(
      "log", a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary_op("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a,
      [](double x) {
        if (x < 0) throw Error("sqrt of negative value");
        return std::sqrt(x);
      },
      [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() >= 1 && b.rank() == 2 && a.shape().back() == b.dim(0), shapes_msg("matmul", a, b));
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  if (a.rank() == 1) out_shape = {n};
  auto out = make_node(out_shape, "matmul");
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MutMap(out->value.data(), M, N).noalias() = ConstMap(a.node()->value.data(), M, K) * ConstMap(b.node()->value.data(), K, N);
  return finish(std::move(out), {&a, &b}, [M, K, N](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const ConstMap G(self.grad.data(), M, N);
    if (na.requires_grad) MutMap(na.grad_buffer().data(), M, K).noalias() += G * ConstMap(nb.value.data(), K, N).transpose();
    if (nb.requires_grad) MutMap(nb.grad_buffer().data(), K, N).noalias() += ConstMap(na.value.data(), M, K).transpose() * G;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1), shapes_msg("bmm", a, b));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  auto out = make_node({batch, m, n}, "bmm");
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out->value.data() + i * m * n, M, N).noalias() =
        ConstMap(a.node()->value.data() + i * m * k, M, K) * ConstMap(b.node()->value.data() + i * k * n, K, N);
  }
  return finish(std::move(out), {&a, &b}, [batch, m, k, n, M, K, N](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < batch; ++i) {
      const ConstMap G(self.grad.data() + i * m * n, M, N);
      if (na.requires_grad) {
        MutMap(na.grad_buffer().data() + i * m * k, M, K).noalias() += G * ConstMap(nb.value.data() + i * k * n, K, N).transpose();
      }
      if (nb.requires_grad) {
        MutMap(nb.grad_buffer().data() + i * k * n, K, N).noalias() += ConstMap(na.value.data() + i * m * k, M, K).transpose() * G;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add(matmul(x, weight), bias); }

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = a.node()->value;
  out->op = "reshape";
  return finish(std::move(out), {&a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const std::size_t rank = a.rank();
  require(order.size() == rank, "permute: order has wrong length for " + to_string(a.shape()));
  std::vector<bool> seen(rank, false);
  for (auto o : order) {
    require(o < rank && !seen[o], "permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = a.dim(order[i]);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  const std::size_t n = a.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*src)[k] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += in_strides[order[d]];
      if (idx[d] < out_shape[d]) break;
      offset -= in_strides[order[d]] * idx[d];
      idx[d] = 0;
    }
  }
  auto out = make_node(out_shape, "permute");
  for (std::size_t k = 0; k < n; ++k) out->value[k] = a.node()->value[(*src)[k]];
  return finish(std::move(out), {&a}, [src](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < src->size(); ++k) g[(*src)[k]] += self.grad[k];
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() >= 2, "transpose needs rank >= 2");
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[a.rank() - 1], order[a.rank() - 2]);
  return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat: rank mismatch " + to_string(first) + " vs " + to_string(p.shape()));
    for (std::size_t d = 0; d < first.size(); ++d) {
      require(d == axis || p.dim(d) == first[d], "concat: shape mismatch " + to_string(first) + " vs " + to_string(p.shape()));
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto outer_split = split_axis(out_shape, axis);
  auto out = make_node(out_shape, "concat");
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * outer_split.inner);
  const std::size_t row = out_shape[axis] * outer_split.inner;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& v = parts[i].node()->value;
    for (std::size_t o = 0; o < outer_split.outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[i]), widths[i],
                  out->value.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[i];
  }
  return finish_many(std::move(out), parts, [widths, row, outer = outer_split.outer](Node& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node& in = *self.inputs[i];
      if (in.requires_grad) {
        auto& g = in.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < widths[i]; ++j) g[o * widths[i] + j] += self.grad[o * row + offset + j];
        }
      }
      offset += widths[i];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require(axis < a.rank() && begin < end && end <= a.dim(axis),
          "slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range on axis " +
              std::to_string(axis) + " of " + to_string(a.shape()));
  const auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  auto out = make_node(out_shape, "slice");
  const std::size_t width = (end - begin) * sp.inner;
  const std::size_t row = sp.dim * sp.inner;
  const std::size_t start = begin * sp.inner;
  const auto& v = a.node()->value;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * row + start), width,
                out->value.begin() + static_cast<std::ptrdiff_t>(o * width));
  }
  return finish(std::move(out), {&a}, [outer = sp.outer, width, row, start](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < width; ++j) g[o * row + start + j] += self.grad[o * width + j];
    }
  });
}

Tensor select(const Tensor& a, std::size_t axis, std::size_t index) {
  Shape s = a.shape();
  auto sliced = slice(a, axis, index, index + 1);
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(sliced, s);
}

Tensor stack(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "stack of zero tensors");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    require(p.shape() == parts.front().shape(), "stack: shape mismatch");
    Shape s = p.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, axis);
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  auto out = make_node({}, "sum");
  double s = 0.0;
  for (double v : a.node()->value) s += v;
  out->value[0] = s;
  return finish(std::move(out), {&a}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require(a.size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  require(axis < a.rank(), "sum_axis: axis out of range for " + to_string(a.shape()));
  const auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto out = make_node(out_shape, "sum_axis");
  const auto& v = a.node()->value;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t d = 0; d < sp.dim; ++d) {
      for (std::size_t i = 0; i < sp.inner; ++i) out->value[o * sp.inner + i] += v[(o * sp.dim + d) * sp.inner + i];
    }
  }
  return finish(std::move(out), {&a}, [sp](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t d = 0; d < sp.dim; ++d) {
        for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.dim + d) * sp.inner + i] += self.grad[o * sp.inner + i];
      }
    }
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  require(axis < a.rank() && a.dim(axis) > 0, "mean_axis: bad axis for " + to_string(a.shape()));
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---- normalization / probability ----

Tensor softmax(const Tensor& a) {
  require(a.rank() >= 1, "softmax of a scalar");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  auto out = make_node(a.shape(), "softmax");
  const auto& v = a.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * d;
    double* y = out->value.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  return finish(std::move(out), {&a}, [d, rows](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  require(a.rank() >= 1, "log_softmax of a scalar");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  auto out = make_node(a.shape(), "log_softmax");
  const auto& v = a.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out->value[r * d + j] = x[j] - lse;
  }
  return finish(std::move(out), {&a}, [d, rows](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double total = 0.0;
      for (std::size_t j = 0; j < d; ++j) total += gy[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor l2_normalize(const Tensor& a, double eps) {
  require(a.rank() >= 1, "l2_normalize of a scalar");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  auto out = make_node(a.shape(), "l2_normalize");
  auto norms = std::make_shared<std::vector<double>>(rows);
  const auto& v = a.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += v[r * d + j] * v[r * d + j];
    const double n = std::max(std::sqrt(ss), eps);
    (*norms)[r] = n;
    for (std::size_t j = 0; j < d; ++j) out->value[r * d + j] = v[r * d + j] / n;
  }
  return finish(std::move(out), {&a}, [d, rows, norms, eps](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = (*norms)[r];
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      if (n > eps) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / n;
      } else {
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] / eps;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() >= 1, "layer_norm of a scalar");
  const std::size_t d = x.shape().back();
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
          "layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
  const std::size_t rows = x.size() / d;
  auto out = make_node(x.shape(), "layer_norm");
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& v = x.node()->value;
  const auto& gm = gamma.node()->value;
  const auto& bt = beta.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += v[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (v[r * d + j] - mu) * (v[r * d + j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (v[r * d + j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out->value[r * d + j] = gm[j] * h + bt[j];
    }
  }
  return finish(std::move(out), {&x, &gamma, &beta}, [d, rows, xhat, inv_std](Node& self) {
    Node& nx = *self.inputs[0];
    Node& ng = *self.inputs[1];
    Node& nb = *self.inputs[2];
    const auto& g = self.grad;
    if (ng.requires_grad || nb.requires_grad) {
      auto& gg = ng.grad_buffer();
      auto& gb = nb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          gg[j] += g[r * d + j] * (*xhat)[r * d + j];
          gb[j] += g[r * d + j];
        }
      }
    }
    if (nx.requires_grad) {
      auto& gx = nx.grad_buffer();
      const auto D = static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * ng.value[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + j];
        }
        mean_dh /= D;
        mean_dh_h /= D;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = g[r * d + j] * ng.value[j];
          gx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
        }
      }
    }
  });
}

Tensor pick(const Tensor& rows, std::span<const int> index) {
  require(rows.rank() == 2 && rows.dim(0) == index.size(),
          "pick: need [B, C] rows and B indices, got " + to_string(rows.shape()) + " and " + std::to_string(index.size()));
  const std::size_t B = rows.dim(0), C = rows.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (index[b] < 0 || static_cast<std::size_t>(index[b]) >= C) {
      throw ShapeError("pick: index " + std::to_string(index[b]) + " out of range [0, " + std::to_string(C) + ")");
    }
    (*idx)[b] = b * C + static_cast<std::size_t>(index[b]);
  }
  auto out = make_node({B}, "pick");
  for (std::size_t b = 0; b < B; ++b) out->value[b] = rows.node()->value[(*idx)[b]];
  return finish(std::move(out), {&rows}, [idx](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < idx->size(); ++b) g[(*idx)[b]] += self.grad[b];
  });
}

Tensor dropout(const Tensor& a, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

// ---- convolution / pooling ----

Tensor conv1d(const Tensor& x, const Tensor& w) {
  require(x.rank() == 3 && w.rank() == 3 && x.dim(2) == w.dim(1), shapes_msg("conv1d", x, w));
  const std::size_t k = w.dim(0);
  ConvGeom g{x.dim(0), 1, x.dim(1), x.dim(2), 1, k, w.dim(2), 1, 0, (k - 1) / 2, 1, x.dim(1)};
  return conv_core("conv1d", x, w, g, {x.dim(0), x.dim(1), w.dim(2)});
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(3) == w.dim(2), shapes_msg("conv2d", x, w));
  require(stride >= 1, "conv2d stride must be >= 1");
  const std::size_t kh = w.dim(0), kw = w.dim(1);
  const std::size_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  require(x.dim(1) + 2 * ph >= kh && x.dim(2) + 2 * pw >= kw, shapes_msg("conv2d", x, w));
  const std::size_t oh = (x.dim(1) + 2 * ph - kh) / stride + 1;
  const std::size_t ow = (x.dim(2) + 2 * pw - kw) / stride + 1;
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kh, kw, w.dim(3), stride, ph, pw, oh, ow};
  return conv_core("conv2d", x, w, g, {x.dim(0), oh, ow, w.dim(3)});
}

Tensor max_pool1d(const Tensor& x, std::size_t window, std::size_t stride) {
  require(x.rank() == 3 && window >= 1 && stride >= 1 && x.dim(1) >= window,
          "max_pool1d: bad input " + to_string(x.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  const std::size_t So = (S - window) / stride + 1;
  auto out = make_node({B, So, C}, "max_pool1d");
  auto arg = std::make_shared<std::vector<std::size_t>>(B * So * C);
  const auto& v = x.node()->value;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < So; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t best = (b * S + t * stride) * C + c;
        for (std::size_t j = 1; j < window; ++j) {
          const std::size_t i = (b * S + t * stride + j) * C + c;
          if (v[i] > v[best]) best = i;
        }
        const std::size_t o = (b * So + t) * C + c;
        out->value[o] = v[best];
        (*arg)[o] = best;
      }
    }
  }
  return finish(std::move(out), {&x}, [arg](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < arg->size(); ++o) g[(*arg)[o]] += self.grad[o];
  });
}

// ---- Adam ----

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw Error("Adam given a tensor that does not require a gradient");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto values = p.mutable_values();
    const auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      values[j] -= config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace har::ad
