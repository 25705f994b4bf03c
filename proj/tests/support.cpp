#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

namespace test {

namespace fs = std::filesystem;
namespace ad = har::ad;
using har::Rng;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("har_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GradReport grad_check(const std::vector<std::pair<std::string, Tensor>>& params, const std::function<Tensor()>& loss,
                      double h) {
  for (const auto& entry : params) Tensor(entry.second).zero_grad();
  ad::backward(loss());

  GradReport report;
  for (const auto& [name, p] : params) {
    Tensor t = p;
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.size(), 0.0);
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double up, down;
      {
        ad::NoGradGuard guard;
        values[i] = saved + h;
        up = loss().item();
        values[i] = saved - h;
        down = loss().item();
      }
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
    }
    t.zero_grad();
  }
  return report;
}

har::ModelSpec toy_spec(har::ModelKind kind) {
  har::InputDims dims;
  dims.steps = 6;
  dims.channels = 2;
  dims.scales = 4;
  har::ModelSpec spec = har::ModelSpec::make(kind, dims, 3);
  auto& h = spec.hyper;
  h.head_widths = {5, 4};
  h.lstm_hidden = 3;
  h.bilstm_layers = 2;
  h.attention_lstm_layers = 2;
  h.cnn_filters1 = 3;
  h.cnn_filters2 = 2;
  h.transformer_layers = 1;
  h.transformer_heads = 2;
  h.transformer_dim = 4;
  h.transformer_ff = 5;
  h.resnet_channels = {2, 3};
  h.mrnet_stat_width = 3;
  h.mrnet_conv = {2, 3};
  spec.validate();
  return spec;
}

har::Batch random_batch(const har::ModelSpec& spec, std::size_t n, std::uint64_t seed) {
  har::Rng rng(seed);
  auto fill = [&](ad::Shape shape) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = rng.uniform();
    return Tensor::from(std::move(shape), std::move(v));
  };
  const auto& d = spec.dims;
  har::Batch b;
  b.size = n;
  if (spec.uses(har::Representation::temporal)) b.temporal = fill({n, d.steps, d.channels});
  if (spec.uses(har::Representation::statistical)) b.statistical = fill({n, d.statistical()});
  if (spec.uses(har::Representation::spectral)) b.spectral = fill({n, d.scales, d.steps, d.channels});
  return b;
}

Matrix cwt_direct(std::span<const double> signal, std::span<const double> scales, double omega0) {
  const double norm = std::pow(std::numbers::pi, -0.25);
  const auto s = static_cast<long>(signal.size());
  Matrix out(scales.size(), signal.size());
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const double a = scales[k];
    for (long t = 0; t < s; ++t) {
      std::complex<double> acc = 0.0;
      for (long u = 0; u < s; ++u) {
        const double x = static_cast<double>(u - t) / a;
        if (std::abs(x) > 4.0) continue;
        const std::complex<double> psi = norm * std::exp(std::complex<double>(0.0, omega0 * x)) * std::exp(-x * x / 2);
        acc += signal[static_cast<std::size_t>(u)] * std::conj(psi) / std::sqrt(a);
      }
      out(k, static_cast<std::size_t>(t)) = std::abs(acc);
    }
  }
  return out;
}

std::vector<double> moving_average_prefix(std::span<const double> x, int m) {
  const long n = static_cast<long>(x.size());
  std::vector<double> prefix(x.size() + 1, 0.0);
  for (long i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
  const long back = (m - 1) / 2, ahead = m - 1 - back;
  std::vector<double> out(x.size());
  for (long t = 0; t < n; ++t) {
    const long lo = std::max(0L, t - back), hi = std::min(n - 1, t + ahead);
    out[t] = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(hi - lo + 1);
  }
  return out;
}

double supcon_direct(const Matrix& e, std::span<const int> labels, double tau) {
  const std::size_t b = e.rows();
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < e.cols(); ++c) s += e(i, c) * e(j, c);
    return s;
  };
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (k != i) denom += std::exp(dot(i, k) / tau);
    double term = 0.0;
    std::size_t positives = 0;
    for (std::size_t p = 0; p < b; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      term += std::log(std::exp(dot(i, p) / tau) / denom);
      ++positives;
    }
    if (positives == 0) continue;
    total += -term / static_cast<double>(positives);
    ++anchors;
  }
  return total / static_cast<double>(anchors);
}

void lstm_step_direct(std::span<const double> x, std::span<const double> h, std::span<const double> c,
                      const Matrix& wx, const Matrix& wh, std::span<const double> b, std::vector<double>& h_out,
                      std::vector<double>& c_out) {
  const std::size_t H = h.size();
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  h_out.assign(H, 0.0);
  c_out.assign(H, 0.0);
  for (std::size_t j = 0; j < H; ++j) {
    double z[4];
    for (std::size_t g = 0; g < 4; ++g) {
      double s = b[g * H + j];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * wx(i, g * H + j);
      for (std::size_t i = 0; i < H; ++i) s += h[i] * wh(i, g * H + j);
      z[g] = s;
    }
    const double in = sig(z[0]), forget = sig(z[1]), cell = std::tanh(z[2]), out = sig(z[3]);
    c_out[j] = forget * c[j] + in * cell;
    h_out[j] = out * std::tanh(c_out[j]);
  }
}

void AdamOracle::step(std::vector<double>& x, const std::vector<double>& g) {
  if (m.empty()) {
    m.assign(x.size(), 0.0);
    v.assign(x.size(), 0.0);
  }
  ++t;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m[i] = b1 * m[i] + (1 - b1) * g[i];
    v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
    const double mh = m[i] / (1 - std::pow(b1, static_cast<double>(t)));
    const double vh = v[i] / (1 - std::pow(b2, static_cast<double>(t)));
    x[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
}

har::ExperimentConfig synthetic_config(const fs::path& out, int epochs_ce, int epochs_pretrain) {
  const nlohmann::json j = {
      {"dataset", {{"synthetic", {{"classes", 6}, {"users", 5}, {"channels", 3}, {"length", 320}, {"seed", 7}}}}},
      {"preprocess", {{"window_size", 64}, {"overlap_fraction", 0.5}, {"smoothing_window", 4}}},
      {"features", {{"cwt_scales", 12}, {"omega0", 6.0}}},
      {"split", {{"strategy", "segment_stratified"}, {"seed", 1}}},
      {"training", {{"epochs_ce", epochs_ce}, {"epochs_pretrain", epochs_pretrain}, {"schedule", "ce_only"}, {"seed", 1}}},
      {"models", "all"},
      {"output_dir", out.string()}};
  return har::ExperimentConfig::from_json(j);
}

}  // namespace test

namespace test {

namespace {

Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(ad::Shape shape, Rng& rng) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// sum(out * R) with a fixed random R, so every output coordinate carries a distinct weight.
Tensor weighted(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, random_tensor(out.shape(), rng, -1.0, 1.0, false)));
}

using Inputs = std::vector<std::pair<std::string, Tensor>>;

NamedCheck check(const std::string& name, const Inputs& inputs, const std::function<Tensor()>& out) {
  return {name, grad_check(inputs, [&] { return weighted(out(), 99); })};
}

}  // namespace

std::vector<NamedCheck> primitive_grad_suite() {
  namespace A = har::ad;
  Rng rng(2024);
  std::vector<NamedCheck> out;

  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng),
       col = random_tensor({3, 1}, rng);
  out.push_back(check("add", {{"a", a}, {"b", b}}, [&] { return A::add(a, b); }));
  out.push_back(check("add_broadcast", {{"a", a}, {"row", row}}, [&] { return A::add(a, row); }));
  out.push_back(check("sub_broadcast", {{"a", a}, {"col", col}}, [&] { return A::sub(a, col); }));
  out.push_back(check("mul_broadcast", {{"a", a}, {"col", col}}, [&] { return A::mul(a, col); }));
  out.push_back(check("scale", {{"a", a}}, [&] { return A::scale(a, -2.5); }));
  out.push_back(check("add_scalar", {{"a", a}}, [&] { return A::add_scalar(a, 0.75); }));
  out.push_back(check("neg", {{"a", a}}, [&] { return A::neg(a); }));
  auto kinked = away_from_zero({3, 4}, rng);
  out.push_back(check("relu", {{"x", kinked}}, [&] { return A::relu(kinked); }));
  out.push_back(check("sigmoid", {{"a", a}}, [&] { return A::sigmoid(a); }));
  out.push_back(check("tanh", {{"a", a}}, [&] { return A::tanh(a); }));
  out.push_back(check("exp", {{"a", a}}, [&] { return A::exp(a); }));
  auto positive = random_tensor({3, 4}, rng, 0.2, 2.0);
  out.push_back(check("log", {{"p", positive}}, [&] { return A::log(positive, 1e-12); }));
  out.push_back(check("square", {{"a", a}}, [&] { return A::square(a); }));
  out.push_back(check("sqrt", {{"p", positive}}, [&] { return A::sqrt(positive); }));

  auto m3 = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), bias = random_tensor({5}, rng);
  out.push_back(check("matmul", {{"x", m3}, {"w", w}}, [&] { return A::matmul(m3, w); }));
  auto bm = random_tensor({2, 4, 3}, rng);
  out.push_back(check("bmm", {{"x", m3}, {"y", bm}}, [&] { return A::bmm(m3, bm); }));
  out.push_back(check("linear", {{"x", m3}, {"w", w}, {"b", bias}}, [&] { return A::linear(m3, w, bias); }));

  out.push_back(check("reshape", {{"x", m3}}, [&] { return A::reshape(m3, {6, 4}); }));
  out.push_back(check("permute", {{"x", m3}}, [&] { return A::permute(m3, {2, 0, 1}); }));
  out.push_back(check("transpose", {{"x", m3}}, [&] { return A::transpose(m3); }));
  auto m3b = random_tensor({2, 2, 4}, rng);
  out.push_back(check("concat", {{"x", m3}, {"y", m3b}}, [&] { return A::concat({m3, m3b}, 1); }));
  out.push_back(check("slice", {{"x", m3}}, [&] { return A::slice(m3, 1, 1, 3); }));
  out.push_back(check("select", {{"x", m3}}, [&] { return A::select(m3, 2, 1); }));
  out.push_back(check("stack", {{"a", a}, {"b", b}}, [&] { return A::stack({a, b}, 1); }));

  out.push_back({"sum", grad_check({{"x", m3}}, [&] { return A::sum(A::square(m3)); })});
  out.push_back({"mean", grad_check({{"x", m3}}, [&] { return A::mean(A::square(m3)); })});
  out.push_back(check("sum_axis", {{"x", m3}}, [&] { return A::sum_axis(m3, 1); }));
  out.push_back(check("mean_axis", {{"x", m3}}, [&] { return A::mean_axis(m3, 0); }));

  out.push_back(check("softmax", {{"x", m3}}, [&] { return A::softmax(m3); }));
  out.push_back(check("log_softmax", {{"x", m3}}, [&] { return A::log_softmax(m3); }));
  out.push_back(check("l2_normalize", {{"x", m3}}, [&] { return A::l2_normalize(m3); }));
  auto gamma = random_tensor({4}, rng), beta = random_tensor({4}, rng);
  out.push_back(check("layer_norm", {{"x", m3}, {"gamma", gamma}, {"beta", beta}},
                      [&] { return A::layer_norm(m3, gamma, beta); }));
  const std::vector<int> picks = {3, 0, 2};
  out.push_back(check("pick", {{"a", a}}, [&] { return A::pick(a, picks); }));
  out.push_back(check("dropout", {{"a", a}}, [&] {
    Rng mask(5);  // same mask on every evaluation
    return A::dropout(a, 0.3, true, mask);
  }));

  auto seq = random_tensor({2, 7, 3}, rng), k1 = random_tensor({3, 3, 4}, rng);
  out.push_back(check("conv1d", {{"x", seq}, {"w", k1}}, [&] { return A::conv1d(seq, k1); }));
  auto img = random_tensor({2, 5, 6, 2}, rng), k2 = random_tensor({3, 3, 2, 3}, rng);
  out.push_back(check("conv2d", {{"x", img}, {"w", k2}}, [&] { return A::conv2d(img, k2, 1); }));
  out.push_back(check("conv2d_stride2", {{"x", img}, {"w", k2}}, [&] { return A::conv2d(img, k2, 2); }));
  out.push_back(check("max_pool1d", {{"x", seq}}, [&] { return A::max_pool1d(seq, 2, 2); }));

  auto logits = random_tensor({4, 6}, rng, -2, 2);
  const std::vector<int> labels = {0, 5, 2, 2};
  out.push_back({"ce_loss", grad_check({{"logits", logits}}, [&] { return har::ce_loss(logits, labels).scalar; })});
  auto emb = random_tensor({6, 5}, rng);
  const std::vector<int> groups = {0, 1, 0, 1, 2, 2};
  out.push_back({"supcon_loss", grad_check({{"e", emb}}, [&] {
                   return har::supcon_loss(A::l2_normalize(emb), groups, 0.5).scalar;
                 })});
  auto ea = random_tensor({5, 4}, rng), ep = random_tensor({5, 4}, rng), en = random_tensor({5, 4}, rng);
  out.push_back({"triplet_loss", grad_check({{"a", ea}, {"p", ep}, {"n", en}}, [&] {
                   return har::triplet_loss(ea, ep, en, 1.0).scalar;
                 })});
  return out;
}

std::vector<NamedCheck> model_grad_suite() {
  std::vector<NamedCheck> out;
  for (har::ModelKind kind : har::all_model_kinds()) {
    if (!har::is_neural(kind)) continue;
    const har::ModelSpec spec = toy_spec(kind);
    auto model = har::build(spec, 17);
    auto& net = har::as_neural(*model);
    // Zero-initialized biases can park a ReLU exactly on its kink; move to a generic point.
    Rng jitter(31);
    for (const auto& entry : net.parameters().entries())
      for (double& v : Tensor(entry.second).mutable_values()) v += jitter.uniform(-0.05, 0.05);
    const har::Batch batch = random_batch(spec, 3, 23);
    const std::vector<int> labels = {0, 2, 1};
    out.push_back({har::to_string(kind), grad_check(net.parameters().entries(), [&] {
                     return har::ce_loss(net.logits(batch, true), labels).scalar;
                   })});
  }
  return out;
}

}  // namespace test
