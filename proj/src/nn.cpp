#include "har/nn.hpp"

#include <cmath>
#include <fstream>

#include "binary_io.hpp"

namespace har::nn {
namespace {
constexpr std::uint32_t kCheckpointMagic = 0x48434b50;  // "HCKP"
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

Tensor Parameters::add(std::string name, Tensor t) {
  for (const auto& [n, _] : entries_) {
    if (n == name) throw Error("duplicate parameter name " + name);
  }
  entries_.emplace_back(std::move(name), t);
  return t;
}

std::vector<Tensor> Parameters::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

std::vector<std::vector<double>> Parameters::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& e : entries_) out.emplace_back(e.second.values().begin(), e.second.values().end());
  return out;
}

void Parameters::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != entries_.size()) throw Error("snapshot does not match parameter list");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].second.mutable_values();
    if (values[i].size() != dst.size()) throw Error("snapshot size mismatch for " + entries_[i].first);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void Parameters::save(const std::filesystem::path& path, const std::string& config_digest) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  io::write_pod(out, kCheckpointMagic);
  io::write_pod(out, kCheckpointVersion);
  io::write_string(out, config_digest);
  io::write_pod<std::uint64_t>(out, entries_.size());
  for (const auto& [name, t] : entries_) {
    io::write_string(out, name);
    io::write_array<std::uint64_t>(out, std::vector<std::uint64_t>(t.shape().begin(), t.shape().end()));
  }
  for (const auto& [name, t] : entries_) io::write_array<double>(out, t.values());
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

void Parameters::load(const std::filesystem::path& path, const std::string& config_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  if (io::read_pod<std::uint32_t>(in) != kCheckpointMagic) throw Error("not a checkpoint: " + path.string());
  const auto version = io::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto digest = io::read_string(in);
  if (digest != config_digest) {
    throw Error("checkpoint " + path.string() + " was written for config " + digest + ", expected " + config_digest);
  }
  const auto n = io::read_pod<std::uint64_t>(in);
  if (n != entries_.size()) throw Error("checkpoint has " + std::to_string(n) + " tensors, model has " + std::to_string(entries_.size()));
  for (const auto& [name, t] : entries_) {
    const auto stored = io::read_string(in);
    const auto shape = io::read_array<std::uint64_t>(in);
    if (stored != name || !std::equal(shape.begin(), shape.end(), t.shape().begin(), t.shape().end())) {
      throw Error("checkpoint tensor " + stored + " does not match model tensor " + name);
    }
  }
  for (auto& [name, t] : entries_) {
    const auto values = io::read_array<double>(in);
    auto dst = t.mutable_values();
    if (values.size() != dst.size()) throw Error("checkpoint payload size mismatch for " + name);
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

Tensor uniform_init(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Parameters& params, Rng& rng)
    : weight(params.add(name + ".weight", uniform_init({in, out}, in, rng))),
      bias(params.add(name + ".bias", Tensor::zeros({out}, true))) {}

LstmWeights::LstmWeights(const std::string& name, std::size_t in, std::size_t hidden_size, Parameters& params, Rng& rng)
    : hidden(hidden_size) {
  // Input and recurrent matrices together form one [in + H, 4H] map.
  const std::size_t fan_in = in + hidden;
  input_weight = params.add(name + ".input_weight", uniform_init({in, 4 * hidden}, fan_in, rng));
  recurrent_weight = params.add(name + ".recurrent_weight", uniform_init({hidden, 4 * hidden}, fan_in, rng));
  std::vector<double> b(4 * hidden, 0.0);
  std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden), b.begin() + static_cast<std::ptrdiff_t>(2 * hidden), 1.0);
  bias = params.add(name + ".bias", Tensor::from({4 * hidden}, std::move(b), true));
}

namespace {
LstmState gate_update(const Tensor& gates, const Tensor* c_prev, std::size_t H) {
  const Tensor i = ad::sigmoid(ad::slice(gates, 1, 0, H));
  const Tensor f = ad::sigmoid(ad::slice(gates, 1, H, 2 * H));
  const Tensor g = ad::tanh(ad::slice(gates, 1, 2 * H, 3 * H));
  const Tensor o = ad::sigmoid(ad::slice(gates, 1, 3 * H, 4 * H));
  Tensor c = ad::mul(i, g);
  if (c_prev) c = ad::add(ad::mul(f, *c_prev), c);
  return {ad::mul(o, ad::tanh(c)), c};
}
}  // namespace

LstmState lstm_cell(const Tensor& x_t, const LstmState& prev, const LstmWeights& w) {
  const Tensor gates = ad::add(ad::add(ad::matmul(x_t, w.input_weight), ad::matmul(prev.h, w.recurrent_weight)), w.bias);
  return gate_update(gates, &prev.c, w.hidden);
}

SequenceOutput lstm_sequence(const Tensor& x, const LstmWeights& w, bool reverse) {
  if (x.rank() != 3) throw ShapeError("lstm_sequence expects [B, S, in], got " + ad::to_string(x.shape()));
  const std::size_t S = x.dim(1);
  const std::size_t H = w.hidden;
  // Input projections for all steps in one product.
  const Tensor projected = ad::add(ad::matmul(x, w.input_weight), w.bias);
  std::vector<Tensor> outputs(S);
  LstmState state;
  for (std::size_t step = 0; step < S; ++step) {
    const std::size_t t = reverse ? S - 1 - step : step;
    Tensor gates = ad::select(projected, 1, t);
    if (step == 0) {
      state = gate_update(gates, nullptr, H);
    } else {
      gates = ad::add(gates, ad::matmul(state.h, w.recurrent_weight));
      state = gate_update(gates, &state.c, H);
    }
    outputs[t] = state.h;
  }
  return {ad::stack(outputs, 1), state.h};
}

BiLstmWeights::BiLstmWeights(const std::string& name, std::size_t in, std::size_t hidden, Parameters& params, Rng& rng)
    : forward(name + ".fwd", in, hidden, params, rng), backward(name + ".bwd", in, hidden, params, rng) {}

SequenceOutput bilstm_sequence(const Tensor& x, const BiLstmWeights& w) {
  const auto f = lstm_sequence(x, w.forward, false);
  const auto b = lstm_sequence(x, w.backward, true);
  return {ad::concat({f.sequence, b.sequence}, 2), ad::concat({f.last, b.last}, 1)};
}

Conv1d::Conv1d(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out, Parameters& params, Rng& rng)
    : weight(params.add(name + ".weight", uniform_init({kernel, in, out}, kernel * in, rng))),
      bias(params.add(name + ".bias", Tensor::zeros({out}, true))) {}

Conv2d::Conv2d(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out, std::size_t stride_,
               Parameters& params, Rng& rng)
    : weight(params.add(name + ".weight", uniform_init({kernel, kernel, in, out}, kernel * kernel * in, rng))),
      bias(params.add(name + ".bias", Tensor::zeros({out}, true))),
      stride(stride_) {}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim, Parameters& params)
    : gamma(params.add(name + ".gamma", Tensor::full({dim}, 1.0, true))),
      beta(params.add(name + ".beta", Tensor::zeros({dim}, true))) {}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& name, std::size_t dim, std::size_t heads_,
                                               Parameters& params, Rng& rng)
    : query(name + ".query", dim, dim, params, rng),
      key(name + ".key", dim, dim, params, rng),
      value(name + ".value", dim, dim, params, rng),
      output(name + ".output", dim, dim, params, rng),
      heads(heads_) {
  if (heads == 0 || dim % heads != 0) throw ConfigError("attention width must be divisible by the head count");
}

Tensor MultiHeadSelfAttention::operator()(const Tensor& x) const {
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
  const std::size_t dh = D / heads;
  auto split_heads = [&](const Tensor& t) {
    return ad::reshape(ad::permute(ad::reshape(t, {B, S, heads, dh}), {0, 2, 1, 3}), {B * heads, S, dh});
  };
  const Tensor q = split_heads(query(x));
  const Tensor k = split_heads(key(x));
  const Tensor v = split_heads(value(x));
  const Tensor scores = ad::scale(ad::bmm(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor mixed = ad::bmm(ad::softmax(scores), v);  // [B*h, S, dh]
  const Tensor merged = ad::reshape(ad::permute(ad::reshape(mixed, {B, heads, S, dh}), {0, 2, 1, 3}), {B, S, D});
  return output(merged);
}

TransformerLayer::TransformerLayer(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ff_width,
                                   Parameters& params, Rng& rng)
    : attention(name + ".attn", dim, heads, params, rng),
      norm1(name + ".norm1", dim, params),
      norm2(name + ".norm2", dim, params),
      ff1(name + ".ff1", dim, ff_width, params, rng),
      ff2(name + ".ff2", ff_width, dim, params, rng) {}

Tensor TransformerLayer::operator()(const Tensor& x) const {
  const Tensor a = norm1(ad::add(x, attention(x)));
  return norm2(ad::add(a, ff2(ad::relu(ff1(a)))));
}

AdditiveAttention::AdditiveAttention(const std::string& name, std::size_t hidden, Parameters& params, Rng& rng)
    : projection(name + ".proj", hidden, hidden, params, rng),
      score_vector(params.add(name + ".score", uniform_init({hidden, 1}, hidden, rng))) {}

Tensor AdditiveAttention::weights(const Tensor& sequence) const {
  const std::size_t B = sequence.dim(0), S = sequence.dim(1);
  const Tensor scores = ad::matmul(ad::tanh(projection(sequence)), score_vector);  // [B, S, 1]
  return ad::softmax(ad::reshape(scores, {B, S}));
}

Tensor AdditiveAttention::operator()(const Tensor& sequence) const {
  const std::size_t B = sequence.dim(0), S = sequence.dim(1), H = sequence.dim(2);
  const Tensor alpha = ad::reshape(weights(sequence), {B, 1, S});
  return ad::reshape(ad::bmm(alpha, sequence), {B, H});
}

ClassifierHead::ClassifierHead(std::size_t in, std::size_t classes, Parameters& params, Rng& rng, std::size_t width1,
                               std::size_t width2)
    : fc1("head.fc1", in, width1, params, rng),
      fc2("head.fc2", width1, width2, params, rng),
      fc3("head.fc3", width2, classes, params, rng) {}

Tensor ClassifierHead::embedding(const Tensor& features) const {
  return ad::relu(fc2(ad::relu(fc1(features))));
}

}  // namespace har::nn
