#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "har/common.hpp"
#include "har/tensor.hpp"

// Layers shared by the neural model zoo. Weights are initialized uniform in
// +-sqrt(1 / fan_in), biases zero, LSTM forget-gate bias one.
namespace har::nn {

using ad::Tensor;

/// Ordered, named trainable tensors of one model.
class Parameters {
 public:
  Tensor add(std::string name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t count() const;  // total scalar parameters

  /// Deep copy of the current values (for best-snapshot selection).
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

  /// Versioned binary checkpoint: shape table, row-major doubles, config digest.
  void save(const std::filesystem::path& path, const std::string& config_digest) const;
  /// Loads values into the already-built tensors; names, shapes and digest must match.
  void load(const std::filesystem::path& path, const std::string& config_digest);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

Tensor uniform_init(ad::Shape shape, std::size_t fan_in, Rng& rng);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Parameters& params, Rng& rng);
  Tensor operator()(const Tensor& x) const { return ad::linear(x, weight, bias); }
};

struct LstmWeights {
  Tensor input_weight;      // [in, 4H], gate order i, f, g, o
  Tensor recurrent_weight;  // [H, 4H]
  Tensor bias;              // [4H]
  std::size_t hidden = 0;

  LstmWeights() = default;
  LstmWeights(const std::string& name, std::size_t in, std::size_t hidden, Parameters& params, Rng& rng);
};

struct LstmState {
  Tensor h;  // [B, H]
  Tensor c;  // [B, H]
};

/// One step of the standard LSTM recurrence.
LstmState lstm_cell(const Tensor& x_t, const LstmState& prev, const LstmWeights& w);

struct SequenceOutput {
  Tensor sequence;  // [B, S, H] in input time order
  Tensor last;      // [B, H], state after the final processed step
};

/// Unrolls over x [B, S, in] from zero state; `reverse` walks time backwards.
SequenceOutput lstm_sequence(const Tensor& x, const LstmWeights& w, bool reverse = false);

struct BiLstmWeights {
  LstmWeights forward;
  LstmWeights backward;

  BiLstmWeights() = default;
  BiLstmWeights(const std::string& name, std::size_t in, std::size_t hidden, Parameters& params, Rng& rng);
};

/// sequence: [B, S, 2H] (forward | backward); last: [forward final | backward final].
SequenceOutput bilstm_sequence(const Tensor& x, const BiLstmWeights& w);

struct Conv1d {
  Tensor weight;  // [k, in, out]
  Tensor bias;

  Conv1d() = default;
  Conv1d(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out, Parameters& params, Rng& rng);
  Tensor operator()(const Tensor& x) const { return ad::add(ad::conv1d(x, weight), bias); }
};

struct Conv2d {
  Tensor weight;  // [kh, kw, in, out]
  Tensor bias;
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t kernel, std::size_t in, std::size_t out, std::size_t stride,
         Parameters& params, Rng& rng);
  Tensor operator()(const Tensor& x) const { return ad::add(ad::conv2d(x, weight, stride), bias); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim, Parameters& params);
  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }
};

struct MultiHeadSelfAttention {
  Linear query, key, value, output;
  std::size_t heads = 1;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, std::size_t dim, std::size_t heads, Parameters& params, Rng& rng);
  Tensor operator()(const Tensor& x) const;  // [B, S, d] -> [B, S, d]
};

/// Post-norm encoder layer: x = LN(x + MHA(x)); x = LN(x + FF(x)).
struct TransformerLayer {
  MultiHeadSelfAttention attention;
  LayerNorm norm1, norm2;
  Linear ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ff_width,
                   Parameters& params, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// score_t = v . tanh(W h_t + b); context = sum_t softmax(score)_t h_t.
struct AdditiveAttention {
  Linear projection;
  Tensor score_vector;  // [H, 1]

  AdditiveAttention() = default;
  AdditiveAttention(const std::string& name, std::size_t hidden, Parameters& params, Rng& rng);
  Tensor weights(const Tensor& sequence) const;           // [B, S]
  Tensor operator()(const Tensor& sequence) const;        // [B, S, H] -> [B, H]
};

/// Classification head shared by every neural model: 256 -> 128 -> classes, ReLU inside.
struct ClassifierHead {
  Linear fc1, fc2, fc3;

  ClassifierHead() = default;
  ClassifierHead(std::size_t in, std::size_t classes, Parameters& params, Rng& rng, std::size_t width1 = 256,
                 std::size_t width2 = 128);
  Tensor embedding(const Tensor& features) const;  // [B, 128] penultimate activation
  Tensor logits(const Tensor& embedding) const { return fc3(embedding); }
};

}  // namespace har::nn
