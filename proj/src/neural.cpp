// Neural encoders. Each produces a feature vector that feeds the shared classifier head.
#include "zoo.hpp"

namespace har {

namespace {

using ad::Tensor;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

/// Mean over the spatial axes of an NHWC tensor: [B, H, W, C] -> [B, C].
Tensor global_average_pool(const Tensor& x) {
  return ad::mean_axis(ad::reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)}), 1);
}

class LstmModel final : public NeuralModel {
 public:
  LstmModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    lstm_ = nn::LstmWeights("lstm", spec_.dims.channels, sz(spec_.hyper.lstm_hidden), params_, rng);
    attach_head(sz(spec_.hyper.lstm_hidden), rng);
  }
  Tensor features(const Batch& batch, bool) const override {
    return nn::lstm_sequence(batch.require(Representation::temporal), lstm_).last;
  }

 private:
  nn::LstmWeights lstm_;
};

/// Stacked bidirectional LSTM; the feature is [forward final state | backward final state] of the top layer.
class BiLstmModel final : public NeuralModel {
 public:
  BiLstmModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    const std::size_t h = sz(spec_.hyper.lstm_hidden);
    std::size_t in = spec_.dims.channels;
    for (int l = 0; l < spec_.hyper.bilstm_layers; ++l) {
      layers_.emplace_back("bilstm.l" + std::to_string(l), in, h, params_, rng);
      in = 2 * h;
    }
    attach_head(2 * h, rng);
  }
  Tensor features(const Batch& batch, bool) const override {
    Tensor x = batch.require(Representation::temporal);
    nn::SequenceOutput out;
    for (const auto& layer : layers_) {
      out = nn::bilstm_sequence(x, layer);
      x = out.sequence;
    }
    return out.last;
  }

 private:
  std::vector<nn::BiLstmWeights> layers_;
};

class LstmAttentionModel final : public NeuralModel {
 public:
  LstmAttentionModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    const std::size_t h = sz(spec_.hyper.lstm_hidden);
    std::size_t in = spec_.dims.channels;
    for (int l = 0; l < spec_.hyper.attention_lstm_layers; ++l) {
      layers_.emplace_back("lstm_attention.l" + std::to_string(l), in, h, params_, rng);
      in = h;
    }
    attention_ = nn::AdditiveAttention("lstm_attention.attention", h, params_, rng);
    attach_head(h, rng);
  }
  Tensor features(const Batch& batch, bool) const override { return attention_(sequence(batch)); }
  /// Attention weights over time, [B, S].
  Tensor attention_weights(const Batch& batch) const { return attention_.weights(sequence(batch)); }

 private:
  Tensor sequence(const Batch& batch) const {
    Tensor x = batch.require(Representation::temporal);
    for (const auto& layer : layers_) x = nn::lstm_sequence(x, layer).sequence;
    return x;
  }
  std::vector<nn::LstmWeights> layers_;
  nn::AdditiveAttention attention_;
};

class Cnn1dModel final : public NeuralModel {
 public:
  Cnn1dModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    const auto& h = spec_.hyper;
    conv1_ = nn::Conv1d("cnn1d.conv1", sz(h.cnn_kernel), spec_.dims.channels, sz(h.cnn_filters1), params_, rng);
    conv2_ = nn::Conv1d("cnn1d.conv2", sz(h.cnn_kernel), sz(h.cnn_filters1), sz(h.cnn_filters2), params_, rng);
    const std::size_t pooled = (spec_.dims.steps - sz(h.cnn_pool)) / sz(h.cnn_pool) + 1;
    attach_head(pooled * sz(h.cnn_filters2), rng);
  }
  Tensor features(const Batch& batch, bool) const override {
    const Tensor x = batch.require(Representation::temporal);
    const std::size_t pool = sz(spec_.hyper.cnn_pool);
    const Tensor y = ad::max_pool1d(ad::relu(conv2_(ad::relu(conv1_(x)))), pool, pool);
    return ad::reshape(y, {y.dim(0), y.dim(1) * y.dim(2)});
  }

 private:
  nn::Conv1d conv1_, conv2_;
};

/// Linear embedding plus learned positional table, post-norm encoder layers, mean over time.
class TransformerModel final : public NeuralModel {
 public:
  TransformerModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    const auto& h = spec_.hyper;
    const std::size_t d = sz(h.transformer_dim);
    embed_ = nn::Linear("transformer.embed", spec_.dims.channels, d, params_, rng);
    position_ = params_.add("transformer.position", nn::uniform_init({spec_.dims.steps, d}, d, rng));
    for (int l = 0; l < h.transformer_layers; ++l)
      layers_.emplace_back("transformer.l" + std::to_string(l), d, sz(h.transformer_heads), sz(h.transformer_ff),
                           params_, rng);
    attach_head(d, rng);
  }
  Tensor features(const Batch& batch, bool) const override {
    const Tensor x = batch.require(Representation::temporal);
    if (x.dim(1) != position_.dim(0))
      throw ShapeError("transformer built for " + std::to_string(position_.dim(0)) + " steps, got " +
                       std::to_string(x.dim(1)));
    Tensor y = ad::add(embed_(x), position_);
    for (const auto& layer : layers_) y = layer(y);
    return ad::mean_axis(y, 1);
  }

 private:
  nn::Linear embed_;
  Tensor position_;
  std::vector<nn::TransformerLayer> layers_;
};

/// Residual network over the [scales x time] image with one channel per sensor axis.
class ResNetModel final : public NeuralModel {
 public:
  ResNetModel(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
    Rng rng(seed);
    const auto& widths = spec_.hyper.resnet_channels;
    std::size_t in = sz(widths.front());
    stem_ = nn::Conv2d("resnet.stem", 3, spec_.dims.channels, in, 1, params_, rng);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::size_t out = sz(widths[i]);
      const std::size_t stride = i == 0 ? 1 : 2;
      const std::string name = "resnet.block" + std::to_string(i);
      Block b;
      b.conv1 = nn::Conv2d(name + ".conv1", 3, in, out, stride, params_, rng);
      b.conv2 = nn::Conv2d(name + ".conv2", 3, out, out, 1, params_, rng);
      if (stride != 1 || in != out) {
        b.project = true;
        b.shortcut = nn::Conv2d(name + ".shortcut", 1, in, out, stride, params_, rng);
      }
      blocks_.push_back(std::move(b));
      in = out;
    }
    attach_head(in, rng);
  }
  Tensor features(const Batch& batch, bool) const override {
    Tensor x = ad::relu(stem_(batch.require(Representation::spectral)));
    for (const auto& b : blocks_) {
      const Tensor skip = b.project ? b.shortcut(x) : x;
      x = ad::relu(ad::add(b.conv2(ad::relu(b.conv1(x))), skip));
    }
    return global_average_pool(x);
  }

 private:
  struct Block {
    nn::Conv2d conv1, conv2, shortcut;
    bool project = false;
  };
  nn::Conv2d stem_;
  std::vector<Block> blocks_;
};

}  // namespace

MrNet::MrNet(ModelSpec spec, std::uint64_t seed) : NeuralModel(std::move(spec), seed) {
  Rng rng(seed);
  const auto& h = spec_.hyper;
  lstm_ = nn::LstmWeights("mrnet.lstm", spec_.dims.channels, sz(h.lstm_hidden), params_, rng);
  stat_ = nn::Linear("mrnet.stat", spec_.dims.statistical(), sz(h.mrnet_stat_width), params_, rng);
  std::size_t in = spec_.dims.channels;
  for (std::size_t i = 0; i < h.mrnet_conv.size(); ++i) {
    const std::size_t out = sz(h.mrnet_conv[i]);
    convs_.emplace_back("mrnet.conv" + std::to_string(i + 1), 3, in, out, i == 0 ? 1 : 2, params_, rng);
    in = out;
  }
  attach_head(sz(h.lstm_hidden) + sz(h.mrnet_stat_width) + in, rng);
}

Tensor MrNet::temporal_branch(const Batch& batch) const {
  return nn::lstm_sequence(batch.require(Representation::temporal), lstm_).last;
}

Tensor MrNet::statistical_branch(const Batch& batch) const {
  return ad::relu(stat_(batch.require(Representation::statistical)));
}

Tensor MrNet::spectral_branch(const Batch& batch) const {
  Tensor x = batch.require(Representation::spectral);
  for (const auto& conv : convs_) x = ad::relu(conv(x));
  return global_average_pool(x);
}

Tensor MrNet::features(const Batch& batch, bool) const {
  return ad::concat({temporal_branch(batch), statistical_branch(batch), spectral_branch(batch)}, 1);
}

namespace zoo {

std::unique_ptr<NeuralModel> make_neural(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case ModelKind::lstm: return std::make_unique<LstmModel>(spec, seed);
    case ModelKind::bilstm: return std::make_unique<BiLstmModel>(spec, seed);
    case ModelKind::lstm_attention: return std::make_unique<LstmAttentionModel>(spec, seed);
    case ModelKind::cnn1d: return std::make_unique<Cnn1dModel>(spec, seed);
    case ModelKind::transformer: return std::make_unique<TransformerModel>(spec, seed);
    case ModelKind::resnet: return std::make_unique<ResNetModel>(spec, seed);
    case ModelKind::mrnet: return std::make_unique<MrNet>(spec, seed);
    default: throw ConfigError(to_string(spec.kind) + " is not a neural model");
  }
}

}  // namespace zoo

}  // namespace har
