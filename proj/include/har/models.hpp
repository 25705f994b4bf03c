#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "har/common.hpp"
#include "har/features.hpp"
#include "har/nn.hpp"
#include "har/tensor.hpp"

namespace har {

enum class ModelKind {
  svm,
  knn,
  gbdt,
  lr,
  dt,
  rf,
  adaboost,
  gaussian_nb,
  mlp,
  resnet,
  transformer,
  lstm,
  bilstm,
  lstm_attention,
  cnn1d,
  mrnet,
};

enum class Representation { temporal, statistical, spectral };

std::string to_string(ModelKind kind);
std::string to_string(Representation rep);
/// Accepts the canonical names plus a few table spellings (e.g. "LSTMAttention", "GaussianNB").
ModelKind parse_model_kind(std::string_view name);
const std::vector<ModelKind>& all_model_kinds();
/// True for the seven architectures trained through the autodiff engine with the shared head.
bool is_neural(ModelKind kind);
std::vector<Representation> declared_inputs(ModelKind kind);

/// Every tunable of the zoo. Defaults are the recorded configuration; only the
/// fields relevant to a kind are reported for it.
struct Hyperparameters {
  // classical
  int knn_k = 5;
  int dt_max_depth = 0;  // 0 = unlimited
  int rf_trees = 100;
  int rf_max_depth = 0;
  int gbdt_rounds = 100;
  int gbdt_depth = 3;
  double gbdt_shrinkage = 0.1;
  int adaboost_rounds = 50;
  double svm_l2 = 1e-4;
  double linear_learning_rate = 0.01;  // lr and svm
  int linear_epochs = 100;
  std::vector<int> mlp_hidden = {128, 64};
  double mlp_learning_rate = 1e-3;
  int mlp_epochs = 200;
  int classical_batch = 64;
  // neural
  std::vector<int> head_widths = {256, 128};
  int lstm_hidden = 64;
  int bilstm_layers = 2;
  int attention_lstm_layers = 2;
  int cnn_filters1 = 64;
  int cnn_filters2 = 32;
  int cnn_kernel = 3;
  int cnn_pool = 2;
  int transformer_layers = 2;
  int transformer_heads = 8;
  int transformer_dim = 64;
  int transformer_ff = 128;
  std::vector<int> resnet_channels = {16, 32, 64, 128};
  int mrnet_stat_width = 64;
  std::vector<int> mrnet_conv = {16, 32};
  double dropout = 0.0;

  nlohmann::json to_json(ModelKind kind) const;
  /// Overrides the listed fields; unknown keys are rejected.
  void update(const nlohmann::json& overrides);
};

struct InputDims {
  std::size_t steps = 150;    // S
  std::size_t channels = 3;   // C
  std::size_t scales = 50;    // K
  std::size_t statistical() const { return 4 * channels; }
};

struct ModelSpec {
  ModelKind kind = ModelKind::lstm;
  Hyperparameters hyper;
  std::vector<Representation> input_features;
  int num_classes = 6;
  InputDims dims;

  /// Spec with the kind's declared inputs.
  static ModelSpec make(ModelKind kind, InputDims dims, int num_classes = 6);
  /// Throws when the inputs do not match the kind's contract.
  void validate() const;
  nlohmann::json to_json() const;
  std::string digest() const;
  bool uses(Representation rep) const;
};

/// Per-item model output.
struct ClassifierOutput {
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::vector<double> embedding;  // neural models only
};

/// Feature tensors for a batch of segments; only declared representations are filled.
struct Batch {
  std::size_t size = 0;
  std::optional<ad::Tensor> temporal;     // [B, S, C]
  std::optional<ad::Tensor> statistical;  // [B, 4C]
  std::optional<ad::Tensor> spectral;     // [B, K, S, C]

  const ad::Tensor& require(Representation rep) const;

  static Batch from_store(const FeatureStore& store, std::span<const int> ids, std::span<const Representation> reps);
  static Batch from_bundles(std::span<const FeatureBundle> bundles, std::span<const Representation> reps);
};

/// [N x 4C] statistical feature matrix for the given segment ids.
Matrix statistical_matrix(const FeatureStore& store, std::span<const int> ids);

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  virtual bool neural() const = 0;
  virtual std::size_t parameter_count() const = 0;

 protected:
  ModelSpec spec_;
};

/// The nine models fitted directly on statistical feature matrices.
class ClassicalModel : public Model {
 public:
  using Model::Model;
  bool neural() const override { return false; }
  std::size_t parameter_count() const override { return 0; }

  /// Throws on a single-class training set or N < number of classes.
  virtual void fit(const Matrix& features, std::span<const int> labels, std::uint64_t seed) = 0;
  /// [N x classes] class probabilities (vote fractions for voting models).
  virtual Matrix predict_proba(const Matrix& features) const = 0;
  std::vector<int> predict(const Matrix& features) const;

  virtual nlohmann::json to_json() const = 0;
  virtual void from_json(const nlohmann::json& doc) = 0;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 protected:
  void check_training_set(const Matrix& features, std::span<const int> labels) const;
  bool fitted_ = false;
};

/// Neural models: a representation-specific encoder followed by the shared head.
class NeuralModel : public Model {
 public:
  NeuralModel(ModelSpec spec, std::uint64_t seed);
  bool neural() const override { return true; }
  std::size_t parameter_count() const override { return params_.count(); }

  nn::Parameters& parameters() { return params_; }
  const nn::Parameters& parameters() const { return params_; }
  /// Everything that feeds the embedding, i.e. all parameters except the final classifier layer.
  std::vector<ad::Tensor> encoder_parameters() const;

  /// Sub-network output fed to the head.
  virtual ad::Tensor features(const Batch& batch, bool training) const = 0;
  ad::Tensor embedding(const Batch& batch, bool training) const;
  ad::Tensor logits(const Batch& batch, bool training) const;
  const nn::ClassifierHead& head() const { return head_; }

  /// Evaluation-mode outputs, no graph recorded.
  std::vector<ClassifierOutput> forward(const Batch& batch) const;
  /// [N x 128] penultimate activations; L2-normalized when `normalized`.
  Matrix embed(const Batch& batch, bool normalized) const;

  void save(const std::filesystem::path& path) const { params_.save(path, spec_.digest()); }
  void load(const std::filesystem::path& path) { params_.load(path, spec_.digest()); }

 protected:
  void attach_head(std::size_t feature_width, Rng& rng);

  nn::Parameters params_;
  nn::ClassifierHead head_;
  mutable Rng dropout_rng_;
};

class MrNet : public NeuralModel {
 public:
  MrNet(ModelSpec spec, std::uint64_t seed);
  ad::Tensor features(const Batch& batch, bool training) const override;
  ad::Tensor temporal_branch(const Batch& batch) const;
  ad::Tensor statistical_branch(const Batch& batch) const;
  ad::Tensor spectral_branch(const Batch& batch) const;

 private:
  nn::LstmWeights lstm_;
  nn::Linear stat_;
  std::vector<nn::Conv2d> convs_;
};

/// Builds any of the sixteen configurations with deterministic initialization.
std::unique_ptr<Model> build(const ModelSpec& spec, std::uint64_t seed);
NeuralModel& as_neural(Model& model);
ClassicalModel& as_classical(Model& model);

/// Embeddings of classical models do not exist; this throws UnsupportedOperation for them.
Matrix embed(const Model& model, const Batch& batch, bool normalized);

}  // namespace har
