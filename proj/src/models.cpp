#include "har/models.hpp"

#include <algorithm>
#include <fstream>

#include "zoo.hpp"

namespace har {

namespace {

struct KindName {
  ModelKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {ModelKind::svm, "svm"},
    {ModelKind::knn, "knn"},
    {ModelKind::gbdt, "gbdt"},
    {ModelKind::lr, "lr"},
    {ModelKind::dt, "dt"},
    {ModelKind::rf, "rf"},
    {ModelKind::adaboost, "adaboost"},
    {ModelKind::gaussian_nb, "gaussian_nb"},
    {ModelKind::mlp, "mlp"},
    {ModelKind::resnet, "resnet"},
    {ModelKind::transformer, "transformer"},
    {ModelKind::lstm, "lstm"},
    {ModelKind::bilstm, "bilstm"},
    {ModelKind::lstm_attention, "lstm_attention"},
    {ModelKind::cnn1d, "cnn1d"},
    {ModelKind::mrnet, "mrnet"},
};

std::string squash(std::string_view name) {
  std::string out;
  for (char c : name) {
    if (c == '_' || c == '-' || c == ' ') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

template <typename T>
void read_field(const nlohmann::json& doc, const char* key, T& out) {
  if (doc.contains(key)) out = doc.at(key).get<T>();
}

}  // namespace

std::string to_string(ModelKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  throw Error("unknown model kind");
}

std::string to_string(Representation rep) {
  switch (rep) {
    case Representation::temporal: return "temporal";
    case Representation::statistical: return "statistical";
    case Representation::spectral: return "spectral";
  }
  throw Error("unknown representation");
}

ModelKind parse_model_kind(std::string_view name) {
  const std::string key = squash(name);
  for (const auto& kn : kKindNames)
    if (squash(kn.name) == key) return kn.kind;
  if (key == "gaussiannb" || key == "nb" || key == "naivebayes") return ModelKind::gaussian_nb;
  if (key == "lstmattn") return ModelKind::lstm_attention;
  if (key == "cnn" || key == "1dcnn") return ModelKind::cnn1d;
  if (key == "logisticregression") return ModelKind::lr;
  if (key == "decisiontree") return ModelKind::dt;
  if (key == "randomforest") return ModelKind::rf;
  throw ConfigError("unknown model kind: " + std::string(name));
}

const std::vector<ModelKind>& all_model_kinds() {
  static const std::vector<ModelKind> kinds = [] {
    std::vector<ModelKind> out;
    for (const auto& kn : kKindNames) out.push_back(kn.kind);
    return out;
  }();
  return kinds;
}

bool is_neural(ModelKind kind) {
  switch (kind) {
    case ModelKind::resnet:
    case ModelKind::transformer:
    case ModelKind::lstm:
    case ModelKind::bilstm:
    case ModelKind::lstm_attention:
    case ModelKind::cnn1d:
    case ModelKind::mrnet:
      return true;
    default:
      return false;
  }
}

std::vector<Representation> declared_inputs(ModelKind kind) {
  using R = Representation;
  switch (kind) {
    case ModelKind::resnet: return {R::spectral};
    case ModelKind::transformer:
    case ModelKind::lstm:
    case ModelKind::bilstm:
    case ModelKind::lstm_attention:
    case ModelKind::cnn1d:
      return {R::temporal};
    case ModelKind::mrnet: return {R::temporal, R::statistical, R::spectral};
    default: return {R::statistical};
  }
}

// ---- hyperparameters ----

nlohmann::json Hyperparameters::to_json(ModelKind kind) const {
  nlohmann::json j;
  switch (kind) {
    case ModelKind::knn: j["knn_k"] = knn_k; break;
    case ModelKind::dt: j["dt_max_depth"] = dt_max_depth; break;
    case ModelKind::rf:
      j["rf_trees"] = rf_trees;
      j["rf_max_depth"] = rf_max_depth;
      break;
    case ModelKind::gbdt:
      j["gbdt_rounds"] = gbdt_rounds;
      j["gbdt_depth"] = gbdt_depth;
      j["gbdt_shrinkage"] = gbdt_shrinkage;
      break;
    case ModelKind::adaboost: j["adaboost_rounds"] = adaboost_rounds; break;
    case ModelKind::gaussian_nb: break;
    case ModelKind::svm: j["svm_l2"] = svm_l2; [[fallthrough]];
    case ModelKind::lr:
      j["linear_learning_rate"] = linear_learning_rate;
      j["linear_epochs"] = linear_epochs;
      j["classical_batch"] = classical_batch;
      break;
    case ModelKind::mlp:
      j["mlp_hidden"] = mlp_hidden;
      j["mlp_learning_rate"] = mlp_learning_rate;
      j["mlp_epochs"] = mlp_epochs;
      j["classical_batch"] = classical_batch;
      break;
    case ModelKind::lstm: j["lstm_hidden"] = lstm_hidden; break;
    case ModelKind::bilstm:
      j["lstm_hidden"] = lstm_hidden;
      j["bilstm_layers"] = bilstm_layers;
      break;
    case ModelKind::lstm_attention:
      j["lstm_hidden"] = lstm_hidden;
      j["attention_lstm_layers"] = attention_lstm_layers;
      break;
    case ModelKind::cnn1d:
      j["cnn_filters1"] = cnn_filters1;
      j["cnn_filters2"] = cnn_filters2;
      j["cnn_kernel"] = cnn_kernel;
      j["cnn_pool"] = cnn_pool;
      break;
    case ModelKind::transformer:
      j["transformer_layers"] = transformer_layers;
      j["transformer_heads"] = transformer_heads;
      j["transformer_dim"] = transformer_dim;
      j["transformer_ff"] = transformer_ff;
      break;
    case ModelKind::resnet: j["resnet_channels"] = resnet_channels; break;
    case ModelKind::mrnet:
      j["lstm_hidden"] = lstm_hidden;
      j["mrnet_stat_width"] = mrnet_stat_width;
      j["mrnet_conv"] = mrnet_conv;
      break;
  }
  if (is_neural(kind)) {
    j["head_widths"] = head_widths;
    j["dropout"] = dropout;
  }
  return j;
}

void Hyperparameters::update(const nlohmann::json& o) {
  if (!o.is_object()) throw ConfigError("hyperparameters must be an object");
  static const std::vector<std::string> known = {
      "knn_k", "dt_max_depth", "rf_trees", "rf_max_depth", "gbdt_rounds", "gbdt_depth", "gbdt_shrinkage",
      "adaboost_rounds", "svm_l2", "linear_learning_rate", "linear_epochs", "mlp_hidden", "mlp_learning_rate",
      "mlp_epochs", "classical_batch", "head_widths", "lstm_hidden", "bilstm_layers", "attention_lstm_layers",
      "cnn_filters1", "cnn_filters2", "cnn_kernel", "cnn_pool", "transformer_layers", "transformer_heads",
      "transformer_dim", "transformer_ff", "resnet_channels", "mrnet_stat_width", "mrnet_conv", "dropout"};
  for (const auto& [key, _] : o.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown hyperparameter: " + key);
  try {
    read_field(o, "knn_k", knn_k);
    read_field(o, "dt_max_depth", dt_max_depth);
    read_field(o, "rf_trees", rf_trees);
    read_field(o, "rf_max_depth", rf_max_depth);
    read_field(o, "gbdt_rounds", gbdt_rounds);
    read_field(o, "gbdt_depth", gbdt_depth);
    read_field(o, "gbdt_shrinkage", gbdt_shrinkage);
    read_field(o, "adaboost_rounds", adaboost_rounds);
    read_field(o, "svm_l2", svm_l2);
    read_field(o, "linear_learning_rate", linear_learning_rate);
    read_field(o, "linear_epochs", linear_epochs);
    read_field(o, "mlp_hidden", mlp_hidden);
    read_field(o, "mlp_learning_rate", mlp_learning_rate);
    read_field(o, "mlp_epochs", mlp_epochs);
    read_field(o, "classical_batch", classical_batch);
    read_field(o, "head_widths", head_widths);
    read_field(o, "lstm_hidden", lstm_hidden);
    read_field(o, "bilstm_layers", bilstm_layers);
    read_field(o, "attention_lstm_layers", attention_lstm_layers);
    read_field(o, "cnn_filters1", cnn_filters1);
    read_field(o, "cnn_filters2", cnn_filters2);
    read_field(o, "cnn_kernel", cnn_kernel);
    read_field(o, "cnn_pool", cnn_pool);
    read_field(o, "transformer_layers", transformer_layers);
    read_field(o, "transformer_heads", transformer_heads);
    read_field(o, "transformer_dim", transformer_dim);
    read_field(o, "transformer_ff", transformer_ff);
    read_field(o, "resnet_channels", resnet_channels);
    read_field(o, "mrnet_stat_width", mrnet_stat_width);
    read_field(o, "mrnet_conv", mrnet_conv);
    read_field(o, "dropout", dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad hyperparameter value: ") + e.what());
  }
}

// ---- spec ----

ModelSpec ModelSpec::make(ModelKind kind, InputDims dims, int num_classes) {
  ModelSpec spec;
  spec.kind = kind;
  spec.input_features = declared_inputs(kind);
  spec.num_classes = num_classes;
  spec.dims = dims;
  return spec;
}

bool ModelSpec::uses(Representation rep) const {
  return std::find(input_features.begin(), input_features.end(), rep) != input_features.end();
}

void ModelSpec::validate() const {
  auto expected = declared_inputs(kind);
  auto got = input_features;
  std::sort(expected.begin(), expected.end());
  std::sort(got.begin(), got.end());
  if (got != expected) {
    std::vector<std::string> names;
    for (auto r : declared_inputs(kind)) names.push_back(to_string(r));
    throw ConfigError(to_string(kind) + " consumes exactly [" + join(names, ", ") + "]");
  }
  if (num_classes < 2) throw ConfigError("a classifier needs at least two classes");
  if (dims.steps == 0 || dims.channels == 0) throw ConfigError("input dimensions must be positive");
  if (uses(Representation::spectral) && dims.scales == 0) throw ConfigError("spectral input needs scales > 0");
  const auto& h = hyper;
  auto positive = [&](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  if (is_neural(kind)) {
    if (h.head_widths.size() != 2) throw ConfigError("head_widths needs two entries");
    positive(h.head_widths[0], "head_widths");
    positive(h.head_widths[1], "head_widths");
    if (h.dropout < 0.0 || h.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }
  switch (kind) {
    case ModelKind::knn: positive(h.knn_k, "knn_k"); break;
    case ModelKind::rf: positive(h.rf_trees, "rf_trees"); break;
    case ModelKind::gbdt:
      positive(h.gbdt_rounds, "gbdt_rounds");
      positive(h.gbdt_depth, "gbdt_depth");
      break;
    case ModelKind::adaboost: positive(h.adaboost_rounds, "adaboost_rounds"); break;
    case ModelKind::svm:
    case ModelKind::lr:
      positive(h.linear_epochs, "linear_epochs");
      positive(h.classical_batch, "classical_batch");
      break;
    case ModelKind::mlp:
      positive(h.mlp_epochs, "mlp_epochs");
      positive(h.classical_batch, "classical_batch");
      for (int w : h.mlp_hidden) positive(w, "mlp_hidden");
      break;
    case ModelKind::lstm: positive(h.lstm_hidden, "lstm_hidden"); break;
    case ModelKind::bilstm:
      positive(h.lstm_hidden, "lstm_hidden");
      positive(h.bilstm_layers, "bilstm_layers");
      break;
    case ModelKind::lstm_attention:
      positive(h.lstm_hidden, "lstm_hidden");
      positive(h.attention_lstm_layers, "attention_lstm_layers");
      break;
    case ModelKind::cnn1d:
      positive(h.cnn_filters1, "cnn_filters1");
      positive(h.cnn_filters2, "cnn_filters2");
      positive(h.cnn_kernel, "cnn_kernel");
      positive(h.cnn_pool, "cnn_pool");
      if (dims.steps < static_cast<std::size_t>(h.cnn_pool)) throw ConfigError("segment shorter than pool window");
      break;
    case ModelKind::transformer:
      positive(h.transformer_layers, "transformer_layers");
      positive(h.transformer_heads, "transformer_heads");
      positive(h.transformer_dim, "transformer_dim");
      positive(h.transformer_ff, "transformer_ff");
      if (h.transformer_dim % h.transformer_heads != 0)
        throw ConfigError("transformer_dim must be divisible by transformer_heads");
      break;
    case ModelKind::resnet:
      if (h.resnet_channels.empty()) throw ConfigError("resnet_channels must not be empty");
      for (int c : h.resnet_channels) positive(c, "resnet_channels");
      break;
    case ModelKind::mrnet:
      positive(h.lstm_hidden, "lstm_hidden");
      positive(h.mrnet_stat_width, "mrnet_stat_width");
      if (h.mrnet_conv.empty()) throw ConfigError("mrnet_conv must not be empty");
      for (int c : h.mrnet_conv) positive(c, "mrnet_conv");
      break;
    default: break;
  }
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["hyperparameters"] = hyper.to_json(kind);
  std::vector<std::string> inputs;
  for (auto r : input_features) inputs.push_back(to_string(r));
  j["input_features"] = inputs;
  j["num_classes"] = num_classes;
  j["dims"] = {{"steps", dims.steps}, {"channels", dims.channels}, {"scales", dims.scales}};
  return j;
}

std::string ModelSpec::digest() const { return digest_string(to_json().dump()); }

// ---- batches ----

const ad::Tensor& Batch::require(Representation rep) const {
  const std::optional<ad::Tensor>* slot = nullptr;
  switch (rep) {
    case Representation::temporal: slot = &temporal; break;
    case Representation::statistical: slot = &statistical; break;
    case Representation::spectral: slot = &spectral; break;
  }
  if (!slot || !slot->has_value()) throw ShapeError("missing representation: " + to_string(rep));
  return **slot;
}

namespace {

template <typename TemporalFn, typename StatFn, typename SpectralFn>
Batch assemble(std::size_t n, std::span<const Representation> reps, TemporalFn temporal_of, StatFn stat_of,
               SpectralFn spectral_of) {
  if (n == 0) throw ShapeError("empty batch");
  Batch batch;
  batch.size = n;
  for (auto rep : reps) {
    switch (rep) {
      case Representation::temporal: {
        const Matrix& first = temporal_of(0);
        const std::size_t s = first.rows(), c = first.cols();
        std::vector<double> values;
        values.reserve(n * s * c);
        for (std::size_t i = 0; i < n; ++i) {
          const Matrix& m = temporal_of(i);
          if (m.rows() != s || m.cols() != c) throw ShapeError("segments in a batch differ in shape");
          values.insert(values.end(), m.data().begin(), m.data().end());
        }
        batch.temporal = ad::Tensor::from({n, s, c}, std::move(values));
        break;
      }
      case Representation::statistical: {
        const std::size_t f = stat_of(0).size();
        std::vector<double> values;
        values.reserve(n * f);
        for (std::size_t i = 0; i < n; ++i) {
          const auto& v = stat_of(i);
          if (v.size() != f) throw ShapeError("statistical vectors in a batch differ in length");
          values.insert(values.end(), v.begin(), v.end());
        }
        batch.statistical = ad::Tensor::from({n, f}, std::move(values));
        break;
      }
      case Representation::spectral: {
        const SpectralTensor& first = spectral_of(0);
        const std::size_t k = first.scales, s = first.steps, c = first.channels;
        std::vector<double> values;
        values.reserve(n * k * s * c);
        for (std::size_t i = 0; i < n; ++i) {
          const SpectralTensor& t = spectral_of(i);
          if (t.scales != k || t.steps != s || t.channels != c)
            throw ShapeError("spectral tensors in a batch differ in shape");
          values.insert(values.end(), t.values.begin(), t.values.end());
        }
        batch.spectral = ad::Tensor::from({n, k, s, c}, std::move(values));
        break;
      }
    }
  }
  return batch;
}

}  // namespace

Batch Batch::from_store(const FeatureStore& store, std::span<const int> ids, std::span<const Representation> reps) {
  // Hold the spectral tensors alive while copying.
  std::vector<std::shared_ptr<const SpectralTensor>> spectra;
  if (std::find(reps.begin(), reps.end(), Representation::spectral) != reps.end()) {
    spectra.reserve(ids.size());
    for (int id : ids) spectra.push_back(store.spectral(id));
  }
  return assemble(
      ids.size(), reps, [&](std::size_t i) -> const Matrix& { return store.temporal(ids[i]); },
      [&](std::size_t i) -> const std::vector<double>& { return store.statistical(ids[i]); },
      [&](std::size_t i) -> const SpectralTensor& { return *spectra[i]; });
}

Batch Batch::from_bundles(std::span<const FeatureBundle> bundles, std::span<const Representation> reps) {
  for (auto rep : reps) {
    for (const auto& b : bundles) {
      const bool missing = (rep == Representation::temporal && b.temporal.empty()) ||
                           (rep == Representation::statistical && b.statistical.empty()) ||
                           (rep == Representation::spectral && b.spectral.values.empty());
      if (missing) throw ShapeError("missing representation: " + to_string(rep));
    }
  }
  return assemble(
      bundles.size(), reps, [&](std::size_t i) -> const Matrix& { return bundles[i].temporal; },
      [&](std::size_t i) -> const std::vector<double>& { return bundles[i].statistical; },
      [&](std::size_t i) -> const SpectralTensor& { return bundles[i].spectral; });
}

Matrix statistical_matrix(const FeatureStore& store, std::span<const int> ids) {
  if (ids.empty()) return {};
  const std::size_t f = store.statistical(ids[0]).size();
  Matrix m(ids.size(), f);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& v = store.statistical(ids[i]);
    std::copy(v.begin(), v.end(), m.data().begin() + static_cast<std::ptrdiff_t>(i * f));
  }
  return m;
}

// ---- classical base ----

std::vector<int> ClassicalModel::predict(const Matrix& features) const {
  const Matrix p = predict_proba(features);
  std::vector<int> out(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto row = p.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

void ClassicalModel::check_training_set(const Matrix& features, std::span<const int> labels) const {
  if (features.rows() != labels.size()) throw ShapeError("feature rows and labels differ in count");
  if (features.cols() != spec_.dims.statistical())
    throw ShapeError("expected " + std::to_string(spec_.dims.statistical()) + " statistical features, got " +
                     std::to_string(features.cols()));
  if (features.rows() < static_cast<std::size_t>(spec_.num_classes))
    throw TrainingError("fewer training samples than classes");
  std::vector<int> seen(static_cast<std::size_t>(spec_.num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= spec_.num_classes) throw TrainingError("label out of range: " + std::to_string(y));
    seen[static_cast<std::size_t>(y)] = 1;
  }
  if (std::count(seen.begin(), seen.end(), 1) < 2) throw TrainingError("training set contains a single class");
}

void ClassicalModel::save(const std::filesystem::path& path) const {
  if (!fitted_) throw UnsupportedOperation("cannot save an unfitted model");
  nlohmann::json doc;
  doc["format"] = "har-classical";
  doc["version"] = 1;
  doc["config_digest"] = spec_.digest();
  doc["model"] = to_json();
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump();
}

void ClassicalModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt model file " + path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "har-classical" || doc.value("version", 0) != 1)
    throw Error("unsupported model file " + path.string());
  if (doc.value("config_digest", "") != spec_.digest())
    throw ConfigError("model file was produced under a different configuration");
  from_json(doc.at("model"));
  fitted_ = true;
}

// ---- neural base ----

NeuralModel::NeuralModel(ModelSpec spec, std::uint64_t seed) : Model(std::move(spec)), dropout_rng_(seed ^ 0x5eedd00dULL) {}

void NeuralModel::attach_head(std::size_t feature_width, Rng& rng) {
  const auto& w = spec_.hyper.head_widths;
  head_ = nn::ClassifierHead(feature_width, static_cast<std::size_t>(spec_.num_classes), params_, rng,
                             static_cast<std::size_t>(w[0]), static_cast<std::size_t>(w[1]));
}

std::vector<ad::Tensor> NeuralModel::encoder_parameters() const {
  std::vector<ad::Tensor> out;
  for (const auto& [name, t] : params_.entries())
    if (name.rfind("head.fc3.", 0) != 0) out.push_back(t);
  return out;
}

ad::Tensor NeuralModel::embedding(const Batch& batch, bool training) const {
  ad::Tensor f = features(batch, training);
  f = ad::dropout(f, spec_.hyper.dropout, training, dropout_rng_);
  return head_.embedding(f);
}

ad::Tensor NeuralModel::logits(const Batch& batch, bool training) const {
  return head_.logits(embedding(batch, training));
}

std::vector<ClassifierOutput> NeuralModel::forward(const Batch& batch) const {
  ad::NoGradGuard guard;
  const ad::Tensor emb = embedding(batch, false);
  const ad::Tensor lg = head_.logits(emb);
  const ad::Tensor pr = ad::softmax(lg);
  const std::size_t z = lg.dim(1), e = emb.dim(1);
  std::vector<ClassifierOutput> out(batch.size);
  for (std::size_t i = 0; i < batch.size; ++i) {
    auto lv = lg.values().subspan(i * z, z);
    auto pv = pr.values().subspan(i * z, z);
    auto ev = emb.values().subspan(i * e, e);
    out[i].logits.assign(lv.begin(), lv.end());
    out[i].probabilities.assign(pv.begin(), pv.end());
    out[i].embedding.assign(ev.begin(), ev.end());
  }
  return out;
}

Matrix NeuralModel::embed(const Batch& batch, bool normalized) const {
  ad::NoGradGuard guard;
  ad::Tensor emb = embedding(batch, false);
  if (normalized) emb = ad::l2_normalize(emb);
  Matrix m(emb.dim(0), emb.dim(1));
  std::copy(emb.values().begin(), emb.values().end(), m.data().begin());
  return m;
}

// ---- factory ----

std::unique_ptr<Model> build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (is_neural(spec.kind)) return zoo::make_neural(spec, seed);
  return zoo::make_classical(spec);
}

NeuralModel& as_neural(Model& model) {
  auto* p = dynamic_cast<NeuralModel*>(&model);
  if (!p) throw UnsupportedOperation(to_string(model.spec().kind) + " is not a neural model");
  return *p;
}

ClassicalModel& as_classical(Model& model) {
  auto* p = dynamic_cast<ClassicalModel*>(&model);
  if (!p) throw UnsupportedOperation(to_string(model.spec().kind) + " is not a classical model");
  return *p;
}

Matrix embed(const Model& model, const Batch& batch, bool normalized) {
  const auto* p = dynamic_cast<const NeuralModel*>(&model);
  if (!p) throw UnsupportedOperation("embeddings are not defined for " + to_string(model.spec().kind));
  return p->embed(batch, normalized);
}

}  // namespace har
