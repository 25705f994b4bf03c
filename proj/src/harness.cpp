#include "har/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace har {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

json synth_to_json(const SynthSpec& s) {
  json profiles = json::array();
  for (const auto& p : s.profiles)
    profiles.push_back({{"amplitude", p.amplitude}, {"frequency", p.frequency}, {"noise", p.noise}, {"offset", p.offset}});
  return {{"classes", s.classes}, {"users", s.users},       {"channels", s.channels},
          {"length", s.length},   {"seed", s.seed},         {"profiles", profiles}};
}

SynthSpec synth_from_json(const json& j) {
  SynthSpec s;
  s.classes = j.value("classes", s.classes);
  s.users = j.value("users", s.users);
  s.channels = j.value("channels", s.channels);
  s.length = j.value("length", s.length);
  s.seed = j.value("seed", s.seed);
  if (j.contains("profiles"))
    for (const auto& p : j.at("profiles"))
      s.profiles.push_back({p.value("amplitude", 1.0), p.value("frequency", 0.02), p.value("noise", 0.0),
                            p.value("offset", std::vector<double>{})});
  return s;
}

}  // namespace

// ---- config ----

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, path.parent_path());
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {"dataset", "preprocess", "features", "split", "training",
                                              "models",  "output_dir", "reference", "jobs"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key: " + key);

  ExperimentConfig c;
  try {
    const json& ds = j.at("dataset");
    if (ds.contains("synthetic")) {
      c.dataset.synthetic = synth_from_json(ds.at("synthetic"));
    } else {
      c.dataset.manifest = resolve(ds.at("manifest").get<std::string>(), base_dir);
    }
    if (j.contains("preprocess")) {
      const json& p = j.at("preprocess");
      c.preprocess.window_size = p.value("window_size", c.preprocess.window_size);
      c.preprocess.overlap_fraction = p.value("overlap_fraction", c.preprocess.overlap_fraction);
      c.preprocess.smoothing_window = p.value("smoothing_window", c.preprocess.smoothing_window);
    }
    if (j.contains("features")) {
      const json& f = j.at("features");
      c.features.cwt_scales = f.value("cwt_scales", c.features.cwt_scales);
      c.features.omega0 = f.value("omega0", c.features.omega0);
    }
    if (j.contains("split")) {
      const json& s = j.at("split");
      if (s.contains("strategy")) c.split.strategy = parse_split_strategy(s.at("strategy").get<std::string>());
      c.split.seed = s.value("seed", c.split.seed);
      if (s.contains("ratios")) {
        const json& r = s.at("ratios");
        c.split.ratios = {r.value("train", 0.7), r.value("val", 0.1), r.value("test", 0.2)};
      }
    }
    if (j.contains("training")) c.training = TrainConfig::from_json(j.at("training"));
    const json& models = j.at("models");
    if (models.is_string() && models.get<std::string>() == "all") {
      for (auto kind : all_model_kinds()) c.models.push_back({kind, json::object()});
    } else {
      for (const auto& m : models) {
        if (m.is_string()) {
          c.models.push_back({parse_model_kind(m.get<std::string>()), json::object()});
        } else {
          c.models.push_back({parse_model_kind(m.at("kind").get<std::string>()),
                              m.value("hyperparameters", json::object())});
        }
      }
    }
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base_dir);
    c.reference = j.value("reference", std::string());
    c.jobs = j.value("jobs", 1);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

json ExperimentConfig::to_json() const {
  json j;
  if (dataset.synthetic)
    j["dataset"] = {{"synthetic", synth_to_json(*dataset.synthetic)}};
  else
    j["dataset"] = {{"manifest", dataset.manifest.generic_string()}};
  j["preprocess"] = {{"window_size", preprocess.window_size},
                     {"overlap_fraction", preprocess.overlap_fraction},
                     {"smoothing_window", preprocess.smoothing_window}};
  j["features"] = {{"cwt_scales", features.cwt_scales}, {"omega0", features.omega0}};
  j["split"] = {{"strategy", to_string(split.strategy)},
                {"seed", split.seed},
                {"ratios", {{"train", split.ratios.train}, {"val", split.ratios.val}, {"test", split.ratios.test}}}};
  j["training"] = training.to_json();
  json models_json = json::array();
  for (const auto& m : models) models_json.push_back({{"kind", to_string(m.kind)}, {"hyperparameters", m.hyperparameters}});
  j["models"] = models_json;
  j["output_dir"] = output_dir.generic_string();
  j["reference"] = reference;
  j["jobs"] = jobs;
  return j;
}

void ExperimentConfig::validate() const {
  if (models.empty()) throw ConfigError("experiment lists no models");
  if (!dataset.synthetic) {
    if (dataset.manifest.empty()) throw ConfigError("dataset needs a manifest path or a synthetic block");
    if (!std::filesystem::exists(dataset.manifest))
      throw ConfigError("dataset manifest not found: " + dataset.manifest.string());
  }
  preprocess.validate();
  features.validate();
  training.validate();
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (!reference.empty() && reference != "ds1" && reference != "ds2")
    throw ConfigError("reference must be ds1, ds2 or empty");
  std::set<ModelKind> seen;
  for (const auto& m : models) {
    if (!seen.insert(m.kind).second) throw ConfigError("model listed twice: " + to_string(m.kind));
    Hyperparameters h;
    h.update(m.hyperparameters);
  }
}

std::string ExperimentConfig::digest() const {
  json j = to_json();
  j.erase("output_dir");
  j.erase("jobs");
  // The manifest is identified by its content, not by where it sits.
  if (!dataset.synthetic) j["dataset"] = {{"manifest_digest", digest_file(dataset.manifest)}};
  return digest_string(j.dump());
}

json ExperimentConfig::pipeline_json() const {
  json j = to_json();
  for (const char* key : {"output_dir", "jobs", "models", "reference"}) j.erase(key);
  j["training"].erase("schedule");
  j["training"].erase("seed");
  if (!dataset.synthetic) j["dataset"] = {{"manifest_digest", digest_file(dataset.manifest)}};
  return j;
}

std::string ExperimentConfig::pipeline_digest() const { return digest_string(pipeline_json().dump()); }

void restrict_models(ExperimentConfig& config, std::string_view comma_list) {
  std::vector<ModelEntry> chosen;
  for (const auto& name : split(comma_list, ',')) {
    const std::string n = trim(name);
    if (n.empty()) continue;
    if (n == "all") {
      for (auto kind : all_model_kinds()) {
        auto it = std::find_if(config.models.begin(), config.models.end(), [&](const auto& m) { return m.kind == kind; });
        chosen.push_back(it != config.models.end() ? *it : ModelEntry{kind, json::object()});
      }
      continue;
    }
    const ModelKind kind = parse_model_kind(n);
    auto it = std::find_if(config.models.begin(), config.models.end(), [&](const auto& m) { return m.kind == kind; });
    chosen.push_back(it != config.models.end() ? *it : ModelEntry{kind, json::object()});
  }
  if (chosen.empty()) throw ConfigError("--models selected nothing");
  config.models = std::move(chosen);
  config.validate();
}

std::uint64_t model_seed(std::uint64_t base, ModelKind kind) {
  return Digest().update(base).update(to_string(kind)).value();
}

// ---- confusion ----

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size())
    throw ShapeError("confusion_matrix: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  const auto z = static_cast<std::size_t>(num_classes);
  ConfusionMatrix m(z, std::vector<long>(z, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes)
      throw ShapeError("confusion_matrix: class index out of range");
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return m;
}

double confusion_accuracy(const ConfusionMatrix& m) {
  long trace = 0, total = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) {
      total += m[i][j];
      if (i == j) trace += m[i][j];
    }
  return total == 0 ? 0.0 : static_cast<double>(trace) / static_cast<double>(total);
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m,
                         std::span<const std::string> class_names) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "true\\predicted";
  for (const auto& n : class_names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    out << class_names[i];
    for (long v : m[i]) out << ',' << v;
    out << '\n';
  }
}

std::string format_confusion(const ConfusionMatrix& m, std::span<const std::string> class_names) {
  std::size_t width = 6;
  for (const auto& n : class_names) width = std::max(width, n.size());
  for (const auto& row : m)
    for (long v : row) width = std::max(width, std::to_string(v).size());
  auto pad = [&](const std::string& s) { return std::string(width + 2 - s.size(), ' ') + s; };
  std::ostringstream os;
  os << pad("true");
  for (const auto& n : class_names) os << pad(n);
  os << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << pad(class_names[i]);
    for (long v : m[i]) os << pad(std::to_string(v));
    os << '\n';
  }
  return os.str();
}

// ---- design decisions ----

const std::vector<DesignDecision>& design_decisions() {
  static const std::vector<DesignDecision> registry = {
      {"dataset.malformed", "dataset",
       "Malformed raw lines are skipped and counted; ingestion aborts when more than 10% of lines are malformed."},
      {"dataset.gaps", "dataset",
       "A recording is cut where a timestamp jump exceeds ten times the median within-run sampling interval."},
      {"dataset.split", "dataset",
       "The default split is class-stratified over segments (70/10/20, seed 1); a by-user split is available "
       "because overlapping windows of one recording otherwise land on both sides of the split."},
      {"preprocess.stride", "preprocess", "Window stride is S - floor(overlap * S): 45 samples for S = 150, overlap 0.7."},
      {"preprocess.smoothing", "preprocess",
       "Smoothing is a centred moving average over M samples applied to each segment after windowing, truncated at "
       "segment edges."},
      {"preprocess.normalization", "preprocess",
       "Min-max statistics are global per channel and fitted on the training split only; all splits are mapped "
       "with those statistics and clamped to [0, 1]."},
      {"features.statistical", "features",
       "Statistical features are min, max, mean and population standard deviation per channel of the normalized "
       "segment, channel-major."},
      {"features.cwt", "features",
       "Spectral features are magnitudes of a complex Morlet transform with omega0 = 6 at integer scales 1..K "
       "(K = 50), the wavelet truncated at four scale widths and the signal zero-padded."},
      {"features.cache", "features", "Cached feature files keep 64-bit values so reloads are bit-identical."},
      {"autodiff.precision", "tensor-autodiff", "All tensors and training arithmetic are 64-bit floating point."},
      {"autodiff.init", "tensor-autodiff",
       "Weights start uniform in +-sqrt(1/fan_in), biases at zero, LSTM forget-gate biases at one."},
      {"models.head", "models",
       "Every neural model ends in fully connected 256 -> 128 -> classes with ReLU between; the 128-unit "
       "activation is the embedding."},
      {"models.transformer", "models",
       "Transformer: linear embedding to d_model 64, learned positional table, two post-norm encoder layers with "
       "8 heads and feed-forward width 128, mean over time."},
      {"models.resnet", "models",
       "ResNet: 3x3 stem with 16 channels, four residual blocks of two 3x3 convolutions with 16/32/64/128 channels, "
       "stride 2 from the second block on, 1x1 projection shortcuts where shape changes, global average pool; the "
       "scalogram is a K x S image with one channel per sensor axis."},
      {"models.lstm_attention", "models",
       "LSTM-Attention: two 64-unit LSTM layers and additive attention over all time steps giving one context "
       "vector."},
      {"models.bilstm", "models",
       "BiLSTM: two bidirectional layers of 64 units; the feature is the final forward state joined with the final "
       "backward state of the top layer."},
      {"models.cnn1d", "models",
       "CNN1D: 64 and 32 filters of width 3 with same padding and ReLU, max pooling of width 2, then flatten."},
      {"models.mrnet", "models",
       "MRNet: temporal LSTM(64), statistical dense layer of 64 units, spectral 3x3 convolutions with 16 and 32 "
       "filters (second with stride 2) and global average pool; the 160 concatenated values feed the head."},
      {"models.classical", "models",
       "Classical settings: kNN k = 5 Euclidean; CART with Gini and unlimited depth; random forest of 100 bootstrap "
       "trees with sqrt(d) features per split; AdaBoost SAMME with 50 stumps; gradient boosting one-vs-rest "
       "logistic, 100 rounds of depth-3 trees, shrinkage 0.1, Newton leaves; Gaussian naive Bayes with variance "
       "smoothing 1e-9 of the largest variance."},
      {"models.linear", "models",
       "Logistic regression and the one-vs-rest linear SVM (hinge, L2 1e-4) train with Adam at learning rate 0.01 "
       "for 100 epochs of batch 64 on standardized features."},
      {"models.mlp", "models",
       "The classical MLP has hidden layers of 128 and 64 ReLU units and trains with Adam at 1e-3 for 200 epochs of "
       "batch 64 on standardized features."},
      {"training.epochs", "training", "Training iterations are read as epochs: 50 for cross-entropy, 10 for pretraining."},
      {"training.supcon", "training",
       "The supervised contrastive loss uses the standard denominator over every other batch item; anchors without "
       "a positive are excluded and counted."},
      {"training.triplet", "training",
       "Triplet loss uses Euclidean distance on unnormalized embeddings with margin 1.0; triplets are drawn "
       "uniformly with a same-label positive and a different-label negative."},
      {"training.batches", "training",
       "Batch size 64; contrastive pretraining draws class-balanced batches of floor(64 / classes) items per class; "
       "other phases use shuffled batches."},
      {"training.pretrain", "training",
       "Pretraining updates only the encoder (everything before the final layer) with no projection head; "
       "contrastive embeddings are L2-normalized."},
      {"training.finetune", "training",
       "After pretraining the whole network is fine-tuned with cross-entropy using a fresh optimizer state."},
      {"training.selection", "training",
       "The parameters from the cross-entropy epoch with the best validation accuracy are kept; equal accuracies "
       "go to the lower validation cross-entropy."},
      {"harness.evaluation", "harness", "Validation data selects the snapshot; the test split is evaluated once per model."},
      {"harness.tables", "harness", "Accuracies are reported as fractions in [0, 1]."},
      {"harness.isolation", "harness", "A failing model is recorded in the report and does not stop the others."},
      {"harness.seeds", "harness",
       "One documented seed by default; each model derives its own seed from the base seed and its kind, so results "
       "do not depend on model order or worker count."},
  };
  return registry;
}

// ---- report ----

json ModelResult::to_json() const {
  json j = {{"kind", kind},
            {"status", status},
            {"parameter_count", parameter_count},
            {"spec", spec},
            {"history_path", history_path},
            {"checkpoint_path", checkpoint_path}};
  if (!error.empty()) j["error"] = error;
  if (status == "ok") {
    j["accuracy"] = accuracy;
    j["confusion"] = confusion;
    j["class_counts"] = class_counts;
    j["confusion_path"] = confusion_path;
  }
  if (best_epoch > 0) {
    j["best_epoch"] = best_epoch;
    j["best_val_accuracy"] = best_val_accuracy;
    j["excluded_anchors"] = excluded_anchors;
  }
  return j;
}

ModelResult ModelResult::from_json(const json& j) {
  ModelResult r;
  r.kind = j.at("kind").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.error = j.value("error", std::string());
  r.parameter_count = j.value("parameter_count", std::size_t{0});
  r.spec = j.value("spec", json::object());
  r.history_path = j.value("history_path", std::string());
  r.checkpoint_path = j.value("checkpoint_path", std::string());
  r.accuracy = j.value("accuracy", 0.0);
  if (j.contains("confusion")) r.confusion = j.at("confusion").get<ConfusionMatrix>();
  if (j.contains("class_counts")) r.class_counts = j.at("class_counts").get<std::vector<long>>();
  r.confusion_path = j.value("confusion_path", std::string());
  r.best_epoch = j.value("best_epoch", 0);
  r.best_val_accuracy = j.value("best_val_accuracy", 0.0);
  r.excluded_anchors = j.value("excluded_anchors", std::size_t{0});
  return r;
}

json ExperimentReport::to_json() const {
  json models_json = json::array();
  json timing_models = json::object();
  for (const auto& m : models) {
    models_json.push_back(m.to_json());
    timing_models[m.kind] = m.seconds;
  }
  json decisions = json::array();
  for (const auto& d : design_decisions()) decisions.push_back({{"id", d.id}, {"module", d.module}, {"text", d.text}});
  return {{"tool", {{"name", "har"}, {"version", kToolVersion}}},
          {"config", config},
          {"pipeline", pipeline},
          {"config_digest", config_digest},
          {"pipeline_digest", pipeline_digest},
          {"corpus_digest", corpus_digest},
          {"dataset", dataset_name},
          {"class_names", class_names},
          {"schedule", schedule},
          {"seed", seed},
          {"reference", reference},
          {"data", data},
          {"models", models_json},
          {"best_model", best_model},
          {"provenance", {{"design_decisions", decisions}}},
          {"timing", {{"total_seconds", total_seconds}, {"models", timing_models}}}};
}

ExperimentReport ExperimentReport::from_json(const json& j) {
  ExperimentReport r;
  try {
    r.config = j.at("config");
    r.pipeline = j.at("pipeline");
    r.config_digest = j.at("config_digest").get<std::string>();
    r.pipeline_digest = j.at("pipeline_digest").get<std::string>();
    r.corpus_digest = j.value("corpus_digest", std::string());
    r.dataset_name = j.at("dataset").get<std::string>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.schedule = j.at("schedule").get<std::string>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.reference = j.value("reference", std::string());
    r.data = j.value("data", json::object());
    for (const auto& m : j.at("models")) r.models.push_back(ModelResult::from_json(m));
    r.best_model = j.value("best_model", std::string());
    if (j.contains("timing")) {
      const json& t = j.at("timing");
      r.total_seconds = t.value("total_seconds", 0.0);
      for (auto& m : r.models)
        if (t.contains("models") && t.at("models").contains(m.kind)) m.seconds = t.at("models").at(m.kind).get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  return r;
}

void ExperimentReport::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

ExperimentReport ExperimentReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read report " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("report " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::size_t ExperimentReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(models.begin(), models.end(), [](const ModelResult& m) { return m.status == "failed"; }));
}

// ---- running ----

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData d;
  if (config.dataset.synthetic) {
    d.manifest = synth_manifest(*config.dataset.synthetic);
    d.recordings = synth_generate(*config.dataset.synthetic);
    for (const auto& r : d.recordings) d.tally.samples += r.length();
  } else {
    d.manifest = DatasetManifest::load(config.dataset.manifest);
    IngestResult ingest = load_dataset(d.manifest);
    d.recordings = std::move(ingest.recordings);
    d.tally = ingest.tally;
  }
  d.corpus_digest = corpus_digest(d.recordings);
  d.preprocessed = preprocess_pipeline(d.recordings, config.preprocess, config.split);
  if (d.preprocessed.segments.empty()) throw ConfigError("preprocessing produced no segments");
  d.store = std::make_unique<FeatureStore>(d.preprocessed.segments, config.features);
  d.dims = {d.store->steps(), d.store->channels(), static_cast<std::size_t>(config.features.cwt_scales)};
  return d;
}

namespace {

std::vector<int> labels_of(const FeatureStore& store, std::span<const int> ids) {
  std::vector<int> y;
  y.reserve(ids.size());
  for (int id : ids) y.push_back(store.label(id));
  return y;
}

class Logger {
 public:
  explicit Logger(std::ostream* os) : os_(os) {}
  void line(const std::string& s) {
    if (!os_) return;
    std::lock_guard lock(mutex_);
    *os_ << s << '\n' << std::flush;
  }

 private:
  std::ostream* os_;
  std::mutex mutex_;
};

ModelResult run_model(const ExperimentConfig& config, const PreparedData& data, const ModelEntry& entry,
                      const RunOptions& options, Logger& log) {
  ModelResult r;
  r.kind = to_string(entry.kind);
  const auto started = std::chrono::steady_clock::now();
  try {
    ModelSpec spec = ModelSpec::make(entry.kind, data.dims, data.manifest.num_classes);
    spec.hyper.update(entry.hyperparameters);
    r.spec = spec.to_json();
    const std::uint64_t seed = model_seed(config.training.seed, entry.kind);
    auto model = build(spec, seed);
    r.parameter_count = model->parameter_count();
    const auto& split = data.preprocessed.split;
    const auto& store = *data.store;
    const std::filesystem::path models_dir = config.output_dir / "models";
    std::filesystem::create_directories(models_dir);
    r.checkpoint_path = "models/" + r.kind + (model->neural() ? ".ckpt" : ".json");
    const auto checkpoint = config.output_dir / r.checkpoint_path;

    if (options.train) {
      log.line("[" + r.kind + "] training");
      if (model->neural()) {
        auto& neural = as_neural(*model);
        const TrainResult tr = train(neural, store, split, config.training, [&](const EpochRecord& e) {
          log.line("[" + r.kind + "] " + e.phase + " epoch " + std::to_string(e.epoch) +
                   " loss " + fixed(e.train_loss, 4) + " val " + fixed(e.val_accuracy, 4));
        });
        r.history_path = "models/" + r.kind + "_history.csv";
        write_history_csv(config.output_dir / r.history_path, tr.history);
        r.best_epoch = tr.best_epoch;
        r.best_val_accuracy = tr.best_val_accuracy;
        r.excluded_anchors = tr.excluded_anchors;
        neural.save(checkpoint);
      } else {
        auto& classical = as_classical(*model);
        fit_classical(classical, store, split.train, seed);
        classical.save(checkpoint);
      }
    } else {
      if (!std::filesystem::exists(checkpoint))
        throw Error("no checkpoint at " + checkpoint.string() + "; run training first");
      if (model->neural())
        as_neural(*model).load(checkpoint);
      else
        as_classical(*model).load(checkpoint);
    }

    if (options.evaluate) {
      const auto pred = predict(*model, store, split.test);
      const auto truth = labels_of(store, split.test);
      r.confusion = confusion_matrix(pred, truth, spec.num_classes);
      r.accuracy = confusion_accuracy(r.confusion);
      for (const auto& row : r.confusion) {
        long s = 0;
        for (long v : row) s += v;
        r.class_counts.push_back(s);
      }
      r.confusion_path = "confusion_" + r.kind + ".csv";
      write_confusion_csv(config.output_dir / r.confusion_path, r.confusion, data.manifest.class_names);
      r.status = "ok";
      log.line("[" + r.kind + "] test accuracy " + fixed(r.accuracy, 4));
    } else {
      r.status = "trained";
    }
  } catch (const std::exception& e) {
    r.status = "failed";
    r.error = e.what();
    log.line("[" + r.kind + "] failed: " + r.error);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  Logger log(options.log);
  std::filesystem::create_directories(config.output_dir);

  const PreparedData data = prepare_data(config);
  const auto& split = data.preprocessed.split;
  log.line("segments " + std::to_string(data.preprocessed.segments.size()) + " (train " +
           std::to_string(split.train.size()) + ", val " + std::to_string(split.val.size()) + ", test " +
           std::to_string(split.test.size()) + ")");

  ExperimentReport report;
  json cfg = config.to_json();
  cfg.erase("output_dir");
  cfg.erase("jobs");
  if (!config.dataset.synthetic) cfg["dataset"] = {{"manifest", config.dataset.manifest.filename().generic_string()}};
  report.config = cfg;
  report.pipeline = config.pipeline_json();
  report.config_digest = config.digest();
  report.pipeline_digest = config.pipeline_digest();
  report.corpus_digest = data.corpus_digest;
  report.dataset_name = data.manifest.name;
  report.class_names = data.manifest.class_names;
  report.schedule = to_string(config.training.schedule);
  report.seed = config.training.seed;
  report.reference = config.reference;
  report.data = {{"recordings", data.recordings.size()},
                 {"samples", data.tally.samples},
                 {"malformed_lines", data.tally.malformed},
                 {"short_recordings", data.preprocessed.short_recordings},
                 {"segments", data.preprocessed.segments.size()},
                 {"split", {{"strategy", to_string(split.strategy)},
                            {"seed", split.seed},
                            {"train", split.train.size()},
                            {"val", split.val.size()},
                            {"test", split.test.size()}}},
                 {"normalization", {{"min", data.preprocessed.stats.min}, {"max", data.preprocessed.stats.max}}},
                 {"input_dims", {{"steps", data.dims.steps}, {"channels", data.dims.channels}, {"scales", data.dims.scales}}}};

  report.models.resize(config.models.size());
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.jobs), config.models.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < config.models.size(); ++i)
      report.models[i] = run_model(config, data, config.models[i], options, log);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < config.models.size(); i = next++)
          report.models[i] = run_model(config, data, config.models[i], options, log);
      });
    for (auto& t : pool) t.join();
  }

  // Best model: highest test accuracy, first listed on ties.
  double best = -1.0;
  for (const auto& m : report.models)
    if (m.status == "ok" && m.accuracy > best) {
      best = m.accuracy;
      report.best_model = m.kind;
    }
  if (!report.best_model.empty()) {
    const auto& m = *std::find_if(report.models.begin(), report.models.end(),
                                  [&](const ModelResult& x) { return x.kind == report.best_model; });
    std::ofstream out(config.output_dir / "confusion_best.txt");
    out << "best model: " << m.kind << "  accuracy " << fixed(m.accuracy, 4) << '\n'
        << format_confusion(m.confusion, report.class_names);
  }
  report.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  report.save(config.output_dir / "report.json");
  if (options.evaluate) {
    const std::vector<ExperimentReport> single{report};
    const Table table = emit_table(single);
    std::ofstream(config.output_dir / "table.csv") << table.csv();
    std::ofstream(config.output_dir / "table.txt") << table.text();
  }
  return report;
}

// ---- tables ----

std::optional<double> reference_accuracy(std::string_view set, Schedule schedule, ModelKind kind) {
  using K = ModelKind;
  // Cross-entropy accuracies for the two benchmark corpora, then contrastive-pretraining ones.
  static const std::map<K, std::pair<double, double>> ce = {
      {K::svm, {0.779, 0.569}},         {K::knn, {0.935, 0.798}},    {K::gbdt, {0.892, 0.784}},
      {K::lr, {0.763, 0.555}},          {K::dt, {0.874, 0.759}},     {K::rf, {0.929, 0.850}},
      {K::adaboost, {0.446, 0.683}},    {K::gaussian_nb, {0.781, 0.538}}, {K::mlp, {0.775, 0.603}},
      {K::resnet, {0.954, 0.535}},      {K::transformer, {0.878, 0.840}}, {K::lstm, {0.953, 0.873}},
      {K::bilstm, {0.954, 0.874}},      {K::lstm_attention, {0.931, 0.870}}, {K::cnn1d, {0.939, 0.828}},
      {K::mrnet, {0.970, 0.552}},
  };
  static const std::map<K, std::pair<double, double>> supcon = {
      {K::resnet, {0.882, 0.872}}, {K::transformer, {0.852, 0.813}},    {K::lstm, {0.923, 0.857}},
      {K::bilstm, {0.915, 0.856}}, {K::lstm_attention, {0.870, 0.826}}, {K::cnn1d, {0.919, 0.820}},
      {K::mrnet, {0.854, 0.723}},
  };
  if (set != "ds1" && set != "ds2") return std::nullopt;
  const std::map<K, std::pair<double, double>>* table = nullptr;
  if (schedule == Schedule::ce_only) table = &ce;
  if (schedule == Schedule::supcon_then_ce) table = &supcon;
  if (!table) return std::nullopt;
  const auto it = table->find(kind);
  if (it == table->end()) return std::nullopt;
  return set == "ds1" ? it->second.first : it->second.second;
}

std::string Table::csv() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << '\n';
  }
  return os.str();
}

std::string Table::text() const {
  std::vector<std::size_t> width(columns.size());
  for (std::size_t i = 0; i < columns.size(); ++i) width[i] = columns[i].size();
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == 0)
        os << cells[i] << std::string(width[i] - cells[i].size(), ' ');
      else
        os << "  " << std::string(width[i] - cells[i].size(), ' ') << cells[i];
    }
    os << '\n';
  };
  emit(columns);
  for (const auto& row : rows) emit(row);
  return os.str();
}

namespace {

std::vector<std::string> json_diff(const json& a, const json& b, const std::string& prefix = "") {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& [k, _] : a.items()) keys.insert(k);
    for (const auto& [k, _] : b.items()) keys.insert(k);
    for (const auto& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!a.contains(k) || !b.contains(k)) {
        out.push_back(path + ": " + (a.contains(k) ? a.at(k).dump() : "<absent>") + " vs " +
                      (b.contains(k) ? b.at(k).dump() : "<absent>"));
      } else {
        auto sub = json_diff(a.at(k), b.at(k), path);
        out.insert(out.end(), sub.begin(), sub.end());
      }
    }
  } else if (a != b) {
    out.push_back((prefix.empty() ? "<root>" : prefix) + ": " + a.dump() + " vs " + b.dump());
  }
  return out;
}

}  // namespace

Table emit_table(std::span<const ExperimentReport> reports) {
  if (reports.empty()) throw ConfigError("emit_table needs at least one report");

  // One pipeline per dataset.
  std::map<std::string, const ExperimentReport*> pipeline_of;
  for (const auto& r : reports) {
    auto [it, fresh] = pipeline_of.emplace(r.dataset_name, &r);
    if (!fresh && it->second->pipeline_digest != r.pipeline_digest) {
      std::string msg = "refusing to merge reports for " + r.dataset_name + " with different pipelines (" +
                        it->second->pipeline_digest + " vs " + r.pipeline_digest + ")";
      for (const auto& d : json_diff(it->second->pipeline, r.pipeline)) msg += "\n  " + d;
      throw ConfigError(msg);
    }
  }

  struct Column {
    std::string dataset, schedule, reference;
    std::map<std::string, std::vector<double>> values;  // kind -> accuracies across seeds
  };
  std::vector<Column> cols;
  for (const auto& r : reports) {
    auto it = std::find_if(cols.begin(), cols.end(),
                           [&](const Column& c) { return c.dataset == r.dataset_name && c.schedule == r.schedule; });
    if (it == cols.end()) {
      cols.push_back({r.dataset_name, r.schedule, r.reference, {}});
      it = cols.end() - 1;
    }
    for (const auto& m : r.models)
      if (m.status == "ok") it->values[m.kind].push_back(m.accuracy);
  }

  Table t;
  t.columns.push_back("model");
  bool any_sweep = false;
  for (const auto& c : cols)
    for (const auto& [_, v] : c.values) any_sweep |= v.size() > 1;
  for (const auto& c : cols) {
    const std::string label = c.dataset + "/" + c.schedule;
    t.columns.push_back(label);
    if (any_sweep) t.columns.push_back(label + " range");
    if (!c.reference.empty()) {
      t.columns.push_back(label + " reference");
      t.columns.push_back(label + " delta");
    }
  }
  for (auto kind : all_model_kinds()) {
    const std::string name = to_string(kind);
    bool present = false;
    for (const auto& c : cols) present |= c.values.count(name) > 0;
    if (!present) continue;
    std::vector<std::string> row{name};
    for (const auto& c : cols) {
      const auto it = c.values.find(name);
      double mean = 0.0;
      if (it != c.values.end()) {
        for (double v : it->second) mean += v;
        mean /= static_cast<double>(it->second.size());
        row.push_back(fixed(mean));
        if (any_sweep) {
          const auto [lo, hi] = std::minmax_element(it->second.begin(), it->second.end());
          row.push_back(it->second.size() > 1 ? "[" + fixed(*lo) + ", " + fixed(*hi) + "]" : "");
        }
      } else {
        row.push_back("-");
        if (any_sweep) row.push_back("");
      }
      if (!c.reference.empty()) {
        const auto ref = reference_accuracy(c.reference, parse_schedule(c.schedule), kind);
        row.push_back(ref ? fixed(*ref) : "-");
        row.push_back(ref && it != c.values.end() ? (mean - *ref >= 0 ? "+" : "") + fixed(mean - *ref) : "-");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---- feature dumps ----

std::vector<std::filesystem::path> dump_features(const ExperimentConfig& config, const SegmentSelector& selector,
                                                 const std::filesystem::path& out_dir) {
  const PreparedData data = prepare_data(config);
  return dump_features(data, selector, out_dir);
}

std::vector<std::filesystem::path> dump_features(const PreparedData& data, const SegmentSelector& selector,
                                                 const std::filesystem::path& out_dir) {
  const auto& segments = data.preprocessed.segments;
  std::vector<int> chosen;
  if (selector.segment_id) {
    if (*selector.segment_id < 0 || static_cast<std::size_t>(*selector.segment_id) >= segments.size())
      throw ConfigError("no segment with id " + std::to_string(*selector.segment_id));
    chosen.push_back(*selector.segment_id);
  } else if (selector.class_name) {
    const auto label = data.manifest.label_for(*selector.class_name);
    if (!label) throw ConfigError("unknown class '" + *selector.class_name + "'");
    for (const auto& s : segments)
      if (s.label.class_index == label->class_index && static_cast<int>(chosen.size()) < selector.count)
        chosen.push_back(s.id);
  } else {
    throw ConfigError("select segments by class or by id");
  }
  if (chosen.empty()) throw ConfigError("the selector matched no segment");

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> files;
  const auto& names = data.manifest.channel_names;
  for (int id : chosen) {
    const auto temporal = out_dir / ("temporal_" + std::to_string(id) + ".csv");
    const auto spectral = out_dir / ("spectral_" + std::to_string(id) + ".csv");
    write_temporal_csv(temporal, data.store->temporal(id), names);
    write_spectral_csv(spectral, *data.store->spectral(id), names);
    files.push_back(temporal);
    files.push_back(spectral);
  }
  return files;
}

}  // namespace har
