#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "har/dataset.hpp"
#include "har/features.hpp"
#include "har/models.hpp"
#include "har/preprocess.hpp"
#include "har/training.hpp"

namespace har {

inline constexpr const char* kToolVersion = "0.1.0";

struct ModelEntry {
  ModelKind kind = ModelKind::lstm;
  nlohmann::json hyperparameters = nlohmann::json::object();  // overrides of the defaults
};

/// Either a manifest on disk or the built-in synthetic corpus.
struct DatasetSource {
  std::filesystem::path manifest;
  std::optional<SynthSpec> synthetic;
};

struct ExperimentConfig {
  DatasetSource dataset;
  PreprocessConfig preprocess;
  FeatureConfig features;
  SplitOptions split;
  TrainConfig training;
  std::vector<ModelEntry> models;
  std::filesystem::path output_dir = "out";
  std::string reference;  // reference accuracy set printed beside tables ("ds1", "ds2" or empty)
  int jobs = 1;           // concurrent model workers

  /// Relative paths in the file resolve against its directory.
  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
  void validate() const;

  /// Everything that determines results (output location and worker count excluded).
  std::string digest() const;
  /// Dataset, preprocessing, features, split and optimizer settings; excludes the model
  /// list, the schedule and the training seed, so reports that differ only in those merge.
  nlohmann::json pipeline_json() const;
  std::string pipeline_digest() const;
};

/// Selects a subset of the configured models by name (comma list).
void restrict_models(ExperimentConfig& config, std::string_view comma_list);

/// Per-model seed, independent of model order and worker scheduling.
std::uint64_t model_seed(std::uint64_t base, ModelKind kind);

using ConfusionMatrix = std::vector<std::vector<long>>;

/// entry (true, predicted) = count.
ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int num_classes);
double confusion_accuracy(const ConfusionMatrix& m);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& m,
                         std::span<const std::string> class_names);
std::string format_confusion(const ConfusionMatrix& m, std::span<const std::string> class_names);

struct DesignDecision {
  std::string id;
  std::string module;
  std::string text;
};

/// Every resolved design choice, embedded verbatim in each report.
const std::vector<DesignDecision>& design_decisions();

struct ModelResult {
  std::string kind;
  std::string status;  // "ok", "trained" (no evaluation) or "failed"
  std::string error;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<long> class_counts;  // test items per true class
  std::size_t parameter_count = 0;
  nlohmann::json spec;
  std::string history_path;     // relative to the output directory
  std::string confusion_path;
  std::string checkpoint_path;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::size_t excluded_anchors = 0;
  double seconds = 0.0;  // reported under "timing" only

  nlohmann::json to_json() const;
  static ModelResult from_json(const nlohmann::json& j);
};

struct ExperimentReport {
  nlohmann::json config;
  nlohmann::json pipeline;
  std::string config_digest;
  std::string pipeline_digest;
  std::string corpus_digest;
  std::string dataset_name;
  std::vector<std::string> class_names;
  std::string schedule;
  std::uint64_t seed = 0;
  std::string reference;
  nlohmann::json data;  // segment and split counts
  std::vector<ModelResult> models;
  std::string best_model;
  double total_seconds = 0.0;

  /// Timing lives under the single "timing" key so the rest is reproducible byte for byte.
  nlohmann::json to_json() const;
  static ExperimentReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ExperimentReport load(const std::filesystem::path& path);
  std::size_t failures() const;
};

struct RunOptions {
  bool train = true;     // false: load checkpoints written by an earlier training run
  bool evaluate = true;  // false: stop after training, report status "trained"
  std::ostream* log = nullptr;
};

/// Loaded and preprocessed corpus plus its feature store.
struct PreparedData {
  DatasetManifest manifest;
  std::vector<RawRecording> recordings;
  IngestTally tally;
  std::string corpus_digest;
  PreprocessResult preprocessed;
  std::unique_ptr<FeatureStore> store;
  InputDims dims;
};

PreparedData prepare_data(const ExperimentConfig& config);

/// Each model runs in isolation: a failure is recorded in its result and the rest continue.
ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Reference accuracies for comparison columns; empty when unknown.
std::optional<double> reference_accuracy(std::string_view set, Schedule schedule, ModelKind kind);

struct Table {
  std::vector<std::string> columns;  // first column is "model"
  std::vector<std::vector<std::string>> rows;
  std::string csv() const;
  std::string text() const;
};

/// Model x (dataset, schedule) grid. Reports sharing a column are averaged (mean with
/// range). Reports of one dataset must share a pipeline digest; otherwise this throws
/// ConfigError listing the differing settings.
Table emit_table(std::span<const ExperimentReport> reports);

struct SegmentSelector {
  std::optional<std::string> class_name;
  std::optional<int> segment_id;
  int count = 1;
};

/// Writes temporal_<id>.csv and spectral_<id>.csv per selected segment; returns the files.
std::vector<std::filesystem::path> dump_features(const ExperimentConfig& config, const SegmentSelector& selector,
                                                 const std::filesystem::path& out_dir);
std::vector<std::filesystem::path> dump_features(const PreparedData& data, const SegmentSelector& selector,
                                                 const std::filesystem::path& out_dir);

}  // namespace har
