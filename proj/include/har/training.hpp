#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "har/dataset.hpp"
#include "har/features.hpp"
#include "har/models.hpp"
#include "har/tensor.hpp"

namespace har {

enum class Schedule { ce_only, supcon_then_ce, triplet_then_ce };

std::string to_string(Schedule s);
/// Accepts "ce", "supcon", "triplet" and the full enum names.
Schedule parse_schedule(std::string_view name);

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs_ce = 50;
  int epochs_pretrain = 10;
  int batch_size = 64;
  double temperature = 0.07;
  double triplet_margin = 1.0;
  std::uint64_t seed = 1;
  Schedule schedule = Schedule::ce_only;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Loss evaluated on plain values (no graph).
struct LossValue {
  double scalar = 0.0;
  std::vector<double> terms;        // per item (per anchor for supcon, per triplet for triplet)
  std::size_t excluded_anchors = 0; // supcon anchors without a positive
};

/// Differentiable loss: `scalar` is a graph node, `terms` are plain values.
struct LossTensor {
  ad::Tensor scalar;
  std::vector<double> terms;
  std::size_t excluded_anchors = 0;
};

/// Mean of -log(max(p_true, 1e-12)) over rows of a probability matrix.
LossValue ce_loss(const Matrix& probabilities, std::span<const int> labels);
/// Mean over anchors of the supervised contrastive term; every other item is in the denominator.
LossValue supcon_loss(const Matrix& embeddings, std::span<const int> labels, double temperature);
/// Mean of max(|a - p| - |a - n| + margin, 0).
LossValue triplet_loss(const Matrix& anchor, const Matrix& positive, const Matrix& negative, double margin);

/// Training forms. ce works on logits through a log-softmax, which equals the
/// probability form whenever p_true >= 1e-12.
LossTensor ce_loss(const ad::Tensor& logits, std::span<const int> labels);
LossTensor supcon_loss(const ad::Tensor& embeddings, std::span<const int> labels, double temperature);
LossTensor triplet_loss(const ad::Tensor& anchor, const ad::Tensor& positive, const ad::Tensor& negative,
                        double margin);

enum class SamplerMode { plain, class_balanced, triplet };

struct IndexBatch {
  std::vector<int> ids;        // anchors in triplet mode
  std::vector<int> positives;  // triplet mode only
  std::vector<int> negatives;  // triplet mode only
};

/// Draws index batches over one split. Each call to epoch() advances the generator.
class BatchSampler {
 public:
  /// `labels` is indexed by segment id.
  BatchSampler(std::vector<int> ids, std::span<const int> labels, SamplerMode mode, std::size_t batch_size,
               std::uint64_t seed);

  std::vector<IndexBatch> epoch();
  /// Items per batch actually used (class_balanced rounds down to a multiple of the class count).
  std::size_t effective_batch_size() const { return batch_size_; }

 private:
  std::vector<IndexBatch> plain_epoch();
  std::vector<IndexBatch> balanced_epoch();
  std::vector<IndexBatch> triplet_epoch();

  std::vector<int> ids_;
  std::vector<int> labels_;  // by segment id
  SamplerMode mode_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::vector<int>> by_class_;  // only classes present in the split
  std::vector<std::vector<int>> pools_;     // class_balanced draw pools
};

struct EpochRecord {
  std::string phase;  // "pretrain" or "ce"
  int epoch = 0;      // 1-based within the phase
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;  // breaks accuracy ties in snapshot selection; not written to the CSV
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_accuracy = 0.0;
  int best_epoch = 0;  // CE epoch whose snapshot was kept
  std::size_t excluded_anchors = 0;
};

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

/// Called after every epoch; useful for progress output.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the configured schedule on the training split and restores the CE
/// snapshot with the best validation accuracy (lower validation CE wins ties).
/// Only train ids ever reach a gradient step.
TrainResult train(NeuralModel& model, const FeatureStore& store, const SplitAssignment& split,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

void fit_classical(ClassicalModel& model, const FeatureStore& store, std::span<const int> ids, std::uint64_t seed);

/// Argmax predictions in evaluation mode.
std::vector<int> predict(const Model& model, const FeatureStore& store, std::span<const int> ids,
                         std::size_t batch_size = 64);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

}  // namespace har
