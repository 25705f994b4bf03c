#include "har/training.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>
#include <unordered_set>

namespace har {

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::ce_only: return "ce_only";
    case Schedule::supcon_then_ce: return "supcon_then_ce";
    case Schedule::triplet_then_ce: return "triplet_then_ce";
  }
  throw Error("unknown schedule");
}

Schedule parse_schedule(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "ce" || n == "ce_only") return Schedule::ce_only;
  if (n == "supcon" || n == "supcon_then_ce") return Schedule::supcon_then_ce;
  if (n == "triplet" || n == "triplet_then_ce") return Schedule::triplet_then_ce;
  throw ConfigError("unknown schedule: " + std::string(name));
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (epochs_ce < 1) throw ConfigError("epochs_ce must be >= 1");
  if (schedule != Schedule::ce_only && epochs_pretrain < 1) throw ConfigError("epochs_pretrain must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (!(triplet_margin >= 0.0)) throw ConfigError("triplet_margin must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"epochs_ce", epochs_ce},     {"epochs_pretrain", epochs_pretrain},
          {"batch_size", batch_size},       {"temperature", temperature}, {"triplet_margin", triplet_margin},
          {"seed", seed},                   {"schedule", to_string(schedule)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  static const std::vector<std::string> known = {"learning_rate", "epochs_ce",      "epochs_pretrain", "batch_size",
                                                 "temperature",   "triplet_margin", "seed",            "schedule"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown training key: " + key);
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs_ce = j.value("epochs_ce", c.epochs_ce);
    c.epochs_pretrain = j.value("epochs_pretrain", c.epochs_pretrain);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.temperature = j.value("temperature", c.temperature);
    c.triplet_margin = j.value("triplet_margin", c.triplet_margin);
    c.seed = j.value("seed", c.seed);
    if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- losses ----

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) throw ShapeError("labels and rows differ in count");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw ShapeError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
}

ad::Tensor as_tensor(const Matrix& m) {
  return ad::Tensor::from({m.rows(), m.cols()}, m.data());
}

LossValue values_of(LossTensor t) {
  return {t.scalar.item(), std::move(t.terms), t.excluded_anchors};
}

std::vector<double> copy_values(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

LossValue ce_loss(const Matrix& probabilities, std::span<const int> labels) {
  check_labels(labels, probabilities.rows(), probabilities.cols());
  if (labels.empty()) throw ShapeError("empty batch");
  LossValue out;
  out.terms.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out.terms[i] = -std::log(std::max(probabilities(i, static_cast<std::size_t>(labels[i])), 1e-12));
  out.scalar = std::accumulate(out.terms.begin(), out.terms.end(), 0.0) / static_cast<double>(labels.size());
  return out;
}

LossValue supcon_loss(const Matrix& embeddings, std::span<const int> labels, double temperature) {
  ad::NoGradGuard guard;
  return values_of(supcon_loss(as_tensor(embeddings), labels, temperature));
}

LossValue triplet_loss(const Matrix& anchor, const Matrix& positive, const Matrix& negative, double margin) {
  ad::NoGradGuard guard;
  return values_of(triplet_loss(as_tensor(anchor), as_tensor(positive), as_tensor(negative), margin));
}

LossTensor ce_loss(const ad::Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("ce_loss expects [B, classes] logits");
  check_labels(labels, logits.dim(0), logits.dim(1));
  if (labels.empty()) throw ShapeError("empty batch");
  const ad::Tensor nll = ad::neg(ad::pick(ad::log_softmax(logits), labels));
  return {ad::mean(nll), copy_values(nll), 0};
}

LossTensor supcon_loss(const ad::Tensor& embeddings, std::span<const int> labels, double temperature) {
  if (embeddings.rank() != 2) throw ShapeError("supcon_loss expects [B, D] embeddings");
  const std::size_t b = embeddings.dim(0);
  if (labels.size() != b) throw ShapeError("labels and embeddings differ in count");
  if (b < 2) throw ShapeError("supcon_loss needs at least two items");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");

  // Row i of `weights` spreads 1/|P(i)| over the positives of anchor i.
  std::vector<double> weights(b * b, 0.0);
  std::vector<char> valid(b, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < b; ++j) positives += (j != i && labels[j] == labels[i]);
    if (positives == 0) continue;
    valid[i] = 1;
    ++anchors;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) weights[i * b + j] = 1.0 / static_cast<double>(positives);
  }
  if (anchors == 0) throw TrainingError("supcon_loss: no anchor in the batch has a positive");

  // The diagonal is pushed far below every other logit so it drops out of the
  // log-sum-exp without producing inf - inf.
  std::vector<double> mask(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) mask[i * b + i] = -1e30;
  const ad::Tensor sim = ad::scale(ad::matmul(embeddings, ad::transpose(embeddings)), 1.0 / temperature);
  const ad::Tensor log_prob = ad::log_softmax(ad::add(sim, ad::Tensor::from({b, b}, std::move(mask))));
  const ad::Tensor weighted = ad::mul(log_prob, ad::Tensor::from({b, b}, weights));
  const ad::Tensor per_anchor = ad::neg(ad::sum_axis(weighted, 1));

  LossTensor out;
  out.scalar = ad::scale(ad::sum(per_anchor), 1.0 / static_cast<double>(anchors));
  for (std::size_t i = 0; i < b; ++i)
    if (valid[i]) out.terms.push_back(per_anchor[i]);
  out.excluded_anchors = b - anchors;
  return out;
}

LossTensor triplet_loss(const ad::Tensor& anchor, const ad::Tensor& positive, const ad::Tensor& negative,
                        double margin) {
  if (anchor.shape() != positive.shape() || anchor.shape() != negative.shape() || anchor.rank() != 2)
    throw ShapeError("triplet_loss expects equal [B, D] embeddings");
  const ad::Tensor d_ap = ad::sqrt(ad::sum_axis(ad::square(ad::sub(anchor, positive)), 1));
  const ad::Tensor d_an = ad::sqrt(ad::sum_axis(ad::square(ad::sub(anchor, negative)), 1));
  const ad::Tensor terms = ad::relu(ad::add_scalar(ad::sub(d_ap, d_an), margin));
  return {ad::mean(terms), copy_values(terms), 0};
}

// ---- sampling ----

BatchSampler::BatchSampler(std::vector<int> ids, std::span<const int> labels, SamplerMode mode,
                           std::size_t batch_size, std::uint64_t seed)
    : ids_(std::move(ids)), labels_(labels.begin(), labels.end()), mode_(mode), batch_size_(batch_size), rng_(seed) {
  if (ids_.empty()) throw TrainingError("sampler over an empty split");
  if (batch_size_ == 0) throw ConfigError("batch size must be positive");
  int max_label = 0;
  for (int id : ids_) {
    if (id < 0 || static_cast<std::size_t>(id) >= labels_.size()) throw ShapeError("segment id without a label");
    max_label = std::max(max_label, labels_[static_cast<std::size_t>(id)]);
  }
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(max_label) + 1);
  for (int id : ids_) groups[static_cast<std::size_t>(labels_[static_cast<std::size_t>(id)])].push_back(id);
  for (auto& g : groups)
    if (!g.empty()) by_class_.push_back(std::move(g));

  if (mode_ == SamplerMode::class_balanced) {
    const std::size_t z = by_class_.size();
    const std::size_t per_class = batch_size_ / z;
    if (z < 2 || per_class < 2)
      throw TrainingError("class-balanced batches need >= 2 classes and >= 2 items per class per batch");
    for (const auto& g : by_class_)
      if (g.size() < 2) throw TrainingError("class-balanced sampling needs >= 2 items in every class");
    batch_size_ = per_class * z;
    pools_.resize(z);
  } else if (mode_ == SamplerMode::triplet) {
    const auto usable = std::count_if(by_class_.begin(), by_class_.end(), [](const auto& g) { return g.size() >= 2; });
    if (usable < 1 || by_class_.size() < 2)
      throw TrainingError("triplet sampling needs >= 2 classes, one of them with >= 2 items");
  }
}

std::vector<IndexBatch> BatchSampler::epoch() {
  switch (mode_) {
    case SamplerMode::plain: return plain_epoch();
    case SamplerMode::class_balanced: return balanced_epoch();
    case SamplerMode::triplet: return triplet_epoch();
  }
  return {};
}

std::vector<IndexBatch> BatchSampler::plain_epoch() {
  std::vector<int> order = ids_;
  rng_.shuffle(order);
  std::vector<IndexBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size_) {
    const std::size_t end = std::min(order.size(), start + batch_size_);
    out.push_back({{order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end)},
                   {},
                   {}});
  }
  return out;
}

std::vector<IndexBatch> BatchSampler::balanced_epoch() {
  const std::size_t z = by_class_.size(), per_class = batch_size_ / z;
  const std::size_t batches = (ids_.size() + batch_size_ - 1) / batch_size_;
  std::vector<IndexBatch> out(batches);
  for (auto& batch : out) {
    for (std::size_t c = 0; c < z; ++c) {
      for (std::size_t k = 0; k < per_class; ++k) {
        if (pools_[c].empty()) {
          pools_[c] = by_class_[c];
          rng_.shuffle(pools_[c]);
        }
        batch.ids.push_back(pools_[c].back());
        pools_[c].pop_back();
      }
    }
    // Interleave classes so batch position carries no label information.
    rng_.shuffle(batch.ids);
  }
  return out;
}

std::vector<IndexBatch> BatchSampler::triplet_epoch() {
  std::vector<int> anchors;
  for (int id : ids_) {
    const int y = labels_[static_cast<std::size_t>(id)];
    const auto& g = *std::find_if(by_class_.begin(), by_class_.end(),
                                  [&](const auto& grp) { return labels_[static_cast<std::size_t>(grp[0])] == y; });
    if (g.size() >= 2) anchors.push_back(id);
  }
  rng_.shuffle(anchors);
  std::vector<IndexBatch> out;
  IndexBatch current;
  for (int a : anchors) {
    const int y = labels_[static_cast<std::size_t>(a)];
    std::size_t own = 0;
    std::size_t others = 0;
    for (std::size_t c = 0; c < by_class_.size(); ++c) {
      if (labels_[static_cast<std::size_t>(by_class_[c][0])] == y)
        own = c;
      else
        others += by_class_[c].size();
    }
    const auto& same = by_class_[own];
    int p = a;
    while (p == a) p = same[rng_.index(same.size())];
    std::size_t pick = rng_.index(others);
    int n = -1;
    for (std::size_t c = 0; c < by_class_.size() && n < 0; ++c) {
      if (c == own) continue;
      if (pick < by_class_[c].size())
        n = by_class_[c][pick];
      else
        pick -= by_class_[c].size();
    }
    current.ids.push_back(a);
    current.positives.push_back(p);
    current.negatives.push_back(n);
    if (current.ids.size() == batch_size_) {
      out.push_back(std::move(current));
      current = {};
    }
  }
  if (!current.ids.empty()) out.push_back(std::move(current));
  return out;
}

// ---- training loop ----

namespace {

/// Single-producer hand-off of prepared batches; capacity bounds the look-ahead.
template <typename T>
class Prefetcher {
 public:
  Prefetcher(std::size_t count, std::function<T(std::size_t)> produce, std::size_t capacity = 2)
      : count_(count), capacity_(capacity), produce_(std::move(produce)) {
    worker_ = std::thread([this] { run(); });
  }
  ~Prefetcher() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  T next() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    T item = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return item;
  }

 private:
  void run() {
    try {
      for (std::size_t i = 0; i < count_; ++i) {
        T item = produce_(i);
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return queue_.size() < capacity_ || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(item));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
      cv_.notify_all();
    }
  }

  std::size_t count_;
  std::size_t capacity_;
  std::function<T(std::size_t)> produce_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<T> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::thread worker_;
};

struct PreparedBatch {
  Batch features;
  std::vector<int> labels;
  std::size_t anchors = 0;  // triplet mode: rows [0, a) anchors, [a, 2a) positives, [2a, 3a) negatives
};

void check_finite_gradients(const std::vector<ad::Tensor>& params, const std::string& where) {
  for (const auto& p : params)
    for (double g : p.grad())
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient " + where);
}

std::string coordinates(const char* phase, int epoch, std::size_t batch) {
  return std::string("in ") + phase + " epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

}  // namespace

TrainResult train(NeuralModel& model, const FeatureStore& store, const SplitAssignment& split,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (split.train.empty()) throw TrainingError("empty training split");

  // The split lists must be disjoint; batches are checked against the train set below.
  const std::unordered_set<int> train_ids(split.train.begin(), split.train.end());
  for (const auto* other : {&split.val, &split.test})
    for (int id : *other)
      if (train_ids.count(id)) throw TrainingError("segment " + std::to_string(id) + " is in two splits");

  std::vector<int> labels(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) labels[i] = store.label(static_cast<int>(i));
  const auto& reps = model.spec().input_features;

  auto prepare = [&](const IndexBatch& ib) {
    PreparedBatch pb;
    std::vector<int> rows = ib.ids;
    rows.insert(rows.end(), ib.positives.begin(), ib.positives.end());
    rows.insert(rows.end(), ib.negatives.begin(), ib.negatives.end());
    for (int id : rows)
      if (!train_ids.count(id)) throw TrainingError("segment " + std::to_string(id) + " outside the training split");
    pb.features = Batch::from_store(store, rows, reps);
    for (int id : ib.ids) pb.labels.push_back(labels[static_cast<std::size_t>(id)]);
    pb.anchors = ib.positives.empty() ? 0 : ib.ids.size();
    return pb;
  };

  // Accuracy and mean CE over the validation split, in evaluation mode.
  auto validate = [&]() -> std::pair<double, double> {
    if (split.val.empty()) return {0.0, 0.0};
    const std::span<const int> ids(split.val);
    std::size_t hits = 0;
    double loss = 0.0;
    for (std::size_t start = 0; start < ids.size(); start += 64) {
      const auto chunk = ids.subspan(start, std::min<std::size_t>(64, ids.size() - start));
      const Batch batch = Batch::from_store(store, chunk, reps);
      ad::NoGradGuard guard;
      const ad::Tensor lp = ad::log_softmax(model.logits(batch, false));
      const std::size_t z = lp.dim(1);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        const auto row = lp.values().subspan(i * z, z);
        const int y = labels[static_cast<std::size_t>(chunk[i])];
        hits += std::max_element(row.begin(), row.end()) - row.begin() == y;
        loss -= row[static_cast<std::size_t>(y)];
      }
    }
    const double n = static_cast<double>(ids.size());
    return {static_cast<double>(hits) / n, loss / n};
  };

  TrainResult result;
  std::vector<std::vector<double>> best;
  double best_val_loss = 0.0;
  std::uint64_t stream = config.seed;

  auto run_phase = [&](const char* phase, SamplerMode mode, int epochs, const std::vector<ad::Tensor>& params,
                       auto&& loss_of) {
    ad::Adam opt(params, {config.learning_rate});
    BatchSampler sampler(split.train, labels, mode, static_cast<std::size_t>(config.batch_size), ++stream);
    const bool ce_phase = std::string_view(phase) == "ce";
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      const std::vector<IndexBatch> batches = sampler.epoch();
      Prefetcher<PreparedBatch> feed(batches.size(), [&](std::size_t i) { return prepare(batches[i]); });
      double total = 0.0;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const PreparedBatch pb = feed.next();
        const LossTensor loss = loss_of(pb);
        const double value = loss.scalar.item();
        if (!std::isfinite(value)) throw TrainingError("non-finite loss " + coordinates(phase, epoch, b + 1));
        result.excluded_anchors += loss.excluded_anchors;
        ad::backward(loss.scalar);
        check_finite_gradients(params, coordinates(phase, epoch, b + 1));
        opt.step();
        total += value;
      }
      const auto [val_acc, val_loss] = validate();
      const EpochRecord rec{phase, epoch, total / static_cast<double>(batches.size()), val_acc, val_loss};
      result.history.push_back(rec);
      if (on_epoch) on_epoch(rec);
      const bool better = rec.val_accuracy > result.best_val_accuracy ||
                          (rec.val_accuracy == result.best_val_accuracy && rec.val_loss < best_val_loss);
      if (ce_phase && (result.best_epoch == 0 || better)) {
        result.best_val_accuracy = rec.val_accuracy;
        best_val_loss = rec.val_loss;
        result.best_epoch = epoch;
        best = model.parameters().snapshot();
      }
    }
  };

  if (config.schedule == Schedule::supcon_then_ce) {
    run_phase("pretrain", SamplerMode::class_balanced, config.epochs_pretrain, model.encoder_parameters(),
              [&](const PreparedBatch& pb) {
                return supcon_loss(ad::l2_normalize(model.embedding(pb.features, true)), pb.labels,
                                   config.temperature);
              });
  } else if (config.schedule == Schedule::triplet_then_ce) {
    run_phase("pretrain", SamplerMode::triplet, config.epochs_pretrain, model.encoder_parameters(),
              [&](const PreparedBatch& pb) {
                const ad::Tensor e = model.embedding(pb.features, true);
                const std::size_t a = pb.anchors;
                return triplet_loss(ad::slice(e, 0, 0, a), ad::slice(e, 0, a, 2 * a), ad::slice(e, 0, 2 * a, 3 * a),
                                    config.triplet_margin);
              });
  }
  run_phase("ce", SamplerMode::plain, config.epochs_ce, model.parameters().tensors(),
            [&](const PreparedBatch& pb) { return ce_loss(model.logits(pb.features, true), pb.labels); });

  model.parameters().restore(best);
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,phase,train_loss,val_accuracy\n";
  char buf[64];
  for (const auto& r : history) {
    out << r.epoch << ',' << r.phase << ',';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.train_loss, r.val_accuracy);
    out << buf << '\n';
  }
}

void fit_classical(ClassicalModel& model, const FeatureStore& store, std::span<const int> ids, std::uint64_t seed) {
  std::vector<int> y;
  y.reserve(ids.size());
  for (int id : ids) y.push_back(store.label(id));
  model.fit(statistical_matrix(store, ids), y, seed);
}

std::vector<int> predict(const Model& model, const FeatureStore& store, std::span<const int> ids,
                         std::size_t batch_size) {
  if (ids.empty()) return {};
  if (const auto* classical = dynamic_cast<const ClassicalModel*>(&model))
    return classical->predict(statistical_matrix(store, ids));
  const auto& neural = dynamic_cast<const NeuralModel&>(model);
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const auto chunk = ids.subspan(start, std::min(batch_size, ids.size() - start));
    const Batch batch = Batch::from_store(store, chunk, model.spec().input_features);
    ad::NoGradGuard guard;
    const ad::Tensor logits = neural.logits(batch, false);
    const std::size_t z = logits.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto row = logits.values().subspan(i * z, z);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("predictions and labels differ in count");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace har
