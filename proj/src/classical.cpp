// Classical classifiers over the statistical feature vector.
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "zoo.hpp"

namespace har::zoo {

namespace {

using nlohmann::json;

/// Per-feature z-scoring fitted on the training matrix; constant features keep scale 1.
struct Standardizer {
  std::vector<double> mean, scale;

  void fit(const Matrix& x) {
    const std::size_t n = x.rows(), f = x.cols();
    mean.assign(f, 0.0);
    scale.assign(f, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) mean[j] += x(i, j);
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) scale[j] += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
    for (auto& s : scale) {
      s = std::sqrt(s / static_cast<double>(n));
      if (s < 1e-12) s = 1.0;
    }
  }

  std::vector<double> apply(const Matrix& x) const {
    std::vector<double> out(x.data().size());
    const std::size_t f = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < f; ++j) out[i * f + j] = (x(i, j) - mean[j]) / scale[j];
    return out;
  }

  json to_json() const { return {{"mean", mean}, {"scale", scale}}; }
  void from_json(const json& j) {
    mean = j.at("mean").get<std::vector<double>>();
    scale = j.at("scale").get<std::vector<double>>();
  }
};

void check_width(const Matrix& x, std::size_t expected) {
  if (x.cols() != expected)
    throw ShapeError("expected " + std::to_string(expected) + " features, got " + std::to_string(x.cols()));
}

// ---- CART ----

/// Binary tree in flat arrays; feature < 0 marks a leaf. Left branch takes x <= threshold.
struct Tree {
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left, right;
  std::vector<std::vector<double>> value;

  int add_leaf(std::vector<double> v) {
    feature.push_back(-1);
    threshold.push_back(0.0);
    left.push_back(-1);
    right.push_back(-1);
    value.push_back(std::move(v));
    return static_cast<int>(feature.size()) - 1;
  }

  const std::vector<double>& evaluate(std::span<const double> x) const {
    std::size_t n = 0;
    while (feature[n] >= 0)
      n = static_cast<std::size_t>(x[static_cast<std::size_t>(feature[n])] <= threshold[n] ? left[n] : right[n]);
    return value[n];
  }

  std::size_t depth() const {
    std::vector<std::size_t> d(feature.size(), 0);
    std::size_t best = 0;
    for (std::size_t n = 0; n < feature.size(); ++n) {
      best = std::max(best, d[n]);
      if (feature[n] >= 0) {
        d[static_cast<std::size_t>(left[n])] = d[n] + 1;
        d[static_cast<std::size_t>(right[n])] = d[n] + 1;
      }
    }
    return best;
  }

  json to_json() const {
    return {{"feature", feature}, {"threshold", threshold}, {"left", left}, {"right", right}, {"value", value}};
  }
  static Tree from_json(const json& j) {
    Tree t;
    t.feature = j.at("feature").get<std::vector<int>>();
    t.threshold = j.at("threshold").get<std::vector<double>>();
    t.left = j.at("left").get<std::vector<int>>();
    t.right = j.at("right").get<std::vector<int>>();
    t.value = j.at("value").get<std::vector<std::vector<double>>>();
    const auto n = t.feature.size();
    if (t.threshold.size() != n || t.left.size() != n || t.right.size() != n || t.value.size() != n || n == 0)
      throw Error("corrupt tree");
    return t;
  }
};

/// Shared growth logic. The split score is a "purity" to maximize; the leaf
/// payload and the score are supplied by the criterion.
template <typename Criterion>
class TreeGrower {
 public:
  TreeGrower(const Matrix& x, Criterion& crit, int max_depth, std::size_t max_features, Rng* rng)
      : x_(x), crit_(crit), max_depth_(max_depth), max_features_(max_features), rng_(rng) {}

  Tree grow(std::vector<int> samples) {
    Tree tree;
    grow_node(tree, samples, 0);
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double score = -std::numeric_limits<double>::infinity();
  };

  // Nodes are appended parent-first, so each child index exceeds its parent's.
  int grow_node(Tree& tree, std::vector<int>& samples, int depth) {
    const bool depth_left = max_depth_ <= 0 || depth < max_depth_;
    if (!depth_left || samples.size() < 2 || crit_.pure(samples)) return tree.add_leaf(crit_.leaf(samples));
    const Split split = best_split(samples);
    if (split.feature < 0) return tree.add_leaf(crit_.leaf(samples));

    std::vector<int> lo, hi;
    for (int s : samples)
      (x_(static_cast<std::size_t>(s), static_cast<std::size_t>(split.feature)) <= split.threshold ? lo : hi)
          .push_back(s);
    const int node = tree.add_leaf({});
    tree.feature[static_cast<std::size_t>(node)] = split.feature;
    tree.threshold[static_cast<std::size_t>(node)] = split.threshold;
    std::vector<int>().swap(samples);
    const int l = grow_node(tree, lo, depth + 1);
    tree.left[static_cast<std::size_t>(node)] = l;
    const int r = grow_node(tree, hi, depth + 1);
    tree.right[static_cast<std::size_t>(node)] = r;
    return node;
  }

  Split best_split(const std::vector<int>& samples) {
    const std::size_t f = x_.cols();
    std::vector<std::size_t> order(f);
    std::iota(order.begin(), order.end(), 0);
    std::size_t budget = f;
    if (rng_ && max_features_ > 0 && max_features_ < f) {
      rng_->shuffle(order);
      budget = max_features_;
    }
    Split best;
    std::vector<int> sorted = samples;
    std::size_t informative = 0;
    // Keep drawing past constant features until `budget` informative ones were examined.
    for (std::size_t idx = 0; idx < f && informative < budget; ++idx) {
      const std::size_t j = order[idx];
      std::sort(sorted.begin(), sorted.end(), [&](int a, int b) {
        const double xa = x_(static_cast<std::size_t>(a), j), xb = x_(static_cast<std::size_t>(b), j);
        return xa < xb || (xa == xb && a < b);
      });
      const double first = x_(static_cast<std::size_t>(sorted.front()), j);
      const double last = x_(static_cast<std::size_t>(sorted.back()), j);
      if (!(last > first)) continue;
      ++informative;
      crit_.reset(sorted);
      for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        crit_.move_left(sorted[i]);
        const double a = x_(static_cast<std::size_t>(sorted[i]), j);
        const double b = x_(static_cast<std::size_t>(sorted[i + 1]), j);
        if (!(b > a)) continue;
        const double score = crit_.score();
        if (best.feature < 0 || score > best.score) {
          best.feature = static_cast<int>(j);
          double mid = 0.5 * (a + b);
          if (!(mid < b)) mid = a;
          best.threshold = mid;
          best.score = score;
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  Criterion& crit_;
  int max_depth_;
  std::size_t max_features_;
  Rng* rng_;
};

/// Weighted Gini: maximizes sum_k L_k^2 / |L| + sum_k R_k^2 / |R|.
struct GiniCriterion {
  std::span<const int> y;
  std::span<const double> w;
  std::size_t classes;
  std::vector<double> left_counts, right_counts;
  double left_total = 0.0, right_total = 0.0;

  bool pure(const std::vector<int>& samples) const {
    const int c = y[static_cast<std::size_t>(samples.front())];
    return std::all_of(samples.begin(), samples.end(), [&](int s) { return y[static_cast<std::size_t>(s)] == c; });
  }
  std::vector<double> leaf(const std::vector<int>& samples) const {
    std::vector<double> v(classes, 0.0);
    double total = 0.0;
    for (int s : samples) {
      v[static_cast<std::size_t>(y[static_cast<std::size_t>(s)])] += w[static_cast<std::size_t>(s)];
      total += w[static_cast<std::size_t>(s)];
    }
    for (auto& p : v) p = total > 0.0 ? p / total : 1.0 / static_cast<double>(classes);
    return v;
  }
  void reset(const std::vector<int>& samples) {
    left_counts.assign(classes, 0.0);
    right_counts.assign(classes, 0.0);
    left_total = right_total = 0.0;
    for (int s : samples) {
      right_counts[static_cast<std::size_t>(y[static_cast<std::size_t>(s)])] += w[static_cast<std::size_t>(s)];
      right_total += w[static_cast<std::size_t>(s)];
    }
  }
  void move_left(int s) {
    const double ws = w[static_cast<std::size_t>(s)];
    const auto k = static_cast<std::size_t>(y[static_cast<std::size_t>(s)]);
    left_counts[k] += ws;
    right_counts[k] -= ws;
    left_total += ws;
    right_total -= ws;
  }
  double score() const {
    double l = 0.0, r = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      l += left_counts[k] * left_counts[k];
      r += right_counts[k] * right_counts[k];
    }
    return (left_total > 0.0 ? l / left_total : 0.0) + (right_total > 0.0 ? r / right_total : 0.0);
  }
};

/// Squared-error splits on residuals; Newton leaf value sum(r) / sum(h).
struct NewtonCriterion {
  std::span<const double> residual;
  std::span<const double> hessian;
  double left_sum = 0.0, right_sum = 0.0;
  std::size_t left_n = 0, right_n = 0;

  bool pure(const std::vector<int>&) const { return false; }
  std::vector<double> leaf(const std::vector<int>& samples) const {
    double r = 0.0, h = 0.0;
    for (int s : samples) {
      r += residual[static_cast<std::size_t>(s)];
      h += hessian[static_cast<std::size_t>(s)];
    }
    return {h > 1e-12 ? r / h : 0.0};
  }
  void reset(const std::vector<int>& samples) {
    left_sum = 0.0;
    left_n = 0;
    right_sum = 0.0;
    for (int s : samples) right_sum += residual[static_cast<std::size_t>(s)];
    right_n = samples.size();
  }
  void move_left(int s) {
    const double r = residual[static_cast<std::size_t>(s)];
    left_sum += r;
    right_sum -= r;
    ++left_n;
    --right_n;
  }
  double score() const {
    return left_sum * left_sum / static_cast<double>(left_n) + right_sum * right_sum / static_cast<double>(right_n);
  }
};

Tree grow_classifier(const Matrix& x, std::span<const int> y, std::span<const double> w, std::vector<int> samples,
                     std::size_t classes, int max_depth, std::size_t max_features, Rng* rng) {
  GiniCriterion crit{y, w, classes, {}, {}};
  TreeGrower<GiniCriterion> grower(x, crit, max_depth, max_features, rng);
  return grower.grow(std::move(samples));
}

std::vector<int> all_samples(std::size_t n) {
  std::vector<int> s(n);
  std::iota(s.begin(), s.end(), 0);
  return s;
}

json trees_to_json(const std::vector<Tree>& trees) {
  json arr = json::array();
  for (const auto& t : trees) arr.push_back(t.to_json());
  return arr;
}

std::vector<Tree> trees_from_json(const json& arr) {
  std::vector<Tree> out;
  for (const auto& t : arr) out.push_back(Tree::from_json(t));
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---- models ----

class DecisionTree final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t) override {
    check_training_set(x, y);
    const std::vector<double> w(x.rows(), 1.0);
    tree_ = grow_classifier(x, y, w, all_samples(x.rows()), classes(), spec_.hyper.dt_max_depth, 0, nullptr);
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    require_fitted();
    Matrix p(x.rows(), classes());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto& v = tree_.evaluate(x.row(i));
      std::copy(v.begin(), v.end(), p.row(i).begin());
    }
    return p;
  }
  json to_json() const override { return {{"tree", tree_.to_json()}}; }
  void from_json(const json& j) override { tree_ = Tree::from_json(j.at("tree")); }
  std::size_t depth() const { return tree_.depth(); }

 private:
  std::size_t classes() const { return static_cast<std::size_t>(spec_.num_classes); }
  void require_fitted() const {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
  }
  Tree tree_;
};

class RandomForest final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t seed) override {
    check_training_set(x, y);
    Rng rng(seed);
    const std::size_t n = x.rows();
    const std::size_t m = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(x.cols()))));
    const std::vector<double> w(n, 1.0);
    trees_.clear();
    for (int t = 0; t < spec_.hyper.rf_trees; ++t) {
      std::vector<int> boot(n);
      for (auto& s : boot) s = static_cast<int>(rng.index(n));
      trees_.push_back(grow_classifier(x, y, w, std::move(boot), classes(), spec_.hyper.rf_max_depth, m, &rng));
    }
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    Matrix p(x.rows(), classes());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = p.row(i);
      for (const auto& t : trees_) {
        const auto& v = t.evaluate(x.row(i));
        for (std::size_t k = 0; k < v.size(); ++k) row[k] += v[k];
      }
      for (auto& r : row) r /= static_cast<double>(trees_.size());
    }
    return p;
  }
  json to_json() const override { return {{"trees", trees_to_json(trees_)}}; }
  void from_json(const json& j) override { trees_ = trees_from_json(j.at("trees")); }

 private:
  std::size_t classes() const { return static_cast<std::size_t>(spec_.num_classes); }
  std::vector<Tree> trees_;
};

/// SAMME boosting of depth-one trees.
class AdaBoost final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t) override {
    check_training_set(x, y);
    const std::size_t n = x.rows(), k = classes();
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    stumps_.clear();
    alpha_.clear();
    for (int m = 0; m < spec_.hyper.adaboost_rounds; ++m) {
      Tree stump = grow_classifier(x, y, w, all_samples(n), k, 1, 0, nullptr);
      std::vector<char> wrong(n);
      double err = 0.0, total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        wrong[i] = static_cast<int>(argmax(stump.evaluate(x.row(i)))) != y[i];
        if (wrong[i]) err += w[i];
        total += w[i];
      }
      err /= total;
      if (err <= 0.0) {  // perfect fit: keep it and stop
        stumps_.push_back(std::move(stump));
        alpha_.push_back(1.0);
        break;
      }
      if (err >= 1.0 - 1.0 / static_cast<double>(k)) {
        if (stumps_.empty()) {
          stumps_.push_back(std::move(stump));
          alpha_.push_back(1.0);
        }
        break;
      }
      const double a = std::log((1.0 - err) / err) + std::log(static_cast<double>(k) - 1.0);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (wrong[i]) w[i] *= std::exp(a);
        sum += w[i];
      }
      for (auto& wi : w) wi /= sum;
      stumps_.push_back(std::move(stump));
      alpha_.push_back(a);
    }
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    Matrix p(x.rows(), classes());
    const double total = std::accumulate(alpha_.begin(), alpha_.end(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = p.row(i);
      for (std::size_t m = 0; m < stumps_.size(); ++m) row[argmax(stumps_[m].evaluate(x.row(i)))] += alpha_[m];
      for (auto& r : row) r /= total;
    }
    return p;
  }
  json to_json() const override { return {{"stumps", trees_to_json(stumps_)}, {"alpha", alpha_}}; }
  void from_json(const json& j) override {
    stumps_ = trees_from_json(j.at("stumps"));
    alpha_ = j.at("alpha").get<std::vector<double>>();
  }

 private:
  std::size_t classes() const { return static_cast<std::size_t>(spec_.num_classes); }
  std::vector<Tree> stumps_;
  std::vector<double> alpha_;
};

/// One-vs-rest logistic gradient boosting with Newton leaf values.
class GradientBoosting final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t) override {
    check_training_set(x, y);
    const std::size_t n = x.rows(), k = classes();
    const auto& h = spec_.hyper;
    prior_.assign(k, 0.0);
    trees_.assign(k, {});
    for (std::size_t c = 0; c < k; ++c) {
      double pos = 0.0;
      for (int yi : y) pos += yi == static_cast<int>(c) ? 1.0 : 0.0;
      const double p = std::clamp(pos / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
      prior_[c] = std::log(p / (1.0 - p));
      std::vector<double> f(n, prior_[c]), r(n), hess(n);
      for (int round = 0; round < h.gbdt_rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
          const double pi = 1.0 / (1.0 + std::exp(-f[i]));
          r[i] = (y[i] == static_cast<int>(c) ? 1.0 : 0.0) - pi;
          hess[i] = pi * (1.0 - pi);
        }
        NewtonCriterion crit{r, hess};
        TreeGrower<NewtonCriterion> grower(x, crit, h.gbdt_depth, 0, nullptr);
        Tree t = grower.grow(all_samples(n));
        for (std::size_t i = 0; i < n; ++i) f[i] += h.gbdt_shrinkage * t.evaluate(x.row(i))[0];
        trees_[c].push_back(std::move(t));
      }
    }
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    const std::size_t k = classes();
    Matrix p(x.rows(), k);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = p.row(i);
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        double f = prior_[c];
        for (const auto& t : trees_[c]) f += spec_.hyper.gbdt_shrinkage * t.evaluate(x.row(i))[0];
        row[c] = 1.0 / (1.0 + std::exp(-f));
        total += row[c];
      }
      for (auto& v : row) v /= total;
    }
    return p;
  }
  json to_json() const override {
    json per_class = json::array();
    for (const auto& ts : trees_) per_class.push_back(trees_to_json(ts));
    return {{"prior", prior_}, {"trees", per_class}};
  }
  void from_json(const json& j) override {
    prior_ = j.at("prior").get<std::vector<double>>();
    trees_.clear();
    for (const auto& ts : j.at("trees")) trees_.push_back(trees_from_json(ts));
    if (trees_.size() != prior_.size()) throw Error("corrupt boosting model");
  }

 private:
  std::size_t classes() const { return static_cast<std::size_t>(spec_.num_classes); }
  std::vector<double> prior_;
  std::vector<std::vector<Tree>> trees_;
};

class NearestNeighbors final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t) override {
    check_training_set(x, y);
    x_ = x;
    y_.assign(y.begin(), y.end());
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    check_width(x, x_.cols());
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(spec_.hyper.knn_k), x_.rows());
    Matrix p(x.rows(), static_cast<std::size_t>(spec_.num_classes));
    std::vector<std::pair<double, std::size_t>> dist(x_.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto q = x.row(i);
      for (std::size_t t = 0; t < x_.rows(); ++t) {
        const auto r = x_.row(t);
        double d = 0.0;
        for (std::size_t j = 0; j < q.size(); ++j) d += (q[j] - r[j]) * (q[j] - r[j]);
        dist[t] = {d, t};
      }
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
      for (std::size_t m = 0; m < k; ++m)
        p(i, static_cast<std::size_t>(y_[dist[m].second])) += 1.0 / static_cast<double>(k);
    }
    return p;
  }
  json to_json() const override {
    return {{"rows", x_.rows()}, {"cols", x_.cols()}, {"x", x_.data()}, {"y", y_}};
  }
  void from_json(const json& j) override {
    x_ = Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("x").get<std::vector<double>>());
    y_ = j.at("y").get<std::vector<int>>();
  }

 private:
  Matrix x_;
  std::vector<int> y_;
};

/// Gaussian naive Bayes; variances are smoothed by 1e-9 times the largest feature variance.
class GaussianNaiveBayes final : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t) override {
    check_training_set(x, y);
    const std::size_t n = x.rows(), f = x.cols(), k = static_cast<std::size_t>(spec_.num_classes);
    mean_.assign(k * f, 0.0);
    var_.assign(k * f, 0.0);
    log_prior_.assign(k, 0.0);
    std::vector<double> count(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(y[i]);
      count[c] += 1.0;
      for (std::size_t j = 0; j < f; ++j) mean_[c * f + j] += x(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < f; ++j)
        if (count[c] > 0) mean_[c * f + j] /= count[c];
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(y[i]);
      for (std::size_t j = 0; j < f; ++j) {
        const double d = x(i, j) - mean_[c * f + j];
        var_[c * f + j] += d * d;
      }
    }
    Standardizer overall;
    overall.fit(x);
    double max_var = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - overall.mean[j]) * (x(i, j) - overall.mean[j]);
      max_var = std::max(max_var, v / static_cast<double>(n));
    }
    const double smoothing = 1e-9 * std::max(max_var, 1e-300);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < f; ++j)
        var_[c * f + j] = (count[c] > 0 ? var_[c * f + j] / count[c] : 0.0) + smoothing;
      log_prior_[c] = count[c] > 0 ? std::log(count[c] / static_cast<double>(n))
                                   : -std::numeric_limits<double>::infinity();
    }
    fitted_ = true;
  }
  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    const std::size_t k = log_prior_.size(), f = mean_.size() / k;
    check_width(x, f);
    Matrix p(x.rows(), k);
    std::vector<double> joint(k);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        double s = log_prior_[c];
        for (std::size_t j = 0; j < f; ++j) {
          const double v = var_[c * f + j], d = x(i, j) - mean_[c * f + j];
          s -= 0.5 * (std::log(2.0 * std::numbers::pi * v) + d * d / v);
        }
        joint[c] = s;
      }
      const double top = *std::max_element(joint.begin(), joint.end());
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) total += (p(i, c) = std::exp(joint[c] - top));
      for (std::size_t c = 0; c < k; ++c) p(i, c) /= total;
    }
    return p;
  }
  json to_json() const override {
    // -inf priors (absent classes) are stored as null.
    json priors = json::array();
    for (double v : log_prior_) priors.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    return {{"mean", mean_}, {"var", var_}, {"log_prior", priors}};
  }
  void from_json(const json& j) override {
    mean_ = j.at("mean").get<std::vector<double>>();
    var_ = j.at("var").get<std::vector<double>>();
    log_prior_.clear();
    for (const auto& v : j.at("log_prior"))
      log_prior_.push_back(v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>());
  }

 private:
  std::vector<double> mean_, var_, log_prior_;
};

/// Models trained by minibatch Adam through the autodiff engine on standardized features.
class GradientClassifier : public ClassicalModel {
 public:
  using ClassicalModel::ClassicalModel;

  void fit(const Matrix& x, std::span<const int> y, std::uint64_t seed) override {
    check_training_set(x, y);
    Rng rng(seed);
    standardizer_.fit(x);
    params_ = nn::Parameters();
    build_layers(rng);
    const std::vector<double> z = standardizer_.apply(x);
    const std::size_t n = x.rows(), f = x.cols();
    const auto batch = static_cast<std::size_t>(spec_.hyper.classical_batch);
    ad::Adam opt(params_.tensors(), {learning_rate()});
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < epochs(); ++epoch) {
      rng.shuffle(order);
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(n, start + batch);
        std::vector<double> xb;
        std::vector<int> yb;
        xb.reserve((end - start) * f);
        for (std::size_t i = start; i < end; ++i) {
          const auto row = static_cast<std::size_t>(order[i]);
          xb.insert(xb.end(), z.begin() + static_cast<std::ptrdiff_t>(row * f),
                    z.begin() + static_cast<std::ptrdiff_t>((row + 1) * f));
          yb.push_back(y[row]);
        }
        const ad::Tensor scores = forward(ad::Tensor::from({end - start, f}, std::move(xb)));
        const ad::Tensor l = loss(scores, yb);
        if (!std::isfinite(l.item()))
          throw TrainingError(to_string(spec_.kind) + ": non-finite loss at epoch " + std::to_string(epoch));
        ad::backward(l);
        opt.step();
      }
    }
    fitted_ = true;
  }

  Matrix predict_proba(const Matrix& x) const override {
    if (!fitted_) throw UnsupportedOperation("model has not been fitted");
    check_width(x, standardizer_.mean.size());
    ad::NoGradGuard guard;
    const ad::Tensor p = ad::softmax(forward(ad::Tensor::from({x.rows(), x.cols()}, standardizer_.apply(x))));
    return Matrix(x.rows(), p.dim(1), std::vector<double>(p.values().begin(), p.values().end()));
  }

  json to_json() const override {
    json tensors = json::object();
    for (const auto& [name, t] : params_.entries())
      tensors[name] = std::vector<double>(t.values().begin(), t.values().end());
    return {{"standardizer", standardizer_.to_json()}, {"parameters", tensors}};
  }
  void from_json(const json& j) override {
    standardizer_.from_json(j.at("standardizer"));
    Rng rng(0);
    params_ = nn::Parameters();
    build_layers(rng);
    const auto& tensors = j.at("parameters");
    for (const auto& [name, t] : params_.entries()) {
      const auto values = tensors.at(name).get<std::vector<double>>();
      if (values.size() != t.size()) throw Error("parameter " + name + " has the wrong size");
      auto dst = ad::Tensor(t).mutable_values();
      std::copy(values.begin(), values.end(), dst.begin());
    }
  }

 protected:
  virtual void build_layers(Rng& rng) = 0;
  virtual ad::Tensor forward(const ad::Tensor& x) const = 0;
  virtual ad::Tensor loss(const ad::Tensor& scores, std::span<const int> y) const {
    return ad::neg(ad::mean(ad::pick(ad::log_softmax(scores), y)));
  }
  virtual double learning_rate() const = 0;
  virtual int epochs() const = 0;

  std::size_t inputs() const { return spec_.dims.statistical(); }
  std::size_t classes() const { return static_cast<std::size_t>(spec_.num_classes); }

  Standardizer standardizer_;
  nn::Parameters params_;
};

/// Multinomial logistic regression.
class LogisticRegression final : public GradientClassifier {
 public:
  using GradientClassifier::GradientClassifier;

 protected:
  void build_layers(Rng& rng) override { linear_ = nn::Linear("lr.linear", inputs(), classes(), params_, rng); }
  ad::Tensor forward(const ad::Tensor& x) const override { return linear_(x); }
  double learning_rate() const override { return spec_.hyper.linear_learning_rate; }
  int epochs() const override { return spec_.hyper.linear_epochs; }

 private:
  nn::Linear linear_;
};

/// One-vs-rest linear SVM: per-class hinge loss plus an L2 penalty on the weights.
class LinearSvm final : public GradientClassifier {
 public:
  using GradientClassifier::GradientClassifier;

 protected:
  void build_layers(Rng& rng) override { linear_ = nn::Linear("svm.linear", inputs(), classes(), params_, rng); }
  ad::Tensor forward(const ad::Tensor& x) const override { return linear_(x); }
  ad::Tensor loss(const ad::Tensor& scores, std::span<const int> y) const override {
    const std::size_t b = y.size(), k = classes();
    std::vector<double> sign(b * k, -1.0);
    for (std::size_t i = 0; i < b; ++i) sign[i * k + static_cast<std::size_t>(y[i])] = 1.0;
    const ad::Tensor margins = ad::mul(scores, ad::Tensor::from({b, k}, std::move(sign)));
    const ad::Tensor hinge = ad::scale(ad::sum(ad::relu(ad::add_scalar(ad::neg(margins), 1.0))), 1.0 / double(b));
    return ad::add(hinge, ad::scale(ad::sum(ad::square(linear_.weight)), 0.5 * spec_.hyper.svm_l2));
  }
  double learning_rate() const override { return spec_.hyper.linear_learning_rate; }
  int epochs() const override { return spec_.hyper.linear_epochs; }

 private:
  nn::Linear linear_;
};

class Mlp final : public GradientClassifier {
 public:
  using GradientClassifier::GradientClassifier;

 protected:
  void build_layers(Rng& rng) override {
    layers_.clear();
    std::size_t in = inputs();
    int i = 0;
    for (int width : spec_.hyper.mlp_hidden) {
      layers_.emplace_back("mlp.fc" + std::to_string(++i), in, static_cast<std::size_t>(width), params_, rng);
      in = static_cast<std::size_t>(width);
    }
    layers_.emplace_back("mlp.out", in, classes(), params_, rng);
  }
  ad::Tensor forward(const ad::Tensor& x) const override {
    ad::Tensor h = x;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = ad::relu(layers_[i](h));
    return layers_.back()(h);
  }
  double learning_rate() const override { return spec_.hyper.mlp_learning_rate; }
  int epochs() const override { return spec_.hyper.mlp_epochs; }

 private:
  std::vector<nn::Linear> layers_;
};

}  // namespace

std::unique_ptr<ClassicalModel> make_classical(const ModelSpec& spec) {
  switch (spec.kind) {
    case ModelKind::svm: return std::make_unique<LinearSvm>(spec);
    case ModelKind::knn: return std::make_unique<NearestNeighbors>(spec);
    case ModelKind::gbdt: return std::make_unique<GradientBoosting>(spec);
    case ModelKind::lr: return std::make_unique<LogisticRegression>(spec);
    case ModelKind::dt: return std::make_unique<DecisionTree>(spec);
    case ModelKind::rf: return std::make_unique<RandomForest>(spec);
    case ModelKind::adaboost: return std::make_unique<AdaBoost>(spec);
    case ModelKind::gaussian_nb: return std::make_unique<GaussianNaiveBayes>(spec);
    case ModelKind::mlp: return std::make_unique<Mlp>(spec);
    default: throw ConfigError(to_string(spec.kind) + " is not a classical model");
  }
}

}  // namespace har::zoo
