#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "har/models.hpp"
#include "har/training.hpp"
#include "support.hpp"

using namespace har;

namespace {

InputDims small_dims() {
  InputDims d;
  d.steps = 24;
  d.channels = 3;
  d.scales = 6;
  return d;
}

// Gaussian blobs in statistical-feature space, one centre per class.
void blobs(int classes, int per_class, std::size_t width, std::uint64_t seed, Matrix& x, std::vector<int>& y) {
  Rng rng(seed);
  x = Matrix(static_cast<std::size_t>(classes * per_class), width);
  y.clear();
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < per_class; ++i) {
      const std::size_t r = y.size();
      for (std::size_t c = 0; c < width; ++c) x(r, c) = 0.3 * rng.normal() + (c % static_cast<std::size_t>(classes) == static_cast<std::size_t>(k) ? 3.0 : 0.0);
      y.push_back(k);
    }
}

double train_accuracy(const ClassicalModel& m, const Matrix& x, const std::vector<int>& y) {
  return accuracy(m.predict(x), y);
}

}  // namespace

using ad::Tensor;

TEST_CASE("kind names and input contracts") {
  for (ModelKind k : all_model_kinds()) {
    CHECK(parse_model_kind(to_string(k)) == k);
    const ModelSpec spec = ModelSpec::make(k, small_dims());
    CHECK_NOTHROW(spec.validate());
    ModelSpec wrong = spec;
    wrong.input_features = {k == ModelKind::resnet ? Representation::temporal : Representation::spectral};
    CHECK_THROWS_AS(wrong.validate(), ConfigError);
  }
  CHECK(parse_model_kind("LSTMAttention") == ModelKind::lstm_attention);
  CHECK(parse_model_kind("GaussianNB") == ModelKind::gaussian_nb);
  CHECK_THROWS_AS(parse_model_kind("svm_rbf"), ConfigError);
  CHECK(declared_inputs(ModelKind::mrnet).size() == 3);
  CHECK(declared_inputs(ModelKind::mlp) == std::vector<Representation>{Representation::statistical});
  CHECK(declared_inputs(ModelKind::resnet) == std::vector<Representation>{Representation::spectral});
  CHECK(declared_inputs(ModelKind::cnn1d) == std::vector<Representation>{Representation::temporal});
}

TEST_CASE("hyperparameter overrides: known keys apply, unknown keys are rejected") {
  Hyperparameters h;
  h.update({{"knn_k", 3}, {"head_widths", {32, 16}}});
  CHECK(h.knn_k == 3);
  CHECK(h.head_widths == std::vector<int>{32, 16});
  CHECK_THROWS_AS(h.update({{"learning_rate_typo", 1}}), ConfigError);
  CHECK(h.to_json(ModelKind::knn).contains("knn_k"));
  CHECK_FALSE(h.to_json(ModelKind::knn).contains("lstm_hidden"));
}

TEST_CASE("lstm parameter count follows the closed form") {
  const ModelSpec spec = ModelSpec::make(ModelKind::lstm, InputDims{});
  const auto m = build(spec, 1);
  const std::size_t in = 3, hidden = 64;
  const std::size_t head = (hidden * 256 + 256) + (256 * 128 + 128) + (128 * 6 + 6);
  CHECK(m->parameter_count() == 4 * (in + hidden + 1) * hidden + head);
}

TEST_CASE("same seed gives identical initial parameters; classical models have none") {
  for (ModelKind k : all_model_kinds()) {
    const ModelSpec spec = ModelSpec::make(k, small_dims());
    const auto a = build(spec, 42), b = build(spec, 42);
    if (!is_neural(k)) {
      CHECK(a->parameter_count() == 0);
      continue;
    }
    CHECK(as_neural(*a).parameters().snapshot() == as_neural(*b).parameters().snapshot());
    CHECK(as_neural(*a).parameters().snapshot() != as_neural(*build(spec, 43)).parameters().snapshot());
  }
}

TEST_CASE("every architecture passes the finite-difference check at toy width") {
  for (const auto& c : test::model_grad_suite()) {
    INFO(c.name << " worst " << c.report.worst);
    CHECK(c.report.coordinates > 0);
    CHECK(c.report.max_rel_error < 1e-4);
  }
}

TEST_CASE("dt and 1-nn memorize consistent training data") {
  Rng rng(6);
  InputDims d;
  d.channels = 2;
  Matrix x(120, 8);
  std::vector<int> y;
  for (std::size_t r = 0; r < 120; ++r) {
    for (std::size_t c = 0; c < 8; ++c) x(r, c) = rng.uniform();
    y.push_back(static_cast<int>(rng.index(6)));
  }
  {
    auto m = build(ModelSpec::make(ModelKind::dt, d), 1);
    as_classical(*m).fit(x, y, 1);
    CHECK(train_accuracy(as_classical(*m), x, y) == 1.0);
  }
  {
    ModelSpec spec = ModelSpec::make(ModelKind::knn, d);
    spec.hyper.knn_k = 1;
    auto m = build(spec, 1);
    as_classical(*m).fit(x, y, 1);
    CHECK(train_accuracy(as_classical(*m), x, y) == 1.0);
  }
}

TEST_CASE("gaussian naive bayes boundary sits at the analytic midpoint") {
  InputDims d;
  d.channels = 1;
  Rng rng(12);
  Matrix x(4000, 4);
  std::vector<int> y;
  for (std::size_t r = 0; r < 4000; ++r) {
    const int k = r < 2000 ? 0 : 1;
    x(r, 0) = rng.normal() + (k == 0 ? 0.0 : 4.0);
    for (std::size_t c = 1; c < 4; ++c) x(r, c) = rng.normal();
    y.push_back(k);
  }
  auto m = build(ModelSpec::make(ModelKind::gaussian_nb, d, 2), 1);
  as_classical(*m).fit(x, y, 1);
  // equal priors and unit variances: the posteriors cross at x0 = 2
  Matrix probe(4001, 4);
  for (std::size_t i = 0; i <= 4000; ++i) probe(i, 0) = static_cast<double>(i) / 1000.0;
  const auto pred = as_classical(*m).predict(probe);
  std::size_t flip = 0;
  while (flip < pred.size() && pred[flip] == 0) ++flip;
  REQUIRE(flip < pred.size());
  CHECK(std::abs(probe(flip, 0) - 2.0) < 0.1);
}

TEST_CASE("classical models: fit errors, accuracy on blobs, serialization") {
  InputDims d;
  d.channels = 2;  // 8 statistical features
  Matrix x;
  std::vector<int> y;
  blobs(6, 40, 8, 3, x, y);
  Matrix xt;
  std::vector<int> yt;
  blobs(6, 20, 8, 4, xt, yt);
  const auto dir = test::scratch_dir("classical");
  for (ModelKind k : all_model_kinds()) {
    if (is_neural(k)) continue;
    INFO(to_string(k));
    auto m = build(ModelSpec::make(k, d), 5);
    auto& c = as_classical(*m);
    CHECK_THROWS(c.fit(x, std::vector<int>(y.size(), 2), 1));
    CHECK_THROWS(c.fit(Matrix(3, 8), std::vector<int>{0, 1, 2}, 1));
    c.fit(x, y, 1);
    CHECK(accuracy(c.predict(xt), yt) >= 0.95);
    const Matrix p = c.predict_proba(xt);
    for (std::size_t r = 0; r < p.rows(); ++r)
      CHECK(std::accumulate(p.row(r).begin(), p.row(r).end(), 0.0) == Catch::Approx(1.0).margin(1e-12));
    c.save(dir / (to_string(k) + ".json"));
    auto back = build(ModelSpec::make(k, d), 9);
    as_classical(*back).load(dir / (to_string(k) + ".json"));
    CHECK(as_classical(*back).predict_proba(xt) == p);
    CHECK_THROWS_AS(embed(*m, Batch{}, false), UnsupportedOperation);
  }
}

TEST_CASE("neural forward: probabilities, permutation and batch-size invariance") {
  for (ModelKind k : all_model_kinds()) {
    if (!is_neural(k)) continue;
    INFO(to_string(k));
    const ModelSpec spec = ModelSpec::make(k, small_dims());
    const auto m = build(spec, 3);
    const auto& net = as_neural(*m);
    const Batch batch = test::random_batch(spec, 32, 77);
    const auto out = net.forward(batch);
    REQUIRE(out.size() == 32);
    for (const auto& o : out) {
      CHECK(o.probabilities.size() == 6);
      CHECK(std::abs(std::accumulate(o.probabilities.begin(), o.probabilities.end(), 0.0) - 1.0) <= 1e-12);
      CHECK(o.embedding.size() == 128);
    }
    // single-item batches and a reversed batch
    std::vector<int> order(32);
    std::iota(order.begin(), order.end(), 0);
    auto take = [&](const std::vector<int>& idx) {
      Batch b;
      b.size = idx.size();
      auto pick = [&](const std::optional<Tensor>& t) -> std::optional<Tensor> {
        if (!t) return std::nullopt;
        std::vector<Tensor> rows;
        for (int i : idx) rows.push_back(ad::select(*t, 0, static_cast<std::size_t>(i)));
        return ad::stack(rows, 0);
      };
      b.temporal = pick(batch.temporal);
      b.statistical = pick(batch.statistical);
      b.spectral = pick(batch.spectral);
      return b;
    };
    for (int i : {0, 13, 31}) {
      const auto single = net.forward(take({i}));
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(single[0].logits[j] - out[i].logits[j]) <= 1e-10);
    }
    std::reverse(order.begin(), order.end());
    const auto rev = net.forward(take(order));
    for (std::size_t i = 0; i < 32; ++i) CHECK(rev[i].logits == out[31 - i].logits);
  }
}

TEST_CASE("missing representation is named") {
  const ModelSpec spec = ModelSpec::make(ModelKind::mrnet, small_dims());
  const auto m = build(spec, 3);
  Batch b = test::random_batch(spec, 2, 1);
  b.spectral.reset();
  CHECK_THROWS_WITH(as_neural(*m).forward(b), Catch::Matchers::ContainsSubstring("spectral"));
  FeatureBundle bundle;
  bundle.temporal = Matrix(24, 3);
  bundle.statistical = std::vector<double>(12, 0.0);
  CHECK_THROWS_WITH(Batch::from_bundles(std::vector<FeatureBundle>{bundle}, spec.input_features),
                    Catch::Matchers::ContainsSubstring("spectral"));
}

TEST_CASE("mrnet equals the head applied to its concatenated branches") {
  const ModelSpec spec = ModelSpec::make(ModelKind::mrnet, small_dims());
  const auto m = build(spec, 8);
  const auto& net = dynamic_cast<const MrNet&>(*m);
  const Batch batch = test::random_batch(spec, 5, 2);
  ad::NoGradGuard guard;
  const Tensor joined = ad::concat({net.temporal_branch(batch), net.statistical_branch(batch), net.spectral_branch(batch)}, 1);
  const Tensor want = net.head().logits(net.head().embedding(joined));
  const Tensor got = net.logits(batch, false);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);
}

TEST_CASE("embeddings: unit norm when normalized, identical for identical inputs") {
  const ModelSpec spec = ModelSpec::make(ModelKind::cnn1d, small_dims());
  const auto m = build(spec, 4);
  const Batch batch = test::random_batch(spec, 6, 3);
  const Matrix e = embed(*m, batch, true);
  CHECK(e.cols() == 128);
  for (std::size_t r = 0; r < e.rows(); ++r) {
    double n = 0.0;
    for (double v : e.row(r)) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-12);
  }
  CHECK(embed(*m, batch, false) == embed(*m, batch, false));
  const Tensor same = ad::stack({ad::select(*batch.temporal, 0, 1), ad::select(*batch.temporal, 0, 1)}, 0);
  Batch twin;
  twin.size = 2;
  twin.temporal = same;
  const Matrix t = embed(*m, twin, false);
  CHECK(std::vector<double>(t.row(0).begin(), t.row(0).end()) == std::vector<double>(t.row(1).begin(), t.row(1).end()));
}

TEST_CASE("cross-entropy at initialization is close to ln 6 for every neural model") {
  InputDims d;  // full-size defaults
  d.scales = 50;
  for (ModelKind k : all_model_kinds()) {
    if (!is_neural(k)) continue;
    INFO(to_string(k));
    const ModelSpec spec = ModelSpec::make(k, d);
    const auto m = build(spec, 11);
    const Batch batch = test::random_batch(spec, 12, 5);
    const std::vector<int> labels = {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5};
    ad::NoGradGuard guard;
    const double ce = ce_loss(as_neural(*m).logits(batch, false), labels).scalar.item();
    CHECK(std::abs(ce - std::log(6.0)) <= 0.05);
  }
}

TEST_CASE("neural checkpoint round trip") {
  const ModelSpec spec = ModelSpec::make(ModelKind::transformer, small_dims());
  const auto a = build(spec, 1), b = build(spec, 2);
  const auto dir = test::scratch_dir("neural_ckpt");
  as_neural(*a).save(dir / "t.ckpt");
  as_neural(*b).load(dir / "t.ckpt");
  const Batch batch = test::random_batch(spec, 3, 1);
  CHECK(as_neural(*a).forward(batch)[2].logits == as_neural(*b).forward(batch)[2].logits);
  ModelSpec other = spec;
  other.hyper.transformer_ff = 64;
  CHECK_THROWS(as_neural(*build(other, 1)).load(dir / "t.ckpt"));
}
