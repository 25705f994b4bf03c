#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "har/nn.hpp"
#include "har/tensor.hpp"
#include "support.hpp"

using namespace har;
using ad::Tensor;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("relu and softmax values") {
  const Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  CHECK(vals(ad::relu(x)) == std::vector<double>{0.0, 0.0, 2.0});
  const Tensor p = ad::softmax(Tensor::full({6}, 0.4));
  for (double v : p.values()) CHECK(v == Catch::Approx(1.0 / 6).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Rng rng(1);
  std::vector<double> v(5 * 6);
  for (auto& x : v) x = rng.uniform(-30, 30);
  const Tensor p = ad::softmax(Tensor::from({5, 6}, v));
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(p[r * 6 + c] > 0.0);
      s += p[r * 6 + c];
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("conv1d with kernel [1, 0, 0] shifts under same padding") {
  // kernel tap 0 looks one step back: y[t] = x[t - 1], zero at t = 0
  const Tensor x = Tensor::from({1, 5, 1}, {1, 2, 3, 4, 5});
  const Tensor w = Tensor::from({3, 1, 1}, {1, 0, 0});
  const Tensor y = ad::conv1d(x, w);
  // direct-sum oracle
  std::vector<double> want(5, 0.0);
  for (long t = 0; t < 5; ++t)
    for (long j = 0; j < 3; ++j) {
      const long u = t + j - 1;
      if (u >= 0 && u < 5) want[t] += x[static_cast<std::size_t>(u)] * w[static_cast<std::size_t>(j)];
    }
  CHECK(vals(y) == want);
  CHECK(want == std::vector<double>{0, 1, 2, 3, 4});
}

TEST_CASE("conv2d and max_pool shapes") {
  const Tensor img = Tensor::zeros({2, 7, 9, 3});
  CHECK(ad::conv2d(img, Tensor::zeros({3, 3, 3, 4}), 1).shape() == ad::Shape{2, 7, 9, 4});
  CHECK(ad::conv2d(img, Tensor::zeros({3, 3, 3, 4}), 2).shape() == ad::Shape{2, 4, 5, 4});
  CHECK(ad::max_pool1d(Tensor::zeros({2, 9, 3}), 2, 2).shape() == ad::Shape{2, 4, 3});
}

TEST_CASE("shape mismatches report both shapes") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH(ad::matmul(a, b), Catch::Matchers::ContainsSubstring("[2, 3]") &&
                                          Catch::Matchers::ContainsSubstring("[4, 5]"));
  CHECK_THROWS_AS(ad::add(a, Tensor::zeros({3, 3})), ShapeError);
}

TEST_CASE("backward basics") {
  const Tensor x = Tensor::from({4}, {1, 2, 3, 4}, true);
  ad::backward(ad::sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>(4, 1.0));

  const Tensor p = Tensor::scalar(3.0, true), q = Tensor::scalar(-2.0, true);
  const Tensor loss = ad::mul(p, q);
  ad::backward(loss);
  CHECK(p.grad()[0] == -2.0);
  CHECK(q.grad()[0] == 3.0);
  CHECK_THROWS(ad::backward(loss));                    // graph already released
  CHECK_THROWS(ad::backward(ad::add(x, x)));           // not a scalar
}

TEST_CASE("graph is topologically ordered and visits each node once") {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor y = ad::mul(x, x);
  const Tensor z = ad::add(y, y);  // y shared twice
  const Tensor root = ad::sum(z);
  const auto g = ad::build_graph(root);
  CHECK(g.order.size() == 4);
  CHECK(g.order.back() == root.node());
  std::vector<ad::Node*> seen;
  for (auto* n : g.order) {
    CHECK(std::find(seen.begin(), seen.end(), n) == seen.end());
    for (const auto& in : n->inputs) CHECK(std::find(seen.begin(), seen.end(), in.get()) != seen.end());
    seen.push_back(n);
  }
  ad::backward(root);
  CHECK(x.grad()[0] == Catch::Approx(4.0));
  CHECK(x.grad()[1] == Catch::Approx(8.0));
}

TEST_CASE("no-grad guard records nothing") {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  ad::NoGradGuard guard;
  CHECK_FALSE(ad::mul(x, x).requires_grad());
}

TEST_CASE("dropout is identity unless training") {
  Rng rng(1);
  const Tensor x = Tensor::full({100}, 2.0);
  CHECK(vals(ad::dropout(x, 0.5, false, rng)) == vals(x));
  CHECK(vals(ad::dropout(x, 0.0, true, rng)) == vals(x));
  const Tensor d = ad::dropout(x, 0.5, true, rng);
  for (double v : d.values()) CHECK((v == 0.0 || v == 4.0));
}

TEST_CASE("every primitive passes the finite-difference check") {
  for (const auto& c : test::primitive_grad_suite()) {
    INFO(c.name << " worst " << c.report.worst);
    CHECK(c.report.coordinates > 0);
    CHECK(c.report.max_rel_error < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  ad::Adam opt({p});
  for (int i = 0; i < 5; ++i) {
    ad::backward(ad::scale(ad::sum(p), 0.0));
    opt.step();
  }
  CHECK(vals(p) == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam: constant gradient approaches lr * sign(g) steps") {
  Tensor p = Tensor::from({2}, {0.0, 0.0}, true);
  const Tensor g = Tensor::from({2}, {3.0, -0.01});
  ad::Adam opt({p}, {0.01});
  std::vector<double> before;
  for (int i = 0; i < 200; ++i) {
    before = vals(p);
    ad::backward(ad::sum(ad::mul(p, g)));
    opt.step();
  }
  CHECK(before[0] - p[0] == Catch::Approx(0.01).epsilon(1e-5));
  CHECK(before[1] - p[1] == Catch::Approx(-0.01).epsilon(1e-5));
}

TEST_CASE("adam: ten steps on a quadratic match the hand-stepped oracle") {
  // f(x, y) = 3 x^2 + 0.5 y^2 + x y
  auto f = [](const std::vector<double>& v) { return 3 * v[0] * v[0] + 0.5 * v[1] * v[1] + v[0] * v[1]; };
  Tensor p = Tensor::from({2}, {1.5, -2.0}, true);
  ad::Adam opt({p}, {0.1});
  test::AdamOracle oracle;
  oracle.lr = 0.1;
  std::vector<double> x = {1.5, -2.0};
  double previous = f(x);
  const Tensor coef = Tensor::from({2}, {3.0, 0.5});
  for (int i = 0; i < 10; ++i) {
    const Tensor cross = ad::mul(ad::select(p, 0, 0), ad::select(p, 0, 1));
    ad::backward(ad::add(ad::sum(ad::mul(coef, ad::square(p))), cross));
    opt.step();
    oracle.step(x, {6 * x[0] + x[1], x[1] + x[0]});
    CHECK(std::abs(p[0] - x[0]) <= 1e-10);
    CHECK(std::abs(p[1] - x[1]) <= 1e-10);
    const double now = f(vals(p));
    CHECK(now < previous);
    previous = now;
  }
  CHECK(opt.steps() == 10);
  CHECK(opt.first_moments()[0].size() == 2);
}

TEST_CASE("lstm: zero weights keep the state at zero") {
  nn::Parameters params;
  Rng rng(1);
  nn::LstmWeights w("l", 2, 3, params, rng);
  for (auto& [name, t] : params.entries()) {
    Tensor tt = t;
    for (auto& v : tt.mutable_values()) v = 0.0;
  }
  Rng data(2);
  std::vector<double> xs(2 * 5 * 2);
  for (auto& v : xs) v = data.uniform(-1, 1);
  const auto out = nn::lstm_sequence(Tensor::from({2, 5, 2}, xs), w);
  for (double v : out.sequence.values()) CHECK(v == 0.0);
}

TEST_CASE("lstm: one cell step matches the hand computation") {
  nn::Parameters params;
  Rng rng(4);
  nn::LstmWeights w("l", 3, 2, params, rng);
  for (auto& v : Tensor(w.bias).mutable_values()) v = rng.uniform(-0.5, 0.5);
  const std::vector<double> x = {0.3, -0.7, 0.2}, h = {0.1, -0.4}, c = {0.5, 0.25};
  const nn::LstmState next = nn::lstm_cell(Tensor::from({1, 3}, x), {Tensor::from({1, 2}, h), Tensor::from({1, 2}, c)}, w);
  Matrix wx(3, 8, vals(w.input_weight)), wh(2, 8, vals(w.recurrent_weight));
  std::vector<double> h_out, c_out;
  test::lstm_step_direct(x, h, c, wx, wh, vals(w.bias), h_out, c_out);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(next.h[j] == Catch::Approx(h_out[j]).margin(1e-15));
    CHECK(next.c[j] == Catch::Approx(c_out[j]).margin(1e-15));
  }
}

TEST_CASE("bilstm: reversing the input swaps the two halves") {
  nn::Parameters params;
  Rng rng(8);
  nn::BiLstmWeights w("b", 2, 3, params, rng);
  // share weights so the forward half of x equals the backward half of reverse(x)
  std::copy(w.forward.input_weight.values().begin(), w.forward.input_weight.values().end(),
            Tensor(w.backward.input_weight).mutable_values().begin());
  std::copy(w.forward.recurrent_weight.values().begin(), w.forward.recurrent_weight.values().end(),
            Tensor(w.backward.recurrent_weight).mutable_values().begin());
  std::copy(w.forward.bias.values().begin(), w.forward.bias.values().end(),
            Tensor(w.backward.bias).mutable_values().begin());
  Rng data(9);
  const std::size_t S = 6;
  std::vector<double> xs(S * 2), rev(S * 2);
  for (auto& v : xs) v = data.uniform(-1, 1);
  for (std::size_t t = 0; t < S; ++t)
    for (std::size_t c = 0; c < 2; ++c) rev[t * 2 + c] = xs[(S - 1 - t) * 2 + c];
  const auto a = nn::bilstm_sequence(Tensor::from({1, S, 2}, xs), w);
  const auto b = nn::bilstm_sequence(Tensor::from({1, S, 2}, rev), w);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(a.last[j] == Catch::Approx(b.last[3 + j]).margin(1e-15));
    CHECK(a.last[3 + j] == Catch::Approx(b.last[j]).margin(1e-15));
  }
}

TEST_CASE("initialization follows the fan-in rule") {
  nn::Parameters params;
  Rng rng(3);
  nn::Linear lin("fc", 16, 8, params, rng);
  for (double v : lin.weight.values()) CHECK(std::abs(v) <= 0.25);
  for (double v : lin.bias.values()) CHECK(v == 0.0);
  nn::LstmWeights lstm("l", 4, 5, params, rng);
  for (std::size_t j = 0; j < 20; ++j) CHECK(lstm.bias[j] == (j >= 5 && j < 10 ? 1.0 : 0.0));
  CHECK(params.count() == 16 * 8 + 8 + 4 * (4 + 5 + 1) * 5);
}

TEST_CASE("parameter checkpoint round trip and digest guard") {
  nn::Parameters params;
  Rng rng(3);
  nn::Linear lin("fc", 4, 3, params, rng);
  const auto dir = test::scratch_dir("ckpt");
  params.save(dir / "p.ckpt", "cfg");
  const auto before = params.snapshot();
  for (auto& v : Tensor(lin.weight).mutable_values()) v = 0.0;
  params.load(dir / "p.ckpt", "cfg");
  CHECK(params.snapshot() == before);
  CHECK_THROWS(params.load(dir / "p.ckpt", "other"));
}
