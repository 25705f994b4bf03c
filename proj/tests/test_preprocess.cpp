#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "har/preprocess.hpp"
#include "support.hpp"

using namespace har;

namespace {

RawRecording ramp_recording(std::size_t length, std::size_t channels = 2) {
  RawRecording r;
  r.user_id = 4;
  r.activity = {2, "c2"};
  r.channels = Matrix(length, channels);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t c = 0; c < channels; ++c) r.channels(t, c) = static_cast<double>(t) * (c + 1);
  return r;
}

Segment with_data(Matrix m) {
  Segment s;
  s.data = std::move(m);
  return s;
}

}  // namespace

TEST_CASE("stride from window and overlap") {
  PreprocessConfig c;
  CHECK(c.stride() == 45);
  c.window_size = 64;
  c.overlap_fraction = 0.5;
  CHECK(c.stride() == 32);
  c.overlap_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.overlap_fraction = 0.5;
  c.smoothing_window = 65;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("segment counts and starts") {
  PreprocessConfig c;  // S 150, overlap 0.7
  const auto segs = segment(ramp_recording(240), c, 3, 10);
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].start_index == 0);
  CHECK(segs[1].start_index == 45);
  CHECK(segs[2].start_index == 90);
  CHECK(segs[2].id == 12);
  for (const auto& s : segs) {
    CHECK(s.data.rows() == 150);
    CHECK(s.label.class_index == 2);
    CHECK(s.user_id == 4);
    CHECK(s.source_recording == 3);
  }
  CHECK(segs[1].data(0, 1) == 90.0);
  CHECK(segment(ramp_recording(149), c).empty());
  const auto one = segment(ramp_recording(150), c);
  REQUIRE(one.size() == 1);
  CHECK(one[0].data == ramp_recording(150).channels);
}

TEST_CASE("segment count formula over a randomized sweep") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    PreprocessConfig c;
    c.window_size = 1 + static_cast<int>(rng.index(40));
    c.smoothing_window = 1;
    c.overlap_fraction = rng.uniform(0.0, 0.95);
    const std::size_t length = rng.index(200);
    const auto segs = segment(ramp_recording(length, 1), c);
    const long L = static_cast<long>(length), S = c.window_size, stride = c.stride();
    const long expected = L >= S ? (L - S) / stride + 1 : 0;
    REQUIRE(static_cast<long>(segs.size()) == expected);
  }
}

TEST_CASE("moving average basics") {
  Matrix k(20, 2, 3.25);
  CHECK(moving_average(k, 7) == k);
  Matrix r(9, 1);
  for (std::size_t t = 0; t < 9; ++t) r(t, 0) = std::sin(static_cast<double>(t));
  CHECK(moving_average(r, 1) == r);
}

TEST_CASE("moving average agrees with the prefix-sum oracle") {
  const std::vector<double> series = {0.5, -1.0, 2.0, 3.5, 0.25, -0.75, 1.5, 4.0, -2.0, 0.0, 1.0, 2.5};
  Matrix m(series.size(), 1, series);
  for (int window : {1, 2, 3, 4, 5, 10, 12}) {
    const Matrix got = moving_average(m, window);
    const auto want = test::moving_average_prefix(series, window);
    for (std::size_t t = 0; t < series.size(); ++t) CHECK(got(t, 0) == Catch::Approx(want[t]).margin(1e-12));
  }
  // interior point, M = 10: rows 1..10 (back 4, ahead 5 around t = 5)
  double direct = 0.0;
  for (std::size_t t = 1; t <= 10; ++t) direct += series[t];
  CHECK(moving_average(m, 10)(5, 0) == Catch::Approx(direct / 10).margin(1e-15));
}

TEST_CASE("smoothing never widens the range and commutes with shifts") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + rng.index(60);
    Matrix x(n, 3);
    for (auto& v : x.data()) v = rng.uniform(-4, 4);
    const int window = 1 + static_cast<int>(rng.index(n));
    const Matrix y = moving_average(x, window);
    const double shift = rng.uniform(-10, 10);
    Matrix xs = x;
    for (auto& v : xs.data()) v += shift;
    const Matrix ys = moving_average(xs, window);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto in = x.column(c), out = y.column(c);
      CHECK(*std::min_element(out.begin(), out.end()) >= *std::min_element(in.begin(), in.end()) - 1e-12);
      CHECK(*std::max_element(out.begin(), out.end()) <= *std::max_element(in.begin(), in.end()) + 1e-12);
    }
    for (std::size_t i = 0; i < y.data().size(); ++i) CHECK(ys.data()[i] == Catch::Approx(y.data()[i] + shift).margin(1e-12));
  }
}

TEST_CASE("normalization fit, apply and invert") {
  Matrix a(3, 1, std::vector<double>{-2.0, 6.0, 1.0});
  const auto stats = fit_normalization(std::vector<Segment>{with_data(a)});
  CHECK(stats.min[0] == -2.0);
  CHECK(stats.max[0] == 6.0);

  const auto two = fit_normalization(std::vector<Segment>{with_data(Matrix(2, 1, std::vector<double>{0.0, 1.0})),
                                                          with_data(Matrix(2, 1, std::vector<double>{-1.0, 2.0}))});
  CHECK(two.min[0] == -1.0);
  CHECK(two.max[0] == 2.0);

  const Segment mapped = apply_normalization(with_data(Matrix(4, 1, std::vector<double>{-2.0, 6.0, 2.0, -5.0})), stats);
  CHECK(mapped.data(0, 0) == 0.0);
  CHECK(mapped.data(1, 0) == 1.0);
  CHECK(mapped.data(2, 0) == 0.5);
  CHECK(mapped.data(3, 0) == 0.0);  // below the training min, clamped

  std::vector<std::string> names = {"acc_z"};
  CHECK_THROWS_WITH(fit_normalization(std::vector<Segment>{with_data(Matrix(3, 1, 7.0))}, names),
                    Catch::Matchers::ContainsSubstring("acc_z"));
  CHECK_THROWS(fit_normalization(std::vector<Segment>{}));
}

TEST_CASE("normalization preserves per-channel argmax and argmin") {
  Rng rng(9);
  std::vector<Segment> segs;
  for (int i = 0; i < 10; ++i) {
    Matrix m(30, 2);
    for (auto& v : m.data()) v = rng.uniform(-3, 3);
    segs.push_back(with_data(m));
  }
  const auto stats = fit_normalization(segs);
  for (const auto& s : segs) {
    const Segment n = apply_normalization(s, stats);
    for (std::size_t c = 0; c < 2; ++c) {
      const auto in = s.data.column(c), out = n.data.column(c);
      CHECK(std::max_element(in.begin(), in.end()) - in.begin() == std::max_element(out.begin(), out.end()) - out.begin());
      CHECK(std::min_element(in.begin(), in.end()) - in.begin() == std::min_element(out.begin(), out.end()) - out.begin());
      for (double v : out) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("normalization stats of a noise-free sinusoid match the smoothed closed form") {
  SynthSpec spec;
  spec.classes = 2;
  spec.users = 3;
  spec.channels = 1;
  spec.length = 200;
  spec.profiles = {{1.0, 0.05, 0.0, {}}, {2.0, 0.05, 0.0, {}}};
  PreprocessConfig pc;
  pc.window_size = 40;
  pc.overlap_fraction = 0.5;
  pc.smoothing_window = 4;
  const auto recs = synth_generate(spec);
  const auto segs = segment_and_smooth(recs, pc);
  const auto stats = fit_normalization(segs);
  // the oracle: smooth every closed-form window with the prefix-sum average and take the extremes
  double lo = 1e9, hi = -1e9;
  for (const auto& r : recs) {
    const auto x = r.channels.column(0);
    for (std::size_t start = 0; start + 40 <= x.size(); start += 20) {
      const std::vector<double> w(x.begin() + static_cast<long>(start), x.begin() + static_cast<long>(start) + 40);
      for (double v : test::moving_average_prefix(w, 4)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  CHECK(stats.min[0] == Catch::Approx(lo).margin(1e-12));
  CHECK(stats.max[0] == Catch::Approx(hi).margin(1e-12));
  // smoothing attenuates: the largest amplitude band is 2 x 1.1
  CHECK(hi <= 2.2);
}

TEST_CASE("pipeline: round trip, determinism, empty corpus") {
  SynthSpec spec;
  spec.profiles = {};
  spec.users = 4;
  std::vector<SynthClassProfile> clean = spec.resolved_profiles();
  for (auto& p : clean) p.noise = 0.0;
  spec.profiles = clean;
  const auto recs = synth_generate(spec);
  PreprocessConfig pc;
  pc.window_size = 64;
  pc.overlap_fraction = 0.5;
  pc.smoothing_window = 4;
  SplitOptions so;
  const auto a = preprocess_pipeline(recs, pc, so);
  const auto b = preprocess_pipeline(recs, pc, so);
  CHECK(a.segments == b.segments);
  CHECK(a.split.train == b.split.train);

  const auto smoothed = segment_and_smooth(recs, pc);
  REQUIRE(smoothed.size() == a.segments.size());
  for (std::size_t i = 0; i < smoothed.size(); ++i) REQUIRE(a.segments[i].id == static_cast<int>(i));
  // training segments are never clamped, so they invert exactly
  for (int id : a.split.train) {
    const auto i = static_cast<std::size_t>(id);
    const Matrix back = invert_normalization(a.segments[i].data, a.stats);
    for (std::size_t j = 0; j < back.data().size(); ++j)
      REQUIRE(std::abs(back.data()[j] - smoothed[i].data.data()[j]) <= 1e-12 * std::max(1.0, std::abs(back.data()[j])));
  }
  for (int id : a.split.train)
    for (double v : a.segments[static_cast<std::size_t>(id)].data.data()) REQUIRE((v >= 0.0 && v <= 1.0));

  const auto empty = preprocess_pipeline(std::vector<RawRecording>{}, pc, so);
  CHECK(empty.segments.empty());
}

TEST_CASE("segment cache round trip and key check") {
  const auto dir = test::scratch_dir("segcache");
  std::vector<Segment> segs = segment(ramp_recording(100), PreprocessConfig{20, 0.5, 3});
  save_segment_cache(dir / "c.bin", segs, "corpus", "cfg");
  std::vector<Segment> back;
  REQUIRE(load_segment_cache(dir / "c.bin", "corpus", "cfg", back));
  CHECK(back == segs);
  CHECK_FALSE(load_segment_cache(dir / "c.bin", "corpus", "other", back));
  CHECK_FALSE(load_segment_cache(dir / "missing.bin", "corpus", "cfg", back));
}
