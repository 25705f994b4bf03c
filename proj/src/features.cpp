#include "har/features.hpp"

#include <charconv>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"

namespace har {
namespace {
constexpr std::uint32_t kBundleMagic = 0x48424e44;  // "HBND"
constexpr std::uint32_t kBundleVersion = 1;
constexpr double kTruncation = 4.0;

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, static_cast<std::size_t>(ptr - buf));
}

double parse_double_strict(const std::string& s) {
  double v = 0;
  const std::string t = trim(s);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) throw Error("bad number in feature dump: " + s);
  return v;
}
}  // namespace

void FeatureConfig::validate() const {
  if (cwt_scales < 1) throw ConfigError("cwt_scales must be >= 1");
  if (!(omega0 > 0)) throw ConfigError("Morlet omega0 must be > 0");
}

std::vector<double> FeatureConfig::scales() const {
  std::vector<double> s(static_cast<std::size_t>(cwt_scales));
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = static_cast<double>(k + 1);
  return s;
}

std::string FeatureConfig::digest() const {
  Digest d;
  d.update("features/v1/morlet/magnitude");
  d.update(static_cast<std::uint64_t>(cwt_scales));
  d.update(std::span<const double>(&omega0, 1));
  return d.hex();
}

Matrix temporal_features(const Segment& segment) { return segment.data; }

std::vector<double> statistical_features(const Segment& segment) {
  const auto& m = segment.data;
  if (m.rows() < 2) throw ShapeError("statistical features need at least 2 samples");
  std::vector<double> out;
  out.reserve(4 * m.cols());
  const auto n = static_cast<double>(m.rows());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double lo = m(0, c), hi = m(0, c), sum = 0.0;
    for (std::size_t t = 0; t < m.rows(); ++t) {
      lo = std::min(lo, m(t, c));
      hi = std::max(hi, m(t, c));
      sum += m(t, c);
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t t = 0; t < m.rows(); ++t) ss += (m(t, c) - mean) * (m(t, c) - mean);
    // Rounding can push the mean a hair outside [lo, hi] for near-constant channels.
    out.insert(out.end(), {lo, hi, std::clamp(mean, lo, hi), std::sqrt(ss / n)});
  }
  return out;
}

Matrix cwt_morlet(std::span<const double> signal, std::span<const double> scales, double omega0) {
  for (std::size_t k = 0; k < scales.size(); ++k) {
    if (!(scales[k] > 0)) throw ConfigError("CWT scales must be strictly positive, got " + format_double(scales[k]));
    if (k > 0 && !(scales[k] > scales[k - 1])) throw ConfigError("CWT scales must be strictly increasing");
  }
  const auto S = static_cast<std::ptrdiff_t>(signal.size());
  const double norm = std::pow(std::numbers::pi, -0.25);
  Matrix out(scales.size(), signal.size());
  std::vector<std::complex<double>> kernel;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const double s = scales[k];
    // Offsets d = u - t with |d / s| <= 4, capped at the signal length.
    const auto half = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor(kTruncation * s)), S - 1);
    kernel.assign(static_cast<std::size_t>(2 * half + 1), {});
    for (std::ptrdiff_t d = -half; d <= half; ++d) {
      const double x = static_cast<double>(d) / s;
      // conj(psi(x)) / sqrt(s)
      kernel[static_cast<std::size_t>(d + half)] =
          std::polar(norm * std::exp(-0.5 * x * x) / std::sqrt(s), -omega0 * x);
    }
    for (std::ptrdiff_t t = 0; t < S; ++t) {
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, t - half);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(S - 1, t + half);
      double re = 0.0, im = 0.0;
      for (std::ptrdiff_t u = lo; u <= hi; ++u) {
        const auto& w = kernel[static_cast<std::size_t>(u - t + half)];
        re += signal[static_cast<std::size_t>(u)] * w.real();
        im += signal[static_cast<std::size_t>(u)] * w.imag();
      }
      out(k, static_cast<std::size_t>(t)) = std::hypot(re, im);
    }
  }
  return out;
}

SpectralTensor spectral_features(const Segment& segment, const FeatureConfig& config) {
  config.validate();
  const auto scales = config.scales();
  const auto& m = segment.data;
  SpectralTensor out(scales.size(), m.rows(), m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) {
    const auto column = m.column(c);
    const Matrix scalogram = cwt_morlet(column, scales, config.omega0);
    for (std::size_t k = 0; k < scales.size(); ++k) {
      for (std::size_t t = 0; t < m.rows(); ++t) out.at(k, t, c) = scalogram(k, t);
    }
  }
  return out;
}

FeatureBundle extract_bundle(const Segment& segment, const FeatureConfig& config, bool with_spectral) {
  FeatureBundle b;
  b.segment_id = segment.id;
  b.temporal = temporal_features(segment);
  b.statistical = statistical_features(segment);
  if (with_spectral) b.spectral = spectral_features(segment, config);
  return b;
}

void write_temporal_csv(const std::filesystem::path& path, const Matrix& temporal,
                        std::span<const std::string> channel_names) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t c = 0; c < temporal.cols(); ++c) {
    out << (c ? "," : "") << (c < channel_names.size() ? channel_names[c] : "ch" + std::to_string(c));
  }
  out << '\n';
  for (std::size_t t = 0; t < temporal.rows(); ++t) {
    for (std::size_t c = 0; c < temporal.cols(); ++c) out << (c ? "," : "") << format_double(temporal(t, c));
    out << '\n';
  }
}

void write_spectral_csv(const std::filesystem::path& path, const SpectralTensor& spectral,
                        std::span<const std::string> channel_names) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "scale,time,channel,value\n";
  for (std::size_t k = 0; k < spectral.scales; ++k) {
    for (std::size_t t = 0; t < spectral.steps; ++t) {
      for (std::size_t c = 0; c < spectral.channels; ++c) {
        out << (k + 1) << ',' << t << ','
            << (c < channel_names.size() ? channel_names[c] : "ch" + std::to_string(c)) << ','
            << format_double(spectral.at(k, t, c)) << '\n';
      }
    }
  }
}

Matrix read_temporal_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const std::size_t cols = split(line, ',').size();
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != cols) throw Error("ragged temporal dump " + path.string());
    for (const auto& f : fields) values.push_back(parse_double_strict(f));
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

SpectralTensor read_spectral_csv(const std::filesystem::path& path, std::span<const std::string> channel_names) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  struct Row {
    std::size_t k, t, c;
    double v;
  };
  std::vector<Row> rows;
  std::size_t K = 0, S = 0, C = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 4) throw Error("bad spectral dump row in " + path.string());
    Row r{};
    r.k = static_cast<std::size_t>(std::stoul(f[0])) - 1;
    r.t = static_cast<std::size_t>(std::stoul(f[1]));
    r.c = channel_names.size();
    for (std::size_t c = 0; c < channel_names.size(); ++c) {
      if (channel_names[c] == f[2]) r.c = c;
    }
    if (r.c == channel_names.size()) throw Error("unknown channel " + f[2] + " in spectral dump");
    r.v = parse_double_strict(f[3]);
    K = std::max(K, r.k + 1);
    S = std::max(S, r.t + 1);
    C = std::max(C, r.c + 1);
    rows.push_back(r);
  }
  SpectralTensor out(K, S, C);
  for (const auto& r : rows) out.at(r.k, r.t, r.c) = r.v;
  return out;
}

void save_bundle(const std::filesystem::path& path, const FeatureBundle& bundle, const std::string& config_digest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write bundle cache " + path.string());
  io::write_pod(out, kBundleMagic);
  io::write_pod(out, kBundleVersion);
  io::write_string(out, config_digest);
  io::write_pod<std::int64_t>(out, bundle.segment_id);
  io::write_pod<std::uint64_t>(out, bundle.temporal.rows());
  io::write_pod<std::uint64_t>(out, bundle.temporal.cols());
  io::write_array<double>(out, bundle.temporal.data());
  io::write_array<double>(out, bundle.statistical);
  io::write_pod<std::uint64_t>(out, bundle.spectral.scales);
  io::write_pod<std::uint64_t>(out, bundle.spectral.steps);
  io::write_pod<std::uint64_t>(out, bundle.spectral.channels);
  io::write_array<double>(out, bundle.spectral.values);
  if (!out) throw Error("failed writing bundle cache " + path.string());
}

FeatureBundle load_bundle(const std::filesystem::path& path, const std::string& config_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read bundle cache " + path.string());
  if (io::read_pod<std::uint32_t>(in) != kBundleMagic) throw Error("not a bundle cache: " + path.string());
  if (io::read_pod<std::uint32_t>(in) != kBundleVersion) throw Error("unsupported bundle cache version");
  const auto key = io::read_string(in);
  if (key != config_digest) throw Error("bundle cache " + path.string() + " was written for config " + key);
  FeatureBundle b;
  b.segment_id = static_cast<int>(io::read_pod<std::int64_t>(in));
  const auto rows = io::read_pod<std::uint64_t>(in);
  const auto cols = io::read_pod<std::uint64_t>(in);
  b.temporal = Matrix(rows, cols, io::read_array<double>(in));
  b.statistical = io::read_array<double>(in);
  b.spectral.scales = io::read_pod<std::uint64_t>(in);
  b.spectral.steps = io::read_pod<std::uint64_t>(in);
  b.spectral.channels = io::read_pod<std::uint64_t>(in);
  b.spectral.values = io::read_array<double>(in);
  return b;
}

FeatureStore::FeatureStore(std::span<const Segment> segments, FeatureConfig config, std::size_t spectral_budget_bytes)
    : segments_(segments), config_(config), scales_(config.scales()), budget_(spectral_budget_bytes) {
  config_.validate();
  statistical_.reserve(segments_.size());
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].id != static_cast<int>(i)) throw Error("FeatureStore expects segment ids 0..N-1 in order");
    statistical_.push_back(statistical_features(segments_[i]));
  }
  memo_.resize(segments_.size());
}

std::size_t FeatureStore::steps() const { return segments_.empty() ? 0 : segments_.front().data.rows(); }
std::size_t FeatureStore::channels() const { return segments_.empty() ? 0 : segments_.front().data.cols(); }

std::shared_ptr<const SpectralTensor> FeatureStore::spectral(int id) const {
  const auto idx = static_cast<std::size_t>(id);
  {
    std::lock_guard lock(mutex_);
    if (memo_[idx]) return memo_[idx];
  }
  auto computed = std::make_shared<const SpectralTensor>(spectral_features(segments_[idx], config_));
  std::lock_guard lock(mutex_);
  if (memo_[idx]) return memo_[idx];
  const std::size_t bytes = computed->values.size() * sizeof(double);
  if (memo_bytes_ + bytes <= budget_) {
    memo_[idx] = computed;
    memo_bytes_ += bytes;
  }
  return computed;
}

FeatureBundle FeatureStore::bundle(int id, bool with_spectral) const {
  FeatureBundle b;
  b.segment_id = id;
  b.temporal = temporal(id);
  b.statistical = statistical(id);
  if (with_spectral) b.spectral = *spectral(id);
  return b;
}

}  // namespace har
