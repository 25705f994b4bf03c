#include "har/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"

namespace har {
namespace {
constexpr std::uint32_t kSegmentCacheMagic = 0x48534547;  // "HSEG"
constexpr std::uint32_t kSegmentCacheVersion = 1;
}  // namespace

int PreprocessConfig::stride() const {
  return window_size - static_cast<int>(std::floor(overlap_fraction * window_size));
}

void PreprocessConfig::validate() const {
  if (smoothing_window < 1) throw ConfigError("smoothing window M must be >= 1");
  if (window_size < smoothing_window) throw ConfigError("window size S must be >= smoothing window M");
  if (overlap_fraction < 0.0 || overlap_fraction >= 1.0) throw ConfigError("overlap fraction must be in [0, 1)");
  if (stride() < 1) throw ConfigError("window stride must be >= 1");
}

std::string PreprocessConfig::digest() const {
  Digest d;
  d.update("preprocess/v1");
  d.update(static_cast<std::uint64_t>(window_size));
  d.update(std::span<const double>(&overlap_fraction, 1));
  d.update(static_cast<std::uint64_t>(smoothing_window));
  return d.hex();
}

std::vector<Segment> segment(const RawRecording& recording, const PreprocessConfig& config,
                             int recording_index, int first_id) {
  config.validate();
  std::vector<Segment> out;
  const auto S = static_cast<std::size_t>(config.window_size);
  const auto stride = static_cast<std::size_t>(config.stride());
  const std::size_t L = recording.channels.rows();
  const std::size_t C = recording.channels.cols();
  if (L < S) return out;
  const std::size_t count = (L - S) / stride + 1;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t start = k * stride;
    Segment seg;
    seg.id = first_id + static_cast<int>(k);
    seg.label = recording.activity;
    seg.user_id = recording.user_id;
    seg.source_recording = recording_index;
    seg.start_index = static_cast<int>(start);
    const auto& src = recording.channels.data();
    seg.data = Matrix(S, C, std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(start * C),
                                                src.begin() + static_cast<std::ptrdiff_t>((start + S) * C)));
    out.push_back(std::move(seg));
  }
  return out;
}

Matrix moving_average(const Matrix& data, int window) {
  if (window < 1) throw ConfigError("moving average window must be >= 1");
  const auto rows = static_cast<std::ptrdiff_t>(data.rows());
  const std::ptrdiff_t before = (window - 1) / 2;
  const std::ptrdiff_t after = window - 1 - before;
  Matrix out(data.rows(), data.cols());
  for (std::size_t c = 0; c < data.cols(); ++c) {
    for (std::ptrdiff_t t = 0; t < rows; ++t) {
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, t - before);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(rows - 1, t + after);
      double sum = 0.0;
      for (std::ptrdiff_t u = lo; u <= hi; ++u) sum += data(static_cast<std::size_t>(u), c);
      out(static_cast<std::size_t>(t), c) = sum / static_cast<double>(hi - lo + 1);
    }
  }
  return out;
}

NormalizationStats fit_normalization(std::span<const Segment> train_segments,
                                     std::span<const std::string> channel_names) {
  if (train_segments.empty()) throw ConfigError("cannot fit normalization on an empty training set");
  const std::size_t C = train_segments.front().data.cols();
  NormalizationStats stats;
  stats.min.assign(C, std::numeric_limits<double>::infinity());
  stats.max.assign(C, -std::numeric_limits<double>::infinity());
  for (const auto& seg : train_segments) {
    if (seg.data.cols() != C) throw ShapeError("segments disagree on channel count");
    for (std::size_t t = 0; t < seg.data.rows(); ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        stats.min[c] = std::min(stats.min[c], seg.data(t, c));
        stats.max[c] = std::max(stats.max[c], seg.data(t, c));
      }
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (!(stats.min[c] < stats.max[c])) {
      const std::string name = c < channel_names.size() ? channel_names[c] : "channel " + std::to_string(c);
      throw ConfigError("degenerate channel " + name + ": constant value " + std::to_string(stats.min[c]) +
                        " across the training split");
    }
  }
  return stats;
}

Segment apply_normalization(Segment segment, const NormalizationStats& stats) {
  auto& m = segment.data;
  if (m.cols() != stats.min.size()) throw ShapeError("normalization stats do not match segment channels");
  for (std::size_t t = 0; t < m.rows(); ++t) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double v = (m(t, c) - stats.min[c]) / (stats.max[c] - stats.min[c]);
      m(t, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return segment;
}

Matrix invert_normalization(const Matrix& normalized, const NormalizationStats& stats) {
  Matrix out = normalized;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out(t, c) = stats.min[c] + out(t, c) * (stats.max[c] - stats.min[c]);
    }
  }
  return out;
}

std::vector<Segment> segment_and_smooth(std::span<const RawRecording> recordings,
                                        const PreprocessConfig& config, std::size_t* short_recordings) {
  config.validate();
  std::vector<Segment> out;
  std::size_t too_short = 0;
  for (std::size_t r = 0; r < recordings.size(); ++r) {
    auto windows = segment(recordings[r], config, static_cast<int>(r), static_cast<int>(out.size()));
    if (windows.empty()) ++too_short;
    for (auto& w : windows) {
      w.data = moving_average(w.data, config.smoothing_window);
      out.push_back(std::move(w));
    }
  }
  if (short_recordings) *short_recordings = too_short;
  return out;
}

PreprocessResult preprocess_pipeline(std::span<const RawRecording> recordings,
                                     const PreprocessConfig& config, const SplitOptions& split) {
  PreprocessResult result;
  result.segments = segment_and_smooth(recordings, config, &result.short_recordings);
  if (result.segments.empty()) return result;

  result.split = stratified_split(result.segments, split.ratios, split.seed, split.strategy);
  std::vector<Segment> train;
  train.reserve(result.split.train.size());
  for (int id : result.split.train) train.push_back(result.segments[static_cast<std::size_t>(id)]);
  result.stats = fit_normalization(train, recordings.front().channel_names);
  for (auto& seg : result.segments) seg = apply_normalization(std::move(seg), result.stats);
  return result;
}

std::string corpus_digest(std::span<const RawRecording> recordings) {
  Digest d;
  d.update("corpus/v1");
  for (const auto& r : recordings) {
    d.update(static_cast<std::uint64_t>(r.user_id));
    d.update(static_cast<std::uint64_t>(r.activity.class_index));
    d.update(r.activity.class_name);
    d.update(static_cast<std::uint64_t>(r.channels.rows()));
    d.update(static_cast<std::uint64_t>(r.channels.cols()));
    d.update(std::span<const double>(r.channels.data()));
  }
  return d.hex();
}

void save_segment_cache(const std::filesystem::path& path, std::span<const Segment> segments,
                        const std::string& corpus_digest, const std::string& config_digest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write segment cache " + path.string());
  io::write_pod(out, kSegmentCacheMagic);
  io::write_pod(out, kSegmentCacheVersion);
  io::write_string(out, corpus_digest);
  io::write_string(out, config_digest);
  io::write_pod<std::uint64_t>(out, segments.size());
  for (const auto& s : segments) {
    io::write_pod<std::int64_t>(out, s.id);
    io::write_pod<std::int64_t>(out, s.label.class_index);
    io::write_string(out, s.label.class_name);
    io::write_pod<std::int64_t>(out, s.user_id);
    io::write_pod<std::int64_t>(out, s.source_recording);
    io::write_pod<std::int64_t>(out, s.start_index);
    io::write_pod<std::uint64_t>(out, s.data.rows());
    io::write_pod<std::uint64_t>(out, s.data.cols());
    io::write_array<double>(out, s.data.data());
  }
  if (!out) throw Error("failed writing segment cache " + path.string());
}

bool load_segment_cache(const std::filesystem::path& path, const std::string& corpus_digest,
                        const std::string& config_digest, std::vector<Segment>& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  if (io::read_pod<std::uint32_t>(in) != kSegmentCacheMagic) throw Error("not a segment cache: " + path.string());
  const auto version = io::read_pod<std::uint32_t>(in);
  if (version != kSegmentCacheVersion) throw Error("unsupported segment cache version " + std::to_string(version));
  if (io::read_string(in) != corpus_digest) return false;
  if (io::read_string(in) != config_digest) return false;
  const auto n = io::read_pod<std::uint64_t>(in);
  std::vector<Segment> segments;
  segments.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Segment s;
    s.id = static_cast<int>(io::read_pod<std::int64_t>(in));
    s.label.class_index = static_cast<int>(io::read_pod<std::int64_t>(in));
    s.label.class_name = io::read_string(in);
    s.user_id = static_cast<int>(io::read_pod<std::int64_t>(in));
    s.source_recording = static_cast<int>(io::read_pod<std::int64_t>(in));
    s.start_index = static_cast<int>(io::read_pod<std::int64_t>(in));
    const auto rows = io::read_pod<std::uint64_t>(in);
    const auto cols = io::read_pod<std::uint64_t>(in);
    s.data = Matrix(rows, cols, io::read_array<double>(in));
    segments.push_back(std::move(s));
  }
  out = std::move(segments);
  return true;
}

}  // namespace har
