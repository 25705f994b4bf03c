#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "har/common.hpp"
#include "har/dataset.hpp"

namespace har {

struct FeatureConfig {
  int cwt_scales = 50;  // K; scales are 1..K
  double omega0 = 6.0;  // Morlet centre frequency

  void validate() const;
  std::vector<double> scales() const;
  std::string digest() const;
};

/// Scalogram magnitudes laid out [K][S][C].
struct SpectralTensor {
  std::size_t scales = 0;
  std::size_t steps = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  SpectralTensor() = default;
  SpectralTensor(std::size_t k, std::size_t s, std::size_t c) : scales(k), steps(s), channels(c), values(k * s * c) {}

  double& at(std::size_t k, std::size_t t, std::size_t c) { return values[(k * steps + t) * channels + c]; }
  double at(std::size_t k, std::size_t t, std::size_t c) const { return values[(k * steps + t) * channels + c]; }
  bool empty() const { return values.empty(); }
  bool operator==(const SpectralTensor&) const = default;
};

struct FeatureBundle {
  Matrix temporal;                 // [S x C]
  std::vector<double> statistical; // [4C], (min, max, mean, std) per channel
  SpectralTensor spectral;         // [K x S x C]; empty when not materialized
  int segment_id = 0;

  bool operator==(const FeatureBundle&) const = default;
};

Matrix temporal_features(const Segment& segment);

/// Per channel: min, max, mean and population standard deviation, channel-major.
std::vector<double> statistical_features(const Segment& segment);

/// Magnitude of the Morlet CWT, [K x S]. The kernel is truncated at |u - t| / scale > 4
/// and the signal is zero-padded.
Matrix cwt_morlet(std::span<const double> signal, std::span<const double> scales, double omega0);

SpectralTensor spectral_features(const Segment& segment, const FeatureConfig& config);

FeatureBundle extract_bundle(const Segment& segment, const FeatureConfig& config, bool with_spectral = true);

// Plot-ready dumps: temporal as S rows x C columns, spectral as scale,time,channel,value rows.
void write_temporal_csv(const std::filesystem::path& path, const Matrix& temporal,
                        std::span<const std::string> channel_names);
void write_spectral_csv(const std::filesystem::path& path, const SpectralTensor& spectral,
                        std::span<const std::string> channel_names);
Matrix read_temporal_csv(const std::filesystem::path& path);
SpectralTensor read_spectral_csv(const std::filesystem::path& path, std::span<const std::string> channel_names);

/// Binary bundle cache (versioned header, 64-bit payloads).
void save_bundle(const std::filesystem::path& path, const FeatureBundle& bundle, const std::string& config_digest);
FeatureBundle load_bundle(const std::filesystem::path& path, const std::string& config_digest);

/// Feature access for a preprocessed corpus. Temporal and statistical features are
/// computed eagerly; spectral tensors on first request, memoized up to a byte budget.
/// Safe for concurrent readers.
class FeatureStore {
 public:
  FeatureStore(std::span<const Segment> segments, FeatureConfig config,
               std::size_t spectral_budget_bytes = std::size_t{1} << 31);

  std::size_t size() const { return segments_.size(); }
  const FeatureConfig& config() const { return config_; }
  const Segment& segment(int id) const { return segments_[static_cast<std::size_t>(id)]; }
  int label(int id) const { return segment(id).label.class_index; }
  std::size_t steps() const;
  std::size_t channels() const;

  const Matrix& temporal(int id) const { return segment(id).data; }
  const std::vector<double>& statistical(int id) const { return statistical_[static_cast<std::size_t>(id)]; }
  std::shared_ptr<const SpectralTensor> spectral(int id) const;

  FeatureBundle bundle(int id, bool with_spectral) const;

 private:
  std::span<const Segment> segments_;
  FeatureConfig config_;
  std::vector<double> scales_;
  std::vector<std::vector<double>> statistical_;
  std::size_t budget_;
  mutable std::mutex mutex_;
  mutable std::vector<std::shared_ptr<const SpectralTensor>> memo_;
  mutable std::size_t memo_bytes_ = 0;
};

}  // namespace har
