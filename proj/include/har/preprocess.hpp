#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "har/common.hpp"
#include "har/dataset.hpp"

namespace har {

struct PreprocessConfig {
  int window_size = 150;         // S
  double overlap_fraction = 0.7;
  int smoothing_window = 10;     // M

  /// stride = S - floor(overlap * S)
  int stride() const;
  void validate() const;
  std::string digest() const;
};

struct NormalizationStats {
  std::vector<double> min;
  std::vector<double> max;
  std::string fitted_on = "train";
};

/// Sliding windows at 0, stride, 2*stride, ... Recordings shorter than S yield nothing.
/// Segment ids are assigned consecutively starting at `first_id`.
std::vector<Segment> segment(const RawRecording& recording, const PreprocessConfig& config,
                             int recording_index = 0, int first_id = 0);

/// Centered moving average over [t - floor((M-1)/2), t + ceil((M-1)/2)], truncated at the edges.
Matrix moving_average(const Matrix& data, int window);

/// Global per-channel min/max over the given segments. Throws on a constant channel.
NormalizationStats fit_normalization(std::span<const Segment> train_segments,
                                     std::span<const std::string> channel_names = {});

/// Min-max map into [0, 1]; values outside the fitted range are clamped.
Segment apply_normalization(Segment segment, const NormalizationStats& stats);
Matrix invert_normalization(const Matrix& normalized, const NormalizationStats& stats);

struct SplitOptions {
  SplitStrategy strategy = SplitStrategy::segment_stratified;
  std::uint64_t seed = 1;
  SplitRatios ratios;
};

struct PreprocessResult {
  std::vector<Segment> segments;  // normalized; segments[i].id == i
  NormalizationStats stats;
  SplitAssignment split;
  std::size_t short_recordings = 0;
};

/// Segmentation then smoothing (unnormalized). Ids are consecutive from zero.
std::vector<Segment> segment_and_smooth(std::span<const RawRecording> recordings,
                                        const PreprocessConfig& config,
                                        std::size_t* short_recordings = nullptr);

/// segmentation -> smoothing -> split -> normalization fitted on the training split.
PreprocessResult preprocess_pipeline(std::span<const RawRecording> recordings,
                                     const PreprocessConfig& config, const SplitOptions& split);

std::string corpus_digest(std::span<const RawRecording> recordings);

/// Binary segment cache: versioned header, segment metadata, row-major doubles.
void save_segment_cache(const std::filesystem::path& path, std::span<const Segment> segments,
                        const std::string& corpus_digest, const std::string& config_digest);
/// Returns false when the file is missing or was written for another (corpus, config) key.
bool load_segment_cache(const std::filesystem::path& path, const std::string& corpus_digest,
                        const std::string& config_digest, std::vector<Segment>& out);

}  // namespace har
