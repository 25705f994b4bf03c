#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "har/common.hpp"

namespace har {

struct ActivityLabel {
  int class_index = 0;
  std::string class_name;

  bool operator==(const ActivityLabel&) const = default;
};

/// One user's labeled multi-channel stream; rows are time steps, columns sensor axes.
struct RawRecording {
  int user_id = 0;
  ActivityLabel activity;
  Matrix channels;
  std::vector<std::string> channel_names;
  double first_timestamp = 0.0;

  std::size_t length() const { return channels.rows(); }
  bool operator==(const RawRecording&) const = default;
};

/// Fixed-length window cut from a recording.
struct Segment {
  int id = 0;
  Matrix data;  // [S x C]
  ActivityLabel label;
  int user_id = 0;
  int source_recording = 0;
  int start_index = 0;

  bool operator==(const Segment&) const = default;
};

struct SourceFile {
  std::string path;
  std::string digest;  // empty = not pinned yet
};

enum class SourceFormat { wisdm, generic_csv };

struct DatasetManifest {
  std::string name;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> channel_names;
  std::string sampling_note;
  std::vector<SourceFile> source_files;
  SourceFormat format = SourceFormat::wisdm;

  /// Reads a JSON manifest. Relative source paths resolve against the manifest directory.
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  void validate() const;

  /// Case-insensitive, whitespace-trimmed lookup.
  std::optional<ActivityLabel> label_for(std::string_view name) const;
};

struct IngestTally {
  std::size_t lines = 0;
  std::size_t malformed = 0;
  std::size_t samples = 0;
};

struct IngestResult {
  std::vector<RawRecording> recordings;
  IngestTally tally;
};

IngestResult load_wisdm(const std::filesystem::path& path, const DatasetManifest& manifest);
IngestResult load_generic_csv(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Loads every source file of the manifest, checking pinned digests first.
IngestResult load_dataset(const DatasetManifest& manifest);

void write_generic_csv(const std::filesystem::path& path, std::span<const RawRecording> recordings);

/// Per-class sinusoid profile of the synthetic corpus.
struct SynthClassProfile {
  double amplitude = 1.0;   // band centre; each recording draws from [0.9, 1.1] x amplitude
  double frequency = 0.02;  // cycles per sample
  double noise = 0.0;       // Gaussian noise standard deviation
  std::vector<double> offset;  // per-channel DC level; empty = zero
};

struct SynthSpec {
  int classes = 6;
  int users = 5;
  int channels = 3;
  int length = 320;
  std::uint64_t seed = 7;
  /// Empty selects the default profiles: amplitude 1 + 0.25k, frequency 0.02 + 0.01k and a
  /// DC offset of +-2 on channel k mod C, so every class is extreme in one channel mean.
  std::vector<SynthClassProfile> profiles;

  std::vector<SynthClassProfile> resolved_profiles() const;
};

/// Deterministic labeled sinusoid corpus: one recording per (user, class).
std::vector<RawRecording> synth_generate(const SynthSpec& spec);
DatasetManifest synth_manifest(const SynthSpec& spec);

enum class SplitStrategy { segment_stratified, by_user };

std::string to_string(SplitStrategy s);
SplitStrategy parse_split_strategy(std::string_view s);

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitAssignment {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  std::uint64_t seed = 0;
  SplitStrategy strategy = SplitStrategy::segment_stratified;
};

SplitAssignment stratified_split(std::span<const Segment> segments, SplitRatios ratios,
                                 std::uint64_t seed, SplitStrategy strategy);

}  // namespace har
