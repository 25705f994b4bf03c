#include "har/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include <json.hpp>

namespace har {
namespace {

using nlohmann::json;

constexpr double kMaxMalformedFraction = 0.10;
constexpr double kGapFactor = 10.0;

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const std::string s = trim(text);
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

bool parse_double(std::string_view text, double& out) {
  return parse_number(text, out) && std::isfinite(out);
}

void check_malformed(const IngestTally& tally, const std::filesystem::path& path) {
  if (tally.lines > 0 &&
      static_cast<double>(tally.malformed) > kMaxMalformedFraction * static_cast<double>(tally.lines)) {
    throw IngestError(path.string() + ": " + std::to_string(tally.malformed) + " of " +
                      std::to_string(tally.lines) +
                      " records are malformed (more than 10%); wrong file or format?");
  }
}

struct Sample {
  int user = 0;
  int label = 0;
  double timestamp = 0.0;
  std::vector<double> values;
};

// Cuts a flat sample stream into maximal runs of constant (user, label). When
// `split_on_gaps` is set a run also breaks where the timestamp jumps by more than
// kGapFactor times the median within-run sampling interval.
std::vector<RawRecording> build_recordings(const std::vector<Sample>& samples,
                                           const DatasetManifest& manifest, bool split_on_gaps) {
  std::vector<RawRecording> out;
  if (samples.empty()) return out;

  double gap_limit = std::numeric_limits<double>::infinity();
  if (split_on_gaps) {
    std::vector<double> intervals;
    for (std::size_t i = 1; i < samples.size(); ++i) {
      const auto& a = samples[i - 1];
      const auto& b = samples[i];
      const double d = b.timestamp - a.timestamp;
      if (a.user == b.user && a.label == b.label && d > 0) intervals.push_back(d);
    }
    if (!intervals.empty()) {
      auto mid = intervals.begin() + static_cast<std::ptrdiff_t>(intervals.size() / 2);
      std::nth_element(intervals.begin(), mid, intervals.end());
      gap_limit = kGapFactor * *mid;
    }
  }

  const std::size_t channels = manifest.channel_names.size();
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    const std::size_t len = end - start;
    std::vector<double> data;
    data.reserve(len * channels);
    for (std::size_t i = start; i < end; ++i) {
      data.insert(data.end(), samples[i].values.begin(), samples[i].values.end());
    }
    RawRecording rec;
    rec.user_id = samples[start].user;
    rec.activity = {samples[start].label, manifest.class_names[static_cast<std::size_t>(samples[start].label)]};
    rec.channels = Matrix(len, channels, std::move(data));
    rec.channel_names = manifest.channel_names;
    rec.first_timestamp = samples[start].timestamp;
    out.push_back(std::move(rec));
    start = end;
  };
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const auto& a = samples[i - 1];
    const auto& b = samples[i];
    const bool boundary = a.user != b.user || a.label != b.label ||
                          std::abs(b.timestamp - a.timestamp) > gap_limit;
    if (boundary) flush(i);
  }
  flush(samples.size());

  std::stable_sort(out.begin(), out.end(), [](const RawRecording& a, const RawRecording& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.first_timestamp < b.first_timestamp;
  });
  return out;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  return in;
}

std::string format_name(SourceFormat f) { return f == SourceFormat::wisdm ? "wisdm" : "generic_csv"; }

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  try {
    m.name = doc.at("name").get<std::string>();
    m.class_names = doc.at("class_names").get<std::vector<std::string>>();
    m.num_classes = doc.value("num_classes", static_cast<int>(m.class_names.size()));
    m.channel_names = doc.at("channel_names").get<std::vector<std::string>>();
    m.sampling_note = doc.value("sampling_note", "");
    const std::string fmt = doc.value("format", "wisdm");
    if (fmt == "wisdm") {
      m.format = SourceFormat::wisdm;
    } else if (fmt == "generic_csv") {
      m.format = SourceFormat::generic_csv;
    } else {
      throw ConfigError("manifest format must be wisdm or generic_csv, got " + fmt);
    }
    const auto base = path.parent_path();
    for (const auto& f : doc.value("source_files", json::array())) {
      SourceFile sf;
      std::filesystem::path p = f.at("path").get<std::string>();
      sf.path = (p.is_relative() ? base / p : p).lexically_normal().string();
      sf.digest = f.value("digest", "");
      m.source_files.push_back(std::move(sf));
    }
  } catch (const json::exception& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  for (auto& c : m.class_names) c = trim(c);
  m.validate();
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  json doc;
  doc["name"] = name;
  doc["num_classes"] = num_classes;
  doc["class_names"] = class_names;
  doc["channel_names"] = channel_names;
  doc["sampling_note"] = sampling_note;
  doc["format"] = format_name(format);
  json files = json::array();
  for (const auto& f : source_files) {
    files.push_back({{"path", f.path}, {"digest", f.digest}});
  }
  doc["source_files"] = files;
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write manifest " + path.string());
  out << doc.dump(2) << '\n';
}

void DatasetManifest::validate() const {
  if (num_classes != static_cast<int>(class_names.size())) {
    throw ConfigError("manifest " + name + ": num_classes = " + std::to_string(num_classes) +
                      " but " + std::to_string(class_names.size()) + " class names are listed");
  }
  if (num_classes < 2) throw ConfigError("manifest " + name + " needs at least two classes");
  if (channel_names.empty()) throw ConfigError("manifest " + name + " lists no channels");
  std::set<std::string> seen;
  for (const auto& c : class_names) {
    if (!seen.insert(to_lower(c)).second) throw ConfigError("duplicate class name " + c);
  }
}

std::optional<ActivityLabel> DatasetManifest::label_for(std::string_view name) const {
  const std::string key = to_lower(trim(name));
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    if (to_lower(class_names[i]) == key) return ActivityLabel{static_cast<int>(i), class_names[i]};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Loaders

IngestResult load_wisdm(const std::filesystem::path& path, const DatasetManifest& manifest) {
  if (manifest.channel_names.size() != 3) {
    throw ConfigError("WISDM records carry 3 channels; manifest " + manifest.name + " lists " +
                      std::to_string(manifest.channel_names.size()));
  }
  auto in = open_input(path);
  IngestResult result;
  std::vector<Sample> samples;
  std::string line;
  while (std::getline(in, line)) {
    // A physical line may hold several ';'-terminated records.
    for (const auto& chunk : split(line, ';')) {
      if (trim(chunk).empty()) continue;
      ++result.tally.lines;
      auto fields = split(chunk, ',');
      while (fields.size() > 6 && trim(fields.back()).empty()) fields.pop_back();
      Sample s;
      bool ok = fields.size() == 6 && parse_number(fields[0], s.user) &&
                parse_double(fields[2], s.timestamp);
      s.values.resize(3);
      for (std::size_t c = 0; ok && c < 3; ++c) ok = parse_double(fields[3 + c], s.values[c]);
      if (!ok) {
        ++result.tally.malformed;
        continue;
      }
      const auto label = manifest.label_for(fields[1]);
      if (!label) throw IngestError(path.string() + ": unknown activity name '" + trim(fields[1]) + "'");
      s.label = label->class_index;
      samples.push_back(std::move(s));
    }
  }
  if (in.bad()) throw IngestError("read failure on " + path.string());
  check_malformed(result.tally, path);
  result.tally.samples = samples.size();
  result.recordings = build_recordings(samples, manifest, true);
  return result;
}

IngestResult load_generic_csv(const std::filesystem::path& path, const DatasetManifest& manifest) {
  auto in = open_input(path);
  IngestResult result;
  std::string line;
  if (!std::getline(in, line)) return result;

  std::vector<std::string> header;
  for (const auto& h : split(line, ',')) header.push_back(trim(h));
  if (header.size() < 2 || to_lower(header[0]) != "user" || to_lower(header[1]) != "activity") {
    throw IngestError(path.string() + ": header must start with user,activity");
  }
  const std::vector<std::string> columns(header.begin() + 2, header.end());
  std::vector<std::string> missing, unexpected;
  for (const auto& name : manifest.channel_names) {
    if (std::find(columns.begin(), columns.end(), name) == columns.end()) missing.push_back(name);
  }
  for (const auto& name : columns) {
    if (std::find(manifest.channel_names.begin(), manifest.channel_names.end(), name) ==
        manifest.channel_names.end()) {
      unexpected.push_back(name);
    }
  }
  if (!missing.empty() || !unexpected.empty()) {
    std::string msg = path.string() + ": header does not match manifest " + manifest.name;
    if (!missing.empty()) msg += "; missing columns: " + join(missing, ", ");
    if (!unexpected.empty()) msg += "; unexpected columns: " + join(unexpected, ", ");
    throw IngestError(msg);
  }
  // Column position of each manifest channel.
  std::vector<std::size_t> position;
  for (const auto& name : manifest.channel_names) {
    position.push_back(2 + static_cast<std::size_t>(
                               std::find(columns.begin(), columns.end(), name) - columns.begin()));
  }

  std::vector<Sample> samples;
  double row_index = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++result.tally.lines;
    const auto fields = split(line, ',');
    Sample s;
    s.timestamp = row_index++;
    bool ok = fields.size() == header.size() && parse_number(fields[0], s.user);
    s.values.resize(position.size());
    for (std::size_t c = 0; ok && c < position.size(); ++c) ok = parse_double(fields[position[c]], s.values[c]);
    if (!ok) {
      ++result.tally.malformed;
      continue;
    }
    const auto label = manifest.label_for(fields[1]);
    if (!label) throw IngestError(path.string() + ": unknown activity name '" + trim(fields[1]) + "'");
    s.label = label->class_index;
    samples.push_back(std::move(s));
  }
  if (in.bad()) throw IngestError("read failure on " + path.string());
  check_malformed(result.tally, path);
  result.tally.samples = samples.size();
  result.recordings = build_recordings(samples, manifest, false);
  return result;
}

IngestResult load_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  IngestResult all;
  for (const auto& file : manifest.source_files) {
    if (!std::filesystem::exists(file.path)) throw IngestError("source file not found: " + file.path);
    if (!file.digest.empty()) {
      const auto actual = digest_file(file.path);
      if (actual != file.digest) {
        throw IngestError("digest mismatch for " + file.path + ": manifest " + file.digest + ", file " + actual);
      }
    }
    auto part = manifest.format == SourceFormat::wisdm ? load_wisdm(file.path, manifest)
                                                       : load_generic_csv(file.path, manifest);
    all.tally.lines += part.tally.lines;
    all.tally.malformed += part.tally.malformed;
    all.tally.samples += part.tally.samples;
    for (auto& r : part.recordings) all.recordings.push_back(std::move(r));
  }
  if (manifest.source_files.size() > 1) {
    std::stable_sort(all.recordings.begin(), all.recordings.end(),
                     [](const RawRecording& a, const RawRecording& b) { return a.user_id < b.user_id; });
  }
  return all;
}

void write_generic_csv(const std::filesystem::path& path, std::span<const RawRecording> recordings) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write " + path.string());
  if (recordings.empty()) return;
  out << "user,activity";
  for (const auto& c : recordings.front().channel_names) out << ',' << c;
  out << '\n';
  char buf[64];
  for (const auto& rec : recordings) {
    for (std::size_t t = 0; t < rec.channels.rows(); ++t) {
      out << rec.user_id << ',' << rec.activity.class_name;
      for (double v : rec.channels.row(t)) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
        out << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
      }
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

std::vector<SynthClassProfile> SynthSpec::resolved_profiles() const {
  if (!profiles.empty()) {
    if (static_cast<int>(profiles.size()) != classes) {
      throw ConfigError("synthetic spec lists " + std::to_string(profiles.size()) + " profiles for " +
                        std::to_string(classes) + " classes");
    }
    for (const auto& p : profiles)
      if (!p.offset.empty() && static_cast<int>(p.offset.size()) != channels)
        throw ConfigError("synthetic profile offset needs one value per channel");
    return profiles;
  }
  std::vector<SynthClassProfile> out;
  for (int k = 0; k < classes; ++k) {
    const double amplitude = 1.0 + 0.25 * k;
    std::vector<double> offset(static_cast<std::size_t>(channels), 0.0);
    const int round = k / channels;
    offset[static_cast<std::size_t>(k % channels)] = (round % 2 == 0 ? 2.0 : -2.0) * (1.0 + round / 2);
    out.push_back({amplitude, 0.02 + 0.01 * k, 0.02 * amplitude, std::move(offset)});
  }
  return out;
}

std::vector<RawRecording> synth_generate(const SynthSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic corpus needs at least 2 classes");
  if (spec.users < 1 || spec.channels < 1 || spec.length < 1) {
    throw ConfigError("synthetic corpus needs users, channels and length >= 1");
  }
  const auto profiles = spec.resolved_profiles();
  const auto manifest = synth_manifest(spec);
  Rng rng(spec.seed);
  std::vector<RawRecording> out;
  for (int u = 0; u < spec.users; ++u) {
    for (int k = 0; k < spec.classes; ++k) {
      const auto& p = profiles[static_cast<std::size_t>(k)];
      RawRecording rec;
      rec.user_id = u + 1;
      rec.activity = {k, manifest.class_names[static_cast<std::size_t>(k)]};
      rec.channel_names = manifest.channel_names;
      rec.first_timestamp = static_cast<double>(k) * spec.length;
      rec.channels = Matrix(static_cast<std::size_t>(spec.length), static_cast<std::size_t>(spec.channels));
      for (int c = 0; c < spec.channels; ++c) {
        const double amp = p.amplitude * rng.uniform(0.9, 1.1);
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double freq = p.frequency * (1.0 + 0.15 * c);
        for (int t = 0; t < spec.length; ++t) {
          double v = amp * std::sin(2.0 * std::numbers::pi * freq * t + phase);
          if (!p.offset.empty()) v += p.offset.at(static_cast<std::size_t>(c));
          if (p.noise > 0) v += p.noise * rng.normal();
          rec.channels(static_cast<std::size_t>(t), static_cast<std::size_t>(c)) = v;
        }
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

DatasetManifest synth_manifest(const SynthSpec& spec) {
  DatasetManifest m;
  m.name = "synthetic-" + std::to_string(spec.classes) + "c" + std::to_string(spec.channels) + "ch";
  m.num_classes = spec.classes;
  for (int k = 0; k < spec.classes; ++k) m.class_names.push_back("class_" + std::to_string(k));
  static const std::vector<std::string> kImu = {"acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"};
  for (int c = 0; c < spec.channels; ++c) {
    m.channel_names.push_back(c < 6 ? kImu[static_cast<std::size_t>(c)] : "ch" + std::to_string(c));
  }
  m.sampling_note = "synthetic sinusoids, seed " + std::to_string(spec.seed);
  m.format = SourceFormat::generic_csv;
  return m;
}

// ---------------------------------------------------------------------------
// Splits

std::string to_string(SplitStrategy s) {
  return s == SplitStrategy::segment_stratified ? "segment_stratified" : "by_user";
}

SplitStrategy parse_split_strategy(std::string_view s) {
  const auto key = to_lower(s);
  if (key == "segment_stratified" || key == "stratified") return SplitStrategy::segment_stratified;
  if (key == "by_user" || key == "by-user") return SplitStrategy::by_user;
  throw ConfigError("unknown split strategy '" + std::string(s) + "'");
}

SplitAssignment stratified_split(std::span<const Segment> segments, SplitRatios ratios,
                                 std::uint64_t seed, SplitStrategy strategy) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test <= 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be positive and sum to 1");
  }
  SplitAssignment out;
  out.seed = seed;
  out.strategy = strategy;
  Rng rng(seed);

  auto take = [&](std::vector<int>& ids, std::size_t n_train, std::size_t n_val) {
    rng.shuffle(ids);
    out.train.insert(out.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                   ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.insert(out.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  };

  if (strategy == SplitStrategy::segment_stratified) {
    std::map<int, std::vector<int>> by_class;
    std::map<int, std::string> names;
    for (const auto& s : segments) {
      by_class[s.label.class_index].push_back(s.id);
      names[s.label.class_index] = s.label.class_name;
    }
    for (auto& [cls, ids] : by_class) {
      if (ids.size() < 10) {
        throw ConfigError("class '" + names[cls] + "' has only " + std::to_string(ids.size()) +
                          " segments; stratified splitting needs at least 10");
      }
      std::sort(ids.begin(), ids.end());
      const auto n = static_cast<double>(ids.size());
      const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
      const auto n_val = static_cast<std::size_t>(std::llround(ratios.val * n));
      take(ids, n_train, n_val);
    }
  } else {
    std::map<int, std::vector<int>> by_user;
    for (const auto& s : segments) by_user[s.user_id].push_back(s.id);
    if (by_user.size() < 3) {
      throw ConfigError("by-user splitting needs at least 3 users, got " + std::to_string(by_user.size()));
    }
    std::vector<int> users;
    for (const auto& [u, _] : by_user) users.push_back(u);
    const auto n = static_cast<double>(users.size());
    auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
    auto n_val = std::max<std::size_t>(ratios.val > 0 ? 1 : 0, static_cast<std::size_t>(std::llround(ratios.val * n)));
    while (n_train + n_val >= users.size()) {
      if (n_train > 1) {
        --n_train;
      } else {
        --n_val;
      }
    }
    std::vector<int> user_order = users;
    rng.shuffle(user_order);
    auto assign = [&](std::size_t from, std::size_t to, std::vector<int>& dest) {
      for (std::size_t i = from; i < to; ++i) {
        const auto& ids = by_user[user_order[i]];
        dest.insert(dest.end(), ids.begin(), ids.end());
      }
    };
    assign(0, n_train, out.train);
    assign(n_train, n_train + n_val, out.val);
    assign(n_train + n_val, user_order.size(), out.test);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace har
