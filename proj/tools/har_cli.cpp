// har: command-line front end for the activity-recognition workbench.
//
// Exit codes: 0 success, 1 configuration or input error, 2 every model failed.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "har/harness.hpp"

namespace {

using namespace har;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kAllFailed = 2;

struct CommonFlags {
  std::string config;
  std::string out;
  std::string models;
  std::string schedule;
  std::string split;
  std::int64_t seed = -1;
  int jobs = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_models) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory (overrides the config)");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--split", f.split, "split strategy: stratified | by-user");
  if (with_models) {
    cmd->add_option("--models", f.models, "comma-separated model kinds, or 'all'");
    cmd->add_option("--schedule", f.schedule, "ce | supcon | triplet");
    cmd->add_option("--jobs", f.jobs, "models trained concurrently");
  }
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = ExperimentConfig::load(f.config);
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.seed >= 0) c.training.seed = static_cast<std::uint64_t>(f.seed);
  if (!f.split.empty()) c.split.strategy = parse_split_strategy(f.split);
  if (!f.schedule.empty()) c.training.schedule = parse_schedule(f.schedule);
  if (f.jobs > 0) c.jobs = f.jobs;
  if (!f.models.empty()) restrict_models(c, f.models);
  c.validate();
  return c;
}

int report_status(const ExperimentReport& report) {
  for (const auto& m : report.models) {
    std::cout << m.kind << ": " << m.status;
    if (m.status == "ok") std::cout << "  accuracy " << m.accuracy;
    if (!m.error.empty()) std::cout << "  (" << m.error << ")";
    std::cout << '\n';
  }
  return report.failures() == report.models.size() ? kAllFailed : kOk;
}

int run_models(const CommonFlags& f, RunOptions options) {
  const ExperimentConfig c = resolve_config(f);
  options.log = &std::cerr;
  const ExperimentReport report = run_experiment(c, options);
  if (options.evaluate) {
    const std::vector<ExperimentReport> one{report};
    std::cout << emit_table(one).text();
  }
  std::cout << "report: " << (c.output_dir / "report.json").string() << '\n';
  return report_status(report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensor-based human activity recognition workbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  // ingest
  std::string manifest_path, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "parse a dataset manifest and report ingestion counts");
  ingest->add_option("--config", manifest_path, "dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "write the parsed recordings as generic CSV here");

  // synth
  std::string synth_out;
  SynthSpec synth_spec;
  auto* synth = app.add_subcommand("synth", "write the synthetic corpus and its manifest");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_spec.seed, "generator seed");
  synth->add_option("--classes", synth_spec.classes, "number of classes");
  synth->add_option("--channels", synth_spec.channels, "number of channels");
  synth->add_option("--users", synth_spec.users, "number of users");
  synth->add_option("--length", synth_spec.length, "samples per recording");

  // preprocess
  CommonFlags pre_flags;
  auto* pre = app.add_subcommand("preprocess", "segment, smooth, split and normalize; write the segment cache");
  add_common(pre, pre_flags, false);

  // features dump
  CommonFlags feat_flags;
  std::string feat_class;
  int feat_segment = -1, feat_count = 1;
  auto* features = app.add_subcommand("features", "feature utilities");
  features->require_subcommand(1);
  auto* dump = features->add_subcommand("dump", "write temporal and spectral CSV dumps for selected segments");
  add_common(dump, feat_flags, false);
  auto* by_class = dump->add_option("--class", feat_class, "first segments of this activity class");
  auto* by_id = dump->add_option("--segment", feat_segment, "segment id");
  by_class->excludes(by_id);
  dump->add_option("--count", feat_count, "segments to dump with --class");

  CommonFlags train_flags, eval_flags, run_flags;
  auto* train_cmd = app.add_subcommand("train", "train the configured models and write checkpoints");
  add_common(train_cmd, train_flags, true);
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate saved checkpoints on the test split");
  add_common(eval_cmd, eval_flags, true);
  auto* run_cmd = app.add_subcommand("run", "full experiment: train and evaluate every model");
  add_common(run_cmd, run_flags, true);

  std::vector<std::string> table_inputs;
  std::string table_out;
  auto* table_cmd = app.add_subcommand("table", "merge reports into a model x (dataset, schedule) table");
  table_cmd->add_option("reports", table_inputs, "report.json files")->required()->check(CLI::ExistingFile);
  table_cmd->add_option("--out", table_out, "directory for table.csv and table.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*ingest) {
      const DatasetManifest manifest = DatasetManifest::load(manifest_path);
      const IngestResult r = load_dataset(manifest);
      std::cout << "dataset " << manifest.name << ": " << r.recordings.size() << " recordings, " << r.tally.samples
                << " samples, " << r.tally.lines << " records, " << r.tally.malformed << " malformed\n";
      if (!ingest_out.empty()) {
        std::filesystem::create_directories(ingest_out);
        write_generic_csv(std::filesystem::path(ingest_out) / "recordings.csv", r.recordings);
      }
      return kOk;
    }
    if (*synth) {
      std::filesystem::create_directories(synth_out);
      const auto recordings = synth_generate(synth_spec);
      write_generic_csv(std::filesystem::path(synth_out) / "synthetic.csv", recordings);
      DatasetManifest manifest = synth_manifest(synth_spec);
      manifest.source_files = {{"synthetic.csv", digest_file(std::filesystem::path(synth_out) / "synthetic.csv")}};
      manifest.save(std::filesystem::path(synth_out) / "manifest.json");
      std::cout << "wrote " << recordings.size() << " recordings to " << synth_out << '\n';
      return kOk;
    }
    if (*pre) {
      const ExperimentConfig c = resolve_config(pre_flags);
      const PreparedData data = prepare_data(c);
      std::filesystem::create_directories(c.output_dir);
      save_segment_cache(c.output_dir / "segments.bin", data.preprocessed.segments, data.corpus_digest,
                         c.preprocess.digest());
      const auto& s = data.preprocessed.split;
      nlohmann::json summary = {
          {"segments", data.preprocessed.segments.size()},
          {"short_recordings", data.preprocessed.short_recordings},
          {"split", {{"strategy", to_string(s.strategy)}, {"seed", s.seed}, {"train", s.train}, {"val", s.val}, {"test", s.test}}},
          {"normalization", {{"min", data.preprocessed.stats.min}, {"max", data.preprocessed.stats.max},
                             {"fitted_on", data.preprocessed.stats.fitted_on}}},
          {"corpus_digest", data.corpus_digest},
          {"preprocess_digest", c.preprocess.digest()}};
      std::ofstream(c.output_dir / "preprocess.json") << summary.dump(2) << '\n';
      std::cout << data.preprocessed.segments.size() << " segments (train " << s.train.size() << ", val "
                << s.val.size() << ", test " << s.test.size() << ")\n";
      return kOk;
    }
    if (*dump) {
      const ExperimentConfig c = resolve_config(feat_flags);
      SegmentSelector sel;
      if (!feat_class.empty()) sel.class_name = feat_class;
      if (feat_segment >= 0) sel.segment_id = feat_segment;
      sel.count = feat_count;
      for (const auto& p : dump_features(c, sel, c.output_dir)) std::cout << p.string() << '\n';
      return kOk;
    }
    if (*train_cmd) return run_models(train_flags, {true, false, nullptr});
    if (*eval_cmd) return run_models(eval_flags, {false, true, nullptr});
    if (*run_cmd) return run_models(run_flags, {true, true, nullptr});
    if (*table_cmd) {
      std::vector<ExperimentReport> reports;
      for (const auto& p : table_inputs) reports.push_back(ExperimentReport::load(p));
      const Table t = emit_table(reports);
      std::cout << t.text();
      if (!table_out.empty()) {
        std::filesystem::create_directories(table_out);
        std::ofstream(std::filesystem::path(table_out) / "table.csv") << t.csv();
        std::ofstream(std::filesystem::path(table_out) / "table.txt") << t.text();
      }
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
