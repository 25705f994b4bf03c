#include <catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "har/harness.hpp"
#include "support.hpp"

using namespace har;
using Catch::Matchers::ContainsSubstring;

namespace {

// Small run: two neural and two classical models, short schedule.
ExperimentConfig quick_config(const std::filesystem::path& out) {
  ExperimentConfig c = test::synthetic_config(out, 2, 1);
  restrict_models(c, "lstm,cnn1d,knn,dt");
  return c;
}

nlohmann::json without_timing(const std::filesystem::path& report) {
  std::ifstream in(report);
  nlohmann::json j = nlohmann::json::parse(in);
  j.erase("timing");
  return j;
}

ExperimentReport fake_report(const std::string& dataset, const std::string& schedule, double lstm_acc,
                             const std::string& pipeline = "p1") {
  ExperimentReport r;
  r.dataset_name = dataset;
  r.schedule = schedule;
  r.pipeline_digest = pipeline;
  r.pipeline = {{"window", pipeline == "p1" ? 150 : 128}};
  ModelResult m;
  m.kind = "lstm";
  m.status = "ok";
  m.accuracy = lstm_acc;
  r.models.push_back(m);
  return r;
}

}  // namespace

TEST_CASE("confusion matrix on a hand-counted fixture") {
  const std::vector<int> truth = {0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
  const std::vector<int> pred = {0, 0, 1, 2, 1, 1, 1, 0, 2, 2, 1, 2};
  const ConfusionMatrix m = confusion_matrix(pred, truth, 3);
  const ConfusionMatrix want = {{2, 1, 1}, {1, 3, 0}, {0, 1, 3}};
  CHECK(m == want);
  CHECK(confusion_accuracy(m) == 8.0 / 12.0);
  CHECK(confusion_accuracy(m) == accuracy(pred, truth));
}

TEST_CASE("confusion matrix edge cases") {
  const std::vector<int> truth = {0, 1, 2, 2, 1};
  const ConfusionMatrix diag = confusion_matrix(truth, truth, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) CHECK(diag[i][j] == 0);
  CHECK(confusion_accuracy(diag) == 1.0);
  const std::vector<int> zeros(5, 0);
  const ConfusionMatrix col = confusion_matrix(zeros, truth, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(col[i][1] == 0);
    CHECK(col[i][2] == 0);
  }
  CHECK(col[2][0] == 2);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{0, 1}, truth, 3), ShapeError);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{0, 1, 2, 3, 0}, truth, 3), ShapeError);

  const auto dir = test::scratch_dir("confusion");
  const std::vector<std::string> names = {"a", "b", "c"};
  write_confusion_csv(dir / "m.csv", diag, names);
  CHECK(test::read_text(dir / "m.csv").find("a") != std::string::npos);
  CHECK(format_confusion(diag, names).find("true") != std::string::npos);
}

TEST_CASE("experiment config validation") {
  ExperimentConfig c = test::synthetic_config(test::scratch_dir("cfg"), 1, 1);
  CHECK_NOTHROW(c.validate());
  ExperimentConfig none = c;
  none.models.clear();
  CHECK_THROWS_WITH(none.validate(), ContainsSubstring("no models"));
  ExperimentConfig twice = c;
  twice.models.push_back(twice.models.front());
  CHECK_THROWS_AS(twice.validate(), ConfigError);
  ExperimentConfig bad_ref = c;
  bad_ref.reference = "ds9";
  CHECK_THROWS_AS(bad_ref.validate(), ConfigError);
  CHECK_THROWS_WITH(ExperimentConfig::from_json({{"modles", "all"}}), ContainsSubstring("modles"));
  CHECK_THROWS_AS(restrict_models(c, "lstm,nope"), ConfigError);

  ExperimentConfig a = c, b = c;
  b.output_dir = "elsewhere";
  b.jobs = 3;
  CHECK(a.digest() == b.digest());
  b.training.seed = 2;
  CHECK(a.digest() != b.digest());
  CHECK(a.pipeline_digest() == b.pipeline_digest());
  b.preprocess.smoothing_window = 5;
  CHECK(a.pipeline_digest() != b.pipeline_digest());

  restrict_models(c, "knn,lstm");
  REQUIRE(c.models.size() == 2);
  CHECK(model_seed(1, ModelKind::lstm) == model_seed(1, ModelKind::lstm));
  CHECK(model_seed(1, ModelKind::lstm) != model_seed(1, ModelKind::knn));
  CHECK(model_seed(1, ModelKind::lstm) != model_seed(2, ModelKind::lstm));
}

TEST_CASE("config file round trip resolves relative paths") {
  const auto dir = test::scratch_dir("cfg_file");
  test::write_text(dir / "c.json", R"({"dataset": {"manifest": "m.json"}, "models": ["lstm"], "output_dir": "o"})");
  test::write_text(dir / "m.json", "{}");
  const ExperimentConfig c = ExperimentConfig::load(dir / "c.json");
  CHECK(c.dataset.manifest == dir / "m.json");
  CHECK(c.output_dir == dir / "o");
  CHECK(c.preprocess.window_size == 150);
  CHECK(c.training.epochs_ce == 50);
  CHECK_THROWS_AS(ExperimentConfig::load(dir / "missing.json"), ConfigError);
  test::write_text(dir / "bad.json", "{");
  CHECK_THROWS_AS(ExperimentConfig::load(dir / "bad.json"), ConfigError);
}

TEST_CASE("runs are reproducible and reports are complete") {
  const auto a_dir = test::scratch_dir("run_a"), b_dir = test::scratch_dir("run_b");
  const ExperimentReport a = run_experiment(quick_config(a_dir));
  run_experiment(quick_config(b_dir));
  CHECK(without_timing(a_dir / "report.json").dump() == without_timing(b_dir / "report.json").dump());

  REQUIRE(a.models.size() == 4);
  for (const auto& m : a.models) {
    INFO(m.kind << " " << m.error);
    CHECK(m.status == "ok");
    CHECK(confusion_accuracy(m.confusion) == m.accuracy);
    CHECK(std::filesystem::exists(a_dir / m.confusion_path));
    CHECK(std::filesystem::exists(a_dir / m.checkpoint_path));
  }
  CHECK(std::filesystem::exists(a_dir / "confusion_best.txt"));
  CHECK(std::filesystem::exists(a_dir / "table.csv"));
  CHECK(a.failures() == 0);

  // every registered decision appears verbatim in the report
  const auto j = without_timing(a_dir / "report.json");
  const auto& block = j.at("provenance").at("design_decisions");
  std::set<std::string> modules;
  REQUIRE(block.size() == design_decisions().size());
  for (std::size_t i = 0; i < block.size(); ++i) {
    CHECK(block[i].at("id") == design_decisions()[i].id);
    CHECK(block[i].at("text") == design_decisions()[i].text);
    modules.insert(design_decisions()[i].module);
  }
  CHECK(modules == std::set<std::string>{"dataset", "preprocess", "features", "tensor-autodiff", "models", "training",
                                         "harness"});

  const ExperimentReport back = ExperimentReport::load(a_dir / "report.json");
  CHECK(back.to_json() == a.to_json());

  // evaluation from checkpoints reproduces the accuracies
  RunOptions eval_only;
  eval_only.train = false;
  const ExperimentReport again = run_experiment(quick_config(a_dir), eval_only);
  for (std::size_t i = 0; i < again.models.size(); ++i) CHECK(again.models[i].accuracy == a.models[i].accuracy);
}

TEST_CASE("a failing model does not stop the others") {
  ExperimentConfig c = quick_config(test::scratch_dir("isolated"));
  RunOptions eval_only;
  eval_only.train = false;  // no checkpoints exist yet
  const ExperimentReport r = run_experiment(c, eval_only);
  CHECK(r.failures() == r.models.size());
  for (const auto& m : r.models) CHECK_THAT(m.error, ContainsSubstring("checkpoint"));
}

TEST_CASE("tables merge reports and print reference deltas") {
  const std::vector<ExperimentReport> one = {fake_report("ds", "ce_only", 0.9)};
  const Table t = emit_table(one);
  CHECK(t.columns == std::vector<std::string>{"model", "ds/ce_only"});
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "lstm");

  std::vector<ExperimentReport> seeds = {fake_report("ds", "ce_only", 0.9), fake_report("ds", "ce_only", 0.8)};
  const Table avg = emit_table(seeds);
  CHECK(avg.columns.size() == 3);
  CHECK(avg.rows[0][1].find("0.85") == 0);

  std::vector<ExperimentReport> with_ref = {fake_report("ds", "ce_only", 0.954)};
  with_ref[0].reference = "ds1";
  with_ref[0].models[0].kind = "bilstm";
  const Table r = emit_table(with_ref);
  REQUIRE(r.columns.size() == 4);
  CHECK(r.rows[0][2].find("0.954") == 0);
  CHECK(r.rows[0][3].find("+0.000") == 0);

  const std::vector<ExperimentReport> mixed = {fake_report("ds", "ce_only", 0.9),
                                               fake_report("ds", "supcon_then_ce", 0.9, "p2")};
  CHECK_THROWS_WITH(emit_table(mixed), ContainsSubstring("window"));
  const std::vector<ExperimentReport> two_datasets = {fake_report("ds", "ce_only", 0.9),
                                                      fake_report("other", "ce_only", 0.9, "p2")};
  CHECK(emit_table(two_datasets).columns.size() == 3);
  CHECK_THROWS_AS(emit_table(std::span<const ExperimentReport>{}), ConfigError);
  CHECK(t.csv().rfind("model,ds/ce_only\n", 0) == 0);
}

TEST_CASE("reference accuracies") {
  CHECK(*reference_accuracy("ds1", Schedule::ce_only, ModelKind::bilstm) == 0.954);
  CHECK(*reference_accuracy("ds1", Schedule::ce_only, ModelKind::mrnet) == 0.970);
  CHECK(*reference_accuracy("ds2", Schedule::ce_only, ModelKind::lstm) == 0.873);
  CHECK(*reference_accuracy("ds1", Schedule::supcon_then_ce, ModelKind::lstm) == 0.923);
  CHECK(*reference_accuracy("ds2", Schedule::supcon_then_ce, ModelKind::transformer) == 0.813);
  CHECK_FALSE(reference_accuracy("ds1", Schedule::supcon_then_ce, ModelKind::knn));
  CHECK_FALSE(reference_accuracy("ds1", Schedule::triplet_then_ce, ModelKind::lstm));
  CHECK_FALSE(reference_accuracy("", Schedule::ce_only, ModelKind::lstm));
}

TEST_CASE("feature dumps by class and by segment id") {
  const ExperimentConfig c = test::synthetic_config(test::scratch_dir("dump_cfg"), 1, 1);
  const PreparedData data = prepare_data(c);
  const auto dir = test::scratch_dir("dump");

  const auto by_id = dump_features(data, {std::nullopt, 5, 1}, dir);
  REQUIRE(by_id.size() == 2);
  CHECK(by_id[0].filename() == "temporal_5.csv");
  CHECK(read_temporal_csv(by_id[0]) == data.store->temporal(5));
  CHECK(read_spectral_csv(by_id[1], data.manifest.channel_names) == *data.store->spectral(5));

  const std::string cls = data.manifest.class_names[2];
  const auto by_class = dump_features(data, {cls, std::nullopt, 3}, dir);
  REQUIRE(by_class.size() == 6);
  for (std::size_t i = 0; i < by_class.size(); i += 2) {
    const std::string stem = by_class[i].stem().string();
    const int id = std::stoi(stem.substr(stem.find('_') + 1));
    CHECK(data.store->label(id) == 2);
  }

  CHECK_THROWS_AS(dump_features(data, {std::string("no-such-class"), std::nullopt, 1}, dir), ConfigError);
  CHECK_THROWS_AS(dump_features(data, {std::nullopt, 100000, 1}, dir), ConfigError);
  CHECK_THROWS_AS(dump_features(data, {cls, std::nullopt, 0}, dir), ConfigError);
}
