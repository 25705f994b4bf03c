#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <sys/wait.h>

#include "har/harness.hpp"
#include "support.hpp"

namespace {

int run(const std::string& args, const std::filesystem::path& log) {
  const char* cli = std::getenv("HAR_CLI");
  REQUIRE(cli != nullptr);
  const std::string cmd = std::string("'") + cli + "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::filesystem::path small_config(const std::filesystem::path& dir) {
  nlohmann::json j = test::synthetic_config(dir / "out", 1, 1).to_json();
  j["models"] = nlohmann::json::array({"knn", "dt"});
  test::write_text(dir / "config.json", j.dump(2));
  return dir / "config.json";
}

}  // namespace

TEST_CASE("cli exit codes") {
  const auto dir = test::scratch_dir("cli");
  const auto log = dir / "log.txt";
  const auto config = small_config(dir);

  CHECK(run("--version", log) == 0);
  CHECK(run("", log) == 1);
  CHECK(run("frobnicate", log) == 1);
  CHECK(run("run --config '" + (dir / "missing.json").string() + "'", log) == 1);
  test::write_text(dir / "bad.json", R"({"models": []})");
  CHECK(run("run --config '" + (dir / "bad.json").string() + "'", log) == 1);
  CHECK(run("run --config '" + config.string() + "' --models nope", log) == 1);

  // evaluating before training: every model lacks a checkpoint
  CHECK(run("evaluate --config '" + config.string() + "'", log) == 2);
  CHECK_THAT(test::read_text(log), Catch::Matchers::ContainsSubstring("failed"));

  CHECK(run("run --config '" + config.string() + "'", log) == 0);
  CHECK(std::filesystem::exists(dir / "out" / "report.json"));
  CHECK(run("evaluate --config '" + config.string() + "'", log) == 0);
  CHECK(run("table '" + (dir / "out" / "report.json").string() + "' --out '" + (dir / "tab").string() + "'", log) == 0);
  CHECK(std::filesystem::exists(dir / "tab" / "table.csv"));
}

TEST_CASE("cli synth, ingest, preprocess and feature dump") {
  const auto dir = test::scratch_dir("cli_data");
  const auto log = dir / "log.txt";
  REQUIRE(run("synth --out '" + (dir / "corpus").string() + "' --users 3 --length 200", log) == 0);
  REQUIRE(std::filesystem::exists(dir / "corpus" / "manifest.json"));
  CHECK(run("ingest --config '" + (dir / "corpus" / "manifest.json").string() + "'", log) == 0);
  CHECK_THAT(test::read_text(log), Catch::Matchers::ContainsSubstring("0 malformed"));

  const auto config = small_config(dir);
  CHECK(run("preprocess --config '" + config.string() + "'", log) == 0);
  CHECK(std::filesystem::exists(dir / "out" / "segments.bin"));
  CHECK(run("features dump --config '" + config.string() + "' --segment 0", log) == 0);
  CHECK(std::filesystem::exists(dir / "out" / "spectral_0.csv"));
  CHECK(run("features dump --config '" + config.string() + "' --segment 99999", log) == 1);
}
