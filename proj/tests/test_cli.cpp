#include <cstdlib>

#include "doctest.h"
#include "support.hpp"

namespace fs = std::filesystem;
using rssl::testing::scratch_dir;
using rssl::testing::slurp;

namespace {

struct Result {
  int code = 0;
  std::string output;
};

Result cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

// Tiny synthetic problem: 60 images of 16 px, a few dozen steps per generation.
fs::path tiny_config(const fs::path& dir) {
  std::ofstream(dir / "tiny.json") << R"({
  "dataset": {"name": "synthetic", "labeled_fraction": 0.3, "test_fraction": 0.3, "input_size": 16,
              "synthetic": {"total_images": 60, "image_size": 16}},
  "imbalance": {"gamma": 0.5},
  "train": {"epochs": 1, "iterations_per_epoch": 12, "batch_size": 4, "unlabeled_ratio": 2},
  "model": {"arch": "small"},
  "rebalance": {"generations": 3},
  "seed": 3
})";
  return dir / "tiny.json";
}

}  // namespace

TEST_CASE("prepare is deterministic") {
  const auto dir = scratch_dir("cli_prepare");
  const auto cfg = tiny_config(dir);
  const Result a = cli("prepare --config " + cfg.string() + " --output " + (dir / "a").string(), dir / "a.log");
  const Result b = cli("prepare --config " + cfg.string() + " --output " + (dir / "b").string() + " --root " +
                           (dir / "a" / "dataset").string(),
                       dir / "b.log");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a" / "split_manifest.tsv") == slurp(dir / "b" / "split_manifest.tsv"));
  CHECK(slurp(dir / "a" / "classes.txt") == "class_00\nclass_01\nclass_02\n");
  CHECK(a.output.find("resolved config") != std::string::npos);
  CHECK(a.output.find("total") != std::string::npos);
}

TEST_CASE("configuration errors exit nonzero") {
  const auto dir = scratch_dir("cli_errors");
  CHECK(cli("prepare --dataset custom --root /nonexistent/rssl --labeled-fraction 0.1 --output " + dir.string(),
            dir / "root.log").code != 0);
  const Result missing = cli("prepare --dataset synthetic --output " + (dir / "x").string(), dir / "lf.log");
  CHECK(missing.code == 2);
  CHECK(missing.output.find("labeled_fraction") != std::string::npos);
  CHECK(cli("run --labeled-fraction 0.1 --arch vgg --output " + dir.string(), dir / "arch.log").code != 0);
  CHECK(cli("frobnicate", dir / "sub.log").code != 0);
}

TEST_CASE("report errors") {
  const auto dir = scratch_dir("cli_report");
  CHECK(cli("report " + dir.string(), dir / ".." / "cli_report_empty.log").code != 0);
  fs::create_directories(dir / "gen_0");
  fs::create_directories(dir / "gen_1");
  const Result r = cli("report " + dir.string(), dir / ".." / "cli_report_missing.log");
  CHECK(r.code != 0);
  CHECK(r.output.find("generation 0") != std::string::npos);
}

TEST_CASE("run, report and resume") {
  const auto dir = scratch_dir("cli_run");
  const auto cfg = tiny_config(dir);
  const fs::path run = dir / "run";
  const Result r = cli("run --config " + cfg.string() + " --output " + run.string(), dir / "run.log");
  INFO(r.output);
  REQUIRE(r.code == 0);
  for (int g = 0; g < 3; ++g)
    for (const char* f : {"labeled_manifest.tsv", "unlabeled_manifest.tsv", "checkpoint", "promotions.tsv",
                          "metrics.json", "metrics.tsv", "state.json", "trace.csv"}) {
      INFO(g, f);
      CHECK(fs::exists(run / ("gen_" + std::to_string(g)) / f));
    }
  CHECK_FALSE(fs::exists(run / "gen_3"));
  CHECK(fs::exists(run / "config.json"));
  const std::string table = slurp(run / "report" / "results.tsv");
  CHECK(table.find("Proposed Method (2nd Gen)") != std::string::npos);

  // Re-rendering from the persisted metrics is byte-identical.
  const std::string chart = slurp(run / "report" / "pr_gen_1.png");
  REQUIRE(cli("report " + run.string(), dir / "report.log").code == 0);
  CHECK(slurp(run / "report" / "results.tsv") == table);
  CHECK(slurp(run / "report" / "pr_gen_1.png") == chart);

  // Resume after generation 1 in a copy that lost generation 2.
  const fs::path copy = dir / "copy";
  fs::copy(run, copy, fs::copy_options::recursive);
  fs::remove_all(copy / "gen_2");
  fs::remove_all(copy / "report");
  const Result resumed = cli("run --resume " + (copy / "gen_1").string(), dir / "resume.log");
  INFO(resumed.output);
  REQUIRE(resumed.code == 0);
  for (const char* f : {"labeled_manifest.tsv", "unlabeled_manifest.tsv", "checkpoint", "promotions.tsv",
                        "metrics.json", "state.json", "trace.csv"}) {
    INFO(f);
    CHECK(slurp(copy / "gen_2" / f) == slurp(run / "gen_2" / f));
  }
  CHECK(slurp(copy / "report" / "results.tsv") == table);

  // A resume whose frozen config was edited is refused.
  std::string frozen = slurp(copy / "config.json");
  const auto at = frozen.find("\"seed\": 3");
  REQUIRE(at != std::string::npos);
  frozen.replace(at, 9, "\"seed\": 4");
  std::ofstream(copy / "config.json") << frozen;
  CHECK(cli("run --resume " + (copy / "gen_1").string(), dir / "refused.log").code != 0);
}

TEST_CASE("dump-augment writes the views and the op log") {
  const auto dir = scratch_dir("cli_dump");
  const Result r = cli("dump-augment --output " + dir.string() + " --count 3 --seed 5", dir / ".." / "cli_dump.log");
  REQUIRE(r.code == 0);
  for (const char* f : {"original.png", "weak_0.png", "weak_2.png", "strong_0.png", "strong_2.png", "ops.tsv"})
    CHECK(fs::exists(dir / f));
  CHECK_FALSE(fs::exists(dir / "strong_3.png"));
}
