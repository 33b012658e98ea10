// rebalance-ssl: prepare splits, run generations, render reports, inspect augmentation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "rebalance_ssl/augment.hpp"
#include "rebalance_ssl/config.hpp"
#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/pipeline.hpp"
#include "rebalance_ssl/synthetic.hpp"

namespace fs = std::filesystem;
using namespace rssl;

namespace {

// Flags shared by prepare and run; unset optionals leave the config alone.
struct Overrides {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<std::string> dataset;
  std::optional<std::string> root;
  std::optional<double> test_fraction;
  std::optional<double> labeled_fraction;
  std::optional<double> gamma;
  std::optional<std::string> arch;
  std::optional<int> generations;
  std::optional<double> alpha;
  std::optional<int> epochs;
  std::optional<int> iterations;
  std::optional<int> input_size;
  bool keep_in_unlabeled = false;
  std::optional<std::string> harvest;
};

void add_data_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "JSON config file (flags override its values)");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--output", o.output, "run directory");
  cmd->add_option("--dataset", o.dataset, "eurosat | ucm | whu-rs19 | synthetic | custom");
  cmd->add_option("--root", o.root, "dataset root with one folder per class");
  cmd->add_option("--test-fraction", o.test_fraction, "stratified test fraction");
  cmd->add_option("--labeled-fraction", o.labeled_fraction, "labeled fraction of the training pool");
  cmd->add_option("--gamma", o.gamma, "imbalance ratio min/max (1 keeps the split balanced)");
  cmd->add_option("--input-size", o.input_size, "network input side length");
}

void add_train_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--arch", o.arch, "wrn28-2 | small");
  cmd->add_option("--generations", o.generations, "trained generations, including the baseline");
  cmd->add_option("--alpha", o.alpha, "sampling-rate exponent");
  cmd->add_option("--epochs", o.epochs, "epochs per generation");
  cmd->add_option("--iterations-per-epoch", o.iterations, "steps per epoch");
  cmd->add_option("--harvest", o.harvest, "fresh | training-masks");
  cmd->add_flag("--keep-in-unlabeled", o.keep_in_unlabeled, "leave promoted examples in the unlabeled pool");
}

std::string read_file(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig resolve(RunConfig base, const Overrides& o) {
  if (!o.config_file.empty()) base = run_config_from_json(read_file(o.config_file), base);
  if (o.seed) base.seed = *o.seed;
  if (o.output) base.output = *o.output;
  if (o.dataset) base.dataset.name = *o.dataset;
  if (o.root) base.dataset.root = *o.root;
  if (o.test_fraction) base.dataset.test_fraction = *o.test_fraction;
  if (o.labeled_fraction) base.dataset.labeled_fraction = *o.labeled_fraction;
  if (o.gamma) base.imbalance.gamma = *o.gamma;
  if (o.input_size) base.dataset.input_size = *o.input_size;
  if (o.arch) {
    try {
      base.arch = parse_arch(*o.arch);
    } catch (const std::exception&) {
      throw ConfigError("--arch: expected wrn28-2 or small, got \"" + *o.arch + "\"");
    }
  }
  if (o.generations) base.rebalance.generations = *o.generations;
  if (o.alpha) base.rebalance.alpha = *o.alpha;
  if (o.epochs) base.train.epochs = *o.epochs;
  if (o.iterations) base.train.iterations_per_epoch = *o.iterations;
  if (o.keep_in_unlabeled) base.rebalance.keep_in_unlabeled = true;
  if (o.harvest) base.rebalance.harvest = parse_harvest_mode(*o.harvest);
  validate(base);
  return base;
}

void print_resolved(const RunConfig& c) { std::cout << "resolved config:\n" << to_json_text(c) << std::flush; }

int parse_generation_dir(const fs::path& dir) {
  const std::string name = dir.filename().string();
  if (name.rfind("gen_", 0) == 0) {
    try {
      std::size_t used = 0;
      const int k = std::stoi(name.substr(4), &used);
      if (used == name.size() - 4 && k >= 0) return k;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("--resume: expected a gen_<k> directory, got " + dir.string());
}

int cmd_prepare(const Overrides& o) {
  RunConfig c = resolve({}, o);
  c.dataset.root = resolve_dataset_root(c);
  print_resolved(c);
  const PreparedSplit p = prepare_split(c);
  write_prepared(c.output, p);
  std::cout << class_count_table(p);
  std::cout << "wrote " << (c.output / "split_manifest.tsv").string() << "\n";
  return 0;
}

int cmd_run(const Overrides& o, const std::string& resume) {
  RunHooks hooks;
  hooks.log = [](const std::string& msg) { std::cout << msg << (msg.ends_with('\n') ? "" : "\n") << std::flush; };
  if (resume.empty()) {
    RunConfig c = resolve({}, o);
    c.dataset.root = resolve_dataset_root(c);
    print_resolved(c);
    run_pipeline(c, std::nullopt, hooks);
    std::cout << "report: " << (c.output / "report" / "results.tsv").string() << "\n";
    return 0;
  }
  const fs::path gen_dir = fs::path(resume).lexically_normal();
  const int k = parse_generation_dir(gen_dir.filename().empty() ? gen_dir.parent_path() : gen_dir);
  const fs::path run_dir = (gen_dir.filename().empty() ? gen_dir.parent_path() : gen_dir).parent_path();
  RunConfig c = resolve(read_frozen_config(run_dir), o);
  c.output = run_dir;
  print_resolved(c);
  run_pipeline(c, k, hooks);
  std::cout << "report: " << (c.output / "report" / "results.tsv").string() << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir) {
  report_run(run_dir);
  std::cout << "wrote " << (fs::path(run_dir) / "report").string() << "\n";
  return 0;
}

struct DumpOptions {
  std::string image;
  std::string output = "augment_dump";
  int count = 8;
  std::uint64_t seed = 0;
};

int cmd_dump_augment(const DumpOptions& d) {
  Image source;
  if (d.image.empty()) {
    source = render_synthetic(SyntheticSpec{}, 0, 0);
  } else {
    source = read_image(d.image);
  }
  fs::create_directories(d.output);
  write_png(fs::path(d.output) / "original.png", source);
  const AugmentPolicies policies;
  std::ofstream ops(fs::path(d.output) / "ops.tsv", std::ios::binary);
  ops << "index\tview\ttransforms\n";
  for (int i = 0; i < d.count; ++i) {
    auto weak_rng = RngStream::derive({d.seed, tag_hash("dump-weak"), static_cast<std::uint64_t>(i)});
    write_png(fs::path(d.output) / ("weak_" + std::to_string(i) + ".png"), weak_augment(source, policies.weak, weak_rng));
    auto strong_rng = RngStream::derive({d.seed, tag_hash("dump-strong"), static_cast<std::uint64_t>(i)});
    // Replay the op draw on a copy of the stream to record which ops were used.
    RngStream probe = strong_rng;
    std::string names;
    for (const auto& op : sample_ops(policies.strong, probe)) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s%s(%.4g)", names.empty() ? "" : ", ",
                    transform_name(policies.strong.pool[op.pool_index].kind).c_str(), op.magnitude);
      names += buf;
    }
    write_png(fs::path(d.output) / ("strong_" + std::to_string(i) + ".png"),
              strong_augment(source, policies.strong, strong_rng));
    ops << i << "\tstrong\t" << names << "\n";
  }
  std::cout << "wrote " << d.count << " weak and strong views to " << d.output << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-rebalancing self-training for semi-supervised scene classification"};
  app.require_subcommand(1);

  Overrides prep;
  auto* prepare = app.add_subcommand("prepare", "write split manifests and print class counts");
  add_data_flags(prepare, prep);

  Overrides runo;
  std::string resume;
  auto* run = app.add_subcommand("run", "train all generations and render the report");
  add_data_flags(run, runo);
  add_train_flags(run, runo);
  run->add_option("--resume", resume, "continue after a persisted gen_<k> directory");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "re-render tables and charts from a run directory");
  report->add_option("run_dir", report_dir, "run directory")->required();

  DumpOptions dump;
  auto* dump_cmd = app.add_subcommand("dump-augment", "write weak and strong views of one image");
  dump_cmd->add_option("--image", dump.image, "source image (default: a synthetic sample)");
  dump_cmd->add_option("--output", dump.output, "output directory");
  dump_cmd->add_option("--count", dump.count, "views per policy")->check(CLI::PositiveNumber);
  dump_cmd->add_option("--seed", dump.seed, "augmentation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) return cmd_prepare(prep);
    if (*run) return cmd_run(runo, resume);
    if (*report) return cmd_report(report_dir);
    if (*dump_cmd) return cmd_dump_augment(dump);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
