#include "rebalance_ssl/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/metrics.hpp"

namespace fs = std::filesystem;

namespace rssl {

namespace {

std::uint64_t stream_seed(const RunConfig& c, const char* tag) { return derive_seed({c.seed, tag_hash(tag)}); }

std::string read_text(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + file.string());
  os << text;
  if (!os) throw ConfigError("write failed: " + file.string());
}

void log_line(const RunHooks& hooks, const std::string& msg) {
  if (hooks.log)
    hooks.log(msg);
  else
    std::cerr << msg << '\n';
}

// gen_<k> directories present in run_dir, ascending by k.
std::vector<int> persisted_generations(const fs::path& run_dir) {
  std::vector<int> out;
  std::error_code ec;
  if (!fs::is_directory(run_dir, ec)) return out;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("gen_", 0) != 0) continue;
    const std::string digits = name.substr(4);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
      continue;
    out.push_back(std::stoi(digits));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

fs::path resolve_dataset_root(const RunConfig& c) {
  if (!c.dataset.root.empty()) return c.dataset.root;
  if (c.dataset.name == "synthetic") return c.output / "dataset";
  throw ConfigError("dataset.root: required for dataset " + c.dataset.name);
}

PreparedSplit prepare_split(const RunConfig& c) {
  validate(c);
  const fs::path root = resolve_dataset_root(c);
  if (c.dataset.name == "synthetic") {
    SyntheticSpec spec = c.dataset.synthetic;
    spec.seed = stream_seed(c, "synthetic");
    write_synthetic_dataset(spec, root);
  }
  const Dataset data = load_dataset(root);
  TrainTest tt = split_test(data, c.dataset.test_fraction, stream_seed(c, "test-split"));
  Dataset train = std::move(tt.train);
  if (c.imbalance.gamma < 1.0) {
    ImbalanceSpec spec = c.imbalance;
    spec.seed = stream_seed(c, "imbalance");
    train = make_imbalanced(train, spec);
  }
  LabeledUnlabeled lu = split_labeled_unlabeled(train, c.dataset.labeled_fraction, stream_seed(c, "label-split"));

  DatasetSplit split;
  split.class_names = data.class_names;
  split.labeled = std::move(lu.labeled);
  split.unlabeled = std::move(lu.unlabeled);
  split.test = std::move(tt.test.examples);
  split.hidden_truth = std::move(lu.hidden_truth);
  return {split.class_names, manifest_entries(split)};
}

void write_prepared(const fs::path& dir, const PreparedSplit& p) {
  fs::create_directories(dir);
  write_manifest(dir / "split_manifest.tsv", p.entries);
  std::string names;
  for (const auto& n : p.class_names) names += n + "\n";
  write_text(dir / "classes.txt", names);
}

PreparedSplit read_prepared(const fs::path& dir) {
  PreparedSplit p;
  p.entries = read_manifest(dir / "split_manifest.tsv");
  std::istringstream is(read_text(dir / "classes.txt"));
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) p.class_names.push_back(line);
  if (p.class_names.size() < 2) throw ConfigError("classes.txt in " + dir.string() + " lists fewer than 2 classes");
  return p;
}

std::string class_count_table(const PreparedSplit& p) {
  const std::size_t L = p.class_names.size();
  std::vector<std::array<std::size_t, 3>> counts(L, {0, 0, 0});
  for (const auto& e : p.entries)
    if (e.class_id >= 0 && static_cast<std::size_t>(e.class_id) < L) ++counts[e.class_id][static_cast<int>(e.role)];
  std::size_t width = 5;
  for (const auto& n : p.class_names) width = std::max(width, n.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %9s %9s %9s\n", static_cast<int>(width), "class", "labeled", "unlabeled",
                "test");
  os << line;
  std::array<std::size_t, 3> total{0, 0, 0};
  for (std::size_t c = 0; c < L; ++c) {
    std::snprintf(line, sizeof line, "%-*s %9zu %9zu %9zu\n", static_cast<int>(width), p.class_names[c].c_str(),
                  counts[c][0], counts[c][1], counts[c][2]);
    os << line;
    for (int r = 0; r < 3; ++r) total[r] += counts[c][r];
  }
  std::snprintf(line, sizeof line, "%-*s %9zu %9zu %9zu\n", static_cast<int>(width), "total", total[0], total[1],
                total[2]);
  os << line;
  return os.str();
}

ChannelStats training_stats(const DatasetSplit& split) {
  ChannelAccumulator acc;
  for (const auto& ex : split.labeled) acc.add(ex.image);
  for (const auto& ex : split.unlabeled) acc.add(ex.image);
  return acc.result();
}

RunConfig read_frozen_config(const fs::path& run_dir) {
  const fs::path file = run_dir / "config.json";
  if (!fs::exists(file)) throw ConfigError("run directory has no config.json: " + run_dir.string());
  return run_config_from_json(read_text(file));
}

std::vector<GenerationState> run_pipeline(const RunConfig& config_in, std::optional<int> resume_from,
                                          const RunHooks& hooks) {
  RunConfig config = config_in;
  validate(config);
  config.dataset.root = resolve_dataset_root(config);
  const fs::path run_dir = config.output;
  fs::create_directories(run_dir);

  PreparedSplit prepared;
  if (resume_from) {
    const RunConfig frozen = read_frozen_config(run_dir);
    if (config_hash(frozen) != config_hash(config))
      throw ConfigError("refusing to resume: resolved config differs from the frozen config in " + run_dir.string());
    prepared = read_prepared(run_dir);
  } else {
    write_text(run_dir / "config.json", to_json_text(config));
    prepared = prepare_split(config);
    write_prepared(run_dir, prepared);
  }
  log_line(hooks, class_count_table(prepared));

  const DatasetSplit split =
      split_from_manifest(config.dataset.root, prepared.entries, prepared.class_names, config.dataset.input_size);
  const ChannelStats stats = training_stats(split);
  const PipelineConfig pipeline = pipeline_config(config, split.num_classes());
  auto states = resume_from ? resume_generations(pipeline, split, stats, run_dir, *resume_from, hooks)
                            : run_generations(pipeline, split, stats, run_dir, hooks);

  std::vector<EvalReport> reports;
  for (const auto& s : states) reports.push_back(s.report);
  render_reports(reports, run_dir / "report", {config.dataset.name, prepared.class_names});
  return states;
}

void report_run(const fs::path& run_dir) {
  std::error_code ec;
  if (!fs::is_directory(run_dir, ec)) throw ConfigError("run directory does not exist: " + run_dir.string());
  const auto gens = persisted_generations(run_dir);
  if (gens.empty()) throw ConfigError("run directory has no completed generations: " + run_dir.string());
  std::vector<EvalReport> reports;
  for (int g : gens) {
    const fs::path file = generation_dir(run_dir, g) / "metrics.json";
    if (!fs::exists(file)) throw ConfigError("generation " + std::to_string(g) + " has no metrics file: " + file.string());
    reports.push_back(eval_report_from_json(read_text(file)));
  }
  ReportContext context;
  if (fs::exists(run_dir / "config.json")) context.dataset = read_frozen_config(run_dir).dataset.name;
  if (fs::exists(run_dir / "classes.txt")) context.class_names = read_prepared(run_dir).class_names;
  render_reports(reports, run_dir / "report", context);
}

}  // namespace rssl
