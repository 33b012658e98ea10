#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rebalance_ssl/config.hpp"
#include "rebalance_ssl/crest.hpp"

namespace rssl {

/// The split as persisted: `split_manifest.tsv` plus `classes.txt`.
struct PreparedSplit {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;  // example id = line index
};

/// Dataset root after defaults: synthetic data without a root lives in <output>/dataset.
std::filesystem::path resolve_dataset_root(const RunConfig& config);

/// Loads (or renders) the dataset and applies test split, imbalance, and
/// labeled split, each from its own stream derived from config.seed.
PreparedSplit prepare_split(const RunConfig& config);

void write_prepared(const std::filesystem::path& dir, const PreparedSplit& prepared);
PreparedSplit read_prepared(const std::filesystem::path& dir);

/// Per-class labeled / unlabeled / test counts as an aligned text table.
std::string class_count_table(const PreparedSplit& prepared);

/// Normalization statistics over the training images (labeled and unlabeled).
ChannelStats training_stats(const DatasetSplit& split);

/// Runs (or resumes after generation `resume_from`) the whole pipeline in
/// config.output: frozen config.json, split files, gen_<k>/ and report/.
std::vector<GenerationState> run_pipeline(const RunConfig& config, std::optional<int> resume_from = std::nullopt,
                                          const RunHooks& hooks = {});

/// Re-renders report/ from persisted metrics; throws ConfigError if the run
/// has no generations or a generation lacks its metrics.
void report_run(const std::filesystem::path& run_dir);

/// Reads `<run_dir>/config.json`.
RunConfig read_frozen_config(const std::filesystem::path& run_dir);

}  // namespace rssl
