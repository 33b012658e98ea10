#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "rebalance_ssl/crest.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/synthetic.hpp"

namespace rssl {

struct DatasetConfig {
  std::string name = "synthetic";  // eurosat | ucm | whu-rs19 | synthetic | custom
  std::filesystem::path root;      // synthetic: where images are written (default <output>/dataset)
  double test_fraction = 0.10;
  double labeled_fraction = 0.0;   // required: must be set in (0, 1)
  int input_size = 32;             // images are resized to input_size x input_size
  SyntheticSpec synthetic;         // synthetic.seed is ignored; derived from the run seed
};

struct RunConfig {
  DatasetConfig dataset;
  ImbalanceSpec imbalance;  // gamma = 1 keeps the split balanced; imbalance.seed is derived
  TrainConfig train;
  OptimizerConfig optimizer;
  AugmentPolicies augment;
  Arch arch = Arch::WideResNet28_2;
  RebalanceConfig rebalance;
  std::filesystem::path output = "runs/default";
  std::uint64_t seed = 0;
};

bool is_known_dataset(const std::string& name);

/// Nested-section JSON; every field is written.
std::string to_json_text(const RunConfig& config);

/// Overlays the given JSON on `base`. Unknown keys and wrong types throw
/// ConfigError naming the field (e.g. "train.batch_size").
RunConfig run_config_from_json(const std::string& text, const RunConfig& base = {});

/// Field-level validation; throws ConfigError.
void validate(const RunConfig& config);

/// Hash of the canonical JSON with `output` removed.
std::uint64_t config_hash(const RunConfig& config);

PipelineConfig pipeline_config(const RunConfig& config, int num_classes);

std::string harvest_mode_name(HarvestMode mode);
HarvestMode parse_harvest_mode(const std::string& name);

}  // namespace rssl
