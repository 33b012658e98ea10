#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rebalance_ssl/fixmatch.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/metrics.hpp"
#include "rebalance_ssl/model.hpp"

namespace rssl {

/// Per-class labeled counts, indexed by class id.
struct ClassDistribution {
  std::vector<std::size_t> counts;

  int num_classes() const { return static_cast<int>(counts.size()); }
  std::size_t total() const;
  /// min count / max count (0 when some class is empty).
  double imbalance_ratio() const;

  static ClassDistribution of(std::span<const LabeledExample> labeled, int num_classes);
};

struct SamplingRates {
  std::vector<double> mu;  // indexed by class id, each in (0, 1]
  double alpha = 1.0 / 3.0;
};

/// Rank of each class (1 = largest count); ties go to the lower class id.
std::vector<int> class_ranks(std::span<const std::size_t> counts);

/// Adaptive promotion rates. With counts sorted N_1 >= ... >= N_L, the class
/// at rank l gets (N_{L+1-l} / N_1)^alpha, so the rarest class gets exactly 1
/// and the most frequent gets (N_L / N_1)^alpha. Classes with equal counts
/// share the rate of the lowest-ranked member of their group; classes with no
/// labeled examples get 1 and are left out of the ranking.
SamplingRates sampling_rates(std::span<const std::size_t> counts, double alpha);

/// Confident predictions on un-augmented unlabeled images, sorted by id.
std::vector<PseudoLabel> harvest_pseudo_labels(const Predictor& predictor, std::span<const UnlabeledExample> unlabeled,
                                               double tau, std::size_t batch_size = 256);

struct PromotionDecision {
  PseudoLabel candidate;
  bool selected = false;
  double mu = 1.0;
};

/// Keeps each candidate independently with probability mu[class]. Candidates
/// are visited in the given order, one draw each.
std::vector<PromotionDecision> select_for_promotion(std::span<const PseudoLabel> candidates,
                                                    const SamplingRates& rates, RngStream& rng);

std::vector<PseudoLabel> selected_only(std::span<const PromotionDecision> decisions);

struct ExpandedSets {
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
};

/// Moves the selected unlabeled examples into the labeled set with pseudo
/// provenance. With `keep_in_unlabeled` the unlabeled pool is left intact.
ExpandedSets expand_labeled_set(std::span<const LabeledExample> labeled, std::span<const UnlabeledExample> unlabeled,
                                std::span<const PseudoLabel> selected, int generation, bool keep_in_unlabeled = false);

// ---------------------------------------------------------------------------
// Generation driver

enum class HarvestMode { Fresh, TrainingMasks };

struct RebalanceConfig {
  int generations = 3;  // trained models, including the baseline generation 0
  double alpha = 1.0 / 3.0;
  double promotion_tau = 0.95;
  bool keep_in_unlabeled = false;
  HarvestMode harvest = HarvestMode::Fresh;
};

struct PipelineConfig {
  TrainConfig train;
  OptimizerConfig optim;
  AugmentPolicies policies;
  ModelSpec model;
  RebalanceConfig rebalance;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

struct GenerationState {
  int generation = 0;
  std::vector<ManifestEntry> labeled_manifest;    // set this generation trained on
  std::vector<ManifestEntry> unlabeled_manifest;  // pool before this generation's harvest
  std::filesystem::path checkpoint;
  EvalReport report;
  std::vector<std::size_t> num_promoted_per_class;  // promoted into this generation's labeled set
  std::vector<PromotionDecision> promotions;        // harvested from this generation's model
  std::vector<std::size_t> counts_after_expansion;  // labeled counts once the selection is added
  double promotion_precision = 0.0;                 // share of selected with correct hidden label
  bool unlabeled_exhausted = false;
};

struct RunHooks {
  std::function<void(const std::string&)> log;
  std::function<void(int generation, const TraceRow&)> on_step;
};

/// Runs generations [start, config.rebalance.generations) starting from the
/// given split. Every generation is persisted to `<run_dir>/gen_<k>/`.
std::vector<GenerationState> run_generations(const PipelineConfig& config, const DatasetSplit& split,
                                             const ChannelStats& stats, const std::filesystem::path& run_dir,
                                             const RunHooks& hooks = {});

/// Continues a run whose generations [0, k] are persisted in run_dir; the
/// next generation's sets are rebuilt from gen_<k>'s manifests and promotions.
std::vector<GenerationState> resume_generations(const PipelineConfig& config, const DatasetSplit& split,
                                                const ChannelStats& stats, const std::filesystem::path& run_dir,
                                                int resume_from, const RunHooks& hooks = {});

/// Reads a persisted generation directory (manifests, promotions, metrics).
GenerationState load_generation(const std::filesystem::path& gen_dir, int num_classes);

std::filesystem::path generation_dir(const std::filesystem::path& run_dir, int generation);

void write_promotions(const std::filesystem::path& file, std::span<const PromotionDecision> decisions);
std::vector<PromotionDecision> read_promotions(const std::filesystem::path& file);

}  // namespace rssl
