#include "rebalance_ssl/crest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/parallel.hpp"

namespace fs = std::filesystem;

namespace rssl {

std::size_t ClassDistribution::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

double ClassDistribution::imbalance_ratio() const {
  if (counts.empty()) return 0.0;
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  if (*mx == 0) return 0.0;
  return static_cast<double>(*mn) / static_cast<double>(*mx);
}

ClassDistribution ClassDistribution::of(std::span<const LabeledExample> labeled, int num_classes) {
  return {class_counts(labeled, num_classes)};
}

std::vector<int> class_ranks(std::span<const std::size_t> counts) {
  std::vector<int> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] > counts[b]; });
  std::vector<int> rank(counts.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<int>(r) + 1;
  return rank;
}

SamplingRates sampling_rates(std::span<const std::size_t> counts, double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ContractError("sampling_rates: alpha must be finite and >= 0");
  SamplingRates out;
  out.alpha = alpha;
  out.mu.assign(counts.size(), 1.0);

  std::vector<int> present;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0) present.push_back(static_cast<int>(c));
  if (present.empty()) throw ContractError("sampling_rates: labeled set is empty");

  // Descending by count, ties by class id; sorted[l-1] = N_l.
  std::stable_sort(present.begin(), present.end(), [&](int a, int b) { return counts[a] > counts[b]; });
  const std::size_t m = present.size();
  const std::size_t n1 = counts[present.front()];
  std::size_t group_start = 0;
  while (group_start < m) {
    std::size_t group_end = group_start;  // inclusive, 0-based
    while (group_end + 1 < m && counts[present[group_end + 1]] == counts[present[group_start]]) ++group_end;
    // A tie group takes the rate of its last rank position l = group_end + 1.
    const std::size_t partner = counts[present[m - 1 - group_end]];  // N_{M+1-l}
    double mu = 1.0;
    if (alpha != 0.0 && partner != n1)
      mu = std::pow(static_cast<double>(partner) / static_cast<double>(n1), alpha);
    for (std::size_t i = group_start; i <= group_end; ++i) out.mu[present[i]] = mu;
    group_start = group_end + 1;
  }
  return out;
}

std::vector<PseudoLabel> harvest_pseudo_labels(const Predictor& predictor, std::span<const UnlabeledExample> unlabeled,
                                               double tau, std::size_t batch_size) {
  if (batch_size == 0) batch_size = 1;
  const std::size_t batches = (unlabeled.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<PseudoLabel>> found(batches);
  parallel_for(batches, [&](std::size_t b) {
    const std::size_t start = b * batch_size;
    const std::size_t n = std::min(batch_size, unlabeled.size() - start);
    std::vector<const Image*> images(n);
    for (std::size_t i = 0; i < n; ++i) images[i] = &unlabeled[start + i].image;
    const ProbMatrix probs = predictor.predict(images);
    for (std::size_t i = 0; i < n; ++i)
      if (auto pl = pseudo_label(probs.col(static_cast<Eigen::Index>(i)), tau))
        found[b].push_back({unlabeled[start + i].id, pl->class_id, pl->confidence});
  });
  std::vector<PseudoLabel> out;
  for (auto& f : found) out.insert(out.end(), f.begin(), f.end());
  std::stable_sort(out.begin(), out.end(),
                   [](const PseudoLabel& a, const PseudoLabel& b) { return a.unlabeled_id < b.unlabeled_id; });
  return out;
}

std::vector<PromotionDecision> select_for_promotion(std::span<const PseudoLabel> candidates,
                                                    const SamplingRates& rates, RngStream& rng) {
  std::vector<PromotionDecision> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (c.class_id < 0 || static_cast<std::size_t>(c.class_id) >= rates.mu.size())
      throw ContractError("select_for_promotion: candidate class out of range");
    const double mu = rates.mu[c.class_id];
    const bool keep = rng.uniform() < mu;  // one draw per candidate, even at mu = 1
    out.push_back({c, keep, mu});
  }
  return out;
}

std::vector<PseudoLabel> selected_only(std::span<const PromotionDecision> decisions) {
  std::vector<PseudoLabel> out;
  for (const auto& d : decisions)
    if (d.selected) out.push_back(d.candidate);
  return out;
}

ExpandedSets expand_labeled_set(std::span<const LabeledExample> labeled, std::span<const UnlabeledExample> unlabeled,
                                std::span<const PseudoLabel> selected, int generation, bool keep_in_unlabeled) {
  std::map<std::size_t, const PseudoLabel*> chosen;
  for (const auto& s : selected)
    if (!chosen.emplace(s.unlabeled_id, &s).second)
      throw ContractError("expand_labeled_set: duplicate selected id " + std::to_string(s.unlabeled_id));
  std::set<std::size_t> labeled_ids;
  for (const auto& ex : labeled) labeled_ids.insert(ex.id);

  ExpandedSets out;
  out.labeled.assign(labeled.begin(), labeled.end());
  std::size_t matched = 0;
  for (const auto& ex : unlabeled) {
    auto it = chosen.find(ex.id);
    if (it == chosen.end()) {
      out.unlabeled.push_back(ex);
      continue;
    }
    ++matched;
    if (labeled_ids.count(ex.id)) throw ContractError("expand_labeled_set: id already labeled " + std::to_string(ex.id));
    const PseudoLabel& pl = *it->second;
    out.labeled.push_back({ex.id, ex.path, ex.image, pl.class_id, Provenance::pseudo(generation, pl.confidence)});
    if (keep_in_unlabeled) out.unlabeled.push_back(ex);
  }
  if (matched != chosen.size()) throw ContractError("expand_labeled_set: selected id not in the unlabeled set");
  std::stable_sort(out.labeled.begin(), out.labeled.end(),
                   [](const LabeledExample& a, const LabeledExample& b) { return a.id < b.id; });
  return out;
}

// ---------------------------------------------------------------------------
// Generation driver

fs::path generation_dir(const fs::path& run_dir, int generation) {
  return run_dir / ("gen_" + std::to_string(generation));
}

void write_promotions(const fs::path& file, std::span<const PromotionDecision> decisions) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write promotions: " + file.string());
  char line[160];
  for (const auto& d : decisions) {
    std::snprintf(line, sizeof line, "%zu\t%d\t%.17g\t%d\t%.17g\n", d.candidate.unlabeled_id, d.candidate.class_id,
                  d.candidate.confidence, d.selected ? 1 : 0, d.mu);
    os << line;
  }
  if (!os) throw ConfigError("write failed: " + file.string());
}

std::vector<PromotionDecision> read_promotions(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("cannot read promotions: " + file.string());
  std::vector<PromotionDecision> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    PromotionDecision d;
    int selected = 0;
    if (!(row >> d.candidate.unlabeled_id >> d.candidate.class_id >> d.candidate.confidence >> selected >> d.mu) ||
        (selected != 0 && selected != 1))
      throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": malformed promotion line");
    d.selected = selected == 1;
    out.push_back(d);
  }
  return out;
}

namespace {

void log_line(const RunHooks& hooks, const std::string& msg) {
  if (hooks.log)
    hooks.log(msg);
  else
    std::cerr << msg << '\n';
}

std::string counts_text(std::span<const std::size_t> counts) {
  std::string s = "(";
  for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? ", " : "") + std::to_string(counts[i]);
  return s + ")";
}

std::vector<ManifestEntry> labeled_entries(std::span<const LabeledExample> labeled) {
  std::vector<ManifestEntry> out;
  for (const auto& ex : labeled) out.push_back({ex.path, Role::Labeled, ex.class_id});
  return out;
}

std::vector<ManifestEntry> unlabeled_entries(std::span<const UnlabeledExample> unlabeled,
                                             const std::map<std::size_t, int>& truth) {
  std::vector<ManifestEntry> out;
  for (const auto& ex : unlabeled) {
    auto it = truth.find(ex.id);
    out.push_back({ex.path, Role::Unlabeled, it == truth.end() ? -1 : it->second});
  }
  return out;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + file.string());
  os << text;
  if (!os) throw ConfigError("write failed: " + file.string());
}

std::string read_text(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string state_json(const GenerationState& s) {
  nlohmann::ordered_json j;
  j["generation"] = s.generation;
  j["num_promoted_per_class"] = s.num_promoted_per_class;
  j["counts_after_expansion"] = s.counts_after_expansion;
  j["promotion_precision"] = s.promotion_precision;
  j["unlabeled_exhausted"] = s.unlabeled_exhausted;
  return j.dump(2) + "\n";
}

struct Pools {
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<std::size_t> promoted_per_class;  // into `labeled` by the previous expansion
};

std::uint64_t generation_seed(std::uint64_t seed, int generation) {
  return derive_seed({seed, tag_hash("generation"), static_cast<std::uint64_t>(generation)});
}

std::vector<GenerationState> drive(const PipelineConfig& config, const DatasetSplit& split, const ChannelStats& stats,
                                   const fs::path& run_dir, int start, Pools pools,
                                   std::optional<Classifier<float>> previous, const RunHooks& hooks) {
  const auto& rb = config.rebalance;
  const int L = split.num_classes();
  if (rb.generations < 1) throw ConfigError("rebalance.generations must be >= 1");
  if (!(rb.alpha >= 0.0)) throw ConfigError("rebalance.alpha must be >= 0");
  if (!(rb.promotion_tau > 0.0 && rb.promotion_tau <= 1.0)) throw ConfigError("rebalance.promotion_tau must be in (0,1]");
  if (split.test.empty()) throw ConfigError("test split is empty");
  if (config.model.num_classes != L) throw ContractError("model class count does not match the dataset");

  std::vector<GenerationState> states;
  for (int g = start; g < rb.generations; ++g) {
    const fs::path dir = generation_dir(run_dir, g);
    fs::create_directories(dir);
    GenerationState state;
    state.generation = g;
    state.labeled_manifest = labeled_entries(pools.labeled);
    state.unlabeled_manifest = unlabeled_entries(pools.unlabeled, split.hidden_truth);
    state.num_promoted_per_class = pools.promoted_per_class;
    write_manifest(dir / "labeled_manifest.tsv", state.labeled_manifest);
    write_manifest(dir / "unlabeled_manifest.tsv", state.unlabeled_manifest);

    const auto counts = class_counts(pools.labeled, L);
    log_line(hooks, "gen " + std::to_string(g) + ": labeled " + std::to_string(pools.labeled.size()) + " " +
                        counts_text(counts) + ", unlabeled " + std::to_string(pools.unlabeled.size()));

    // (1) train
    TrainHooks th;
    th.config_hash = config.config_hash;
    th.checkpoint_path = dir / "checkpoint";
    if (hooks.on_step) th.on_step = [&](const TraceRow& row) { hooks.on_step(g, row); };
    if (config.train.warm_start && previous) th.warm_start_from = &*previous;
    TrainResult result = train_generation(pools.labeled, pools.unlabeled, config.train, config.optim, config.policies,
                                          config.model, stats, generation_seed(config.seed, g), th);
    CheckpointInfo info;
    info.config_hash = config.config_hash;
    info.step = total_steps(config.train);
    save_checkpoint(dir / "checkpoint", result.model, &result.optimizer, info);
    state.checkpoint = dir / "checkpoint";
    result.trace.write_csv(dir / "trace.csv");

    // (2) evaluate
    const ModelPredictor predictor(result.model, stats);
    state.report = summarize(evaluate(predictor, split.test));
    state.report.generation = g;
    state.report.seed = config.seed;
    state.report.labeled_counts = counts;
    state.report.labeled_imbalance_ratio = ClassDistribution{counts}.imbalance_ratio();
    write_text(dir / "metrics.json", to_json_text(state.report));
    write_metrics_tsv(dir / "metrics.tsv", state.report, split.class_names);
    log_line(hooks, "gen " + std::to_string(g) + ": accuracy " + std::to_string(state.report.overall_accuracy) +
                        ", balanced " + std::to_string(state.report.balanced_accuracy));

    // (3) rates from the current labeled set, (4) harvest, select, expand
    const SamplingRates rates = sampling_rates(counts, rb.alpha);
    std::vector<PseudoLabel> candidates;
    if (pools.unlabeled.empty()) {
      state.unlabeled_exhausted = true;
      log_line(hooks, "warning: unlabeled pool exhausted at generation " + std::to_string(g) +
                          "; continuing without expansion");
    } else if (rb.harvest == HarvestMode::Fresh) {
      candidates = harvest_pseudo_labels(predictor, pools.unlabeled, rb.promotion_tau);
    } else {
      std::set<std::size_t> pool_ids;
      for (const auto& ex : pools.unlabeled) pool_ids.insert(ex.id);
      for (const auto& [id, pl] : result.last_masks)
        if (pool_ids.count(id) && pl.confidence >= rb.promotion_tau) candidates.push_back({id, pl.class_id, pl.confidence});
    }
    if (rb.keep_in_unlabeled) {
      std::set<std::size_t> labeled_ids;
      for (const auto& ex : pools.labeled) labeled_ids.insert(ex.id);
      std::erase_if(candidates, [&](const PseudoLabel& p) { return labeled_ids.count(p.unlabeled_id) > 0; });
    }
    auto rng = RngStream::derive({config.seed, tag_hash("select"), static_cast<std::uint64_t>(g)});
    state.promotions = select_for_promotion(candidates, rates, rng);
    write_promotions(dir / "promotions.tsv", state.promotions);

    const auto chosen = selected_only(state.promotions);
    std::size_t correct = 0;
    std::vector<std::size_t> promoted(L, 0);
    for (const auto& p : chosen) {
      ++promoted[p.class_id];
      auto it = split.hidden_truth.find(p.unlabeled_id);
      if (it != split.hidden_truth.end() && it->second == p.class_id) ++correct;
    }
    state.promotion_precision = chosen.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(chosen.size());
    ExpandedSets next = expand_labeled_set(pools.labeled, pools.unlabeled, chosen, g, rb.keep_in_unlabeled);
    state.counts_after_expansion = class_counts(next.labeled, L);
    write_text(dir / "state.json", state_json(state));
    log_line(hooks, "gen " + std::to_string(g) + ": " + std::to_string(candidates.size()) + " confident, " +
                        std::to_string(chosen.size()) + " promoted " + counts_text(promoted) + ", ratio " +
                        std::to_string(ClassDistribution{state.counts_after_expansion}.imbalance_ratio()));

    pools = {std::move(next.labeled), std::move(next.unlabeled), std::move(promoted)};
    previous = std::move(result.model);
    states.push_back(std::move(state));
  }
  return states;
}

}  // namespace

std::vector<GenerationState> run_generations(const PipelineConfig& config, const DatasetSplit& split,
                                             const ChannelStats& stats, const fs::path& run_dir,
                                             const RunHooks& hooks) {
  Pools pools;
  pools.labeled = split.labeled;
  pools.unlabeled = split.unlabeled;
  std::stable_sort(pools.labeled.begin(), pools.labeled.end(),
                   [](const LabeledExample& a, const LabeledExample& b) { return a.id < b.id; });
  std::stable_sort(pools.unlabeled.begin(), pools.unlabeled.end(),
                   [](const UnlabeledExample& a, const UnlabeledExample& b) { return a.id < b.id; });
  pools.promoted_per_class.assign(split.num_classes(), 0);
  return drive(config, split, stats, run_dir, 0, std::move(pools), std::nullopt, hooks);
}

GenerationState load_generation(const fs::path& gen_dir, int num_classes) {
  for (const char* name : {"labeled_manifest.tsv", "unlabeled_manifest.tsv", "promotions.tsv", "metrics.json",
                           "state.json", "checkpoint"})
    if (!fs::exists(gen_dir / name))
      throw ConfigError("generation " + gen_dir.filename().string() + " is incomplete: missing " + name);
  GenerationState s;
  s.labeled_manifest = read_manifest(gen_dir / "labeled_manifest.tsv");
  s.unlabeled_manifest = read_manifest(gen_dir / "unlabeled_manifest.tsv");
  s.promotions = read_promotions(gen_dir / "promotions.tsv");
  s.report = eval_report_from_json(read_text(gen_dir / "metrics.json"));
  s.checkpoint = gen_dir / "checkpoint";
  try {
    const auto j = nlohmann::json::parse(read_text(gen_dir / "state.json"));
    s.generation = j.at("generation").get<int>();
    s.num_promoted_per_class = j.at("num_promoted_per_class").get<std::vector<std::size_t>>();
    s.counts_after_expansion = j.at("counts_after_expansion").get<std::vector<std::size_t>>();
    s.promotion_precision = j.at("promotion_precision").get<double>();
    s.unlabeled_exhausted = j.at("unlabeled_exhausted").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed state.json in " + gen_dir.string() + ": " + e.what());
  }
  if (static_cast<int>(s.report.per_class_recall.size()) != num_classes ||
      static_cast<int>(s.num_promoted_per_class.size()) != num_classes)
    throw ConfigError("generation " + gen_dir.filename().string() + " has a different class count");
  return s;
}

std::vector<GenerationState> resume_generations(const PipelineConfig& config, const DatasetSplit& split,
                                                const ChannelStats& stats, const fs::path& run_dir, int resume_from,
                                                const RunHooks& hooks) {
  if (resume_from < 0) throw ConfigError("resume generation must be >= 0");
  const int L = split.num_classes();
  std::vector<GenerationState> states;
  for (int g = 0; g <= resume_from; ++g) states.push_back(load_generation(generation_dir(run_dir, g), L));
  const GenerationState& last = states.back();

  const CheckpointInfo info = load_checkpoint<float>(last.checkpoint).info;
  if (info.config_hash != config.config_hash)
    throw ConfigError("refusing to resume: config hash differs from the checkpoint in gen_" +
                      std::to_string(resume_from));

  // Rebuild the pools from the persisted manifests; paths identify examples.
  std::map<std::string, const LabeledExample*> by_path_labeled;
  std::map<std::string, const UnlabeledExample*> by_path_unlabeled;
  for (const auto& ex : split.labeled) by_path_labeled[ex.path] = &ex;
  for (const auto& ex : split.unlabeled) by_path_unlabeled[ex.path] = &ex;
  std::map<std::size_t, Provenance> provenance;
  for (int g = 0; g < resume_from; ++g)
    for (const auto& d : states[g].promotions)
      if (d.selected) provenance[d.candidate.unlabeled_id] = Provenance::pseudo(g, d.candidate.confidence);

  Pools pools;
  for (const auto& e : last.labeled_manifest) {
    if (auto it = by_path_labeled.find(e.path); it != by_path_labeled.end()) {
      pools.labeled.push_back(*it->second);
    } else if (auto u = by_path_unlabeled.find(e.path); u != by_path_unlabeled.end()) {
      const auto& ex = *u->second;
      auto pv = provenance.find(ex.id);
      pools.labeled.push_back({ex.id, ex.path, ex.image, e.class_id,
                               pv == provenance.end() ? Provenance::pseudo(0, 1.0) : pv->second});
    } else {
      throw ConfigError("gen_" + std::to_string(resume_from) + " labeled manifest names an unknown image: " + e.path);
    }
  }
  for (const auto& e : last.unlabeled_manifest) {
    auto u = by_path_unlabeled.find(e.path);
    if (u == by_path_unlabeled.end())
      throw ConfigError("gen_" + std::to_string(resume_from) + " unlabeled manifest names an unknown image: " + e.path);
    pools.unlabeled.push_back(*u->second);
  }
  std::stable_sort(pools.labeled.begin(), pools.labeled.end(),
                   [](const LabeledExample& a, const LabeledExample& b) { return a.id < b.id; });
  std::stable_sort(pools.unlabeled.begin(), pools.unlabeled.end(),
                   [](const UnlabeledExample& a, const UnlabeledExample& b) { return a.id < b.id; });

  const auto chosen = selected_only(last.promotions);
  ExpandedSets next = expand_labeled_set(pools.labeled, pools.unlabeled, chosen, resume_from,
                                         config.rebalance.keep_in_unlabeled);
  Pools resumed{std::move(next.labeled), std::move(next.unlabeled), std::vector<std::size_t>(L, 0)};
  for (const auto& p : chosen) ++resumed.promoted_per_class[p.class_id];

  std::optional<Classifier<float>> previous;
  if (config.train.warm_start) previous = load_checkpoint<float>(last.checkpoint).model;
  auto more = drive(config, split, stats, run_dir, resume_from + 1, std::move(resumed), std::move(previous), hooks);
  for (auto& s : more) states.push_back(std::move(s));
  return states;
}

}  // namespace rssl
