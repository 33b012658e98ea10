#include "rebalance_ssl/config.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/rng.hpp"

namespace rssl {

using json = nlohmann::ordered_json;

namespace {

const char* const kDatasets[] = {"eurosat", "ucm", "whu-rs19", "synthetic", "custom"};

std::string profile_name(ImbalanceProfile p) { return p == ImbalanceProfile::Linear ? "linear" : "exponential"; }
ImbalanceProfile parse_profile(const std::string& s, const std::string& field) {
  if (s == "exponential") return ImbalanceProfile::Exponential;
  if (s == "linear") return ImbalanceProfile::Linear;
  throw ConfigError(field + ": expected \"exponential\" or \"linear\", got \"" + s + "\"");
}

std::string schedule_name(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "cosine"; }
LrSchedule parse_schedule(const std::string& s, const std::string& field) {
  if (s == "cosine") return LrSchedule::Cosine;
  if (s == "constant") return LrSchedule::Constant;
  throw ConfigError(field + ": expected \"cosine\" or \"constant\", got \"" + s + "\"");
}

json transform_json(const Transform& t) {
  json j;
  j["name"] = transform_name(t.kind);
  if (t.range) {
    j["min"] = t.range->lo;
    j["max"] = t.range->hi;
  }
  return j;
}

// Walks one JSON object, reading known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown config key " + child(key));
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if (std::is_unsigned_v<T> && it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0)
          throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(child(key) + ": expected " + expected<T>());
    }
  }
  void read_path(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    read(key, s);
    out = s;
  }
  std::string read_enum(const char* key, const std::string& current) {
    std::string s = current;
    read(key, s);
    return s;
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename T>
  static const char* expected() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_unsigned_v<T>) return "a nonnegative integer";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else return "a string";
  }
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<Transform> read_pool(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array of transforms");
  std::vector<Transform> pool;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    Section s(j[i], p);
    std::string name;
    s.read("name", name);
    if (name.empty()) throw ConfigError(p + ".name: required");
    Transform t = default_transform(parse_transform_name(name));
    if (t.range) {
      s.read("min", t.range->lo);
      s.read("max", t.range->hi);
    } else {
      double ignored = 0.0;
      s.read("min", ignored);
      s.read("max", ignored);
    }
    pool.push_back(t);
  }
  return pool;
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

}  // namespace

bool is_known_dataset(const std::string& name) {
  return std::find(std::begin(kDatasets), std::end(kDatasets), name) != std::end(kDatasets);
}

std::string harvest_mode_name(HarvestMode mode) { return mode == HarvestMode::Fresh ? "fresh" : "training-masks"; }

HarvestMode parse_harvest_mode(const std::string& name) {
  if (name == "fresh") return HarvestMode::Fresh;
  if (name == "training-masks") return HarvestMode::TrainingMasks;
  throw ConfigError("rebalance.harvest: expected \"fresh\" or \"training-masks\", got \"" + name + "\"");
}

std::string to_json_text(const RunConfig& c) {
  json j;
  auto& d = j["dataset"];
  d["name"] = c.dataset.name;
  d["root"] = c.dataset.root.generic_string();
  d["test_fraction"] = c.dataset.test_fraction;
  d["labeled_fraction"] = c.dataset.labeled_fraction;
  d["input_size"] = c.dataset.input_size;
  auto& syn = d["synthetic"];
  syn["num_classes"] = c.dataset.synthetic.num_classes;
  syn["total_images"] = c.dataset.synthetic.total_images;
  syn["image_size"] = c.dataset.synthetic.image_size;
  syn["separability"] = c.dataset.synthetic.separability;
  syn["pixel_noise"] = c.dataset.synthetic.pixel_noise;

  j["imbalance"]["gamma"] = c.imbalance.gamma;
  j["imbalance"]["profile"] = profile_name(c.imbalance.profile);

  auto& t = j["train"];
  t["tau"] = c.train.tau;
  t["batch_size"] = c.train.batch_size;
  t["unlabeled_ratio"] = c.train.unlabeled_ratio;
  t["lambda_u"] = c.train.lambda_u;
  t["epochs"] = c.train.epochs;
  t["iterations_per_epoch"] = c.train.iterations_per_epoch;
  t["checkpoint_interval"] = c.train.checkpoint_interval;
  t["warm_start"] = c.train.warm_start;

  auto& o = j["optimizer"];
  o["learning_rate"] = c.optimizer.learning_rate;
  o["momentum"] = c.optimizer.momentum;
  o["nesterov"] = c.optimizer.nesterov;
  o["weight_decay"] = c.optimizer.weight_decay;
  o["schedule"] = schedule_name(c.optimizer.schedule);
  o["ema_decay"] = c.optimizer.ema_decay;

  auto& a = j["augment"];
  a["weak"]["flip_probability"] = c.augment.weak.flip_probability;
  a["weak"]["max_shift_fraction"] = c.augment.weak.max_shift_fraction;
  a["weak"]["crop"] = c.augment.weak.crop;
  a["strong"]["num_ops"] = c.augment.strong.num_ops;
  json pool = json::array();
  for (const auto& tr : c.augment.strong.pool) pool.push_back(transform_json(tr));
  a["strong"]["pool"] = pool;

  j["model"]["arch"] = arch_name(c.arch);

  auto& r = j["rebalance"];
  r["generations"] = c.rebalance.generations;
  r["alpha"] = c.rebalance.alpha;
  r["promotion_tau"] = c.rebalance.promotion_tau;
  r["keep_in_unlabeled"] = c.rebalance.keep_in_unlabeled;
  r["harvest"] = harvest_mode_name(c.rebalance.harvest);

  j["output"] = c.output.generic_string();
  j["seed"] = c.seed;
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text, const RunConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = base;
  Section top(j, "");
  if (const json* dj = top.sub("dataset")) {
    Section d(*dj, "dataset");
    d.read("name", c.dataset.name);
    d.read_path("root", c.dataset.root);
    d.read("test_fraction", c.dataset.test_fraction);
    d.read("labeled_fraction", c.dataset.labeled_fraction);
    d.read("input_size", c.dataset.input_size);
    if (const json* sj = d.sub("synthetic")) {
      Section s(*sj, "dataset.synthetic");
      s.read("num_classes", c.dataset.synthetic.num_classes);
      s.read("total_images", c.dataset.synthetic.total_images);
      s.read("image_size", c.dataset.synthetic.image_size);
      s.read("separability", c.dataset.synthetic.separability);
      s.read("pixel_noise", c.dataset.synthetic.pixel_noise);
    }
  }
  if (const json* ij = top.sub("imbalance")) {
    Section s(*ij, "imbalance");
    s.read("gamma", c.imbalance.gamma);
    c.imbalance.profile = parse_profile(s.read_enum("profile", profile_name(c.imbalance.profile)), "imbalance.profile");
  }
  if (const json* tj = top.sub("train")) {
    Section s(*tj, "train");
    s.read("tau", c.train.tau);
    s.read("batch_size", c.train.batch_size);
    s.read("unlabeled_ratio", c.train.unlabeled_ratio);
    s.read("lambda_u", c.train.lambda_u);
    s.read("epochs", c.train.epochs);
    s.read("iterations_per_epoch", c.train.iterations_per_epoch);
    s.read("checkpoint_interval", c.train.checkpoint_interval);
    s.read("warm_start", c.train.warm_start);
  }
  if (const json* oj = top.sub("optimizer")) {
    Section s(*oj, "optimizer");
    s.read("learning_rate", c.optimizer.learning_rate);
    s.read("momentum", c.optimizer.momentum);
    s.read("nesterov", c.optimizer.nesterov);
    s.read("weight_decay", c.optimizer.weight_decay);
    c.optimizer.schedule = parse_schedule(s.read_enum("schedule", schedule_name(c.optimizer.schedule)), "optimizer.schedule");
    s.read("ema_decay", c.optimizer.ema_decay);
  }
  if (const json* aj = top.sub("augment")) {
    Section s(*aj, "augment");
    if (const json* wj = s.sub("weak")) {
      Section w(*wj, "augment.weak");
      w.read("flip_probability", c.augment.weak.flip_probability);
      w.read("max_shift_fraction", c.augment.weak.max_shift_fraction);
      w.read("crop", c.augment.weak.crop);
    }
    if (const json* sj = s.sub("strong")) {
      Section st(*sj, "augment.strong");
      st.read("num_ops", c.augment.strong.num_ops);
      if (const json* pj = st.sub("pool")) c.augment.strong.pool = read_pool(*pj, "augment.strong.pool");
    }
  }
  if (const json* mj = top.sub("model")) {
    Section s(*mj, "model");
    const std::string name = s.read_enum("arch", arch_name(c.arch));
    try {
      c.arch = parse_arch(name);
    } catch (const std::exception&) {
      throw ConfigError("model.arch: expected \"wrn28-2\" or \"small\", got \"" + name + "\"");
    }
  }
  if (const json* rj = top.sub("rebalance")) {
    Section s(*rj, "rebalance");
    s.read("generations", c.rebalance.generations);
    s.read("alpha", c.rebalance.alpha);
    s.read("promotion_tau", c.rebalance.promotion_tau);
    s.read("keep_in_unlabeled", c.rebalance.keep_in_unlabeled);
    c.rebalance.harvest = parse_harvest_mode(s.read_enum("harvest", harvest_mode_name(c.rebalance.harvest)));
  }
  top.read_path("output", c.output);
  top.read("seed", c.seed);
  return c;
}

void validate(const RunConfig& c) {
  require(is_known_dataset(c.dataset.name), "dataset.name",
          "expected one of eurosat, ucm, whu-rs19, synthetic, custom; got \"" + c.dataset.name + "\"");
  require(c.dataset.name == "synthetic" || !c.dataset.root.empty(), "dataset.root", "required for non-synthetic datasets");
  require(c.dataset.test_fraction > 0.0 && c.dataset.test_fraction < 1.0, "dataset.test_fraction", "must be in (0, 1)");
  require(c.dataset.labeled_fraction > 0.0 && c.dataset.labeled_fraction < 1.0, "dataset.labeled_fraction",
          "required, must be in (0, 1)");
  require(c.dataset.input_size >= 8 && c.dataset.input_size % 4 == 0, "dataset.input_size",
          "must be a multiple of 4, at least 8");
  const auto& syn = c.dataset.synthetic;
  require(syn.num_classes >= 2, "dataset.synthetic.num_classes", "must be >= 2");
  require(syn.total_images >= 2 * syn.num_classes, "dataset.synthetic.total_images", "must be >= 2 per class");
  require(syn.image_size >= 8, "dataset.synthetic.image_size", "must be >= 8");
  require(syn.separability > 0.0, "dataset.synthetic.separability", "must be > 0");
  require(syn.pixel_noise >= 0.0, "dataset.synthetic.pixel_noise", "must be >= 0");
  require(c.imbalance.gamma > 0.0 && c.imbalance.gamma <= 1.0, "imbalance.gamma", "must be in (0, 1]");
  require(c.rebalance.generations >= 1, "rebalance.generations", "must be >= 1");
  require(c.rebalance.alpha >= 0.0 && std::isfinite(c.rebalance.alpha), "rebalance.alpha", "must be >= 0");
  require(c.rebalance.promotion_tau > 0.0 && c.rebalance.promotion_tau <= 1.0, "rebalance.promotion_tau",
          "must be in (0, 1]");
  require(!c.output.empty(), "output", "required");
  validate(c.train);
  validate(c.optimizer);
  validate(c.augment.weak);
  validate(c.augment.strong);
}

std::uint64_t config_hash(const RunConfig& c) {
  json j = json::parse(to_json_text(c));
  j.erase("output");
  return tag_hash(j.dump());
}

PipelineConfig pipeline_config(const RunConfig& c, int num_classes) {
  PipelineConfig p;
  p.train = c.train;
  p.optim = c.optimizer;
  p.policies = c.augment;
  p.model = {c.arch, num_classes, c.dataset.input_size};
  p.rebalance = c.rebalance;
  p.seed = c.seed;
  p.config_hash = config_hash(c);
  return p;
}

}  // namespace rssl
