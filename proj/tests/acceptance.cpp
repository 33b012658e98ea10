// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "rebalance_ssl/augment.hpp"
#include "rebalance_ssl/config.hpp"
#include "rebalance_ssl/crest.hpp"
#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/fixmatch.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/pipeline.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace rssl;
using Big = boost::multiprecision::cpp_bin_float_50;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

char buf[512];

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Big oracle_rate(const std::vector<std::size_t>& counts, std::size_t cls, const Big& alpha) {
  // Rank of cls among the descending counts, ties by id; tied classes take the last rank of their group.
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  std::size_t last = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    if (counts[order[pos]] == counts[cls]) last = pos;
  const std::size_t L = counts.size();
  return boost::multiprecision::pow(Big(counts[order[L - 1 - last]]) / Big(counts[order[0]]), alpha);
}

Outcome criterion1() {
  Outcome o;
  RngStream rng(derive_seed({1, tag_hash("criterion-1")}));
  const std::pair<double, Big> alphas[] = {{0.0, Big(0)}, {1.0 / 3.0, Big(1) / 3}, {0.5, Big(1) / 2}, {1.0, Big(1)}};
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const int L = rng.uniform_int(2, 21);
    std::vector<std::size_t> counts(L);
    for (auto& n : counts) n = static_cast<std::size_t>(rng.uniform_int(1, 10000));
    const auto& [a, big] = alphas[rng.uniform_index(4)];
    const auto mu = sampling_rates(counts, a).mu;
    for (int c = 0; c < L; ++c) {
      const double want = static_cast<double>(oracle_rate(counts, c, big));
      worst = std::max(worst, std::abs(mu[c] - want) / want);
      for (int d = 0; d < L; ++d)
        if (counts[c] >= counts[d]) o.require(mu[c] <= mu[d], "mu not monotone");
    }
    const auto mn = std::min_element(counts.begin(), counts.end()) - counts.begin();
    o.require(mu[mn] == 1.0, "min-count class mu != 1");
  }
  o.require(worst <= 1e-12, fmt("max relative error %.3g", worst));
  if (o.pass) o.detail = fmt("max relative error %.3g over 200 vectors", worst);
  return o;
}

Outcome criterion2() {
  Outcome o;
  const std::vector<std::size_t> counts{100, 50, 10};
  const auto rates = sampling_rates(counts, 1.0 / 3.0);
  std::vector<PseudoLabel> cands;
  for (std::size_t i = 0; i < 30000; ++i) cands.push_back({i, static_cast<int>(i % 3), 0.99});
  RngStream rng(derive_seed({2, tag_hash("select"), 0}));
  const auto sel = selected_only(select_for_promotion(cands, rates, rng));
  std::vector<std::size_t> hits(3, 0);
  for (const auto& s : sel) ++hits[s.class_id];
  const Big third = Big(1) / 3;
  std::string d;
  for (int c = 0; c < 3; ++c) {
    const double p = static_cast<double>(oracle_rate(counts, c, third));
    const double sd = std::sqrt(p * (1 - p) / 10000.0);
    const double frac = static_cast<double>(hits[c]) / 10000.0;
    o.require(std::abs(frac - p) <= 3 * sd, fmt("class %d fraction %.4f vs %.4f", c, frac, p));
    d += fmt("%.4f/%.4f ", frac, p);
  }
  if (o.pass) o.detail = "selected/expected " + d;
  return o;
}

Outcome criterion3() {
  Outcome o;
  auto close = [&](double got, double want, const char* what) {
    o.require(std::abs(got - want) <= 1e-6, fmt("%s: %.9f vs %.9f", what, got, want));
  };
  Eigen::MatrixXd uniform(2, 1);
  uniform << 0.0, 0.0;
  close(supervised_loss(uniform, std::vector<int>{0}), 0.693147, "sup uniform");
  Eigen::MatrixXd mixed(2, 2);
  mixed << 1000.0, 0.0, 0.0, 0.0;
  close(supervised_loss(mixed, std::vector<int>{0, 0}), 0.346574, "sup mixed");

  Eigen::MatrixXd weak(2, 1), strong(2, 1);
  weak << 0.96, 0.04;
  strong << std::log(0.7), std::log(0.3);
  close(unsupervised_loss(weak, strong, 0.95).value, 0.356675, "unsup one");
  Eigen::MatrixXd weak2(2, 2), strong2(2, 2);
  weak2 << 0.96, 0.6, 0.04, 0.4;
  strong2 << std::log(0.7), 0.0, std::log(0.3), 0.0;
  const auto half = unsupervised_loss(weak2, strong2, 0.95);
  close(half.value, 0.178337, "unsup half");
  o.require(half.mask_fraction == 0.5, "mask fraction");
  Eigen::MatrixXd low(3, 2);
  low << 0.94, 0.4, 0.03, 0.3, 0.03, 0.3;
  o.require(unsupervised_loss(low, Eigen::MatrixXd::Ones(3, 2), 0.95).value == 0.0, "no confident view: loss not 0");
  if (o.pass) o.detail = "5 worked examples within 1e-6, zero loss below tau";
  return o;
}

Outcome criterion4() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RngStream rng(derive_seed({4, seed}));
    Classifier<double> m(Arch::SmallCNN, 3, 8, seed);
    nn::Activation<double> x(3, 4, 8, 8);
    for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = rng.uniform();
    const std::vector<int> labels{0, 1, 2, static_cast<int>(seed % 3)};
    m.zero_grad();
    nn::Mat<double> g;
    supervised_loss(m.forward(x), labels, &g);
    m.backward(g);
    auto params = m.parameters();
    for (int k = 0; k < 20; ++k) {
      auto* p = params[rng.uniform_index(params.size())];
      const auto i = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(p->value.size())));
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + 1e-3;
      const double up = supervised_loss(m.forward(x), labels);
      p->value.data()[i] = saved - 1e-3;
      const double down = supervised_loss(m.forward(x), labels);
      p->value.data()[i] = saved;
      const double fd = (up - down) / 2e-3, an = p->grad.data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}));
    }
  }
  o.require(worst < 1e-3, fmt("max relative error %.3g", worst));
  if (o.pass) o.detail = fmt("max relative error %.3g over 100 parameters", worst);
  return o;
}

Outcome criterion5() {
  Outcome o;
  const auto pool = default_strong_pool();
  std::set<std::string> names;
  for (const auto& t : pool) names.insert(transform_name(t.kind));
  const std::set<std::string> expected{"AutoContrast", "Brightness", "Color",    "Hue",      "Equalize",
                                       "Identity",     "Posterize",  "Shift",    "Rotate",   "Sharpness",
                                       "ShearX",       "ShearY",     "Solarize", "TranslateX", "TranslateY"};
  o.require(pool.size() == 15 && names == expected, "pool names differ");
  o.require(!names.count("Contrast"), "Contrast present");
  RngStream rng(derive_seed({5, tag_hash("criterion-5")}));
  for (const auto& t : pool)
    for (int i = 0; i < 50; ++i) {
      const int w = rng.uniform_int(8, 40), h = rng.uniform_int(8, 40);
      const Image img = testing::random_image(rng, w, h);
      double m = t.range ? rng.uniform(t.range->lo, t.range->hi) : 0.0;
      if (is_integer_valued(t.kind)) m = std::round(m);
      const Image out = apply_transform(t, m, img, rng);
      o.require(out.width == w && out.height == h && out.valid(), transform_name(t.kind) + " changed shape");
      if (t.kind == TransformKind::Identity) o.require(out == img, "Identity not exact");
      if (t.kind == TransformKind::Rotate) o.require(apply_transform(t, 0.0, img, rng) == img, "Rotate(0) not exact");
    }
  if (o.pass) o.detail = "15 transforms x 50 images";
  return o;
}

// Desk-scale end-to-end configuration.
RunConfig end_to_end_config(const fs::path& out) {
  RunConfig c;
  c.dataset.name = "synthetic";
  c.dataset.test_fraction = 0.4;  // 500 images: 100 per class remain for training
  c.dataset.labeled_fraction = 0.1;
  c.dataset.input_size = 32;
  c.dataset.synthetic.total_images = 500;
  c.dataset.synthetic.image_size = 32;
  c.imbalance.gamma = 0.1;
  c.arch = Arch::SmallCNN;
  c.train.batch_size = 16;
  c.train.epochs = 1;
  c.train.iterations_per_epoch = 600;
  c.rebalance.generations = 3;  // generations 0, 1 and 2
  c.seed = 1;
  c.output = out;
  return c;
}

struct EndToEnd {
  std::vector<GenerationState> states;
  double seconds = 0.0;
};

const char* kGenerationFiles[] = {"labeled_manifest.tsv", "unlabeled_manifest.tsv", "promotions.tsv",
                                  "metrics.json",         "metrics.tsv",            "state.json"};

Outcome criterion6(const EndToEnd& run) {
  Outcome o;
  const auto& s = run.states;
  if (s.size() != 3) {
    o.require(false, fmt("expected 3 generations, got %zu", s.size()));
    return o;
  }
  // Imbalance ratio of the labeled set before and after every expansion.
  std::vector<double> ratios{s[0].report.labeled_imbalance_ratio};
  for (const auto& g : s) ratios.push_back(ClassDistribution{g.counts_after_expansion}.imbalance_ratio());
  std::string traj;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    traj += fmt(i ? " -> %.3f" : "%.3f", ratios[i]);
    if (i) o.require(ratios[i] > ratios[i - 1] && ratios[i] <= 1.0, "ratio did not increase: " + traj);
  }
  const auto& counts0 = s[0].report.labeled_counts;
  const int minority = static_cast<int>(std::min_element(counts0.begin(), counts0.end()) - counts0.begin());
  const double r0 = s[0].report.per_class_recall[minority], r2 = s[2].report.per_class_recall[minority];
  o.require(r2 >= r0 + 0.05, fmt("minority recall %.3f -> %.3f", r0, r2));
  const double a1 = s[1].report.overall_accuracy, a2 = s[2].report.overall_accuracy;
  o.require(a2 >= a1 - 0.02, fmt("accuracy gen1 %.3f gen2 %.3f", a1, a2));
  o.detail = fmt("ratio %s; minority recall %.3f -> %.3f; acc %.3f/%.3f/%.3f; %.0f s", traj.c_str(), r0, r2,
                 s[0].report.overall_accuracy, a1, a2, run.seconds) +
             (o.pass ? "" : " [" + o.detail + "]");
  return o;
}

Outcome criterion7(const fs::path& first, const fs::path& second, const EndToEnd& a, const EndToEnd& b) {
  Outcome o;
  for (const auto& run : {a, b}) {
    if (run.states.empty()) {
      o.require(false, "no generations");
      return o;
    }
    const std::size_t total = run.states[0].labeled_manifest.size() + run.states[0].unlabeled_manifest.size();
    for (const auto& g : run.states) {
      o.require(g.labeled_manifest.size() + g.unlabeled_manifest.size() == total,
                fmt("gen %d holds %zu examples, expected %zu", g.generation,
                    g.labeled_manifest.size() + g.unlabeled_manifest.size(), total));
      std::size_t promoted = 0;
      for (const auto& p : g.promotions) promoted += p.selected;
      const std::size_t after = std::accumulate(g.counts_after_expansion.begin(), g.counts_after_expansion.end(),
                                                std::size_t{0});
      o.require(after == g.labeled_manifest.size() + promoted, fmt("gen %d expansion lost examples", g.generation));
    }
  }
  std::size_t compared = 0;
  auto same = [&](const fs::path& rel) {
    ++compared;
    const bool ok = fs::exists(first / rel) && testing::slurp(first / rel) == testing::slurp(second / rel);
    o.require(ok, rel.string() + " differs");
  };
  same("split_manifest.tsv");
  same("report/results.tsv");
  for (std::size_t g = 0; g < a.states.size(); ++g)
    for (const char* f : kGenerationFiles) same(fs::path("gen_" + std::to_string(g)) / f);
  // The rerun shares criterion 6's budget.
  o.require(a.seconds + b.seconds < 15 * 60.0, fmt("both runs took %.0f s", a.seconds + b.seconds));
  if (o.pass) o.detail = fmt("conservation holds; %zu files byte-identical across reruns", compared);
  return o;
}

Outcome criterion8() {
  Outcome o;
  Dataset d;
  for (int c = 0; c < 21; ++c) {
    d.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < 90; ++i)
      d.examples.push_back({d.examples.size(), "", testing::constant_image(4, 4, 0), c, Provenance::original()});
  }
  const Dataset imb = make_imbalanced(d, {0.1, ImbalanceProfile::Exponential, 8});
  const auto counts = class_counts(imb.examples, 21);
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  const double ratio = static_cast<double>(*mn) / static_cast<double>(*mx);
  o.require(*mx == 90, "max count changed");
  o.require(std::abs(static_cast<double>(*mn) - 9.0) <= 1.0, fmt("min count %zu", *mn));
  o.detail = fmt("min %zu / max %zu = %.4f", *mn, *mx, ratio);
  return o;
}

int failures = 0;

void report(int id, const char* title, double limit, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (limit > 0 && secs >= limit) {
    o.pass = false;
    o.detail += fmt(" [over %.0f s budget]", limit);
  }
  failures += !o.pass;
  std::printf("%s criterion %d: %s (%.2f s) %s\n", o.pass ? "PASS" : "FAIL", id, title, secs, o.detail.c_str());
  std::fflush(stdout);
}

EndToEnd run_once(const RunConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  EndToEnd r;
  r.states = run_pipeline(config);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

int main() {
  report(1, "sampling-rate oracle equivalence", 1.0, criterion1);
  report(2, "stochastic selection calibration", 5.0, criterion2);
  report(3, "loss oracles", 1.0, criterion3);
  report(4, "SmallCNN gradient check", 30.0, criterion4);
  report(5, "augmentation invariants", 10.0, criterion5);

  const fs::path root = testing::scratch_dir("acceptance");
  const fs::path first = root / "run", second = root / "rerun";
  EndToEnd a, b;
  report(6, "end-to-end rebalancing", 15 * 60.0, [&] {
    a = run_once(end_to_end_config(first));
    return criterion6(a);
  });
  report(7, "conservation and determinism", 0.0, [&] {
    RunConfig frozen = read_frozen_config(first);
    frozen.output = second;
    b = run_once(frozen);
    return criterion7(first, second, a, b);
  });
  report(8, "imbalance construction", 1.0, criterion8);
  return failures == 0 ? 0 : 1;
}
