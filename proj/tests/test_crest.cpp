#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "doctest.h"
#include "rebalance_ssl/crest.hpp"
#include "rebalance_ssl/errors.hpp"
#include "support.hpp"

using namespace rssl;
using rssl::testing::keyed_image;
using rssl::testing::one_hot;
using rssl::testing::scratch_dir;
using rssl::testing::TablePredictor;

namespace {

using Big = boost::multiprecision::cpp_bin_float_50;

// Independent evaluation: sort descending, rate of rank l is (N_{L+1-l}/N_1)^alpha
// in 50-digit arithmetic; tied counts take the rate of their last rank.
std::vector<double> oracle_rates(const std::vector<std::size_t>& counts, const Big& alpha) {
  const std::size_t L = counts.size();
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  std::vector<double> mu(L);
  for (std::size_t pos = 0; pos < L; ++pos) {
    std::size_t last = pos;
    while (last + 1 < L && counts[order[last + 1]] == counts[order[pos]]) ++last;
    const std::size_t partner = counts[order[L - 1 - last]];
    const Big r = boost::multiprecision::pow(Big(partner) / Big(counts[order[0]]), alpha);
    mu[order[pos]] = static_cast<double>(r);
  }
  return mu;
}

std::vector<LabeledExample> labeled_of(const std::vector<int>& classes) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < classes.size(); ++i) out.push_back({i, "l" + std::to_string(i), keyed_image(0), classes[i], Provenance::original()});
  return out;
}

std::vector<UnlabeledExample> unlabeled_range(std::size_t first, std::size_t n) {
  std::vector<UnlabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({first + i, "u" + std::to_string(first + i), keyed_image(0)});
  return out;
}

}  // namespace

TEST_CASE("class_ranks examples") {
  const std::vector<std::size_t> a{10, 100, 50};
  CHECK(class_ranks(a) == std::vector<int>{3, 1, 2});
  const std::vector<std::size_t> eq{4, 4, 4, 4};
  CHECK(class_ranks(eq) == std::vector<int>{1, 2, 3, 4});
  const std::vector<std::size_t> two{5, 5};
  CHECK(class_ranks(two) == std::vector<int>{1, 2});
}

TEST_CASE("sampling rate examples") {
  const std::vector<std::size_t> c{100, 50, 10};
  const auto r = sampling_rates(c, 1.0 / 3.0);
  CHECK(r.mu[0] == doctest::Approx(0.4641588834).epsilon(1e-9));
  CHECK(r.mu[1] == doctest::Approx(0.7937005260).epsilon(1e-9));
  CHECK(r.mu[2] == 1.0);
  const std::vector<std::size_t> bal{7, 7, 7};
  for (double m : sampling_rates(bal, 1.0 / 3.0).mu) CHECK(m == 1.0);
  for (double m : sampling_rates(c, 0.0).mu) CHECK(m == 1.0);
}

TEST_CASE("zero counts and empty sets") {
  const std::vector<std::size_t> z{0, 40, 10};
  const auto r = sampling_rates(z, 0.5);
  CHECK(r.mu[0] == 1.0);
  CHECK(r.mu[1] == doctest::Approx(0.5));
  CHECK(r.mu[2] == 1.0);
  const std::vector<std::size_t> none{0, 0};
  CHECK_THROWS_AS(sampling_rates(none, 0.5), ContractError);
  const std::vector<std::size_t> c{3, 1};
  CHECK_THROWS_AS(sampling_rates(c, -1.0), ContractError);
  CHECK_THROWS_AS(sampling_rates(c, std::nan("")), ContractError);
}

TEST_CASE("sampling rates agree with the 50-digit oracle") {
  RngStream rng(2024);
  const Big third = Big(1) / 3, half = Big(1) / 2;
  const std::pair<double, Big> alphas[] = {{0.0, Big(0)}, {1.0 / 3.0, third}, {0.5, half}, {1.0, Big(1)}};
  for (int trial = 0; trial < 300; ++trial) {
    const int L = static_cast<int>(rng.uniform_int(2, 21));
    std::vector<std::size_t> counts(L);
    // Small ranges force ties often.
    const int hi = trial % 3 == 0 ? 5 : 10000;
    for (auto& n : counts) n = static_cast<std::size_t>(rng.uniform_int(1, hi));
    const auto& [a, big_a] = alphas[trial % 4];
    const auto mu = sampling_rates(counts, a).mu;
    const auto want = oracle_rates(counts, big_a);
    for (int c = 0; c < L; ++c) CHECK(std::abs(mu[c] - want[c]) <= 1e-12 * want[c]);
    const auto mn = std::min_element(counts.begin(), counts.end()) - counts.begin();
    CHECK(mu[mn] == 1.0);
  }
}

TEST_CASE("sampling rate properties") {
  RngStream rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int L = static_cast<int>(rng.uniform_int(2, 12));
    std::vector<std::size_t> counts(L);
    for (auto& n : counts) n = static_cast<std::size_t>(rng.uniform_int(1, 50));
    const double alpha = rng.uniform(0.0, 2.0);
    const auto mu = sampling_rates(counts, alpha).mu;
    for (int a = 0; a < L; ++a) {
      CHECK(mu[a] > 0.0);
      CHECK(mu[a] <= 1.0);
      for (int b = 0; b < L; ++b) {
        if (counts[a] >= counts[b]) CHECK(mu[a] <= mu[b]);
        if (counts[a] == counts[b]) CHECK(mu[a] == mu[b]);
      }
    }
    // Permuting the classes permutes the rates.
    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<std::size_t> shuffled(L);
    for (int c = 0; c < L; ++c) shuffled[c] = counts[perm[c]];
    const auto mu2 = sampling_rates(shuffled, alpha).mu;
    for (int c = 0; c < L; ++c) CHECK(mu2[c] == mu[perm[c]]);
  }
}

TEST_CASE("selection keeps the rarest class and is reproducible") {
  std::vector<PseudoLabel> cands;
  for (std::size_t i = 0; i < 300; ++i) cands.push_back({i, static_cast<int>(i % 3), 0.99});
  const std::vector<std::size_t> counts{100, 50, 10};
  const auto rates = sampling_rates(counts, 1.0 / 3.0);
  RngStream a(5), b(5);
  const auto da = select_for_promotion(cands, rates, a);
  const auto db = select_for_promotion(cands, rates, b);
  REQUIRE(da.size() == cands.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    CHECK(da[i].selected == db[i].selected);
    CHECK(da[i].mu == rates.mu[cands[i].class_id]);
    if (cands[i].class_id == 2) CHECK(da[i].selected);
  }
  CHECK(select_for_promotion({}, rates, a).empty());
  const std::vector<PseudoLabel> bad{{0, 5, 0.99}};
  CHECK_THROWS_AS(select_for_promotion(bad, rates, a), ContractError);
}

TEST_CASE("selected fractions match the rates") {
  const std::vector<std::size_t> counts{100, 50, 10};
  const auto rates = sampling_rates(counts, 1.0 / 3.0);
  std::vector<PseudoLabel> cands;
  for (std::size_t i = 0; i < 30000; ++i) cands.push_back({i, static_cast<int>(i % 3), 0.99});
  RngStream rng(derive_seed({17, tag_hash("select"), 0}));
  const auto sel = selected_only(select_for_promotion(cands, rates, rng));
  std::vector<double> kept(3, 0.0);
  for (const auto& s : sel) kept[s.class_id] += 1.0;
  const double expected[] = {0.4641588834, 0.7937005260, 1.0};
  for (int c = 0; c < 3; ++c) {
    const double p = expected[c];
    const double sd = std::sqrt(p * (1 - p) / 10000.0);
    CHECK(std::abs(kept[c] / 10000.0 - p) <= 3 * sd);
  }
}

TEST_CASE("expected promotions follow candidates times rate") {
  // Oracle whose per-class recall mirrors class frequency: 90/50/10 confident candidates.
  const std::vector<std::size_t> counts{90, 50, 10};
  const auto rates = sampling_rates(counts, 0.5);
  std::vector<PseudoLabel> cands;
  std::size_t id = 0;
  for (int c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < counts[c]; ++k) cands.push_back({id++, c, 0.99});
  std::vector<double> total(3, 0.0);
  const int reps = 2000;
  for (int r = 0; r < reps; ++r) {
    RngStream rng(derive_seed({99, static_cast<std::uint64_t>(r)}));
    for (const auto& s : selected_only(select_for_promotion(cands, rates, rng))) total[s.class_id] += 1.0;
  }
  for (int c = 0; c < 3; ++c) {
    const double n = static_cast<double>(counts[c]), p = rates.mu[c];
    const double mean = total[c] / reps;
    const double sd = std::sqrt(n * p * (1 - p) / reps);
    CHECK(std::abs(mean - n * p) <= 4 * sd + 1e-12);
  }
}

TEST_CASE("expansion bookkeeping") {
  const auto labeled = labeled_of({0, 0, 1});
  const auto unl = unlabeled_range(10, 8);
  SUBCASE("empty selection leaves the sets unchanged") {
    const auto e = expand_labeled_set(labeled, unl, {}, 1);
    CHECK(e.labeled.size() == 3);
    CHECK(e.unlabeled.size() == 8);
  }
  SUBCASE("five promotions into class 1") {
    std::vector<PseudoLabel> sel;
    for (std::size_t i = 0; i < 5; ++i) sel.push_back({11 + i, 1, 0.97});
    const auto e = expand_labeled_set(labeled, unl, sel, 2);
    const auto before = class_counts(labeled, 2);
    const auto after = class_counts(e.labeled, 2);
    CHECK(after[1] == before[1] + 5);
    CHECK(after[0] == before[0]);
    CHECK(e.unlabeled.size() == 3);
    CHECK(e.labeled.size() + e.unlabeled.size() == labeled.size() + unl.size());
    for (std::size_t i = 0; i < 3; ++i) CHECK_FALSE(e.labeled[i].provenance.is_pseudo());
    for (const auto& ex : e.labeled)
      if (ex.id >= 10) {
        CHECK(ex.provenance.is_pseudo());
        CHECK(ex.provenance.generation == 2);
        CHECK(ex.provenance.confidence == 0.97);
        CHECK(ex.path == "u" + std::to_string(ex.id));
      }
  }
  SUBCASE("keep_in_unlabeled leaves the pool intact") {
    const std::vector<PseudoLabel> sel{{12, 0, 0.99}};
    const auto e = expand_labeled_set(labeled, unl, sel, 1, true);
    CHECK(e.labeled.size() == 4);
    CHECK(e.unlabeled.size() == 8);
  }
  SUBCASE("errors") {
    const std::vector<PseudoLabel> dup{{12, 0, 0.99}, {12, 1, 0.99}};
    CHECK_THROWS_AS(expand_labeled_set(labeled, unl, dup, 1), ContractError);
    const std::vector<PseudoLabel> missing{{99, 0, 0.99}};
    CHECK_THROWS_AS(expand_labeled_set(labeled, unl, missing, 1), ContractError);
    auto overlap = unl;
    overlap.push_back({1, "dup", keyed_image(0)});
    const std::vector<PseudoLabel> again{{1, 0, 0.99}};
    CHECK_THROWS_AS(expand_labeled_set(labeled, overlap, again, 1), ContractError);
  }
}

TEST_CASE("conservation over random expansions") {
  RngStream rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto labeled = labeled_of({0, 1, 2});
    auto unl = unlabeled_range(100, 40);
    const std::size_t total = labeled.size() + unl.size();
    for (int g = 1; g <= 3; ++g) {
      std::vector<PseudoLabel> sel;
      for (const auto& u : unl)
        if (rng.bernoulli(0.3)) sel.push_back({u.id, static_cast<int>(rng.uniform_index(3)), 0.96});
      const std::size_t before = labeled.size();
      auto e = expand_labeled_set(labeled, unl, sel, g);
      CHECK(e.labeled.size() == before + sel.size());
      CHECK(e.labeled.size() + e.unlabeled.size() == total);
      labeled = std::move(e.labeled);
      unl = std::move(e.unlabeled);
    }
  }
}

TEST_CASE("expansion with a uniform-precision oracle does not worsen the ratio") {
  // Candidates mirror the unlabeled pool (same shape as the labeled set) and are
  // all correct; selection uses the rates of the current labeled counts.
  RngStream rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const std::vector<std::size_t> lab{60, 20, 6};
    std::vector<int> classes;
    for (int c = 0; c < 3; ++c) classes.insert(classes.end(), lab[c], c);
    const auto labeled = labeled_of(classes);
    std::vector<PseudoLabel> cands;
    std::vector<UnlabeledExample> unl;
    std::size_t id = 1000;
    for (int c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < 5 * lab[c]; ++k) {
        unl.push_back({id, "", keyed_image(0)});
        cands.push_back({id++, c, 0.99});
      }
    const auto rates = sampling_rates(lab, 1.0 / 3.0);
    const auto sel = selected_only(select_for_promotion(cands, rates, rng));
    const auto e = expand_labeled_set(labeled, unl, sel, 1);
    CHECK(ClassDistribution::of(e.labeled, 3).imbalance_ratio() >= ClassDistribution{lab}.imbalance_ratio());
  }
}

TEST_CASE("harvest keeps confident predictions sorted by id") {
  const TablePredictor uniform(3, {Eigen::VectorXd::Constant(3, 1.0 / 3.0)});
  const auto unl = unlabeled_range(0, 20);
  CHECK(harvest_pseudo_labels(uniform, unl, 0.95).empty());

  std::vector<Eigen::VectorXd> table{one_hot(3, 0), one_hot(3, 1, 0.96), one_hot(3, 2, 0.9)};
  const TablePredictor oracle(3, table);
  std::vector<UnlabeledExample> mixed;
  for (std::size_t i = 0; i < 30; ++i) mixed.push_back({300 - i, "", keyed_image(static_cast<std::uint8_t>(i % 3))});
  const auto got = harvest_pseudo_labels(oracle, mixed, 0.95, 7);
  CHECK(got.size() == 20);
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].confidence >= 0.95);
    CHECK(got[i].class_id != 2);
    if (i) CHECK(got[i - 1].unlabeled_id < got[i].unlabeled_id);
  }
  const TablePredictor certain(3, {one_hot(3, 1)});
  CHECK(harvest_pseudo_labels(certain, unl, 0.95).size() == unl.size());
}

TEST_CASE("promotions file round-trip") {
  const auto dir = scratch_dir("crest_promotions");
  const std::vector<PromotionDecision> d{{{3, 1, 0.987654321}, true, 1.0}, {{9, 0, 0.95}, false, 0.4641588833612779}};
  write_promotions(dir / "promotions.tsv", d);
  const auto back = read_promotions(dir / "promotions.tsv");
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].candidate.unlabeled_id == d[i].candidate.unlabeled_id);
    CHECK(back[i].candidate.class_id == d[i].candidate.class_id);
    CHECK(back[i].candidate.confidence == d[i].candidate.confidence);
    CHECK(back[i].selected == d[i].selected);
    CHECK(back[i].mu == d[i].mu);
  }
  CHECK(generation_dir("/r", 4) == std::filesystem::path("/r/gen_4"));
  CHECK_THROWS_AS(load_generation(dir, 3), ConfigError);
}
