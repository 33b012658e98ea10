#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "doctest.h"
#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/synthetic.hpp"
#include "support.hpp"

using namespace rssl;
using rssl::testing::constant_image;
using rssl::testing::scratch_dir;

namespace {

Dataset balanced(int classes, int per_class, int size = 8) {
  Dataset d;
  for (int c = 0; c < classes; ++c) {
    d.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < per_class; ++i)
      d.examples.push_back({d.examples.size(), "c" + std::to_string(c) + "/" + std::to_string(i) + ".png",
                            constant_image(size, size, static_cast<std::uint8_t>(c)), c, Provenance::original()});
  }
  return d;
}

std::vector<std::size_t> sorted_desc(std::vector<std::size_t> v) {
  std::sort(v.rbegin(), v.rend());
  return v;
}

}  // namespace

TEST_CASE("round_half_up") {
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(2.4999) == 2);
  CHECK(round_half_up(31.6227) == 32);
  CHECK(round_half_up(0.5) == 1);
}

TEST_CASE("imbalance targets for three classes of 100") {
  const auto t = imbalance_targets(100, 3, 0.1, ImbalanceProfile::Exponential);
  CHECK(t == std::vector<std::size_t>{100, 32, 10});
  const auto lin = imbalance_targets(100, 3, 0.1, ImbalanceProfile::Linear);
  CHECK(lin == std::vector<std::size_t>{100, 55, 10});
}

TEST_CASE("make_imbalanced yields the long-tail profile and keeps ids") {
  const Dataset d = balanced(3, 100);
  const Dataset imb = make_imbalanced(d, {0.1, ImbalanceProfile::Exponential, 4});
  const auto counts = class_counts(imb.examples, 3);
  CHECK(sorted_desc(counts) == std::vector<std::size_t>{100, 32, 10});
  std::set<std::size_t> ids;
  for (const auto& ex : imb.examples) {
    CHECK(ex.class_id == d.examples[ex.id].class_id);
    ids.insert(ex.id);
  }
  CHECK(ids.size() == imb.examples.size());
}

TEST_CASE("make_imbalanced is deterministic and seed-dependent in class order") {
  const Dataset d = balanced(5, 20);
  const auto a = class_counts(make_imbalanced(d, {0.1, ImbalanceProfile::Exponential, 1}).examples, 5);
  const auto b = class_counts(make_imbalanced(d, {0.1, ImbalanceProfile::Exponential, 1}).examples, 5);
  CHECK(a == b);
  bool differs = false;
  for (std::uint64_t s = 2; s < 12 && !differs; ++s)
    differs = class_counts(make_imbalanced(d, {0.1, ImbalanceProfile::Exponential, s}).examples, 5) != a;
  CHECK(differs);
}

TEST_CASE("split_test is stratified with at least one test example per class") {
  const Dataset d = balanced(3, 10);
  const TrainTest tt = split_test(d, 0.1, 3);
  CHECK(class_counts(tt.test.examples, 3) == std::vector<std::size_t>{1, 1, 1});
  CHECK(class_counts(tt.train.examples, 3) == std::vector<std::size_t>{9, 9, 9});
  const TrainTest tiny = split_test(balanced(2, 2), 0.01, 3);
  CHECK(class_counts(tiny.test.examples, 2) == std::vector<std::size_t>{1, 1});
  const TrainTest most = split_test(balanced(2, 4), 0.99, 3);
  CHECK(class_counts(most.train.examples, 2) == std::vector<std::size_t>{1, 1});
}

TEST_CASE("labeled split partitions the training set and records truth") {
  const Dataset d = make_imbalanced(balanced(3, 100), {0.1, ImbalanceProfile::Exponential, 2});
  const LabeledUnlabeled lu = split_labeled_unlabeled(d, 0.1, 8);
  CHECK(sorted_desc(class_counts(lu.labeled, 3)) == std::vector<std::size_t>{10, 3, 1});
  CHECK(lu.labeled.size() + lu.unlabeled.size() == d.examples.size());
  CHECK(lu.hidden_truth.size() == lu.unlabeled.size());
  std::map<std::size_t, int> truth;
  for (const auto& ex : d.examples) truth[ex.id] = ex.class_id;
  std::set<std::size_t> ids;
  for (const auto& ex : lu.labeled) ids.insert(ex.id);
  for (const auto& ex : lu.unlabeled) {
    CHECK(ids.insert(ex.id).second);
    CHECK(lu.hidden_truth.at(ex.id) == truth.at(ex.id));
  }
}

TEST_CASE("channel stats of constant and two-level images") {
  std::vector<Image> imgs{constant_image(4, 4, 0), constant_image(4, 4, 255)};
  const ChannelStats s = channel_stats(imgs);
  for (int c = 0; c < 3; ++c) {
    CHECK(s.mean[c] == doctest::Approx(0.5));
    CHECK(s.stddev[c] == doctest::Approx(0.5));
  }
  std::vector<Image> flat{constant_image(4, 4, 51)};
  const ChannelStats f = channel_stats(flat);
  CHECK(f.mean[0] == doctest::Approx(0.2));
  CHECK(f.stddev[0] == kStdFloor);
}

TEST_CASE("manifest round-trip and reload from disk") {
  const auto root = scratch_dir("imgdata_manifest");
  SyntheticSpec spec;
  spec.total_images = 30;
  spec.image_size = 16;
  write_synthetic_dataset(spec, root);
  const Dataset d = load_dataset(root);
  CHECK(d.num_classes() == 3);
  CHECK(d.examples.size() == 30);
  CHECK(d.class_names[0] == "class_00");

  const TrainTest tt = split_test(d, 0.2, 1);
  const LabeledUnlabeled lu = split_labeled_unlabeled(tt.train, 0.25, 1);
  DatasetSplit split{d.class_names, lu.labeled, lu.unlabeled, tt.test.examples, lu.hidden_truth};
  const auto entries = manifest_entries(split);
  CHECK(entries.size() == 30);
  write_manifest(root / "m.tsv", entries);
  CHECK(read_manifest(root / "m.tsv") == entries);

  const DatasetSplit back = split_from_manifest(root, entries, d.class_names, 8);
  CHECK(back.labeled.size() == split.labeled.size());
  CHECK(back.unlabeled.size() == split.unlabeled.size());
  CHECK(back.test.size() == split.test.size());
  CHECK(back.labeled.front().image.width == 8);
  for (const auto& ex : back.unlabeled) CHECK(back.hidden_truth.count(ex.id) == 1);
}

TEST_CASE("dataset loading errors") {
  CHECK_THROWS_AS(load_dataset("/nonexistent/rssl/root"), ConfigError);
  const auto root = scratch_dir("imgdata_one_class");
  std::filesystem::create_directories(root / "only");
  CHECK_THROWS_AS(load_dataset(root), ConfigError);
}

TEST_CASE("undecodable files are skipped") {
  const auto root = scratch_dir("imgdata_bad_file");
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.total_images = 6;
  spec.image_size = 8;
  write_synthetic_dataset(spec, root);
  std::ofstream(root / "class_00" / "broken.png") << "not an image";
  const Dataset d = load_dataset(root);
  CHECK(d.examples.size() == 6);
}
