#include "rebalance_ssl/imgdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/parallel.hpp"
#include "rebalance_ssl/rng.hpp"

namespace fs = std::filesystem;

namespace rssl {

long round_half_up(double x) { return static_cast<long>(std::floor(x + 0.5)); }

bool is_image_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".tif" || ext == ".tiff";
}

std::vector<std::string> list_class_folders(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw ConfigError("dataset root is not a readable directory: " + root.string());
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root, ec))
    if (entry.is_directory()) names.push_back(entry.path().filename().string());
  if (ec) throw ConfigError("cannot list dataset root: " + root.string());
  std::sort(names.begin(), names.end());
  return names;
}

LabeledExample load_example(const fs::path& root, const std::string& relative_path,
                            std::size_t id, int class_id) {
  LabeledExample ex;
  ex.id = id;
  ex.path = relative_path;
  ex.class_id = class_id;
  ex.image = read_image(root / relative_path);
  return ex;
}

Dataset load_dataset(const fs::path& root) {
  Dataset data;
  data.class_names = list_class_folders(root);
  if (data.class_names.size() < 2)
    throw ConfigError("dataset root needs at least 2 class folders: " + root.string());

  struct Pending {
    std::string rel;
    int class_id;
  };
  std::vector<Pending> files;
  for (int c = 0; c < data.num_classes(); ++c) {
    std::vector<std::string> rels;
    for (const auto& entry : fs::recursive_directory_iterator(root / data.class_names[c])) {
      if (!entry.is_regular_file() || !is_image_extension(entry.path())) continue;
      rels.push_back(fs::relative(entry.path(), root).generic_string());
    }
    std::sort(rels.begin(), rels.end());
    for (auto& r : rels) files.push_back({std::move(r), c});
  }

  // Decode in parallel into fixed slots; ids are assigned afterwards in path order.
  std::vector<Image> decoded(files.size());
  std::vector<char> ok(files.size(), 0);
  parallel_for(files.size(), [&](std::size_t i) {
    try {
      decoded[i] = read_image(root / files[i].rel);
      ok[i] = 1;
    } catch (const std::exception&) {
      ok[i] = 0;
    }
  });

  std::vector<std::size_t> per_class(data.class_names.size(), 0);
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!ok[i]) {
      std::cerr << "warning: skipping undecodable file " << files[i].rel << "\n";
      continue;
    }
    LabeledExample ex;
    ex.id = data.examples.size();
    ex.path = files[i].rel;
    ex.class_id = files[i].class_id;
    ex.image = std::move(decoded[i]);
    data.examples.push_back(std::move(ex));
    ++per_class[files[i].class_id];
  }
  for (int c = 0; c < data.num_classes(); ++c)
    if (per_class[c] == 0)
      throw ConfigError("class folder has no decodable images: " + data.class_names[c]);
  return data;
}

std::vector<std::size_t> class_counts(std::span<const LabeledExample> examples, int num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& ex : examples) {
    if (ex.class_id < 0 || ex.class_id >= num_classes)
      throw ContractError("class_id out of range: " + std::to_string(ex.class_id));
    ++counts[ex.class_id];
  }
  return counts;
}

namespace {

/// Example indices grouped by class, each group in original order.
std::vector<std::vector<std::size_t>> group_by_class(const Dataset& data) {
  std::vector<std::vector<std::size_t>> groups(data.class_names.size());
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const int c = data.examples[i].class_id;
    if (c < 0 || c >= data.num_classes()) throw ContractError("class_id out of range");
    groups[c].push_back(i);
  }
  return groups;
}

/// Marks `take` members of each group chosen uniformly under the stream.
std::vector<char> choose_per_class(const std::vector<std::vector<std::size_t>>& groups,
                                   const std::vector<std::size_t>& take, std::size_t total,
                                   std::uint64_t seed, const char* tag) {
  std::vector<char> chosen(total, 0);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    std::vector<std::size_t> order = groups[c];
    auto rng = RngStream::derive({seed, tag_hash(tag), c});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t k = 0; k < take[c]; ++k) chosen[order[k]] = 1;
  }
  return chosen;
}

}  // namespace

TrainTest split_test(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ContractError("test_fraction must be in (0,1)");
  const auto groups = group_by_class(data);
  std::vector<std::size_t> take(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const std::size_t n = groups[c].size();
    if (n < 2)
      throw ContractError("class '" + data.class_names[c] +
                          "' has fewer than 2 examples; cannot stratify the test split");
    long t = round_half_up(static_cast<double>(n) * test_fraction);
    t = std::clamp<long>(t, 1, static_cast<long>(n) - 1);
    take[c] = static_cast<std::size_t>(t);
  }
  const auto is_test = choose_per_class(groups, take, data.examples.size(), seed, "split_test");

  TrainTest out;
  out.train.class_names = data.class_names;
  out.test.class_names = data.class_names;
  for (std::size_t i = 0; i < data.examples.size(); ++i)
    (is_test[i] ? out.test : out.train).examples.push_back(data.examples[i]);
  return out;
}

std::vector<std::size_t> imbalance_targets(std::size_t n_max, int num_classes, double gamma,
                                           ImbalanceProfile profile) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("imbalance gamma must be in (0,1]");
  if (num_classes < 2) throw ContractError("need at least 2 classes");
  std::vector<std::size_t> targets(num_classes);
  const double denom = static_cast<double>(num_classes - 1);
  for (int pos = 0; pos < num_classes; ++pos) {
    const double t = static_cast<double>(pos) / denom;
    const double scale =
        profile == ImbalanceProfile::Exponential ? std::pow(gamma, t) : 1.0 - (1.0 - gamma) * t;
    targets[pos] = static_cast<std::size_t>(
        std::max<long>(1, round_half_up(static_cast<double>(n_max) * scale)));
  }
  return targets;
}

Dataset make_imbalanced(const Dataset& train, const ImbalanceSpec& spec) {
  const int num_classes = train.num_classes();
  const auto groups = group_by_class(train);

  std::vector<std::size_t> order(num_classes);
  std::iota(order.begin(), order.end(), 0);
  auto perm_rng = RngStream::derive({spec.seed, tag_hash("imbalance_order")});
  perm_rng.shuffle(std::span<std::size_t>(order));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return groups[a].size() > groups[b].size();
  });

  const std::size_t n_max = groups[order.front()].size();
  const auto targets = imbalance_targets(n_max, num_classes, spec.gamma, spec.profile);
  std::vector<std::size_t> keep(num_classes);
  for (int pos = 0; pos < num_classes; ++pos) {
    const std::size_t c = order[pos];
    keep[c] = std::min(groups[c].size(), targets[pos]);
  }
  const auto kept = choose_per_class(groups, keep, train.examples.size(), spec.seed, "imbalance_drop");

  Dataset out;
  out.class_names = train.class_names;
  for (std::size_t i = 0; i < train.examples.size(); ++i)
    if (kept[i]) out.examples.push_back(train.examples[i]);
  return out;
}

LabeledUnlabeled split_labeled_unlabeled(const Dataset& train, double labeled_fraction,
                                         std::uint64_t seed) {
  if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0))
    throw ContractError("labeled fraction must be in (0,1)");
  const auto groups = group_by_class(train);
  std::vector<std::size_t> take(groups.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const long t = round_half_up(static_cast<double>(groups[c].size()) * labeled_fraction);
    if (t < 1)
      throw ContractError("labeled fraction leaves class '" + train.class_names[c] +
                          "' with no labeled examples");
    take[c] = static_cast<std::size_t>(t);
  }
  const auto is_labeled = choose_per_class(groups, take, train.examples.size(), seed, "split_labeled");

  LabeledUnlabeled out;
  for (std::size_t i = 0; i < train.examples.size(); ++i) {
    const auto& ex = train.examples[i];
    if (is_labeled[i]) {
      out.labeled.push_back(ex);
    } else {
      out.unlabeled.push_back({ex.id, ex.path, ex.image});
      out.hidden_truth[ex.id] = ex.class_id;
    }
  }
  return out;
}

void ChannelAccumulator::add(const Image& img) {
  std::array<std::uint64_t, 3> s{0, 0, 0};
  std::array<std::uint64_t, 3> s2{0, 0, 0};
  for (std::size_t p = 0; p < img.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) {
      const std::uint64_t v = img.pixels[p * 3 + c];
      s[c] += v;
      s2[c] += v * v;
    }
  for (int c = 0; c < 3; ++c) {
    sum_[c] += static_cast<double>(s[c]) / 255.0;
    sum_sq_[c] += static_cast<double>(s2[c]) / (255.0 * 255.0);
  }
  count_ += img.pixel_count();
}

ChannelStats ChannelAccumulator::result() const {
  if (count_ == 0) throw ContractError("channel_stats needs at least one pixel");
  ChannelStats st;
  const double n = static_cast<double>(count_);
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = sum_[c] / n;
    const double var = std::max(0.0, sum_sq_[c] / n - st.mean[c] * st.mean[c]);
    st.stddev[c] = std::max(kStdFloor, std::sqrt(var));
  }
  return st;
}

ChannelStats channel_stats(std::span<const Image> images) {
  ChannelAccumulator acc;
  for (const auto& img : images) acc.add(img);
  return acc.result();
}

std::string role_name(Role r) {
  switch (r) {
    case Role::Labeled: return "labeled";
    case Role::Unlabeled: return "unlabeled";
    case Role::Test: return "test";
  }
  return "labeled";
}

Role parse_role(const std::string& s) {
  if (s == "labeled") return Role::Labeled;
  if (s == "unlabeled") return Role::Unlabeled;
  if (s == "test") return Role::Test;
  throw ConfigError("unknown manifest role: " + s);
}

std::vector<ManifestEntry> manifest_entries(const DatasetSplit& split) {
  std::vector<std::pair<std::size_t, ManifestEntry>> rows;
  for (const auto& ex : split.labeled) rows.push_back({ex.id, {ex.path, Role::Labeled, ex.class_id}});
  for (const auto& ex : split.unlabeled) {
    auto it = split.hidden_truth.find(ex.id);
    const int truth = it == split.hidden_truth.end() ? -1 : it->second;
    rows.push_back({ex.id, {ex.path, Role::Unlabeled, truth}});
  }
  for (const auto& ex : split.test) rows.push_back({ex.id, {ex.path, Role::Test, ex.class_id}});
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].first == rows[i - 1].first)
      throw ContractError("example id appears in more than one role: " + std::to_string(rows[i].first));
  std::vector<ManifestEntry> out;
  out.reserve(rows.size());
  for (auto& r : rows) out.push_back(std::move(r.second));
  return out;
}

void write_manifest(const fs::path& file, std::span<const ManifestEntry> entries) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write manifest: " + file.string());
  for (const auto& e : entries) os << e.path << '\t' << role_name(e.role) << '\t' << e.class_id << '\n';
  if (!os) throw ConfigError("write failed: " + file.string());
}

std::vector<ManifestEntry> read_manifest(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("cannot read manifest: " + file.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string path, role, cls;
    if (!std::getline(row, path, '\t') || !std::getline(row, role, '\t') || !std::getline(row, cls))
      throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": malformed manifest line");
    out.push_back({path, parse_role(role), std::stoi(cls)});
  }
  return out;
}

DatasetSplit split_from_manifest(const fs::path& root, std::span<const ManifestEntry> entries,
                                 std::vector<std::string> class_names, int input_size) {
  DatasetSplit split;
  split.class_names = std::move(class_names);
  const int num_classes = split.num_classes();

  std::vector<Image> images(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    Image img = read_image(root / entries[i].path);
    images[i] = input_size > 0 ? resize_image(img, input_size, input_size) : std::move(img);
  });

  for (std::size_t id = 0; id < entries.size(); ++id) {
    const auto& e = entries[id];
    if (e.class_id < (e.role == Role::Unlabeled ? -1 : 0) || e.class_id >= num_classes)
      throw ConfigError("manifest class id out of range for " + e.path);
    switch (e.role) {
      case Role::Labeled:
        split.labeled.push_back({id, e.path, std::move(images[id]), e.class_id, Provenance::original()});
        break;
      case Role::Unlabeled:
        split.unlabeled.push_back({id, e.path, std::move(images[id])});
        if (e.class_id >= 0) split.hidden_truth[id] = e.class_id;
        break;
      case Role::Test:
        split.test.push_back({id, e.path, std::move(images[id]), e.class_id, Provenance::original()});
        break;
    }
  }
  return split;
}

}  // namespace rssl
