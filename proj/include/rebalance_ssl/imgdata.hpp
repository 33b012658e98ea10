#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rebalance_ssl/image.hpp"

namespace rssl {

/// Where a labeled example's label came from.
struct Provenance {
  enum class Kind { Original, Pseudo };

  Kind kind = Kind::Original;
  int generation = 0;       // Pseudo only, >= 1 is not enforced: generation that promoted it
  double confidence = 1.0;  // Pseudo only

  static Provenance original() { return {}; }
  static Provenance pseudo(int generation, double confidence) {
    return {Kind::Pseudo, generation, confidence};
  }
  bool is_pseudo() const { return kind == Kind::Pseudo; }
};

struct LabeledExample {
  std::size_t id = 0;
  std::string path;  // relative to the dataset root
  Image image;
  int class_id = 0;
  Provenance provenance;
};

/// Unlabeled examples carry no label. Ground truth, when known, lives in a
/// separate table that training code never receives.
struct UnlabeledExample {
  std::size_t id = 0;
  std::string path;
  Image image;
};

/// A folder dataset, fully labeled.
struct Dataset {
  std::vector<std::string> class_names;
  std::vector<LabeledExample> examples;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct DatasetSplit {
  std::vector<std::string> class_names;
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<LabeledExample> test;
  std::map<std::size_t, int> hidden_truth;  // unlabeled id -> true class

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

enum class ImbalanceProfile { Exponential, Linear };

struct ImbalanceSpec {
  double gamma = 0.1;  // min-class count / max-class count
  ImbalanceProfile profile = ImbalanceProfile::Exponential;
  std::uint64_t seed = 0;
};

struct ChannelStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

/// Round-half-up used for all per-class targets.
long round_half_up(double x);

/// Image extensions accepted by load_dataset (lowercase, with dot).
bool is_image_extension(const std::filesystem::path& p);

/// Load `<root>/<class>/<image>`. Classes get ids in lexicographic folder
/// order; example ids follow (class, relative path) order. Undecodable files
/// are skipped with a warning on stderr.
Dataset load_dataset(const std::filesystem::path& root);

/// Load the listed relative paths only (class ids supplied by the caller).
LabeledExample load_example(const std::filesystem::path& root, const std::string& relative_path,
                            std::size_t id, int class_id);

std::vector<std::size_t> class_counts(std::span<const LabeledExample> examples, int num_classes);

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// Stratified test split; per class round(count * fraction) test examples,
/// at least one and at most count - 1.
TrainTest split_test(const Dataset& data, double test_fraction, std::uint64_t seed);

/// Per-class targets for the long-tail profile, for classes in descending order.
std::vector<std::size_t> imbalance_targets(std::size_t n_max, int num_classes, double gamma,
                                           ImbalanceProfile profile);

/// Subsample classes into a long-tail profile. Which classes become minority
/// is decided by a seeded permutation (among equal counts).
Dataset make_imbalanced(const Dataset& train, const ImbalanceSpec& spec);

struct LabeledUnlabeled {
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::map<std::size_t, int> hidden_truth;
};

/// Stratified labeled/unlabeled split with round(count * fraction) labeled.
LabeledUnlabeled split_labeled_unlabeled(const Dataset& train, double labeled_fraction,
                                         std::uint64_t seed);

/// Streaming per-channel statistics over [0,1]-scaled intensities.
class ChannelAccumulator {
 public:
  void add(const Image& img);
  ChannelStats result() const;
  std::uint64_t pixels() const { return count_; }

 private:
  std::array<double, 3> sum_{0.0, 0.0, 0.0};
  std::array<double, 3> sum_sq_{0.0, 0.0, 0.0};
  std::uint64_t count_ = 0;
};

inline constexpr double kStdFloor = 1e-6;

/// Population mean/std per channel, std floored at kStdFloor.
ChannelStats channel_stats(std::span<const Image> images);

// ---------------------------------------------------------------------------
// Split manifests: one line per example, `relative_path<TAB>role<TAB>class_id`.

enum class Role { Labeled, Unlabeled, Test };

struct ManifestEntry {
  std::string path;
  Role role = Role::Labeled;
  int class_id = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

std::string role_name(Role r);
Role parse_role(const std::string& s);

/// Entries in example-id order.
std::vector<ManifestEntry> manifest_entries(const DatasetSplit& split);
void write_manifest(const std::filesystem::path& file, std::span<const ManifestEntry> entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& file);

/// Rebuild a split from a manifest; example ids are manifest line indices.
DatasetSplit split_from_manifest(const std::filesystem::path& root,
                                 std::span<const ManifestEntry> entries,
                                 std::vector<std::string> class_names, int input_size);

/// Class names in lexicographic folder order under root.
std::vector<std::string> list_class_folders(const std::filesystem::path& root);

}  // namespace rssl
