#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/model.hpp"

namespace rssl {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(int num_classes) : counts_(Counts::Zero(num_classes, num_classes)) {}
  explicit ConfusionMatrix(Counts counts);

  void add(int truth, int predicted);
  int num_classes() const { return static_cast<int>(counts_.rows()); }
  std::int64_t total() const { return counts_.sum(); }
  std::int64_t operator()(int truth, int predicted) const { return counts_(truth, predicted); }
  const Counts& counts() const { return counts_; }

 private:
  Counts counts_;
};

struct EvalReport {
  int generation = 0;
  std::uint64_t seed = 0;
  double overall_accuracy = 0.0;
  double balanced_accuracy = 0.0;  // mean per-class recall
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
  double labeled_imbalance_ratio = 0.0;  // of the set this generation trained on
  std::vector<std::size_t> labeled_counts;
  std::vector<std::vector<std::int64_t>> confusion;  // row-major copy for persistence
};

/// Argmax prediction per test example (lowest index on ties).
ConfusionMatrix evaluate(const Predictor& predictor, std::span<const LabeledExample> test,
                         std::size_t batch_size = 256);

/// Precision is 0 for classes never predicted; recall is 0 for absent classes.
EvalReport summarize(const ConfusionMatrix& matrix);

/// Table row label for a generation: the baseline, then "(1st Gen)", "(2nd Gen)", ...
std::string method_label(int generation);

std::string to_json_text(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);

/// Per-class precision/recall table for one generation.
void write_metrics_tsv(const std::filesystem::path& file, const EvalReport& report,
                       std::span<const std::string> class_names);

struct ReportContext {
  std::string dataset = "custom";
  std::vector<std::string> class_names;
};

/// Writes results.tsv (accuracy per generation), pr_gen_<k>.png (per-class
/// precision/recall bars), imbalance_trajectory.png, and report.md.
void render_reports(std::span<const EvalReport> reports, const std::filesystem::path& out_dir,
                    const ReportContext& context);

}  // namespace rssl
