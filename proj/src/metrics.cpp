#include "rebalance_ssl/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "rebalance_ssl/errors.hpp"

namespace rssl {

ConfusionMatrix::ConfusionMatrix(Counts counts) : counts_(std::move(counts)) {
  if (counts_.rows() != counts_.cols()) throw ContractError("confusion matrix must be square");
  if ((counts_.array() < 0).any()) throw ContractError("confusion matrix counts must be nonnegative");
}

void ConfusionMatrix::add(int truth, int predicted) {
  const int L = num_classes();
  if (truth < 0 || truth >= L || predicted < 0 || predicted >= L)
    throw ContractError("confusion matrix index out of range");
  ++counts_(truth, predicted);
}

ConfusionMatrix evaluate(const Predictor& predictor, std::span<const LabeledExample> test, std::size_t batch_size) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  if (batch_size == 0) batch_size = 1;
  ConfusionMatrix cm(predictor.num_classes());
  for (std::size_t start = 0; start < test.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, test.size() - start);
    std::vector<const Image*> batch(n);
    for (std::size_t i = 0; i < n; ++i) batch[i] = &test[start + i].image;
    const ProbMatrix probs = predictor.predict(batch);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      const auto col = probs.col(static_cast<Eigen::Index>(i));
      for (Eigen::Index c = 1; c < col.size(); ++c)
        if (col(c) > col(best)) best = c;
      cm.add(test[start + i].class_id, static_cast<int>(best));
    }
  }
  return cm;
}

EvalReport summarize(const ConfusionMatrix& matrix) {
  if (matrix.total() < 1) throw ContractError("summarize: empty confusion matrix");
  const auto& m = matrix.counts();
  const int L = matrix.num_classes();
  EvalReport r;
  r.per_class_precision.assign(L, 0.0);
  r.per_class_recall.assign(L, 0.0);
  r.confusion.assign(L, std::vector<std::int64_t>(L, 0));
  for (int c = 0; c < L; ++c) {
    const auto col = m.col(c).sum();
    const auto row = m.row(c).sum();
    if (col > 0) r.per_class_precision[c] = static_cast<double>(m(c, c)) / static_cast<double>(col);
    if (row > 0) r.per_class_recall[c] = static_cast<double>(m(c, c)) / static_cast<double>(row);
    for (int p = 0; p < L; ++p) r.confusion[c][p] = m(c, p);
  }
  r.overall_accuracy = static_cast<double>(m.trace()) / static_cast<double>(matrix.total());
  double sum = 0.0;
  for (double v : r.per_class_recall) sum += v;
  r.balanced_accuracy = sum / L;
  return r;
}

std::string method_label(int generation) {
  if (generation <= 0) return "FixMatch with TA";
  const int mod100 = generation % 100;
  const char* suffix = "th";
  if (mod100 < 11 || mod100 > 13) {
    switch (generation % 10) {
      case 1: suffix = "st"; break;
      case 2: suffix = "nd"; break;
      case 3: suffix = "rd"; break;
      default: break;
    }
  }
  return "Proposed Method (" + std::to_string(generation) + suffix + " Gen)";
}

std::string to_json_text(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["generation"] = r.generation;
  j["seed"] = r.seed;
  j["overall_accuracy"] = r.overall_accuracy;
  j["balanced_accuracy"] = r.balanced_accuracy;
  j["per_class_precision"] = r.per_class_precision;
  j["per_class_recall"] = r.per_class_recall;
  j["labeled_imbalance_ratio"] = r.labeled_imbalance_ratio;
  j["labeled_counts"] = r.labeled_counts;
  j["confusion"] = r.confusion;
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.generation = j.at("generation").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
    r.per_class_precision = j.at("per_class_precision").get<std::vector<double>>();
    r.per_class_recall = j.at("per_class_recall").get<std::vector<double>>();
    r.labeled_imbalance_ratio = j.at("labeled_imbalance_ratio").get<double>();
    r.labeled_counts = j.at("labeled_counts").get<std::vector<std::size_t>>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed metrics: ") + e.what());
  }
  if (r.per_class_recall.size() != r.per_class_precision.size())
    throw ConfigError("malformed metrics: precision/recall length mismatch");
  return r;
}

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + file.string());
  os << text;
  if (!os) throw ConfigError("write failed: " + file.string());
}

std::string class_label(std::span<const std::string> names, std::size_t c) {
  return c < names.size() ? names[c] : "class " + std::to_string(c);
}

// Chart geometry shared by both chart kinds.
constexpr int kWidth = 640, kHeight = 400;
constexpr int kLeft = 60, kRight = 20, kTop = 40, kBottom = 70;
const cv::Scalar kInk(40, 40, 40), kGrid(215, 215, 215), kPrecision(180, 119, 31), kRecall(14, 127, 255);

int y_of(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return kTop + static_cast<int>(std::lround((1.0 - clamped) * (kHeight - kTop - kBottom)));
}

void put(cv::Mat& img, const std::string& text, cv::Point at, double scale = 0.4) {
  cv::putText(img, text, at, cv::FONT_HERSHEY_SIMPLEX, scale, kInk, 1, cv::LINE_8);
}

// White canvas with a unit y axis and tenth gridlines.
cv::Mat unit_axes(const std::string& title) {
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int t = 0; t <= 10; ++t) {
    const int y = y_of(t / 10.0);
    cv::line(img, {kLeft, y}, {kWidth - kRight, y}, kGrid, 1, cv::LINE_8);
    if (t % 2 == 0) put(img, fmt(t / 10.0, "%.1f"), {kLeft - 32, y + 4});
  }
  cv::line(img, {kLeft, y_of(0.0)}, {kWidth - kRight, y_of(0.0)}, kInk, 1, cv::LINE_8);
  cv::line(img, {kLeft, y_of(0.0)}, {kLeft, y_of(1.0)}, kInk, 1, cv::LINE_8);
  put(img, title, {kLeft, 24}, 0.5);
  return img;
}

void save_png(const std::filesystem::path& file, const cv::Mat& img) {
  if (!cv::imwrite(file.string(), img, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw ConfigError("cannot write chart " + file.string());
}

void precision_recall_chart(const EvalReport& r, std::span<const std::string> names,
                            const std::filesystem::path& file) {
  cv::Mat img = unit_axes("Precision & recall per class, " + method_label(r.generation));
  const int L = static_cast<int>(r.per_class_recall.size());
  const int span = kWidth - kLeft - kRight;
  const int slot = std::max(1, span / std::max(1, L));
  const int bar = std::max(1, slot * 3 / 10);
  for (int c = 0; c < L; ++c) {
    const int x0 = kLeft + c * slot + slot / 2 - bar;
    cv::rectangle(img, {x0, y_of(r.per_class_precision[c])}, {x0 + bar - 1, y_of(0.0)}, kPrecision, cv::FILLED);
    cv::rectangle(img, {x0 + bar, y_of(r.per_class_recall[c])}, {x0 + 2 * bar - 1, y_of(0.0)}, kRecall, cv::FILLED);
    std::string label = class_label(names, static_cast<std::size_t>(c));
    if (label.size() > 12) label.resize(12);
    put(img, label, {kLeft + c * slot + 2, y_of(0.0) + 16}, 0.35);
  }
  const int ly = kHeight - 24;
  cv::rectangle(img, {kLeft, ly - 9}, {kLeft + 10, ly}, kPrecision, cv::FILLED);
  put(img, "precision", {kLeft + 16, ly});
  cv::rectangle(img, {kLeft + 110, ly - 9}, {kLeft + 120, ly}, kRecall, cv::FILLED);
  put(img, "recall", {kLeft + 126, ly});
  save_png(file, img);
}

void trajectory_chart(std::span<const EvalReport> reports, const std::filesystem::path& file) {
  cv::Mat img = unit_axes("Labeled-set imbalance ratio (min/max) per generation");
  const int n = static_cast<int>(reports.size());
  const int span = kWidth - kLeft - kRight - 40;
  auto x_of = [&](int i) { return kLeft + 20 + (n > 1 ? i * span / (n - 1) : span / 2); };
  for (int i = 0; i < n; ++i) {
    const cv::Point p{x_of(i), y_of(reports[i].labeled_imbalance_ratio)};
    if (i > 0) cv::line(img, {x_of(i - 1), y_of(reports[i - 1].labeled_imbalance_ratio)}, p, kPrecision, 2, cv::LINE_8);
    cv::circle(img, p, 4, kRecall, cv::FILLED, cv::LINE_8);
    put(img, fmt(reports[i].labeled_imbalance_ratio, "%.3f"), {p.x - 14, p.y - 10}, 0.35);
    put(img, "gen " + std::to_string(reports[i].generation), {p.x - 16, y_of(0.0) + 16}, 0.35);
  }
  save_png(file, img);
}

}  // namespace

void write_metrics_tsv(const std::filesystem::path& file, const EvalReport& r,
                       std::span<const std::string> class_names) {
  std::ostringstream os;
  os << "class_id\tclass_name\tprecision\trecall\n";
  for (std::size_t c = 0; c < r.per_class_recall.size(); ++c)
    os << c << '\t' << class_label(class_names, c) << '\t' << fmt(r.per_class_precision[c]) << '\t'
       << fmt(r.per_class_recall[c]) << '\n';
  os << "overall_accuracy\t\t" << fmt(r.overall_accuracy) << "\t\n";
  os << "balanced_accuracy\t\t" << fmt(r.balanced_accuracy) << "\t\n";
  os << "labeled_imbalance_ratio\t\t" << fmt(r.labeled_imbalance_ratio) << "\t\n";
  write_text(file, os.str());
}

void render_reports(std::span<const EvalReport> reports, const std::filesystem::path& out_dir,
                    const ReportContext& context) {
  if (reports.empty()) throw ContractError("render_reports: no reports");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw ConfigError("cannot create report directory " + out_dir.string());

  std::vector<EvalReport> sorted(reports.begin(), reports.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const EvalReport& a, const EvalReport& b) { return a.generation < b.generation; });

  std::ostringstream table;
  table << "Method\t" << context.dataset << " accuracy (%)\tbalanced accuracy (%)\tlabeled imbalance ratio\tseed\n";
  for (const auto& r : sorted)
    table << method_label(r.generation) << '\t' << fmt(100.0 * r.overall_accuracy, "%.2f") << '\t'
          << fmt(100.0 * r.balanced_accuracy, "%.2f") << '\t' << fmt(r.labeled_imbalance_ratio, "%.4f") << '\t'
          << r.seed << '\n';
  write_text(out_dir / "results.tsv", table.str());

  std::ostringstream md;
  md << "# Results: " << context.dataset << "\n\n";
  md << "| Method | Accuracy (%) | Balanced accuracy (%) | Labeled imbalance ratio | Seed |\n";
  md << "|---|---|---|---|---|\n";
  for (const auto& r : sorted)
    md << "| " << method_label(r.generation) << " | " << fmt(100.0 * r.overall_accuracy, "%.2f") << " | "
       << fmt(100.0 * r.balanced_accuracy, "%.2f") << " | " << fmt(r.labeled_imbalance_ratio, "%.4f") << " | "
       << r.seed << " |\n";
  for (const auto& r : sorted) {
    const std::string chart = "pr_gen_" + std::to_string(r.generation) + ".png";
    precision_recall_chart(r, context.class_names, out_dir / chart);
    md << "\n## Generation " << r.generation << "\n\n";
    md << "| Class | Labeled count | Precision | Recall |\n|---|---|---|---|\n";
    for (std::size_t c = 0; c < r.per_class_recall.size(); ++c)
      md << "| " << class_label(context.class_names, c) << " | "
         << (c < r.labeled_counts.size() ? std::to_string(r.labeled_counts[c]) : "-") << " | "
         << fmt(r.per_class_precision[c], "%.4f") << " | " << fmt(r.per_class_recall[c], "%.4f") << " |\n";
    md << "\n![precision and recall](" << chart << ")\n";
  }
  trajectory_chart(sorted, out_dir / "imbalance_trajectory.png");
  md << "\n## Imbalance trajectory\n\n![imbalance ratio](imbalance_trajectory.png)\n";
  write_text(out_dir / "report.md", md.str());
}

}  // namespace rssl
