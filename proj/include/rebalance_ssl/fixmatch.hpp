#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rebalance_ssl/augment.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/model.hpp"

namespace rssl {

struct TrainConfig {
  double tau = 0.95;
  int batch_size = 16;      // labeled examples per step
  int unlabeled_ratio = 7;  // unlabeled batch = ratio * batch_size
  double lambda_u = 1.0;
  int epochs = 512;
  int iterations_per_epoch = 1024;
  int checkpoint_interval = 0;  // steps between checkpoints; 0 = generation end only
  bool warm_start = false;      // start a generation from the previous weights
};

void validate(const TrainConfig& config);
long total_steps(const TrainConfig& config);

struct PseudoLabelCore {
  int class_id = 0;
  double confidence = 0.0;
};

struct PseudoLabel {
  std::size_t unlabeled_id = 0;
  int class_id = 0;
  double confidence = 0.0;
};

/// Hard pseudo-label from one probability column: the argmax (lowest index
/// on ties) and its probability, if that probability reaches tau.
template <typename Derived>
std::optional<PseudoLabelCore> pseudo_label(const Eigen::MatrixBase<Derived>& probs, double tau) {
  if (probs.size() == 0) return std::nullopt;
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = i;
  const double conf = static_cast<double>(probs(best));
  if (conf < tau) return std::nullopt;
  return PseudoLabelCore{static_cast<int>(best), conf};
}

namespace detail {

/// log-softmax of one column, in double.
template <typename Derived>
Eigen::VectorXd log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::VectorXd z = logits.template cast<double>();
  const double mx = z.maxCoeff();
  z.array() -= mx;
  z.array() -= std::log(z.array().exp().sum());
  return z;
}

}  // namespace detail

/// Mean cross-entropy -(1/B) sum ln p_true over logits columns. If `grad` is
/// given it receives d(loss)/d(logits).
template <typename Derived, typename GradMat = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
double supervised_loss(const Eigen::MatrixBase<Derived>& logits, std::span<const int> labels,
                       GradMat* grad = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index batch = logits.cols();
  if (static_cast<std::size_t>(batch) != labels.size()) throw ContractError("supervised_loss: batch/label size mismatch");
  if (batch == 0) throw ContractError("supervised_loss: empty batch");
  if (grad) grad->setZero(logits.rows(), batch);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= logits.rows()) throw ContractError("supervised_loss: label out of range");
    const Eigen::VectorXd logp = detail::log_softmax(logits.col(b));
    loss -= logp(y);
    if (grad) {
      Eigen::VectorXd g = logp.array().exp();
      g(y) -= 1.0;
      grad->col(b) = (g / static_cast<double>(batch)).template cast<Scalar>();
    }
  }
  return loss / static_cast<double>(batch);
}

struct UnsupervisedLoss {
  double value = 0.0;
  double mask_fraction = 0.0;
};

/// Consistency loss: cross-entropy between the hard pseudo-label of each weak
/// view (kept only if its confidence reaches tau) and the strong-view
/// prediction, averaged over the whole batch. Weak probabilities are constants;
/// `grad_strong` receives d(loss)/d(strong_logits).
template <typename DerivedW, typename DerivedS,
          typename GradMat = Eigen::Matrix<typename DerivedS::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
UnsupervisedLoss unsupervised_loss(const Eigen::MatrixBase<DerivedW>& weak_probs,
                                   const Eigen::MatrixBase<DerivedS>& strong_logits, double tau,
                                   GradMat* grad_strong = nullptr) {
  using Scalar = typename DerivedS::Scalar;
  const Eigen::Index batch = strong_logits.cols();
  if (weak_probs.cols() != batch || weak_probs.rows() != strong_logits.rows())
    throw ContractError("unsupervised_loss: weak/strong batches are not aligned");
  if (grad_strong) grad_strong->setZero(strong_logits.rows(), batch);
  UnsupervisedLoss out;
  if (batch == 0) return out;
  Eigen::Index kept = 0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto target = pseudo_label(weak_probs.col(b), tau);
    if (!target) continue;
    ++kept;
    const Eigen::VectorXd logp = detail::log_softmax(strong_logits.col(b));
    out.value -= logp(target->class_id);
    if (grad_strong) {
      Eigen::VectorXd g = logp.array().exp();
      g(target->class_id) -= 1.0;
      grad_strong->col(b) = (g / static_cast<double>(batch)).template cast<Scalar>();
    }
  }
  out.value /= static_cast<double>(batch);
  out.mask_fraction = static_cast<double>(kept) / static_cast<double>(batch);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct AugmentPolicies {
  WeakPolicy weak;
  StrongPolicy strong;
};

struct ModelSpec {
  Arch arch = Arch::SmallCNN;
  int num_classes = 2;
  int input_size = 32;
};

struct TraceRow {
  long step = 0;
  double sup_loss = 0.0;
  double unsup_loss = 0.0;
  double mask_fraction = 0.0;
  double lr = 0.0;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct TrainTrace {
  std::vector<TraceRow> rows;

  /// `step,sup_loss,unsup_loss,mask_fraction,lr` with a header line.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& file) const;
};

struct TrainHooks {
  std::filesystem::path checkpoint_path;  // empty: no periodic checkpoints
  std::uint64_t config_hash = 0;
  std::function<void(const TraceRow&)> on_step;
  const Classifier<float>* warm_start_from = nullptr;
};

struct TrainResult {
  Classifier<float> model;  // evaluation weights (the average when EMA is on)
  SgdOptimizer<float> optimizer;
  TrainTrace trace;
  /// Latest pseudo-label decision per unlabeled id seen during training.
  std::map<std::size_t, PseudoLabelCore> last_masks;
};

/// Draws batches of indices from shuffled passes over [0, n), reshuffling
/// whenever a pass is exhausted (so small sets repeat within a batch).
class EpochSampler {
 public:
  EpochSampler(std::size_t n, RngStream rng);
  std::vector<std::size_t> next(std::size_t count);

 private:
  void reshuffle();
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  RngStream rng_;
};

/// Trains one model from scratch (or from hooks.warm_start_from) with the
/// supervised + thresholded consistency objective.
TrainResult train_generation(std::span<const LabeledExample> labeled, std::span<const UnlabeledExample> unlabeled,
                             const TrainConfig& train, const OptimizerConfig& optim, const AugmentPolicies& policies,
                             const ModelSpec& spec, const ChannelStats& stats, std::uint64_t seed,
                             const TrainHooks& hooks = {});

}  // namespace rssl
