#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/image.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/nn/layers.hpp"
#include "rebalance_ssl/rng.hpp"

namespace rssl {

enum class Arch { WideResNet28_2, SmallCNN };

std::string arch_name(Arch arch);  // "wrn28-2" / "small"
Arch parse_arch(const std::string& name);

/// Scores are column-per-example: rows = classes.
using ProbMatrix = Eigen::MatrixXd;

/// A sequential image classifier over normalized RGB input.
template <typename Scalar>
class Classifier {
 public:
  Classifier(Arch arch, int num_classes, int input_size, std::uint64_t seed);

  Classifier(const Classifier& other)
      : arch_(other.arch_), num_classes_(other.num_classes_), input_size_(other.input_size_) {
    for (const auto& layer : other.layers_) layers_.push_back(layer->clone());
    name_parameters();
  }
  Classifier& operator=(const Classifier& other) {
    if (this != &other) {
      Classifier tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;

  /// Training-mode forward; caches activations for backward. Returns L x N logits.
  nn::Mat<Scalar> forward(const nn::Activation<Scalar>& x) {
    nn::Activation<Scalar> h = x;
    for (auto& layer : layers_) h = layer->forward(h);
    return std::move(h.data);
  }

  /// Evaluation-mode forward; safe to share across threads.
  nn::Mat<Scalar> infer(const nn::Activation<Scalar>& x) const {
    nn::Activation<Scalar> h = x;
    for (const auto& layer : layers_) h = layer->infer(h);
    return std::move(h.data);
  }

  /// Accumulates gradients of a scalar loss given d(loss)/d(logits).
  void backward(const nn::Mat<Scalar>& dlogits) {
    nn::Activation<Scalar> g;
    g.data = dlogits;
    g.batch = static_cast<int>(dlogits.cols());
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  }

  void zero_grad() {
    for (auto* p : parameters()) p->grad.setZero();
  }

  std::vector<nn::Parameter<Scalar>*> parameters() {
    std::vector<nn::Parameter<Scalar>*> out;
    for (auto& layer : layers_) layer->collect_parameters(out);
    return out;
  }
  std::vector<const nn::Parameter<Scalar>*> parameters() const {
    auto mutable_params = const_cast<Classifier*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
  }
  std::vector<nn::Buffer<Scalar>> buffers() {
    std::vector<nn::Buffer<Scalar>> out;
    for (auto& layer : layers_) layer->collect_buffers(out);
    return out;
  }
  std::vector<nn::Buffer<Scalar>> buffers() const { return const_cast<Classifier*>(this)->buffers(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  Arch arch() const { return arch_; }
  int num_classes() const { return num_classes_; }
  int input_size() const { return input_size_; }

 private:
  void name_parameters() {
    auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::string& n = params[i]->name;
      const auto dot = n.find('#');
      n = (dot == std::string::npos ? n : n.substr(dot + 1));
      n = std::to_string(i) + "#" + n;
    }
  }

  Arch arch_;
  int num_classes_;
  int input_size_;
  std::vector<std::unique_ptr<nn::Layer<Scalar>>> layers_;
};

template <typename Scalar>
Classifier<Scalar>::Classifier(Arch arch, int num_classes, int input_size, std::uint64_t seed)
    : arch_(arch), num_classes_(num_classes), input_size_(input_size) {
  if (num_classes < 2) throw ContractError("classifier needs at least 2 classes");
  if (input_size < 8 || input_size % 4 != 0)
    throw ContractError("unsupported input size " + std::to_string(input_size) +
                        " (must be a multiple of 4, at least 8)");
  auto rng = RngStream::derive({seed, tag_hash("init")});
  using namespace nn;
  switch (arch) {
    case Arch::SmallCNN:
      // Smooth activations and strided convolutions instead of pooling: no
      // kinks, so the loss is differentiable at every parameter value.
      layers_.push_back(std::make_unique<Conv2d<Scalar>>(3, 16, 3, 1, 1, true, rng));
      layers_.push_back(std::make_unique<SiLU<Scalar>>());
      layers_.push_back(std::make_unique<Conv2d<Scalar>>(16, 32, 3, 2, 1, true, rng));
      layers_.push_back(std::make_unique<SiLU<Scalar>>());
      layers_.push_back(std::make_unique<Conv2d<Scalar>>(32, 32, 3, 2, 1, true, rng));
      layers_.push_back(std::make_unique<SiLU<Scalar>>());
      layers_.push_back(std::make_unique<GlobalAvgPool<Scalar>>());
      layers_.push_back(std::make_unique<Linear<Scalar>>(32, num_classes, rng));
      break;
    case Arch::WideResNet28_2: {
      // depth 28 => (28 - 4) / 6 = 4 blocks per group; widen factor 2.
      constexpr int kBlocks = 4;
      constexpr double kSlope = 0.1;
      const int widths[] = {16, 32, 64, 128};
      layers_.push_back(std::make_unique<Conv2d<Scalar>>(3, widths[0], 3, 1, 1, false, rng));
      for (int group = 0; group < 3; ++group)
        for (int b = 0; b < kBlocks; ++b) {
          const int in = b == 0 ? widths[group] : widths[group + 1];
          const int stride = (b == 0 && group > 0) ? 2 : 1;
          layers_.push_back(std::make_unique<WideBasicBlock<Scalar>>(in, widths[group + 1], stride, kSlope, rng));
        }
      layers_.push_back(std::make_unique<BatchNorm2d<Scalar>>(widths[3], 0.001));
      layers_.push_back(std::make_unique<LeakyReLU<Scalar>>(kSlope));
      layers_.push_back(std::make_unique<GlobalAvgPool<Scalar>>());
      layers_.push_back(std::make_unique<Linear<Scalar>>(widths[3], num_classes, rng));
      break;
    }
  }
  name_parameters();
}

template <typename Scalar>
Classifier<Scalar> build_classifier(Arch arch, int num_classes, int input_size, std::uint64_t seed) {
  return Classifier<Scalar>(arch, num_classes, input_size, seed);
}

/// Packs images into a normalized input batch: (v / 255 - mean) / std.
template <typename Scalar>
nn::Activation<Scalar> to_input(std::span<const Image* const> images, const ChannelStats& stats,
                                int input_size) {
  nn::Activation<Scalar> x(3, static_cast<int>(images.size()), input_size, input_size);
  const Eigen::Index plane = x.plane();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.width != input_size || img.height != input_size)
      throw ContractError("image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          ", classifier expects " + std::to_string(input_size));
    for (int c = 0; c < 3; ++c) {
      Scalar* dst = x.data.row(c).data() + static_cast<Eigen::Index>(n) * plane;
      const double scale = 1.0 / (255.0 * stats.stddev[c]);
      const double shift = stats.mean[c] / stats.stddev[c];
      for (Eigen::Index p = 0; p < plane; ++p)
        dst[p] = static_cast<Scalar>(img.pixels[static_cast<std::size_t>(p) * 3 + c] * scale - shift);
    }
  }
  return x;
}

/// Column-wise softmax, computed in double.
template <typename Derived>
ProbMatrix softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  ProbMatrix p = logits.template cast<double>();
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    p.col(j).array() -= p.col(j).maxCoeff();
    p.col(j) = p.col(j).array().exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

/// Eval-mode class probabilities for a batch of raw images.
template <typename Scalar>
ProbMatrix predict_probs(const Classifier<Scalar>& model, std::span<const Image* const> images,
                         const ChannelStats& stats) {
  return softmax_columns(model.infer(to_input<Scalar>(images, stats, model.input_size())));
}

/// Anything that maps raw images to class probabilities (L x batch).
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual int num_classes() const = 0;
  virtual ProbMatrix predict(std::span<const Image* const> images) const = 0;
};

/// Eval-mode classifier with fixed normalization statistics.
class ModelPredictor final : public Predictor {
 public:
  ModelPredictor(const Classifier<float>& model, ChannelStats stats) : model_(&model), stats_(stats) {}
  int num_classes() const override { return model_->num_classes(); }
  ProbMatrix predict(std::span<const Image* const> images) const override {
    return predict_probs(*model_, images, stats_);
  }

 private:
  const Classifier<float>* model_;
  ChannelStats stats_;
};

// ---------------------------------------------------------------------------
// Optimizer

enum class LrSchedule { Constant, Cosine };

struct OptimizerConfig {
  double learning_rate = 0.03;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  LrSchedule schedule = LrSchedule::Cosine;
  double ema_decay = 0.0;  // 0 disables the weight average used for evaluation
};

void validate(const OptimizerConfig& config);

/// Learning rate at a step. Cosine decays as lr * cos(7 pi k / (16 K)).
double learning_rate_at(const OptimizerConfig& config, long step, long total_steps);

/// SGD with (Nesterov) momentum; weight decay enters the gradient as an L2
/// term on parameters flagged for decay (conv/linear weights).
template <typename Scalar>
class SgdOptimizer {
 public:
  SgdOptimizer() = default;
  explicit SgdOptimizer(const Classifier<Scalar>& model) {
    for (const auto* p : model.parameters()) velocity_.push_back(nn::Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
  }

  /// Applies one update from the accumulated gradients. Throws TrainingError
  /// (leaving the parameters untouched) if any gradient is non-finite.
  void step(Classifier<Scalar>& model, const OptimizerConfig& config, double lr) {
    auto params = model.parameters();
    if (velocity_.size() != params.size()) throw ContractError("optimizer/model parameter mismatch");
    for (const auto* p : params)
      if (!p->grad.allFinite()) throw TrainingError("non-finite gradient in parameter " + p->name);
    const Scalar mu(config.momentum), wd(config.weight_decay), eta(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      nn::Mat<Scalar> g = p.grad;
      if (p.decay && config.weight_decay != 0.0) g += wd * p.value;
      if (config.momentum == 0.0) {
        p.value -= eta * g;
        continue;
      }
      velocity_[i] = mu * velocity_[i] + g;
      if (config.nesterov)
        p.value -= eta * (g + mu * velocity_[i]);
      else
        p.value -= eta * velocity_[i];
    }
  }

  std::vector<nn::Mat<Scalar>>& state() { return velocity_; }
  const std::vector<nn::Mat<Scalar>>& state() const { return velocity_; }

 private:
  std::vector<nn::Mat<Scalar>> velocity_;
};

/// One optimizer step at `step_index` of `total_steps`, using the schedule.
template <typename Scalar>
double sgd_step(Classifier<Scalar>& model, SgdOptimizer<Scalar>& optimizer, const OptimizerConfig& config,
                long step_index, long total_steps) {
  const double lr = learning_rate_at(config, step_index, total_steps);
  optimizer.step(model, config, lr);
  return lr;
}

/// Exponential moving average of parameters and buffers.
template <typename Scalar>
class WeightAverage {
 public:
  explicit WeightAverage(const Classifier<Scalar>& model) : shadow_(model) {}

  void update(const Classifier<Scalar>& model, double decay) {
    auto dst = shadow_.parameters();
    auto src = model.parameters();
    const Scalar d(decay);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = d * dst[i]->value + (Scalar(1) - d) * src[i]->value;
    auto dbuf = shadow_.buffers();
    auto sbuf = model.buffers();
    for (std::size_t i = 0; i < dbuf.size(); ++i) *dbuf[i].value = *sbuf[i].value;
  }

  const Classifier<Scalar>& model() const { return shadow_; }

 private:
  Classifier<Scalar> shadow_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  Arch arch = Arch::SmallCNN;
  int num_classes = 0;
  int input_size = 0;
  std::uint64_t config_hash = 0;
  long step = 0;
  std::string rng_state;
};

template <typename Scalar>
struct Checkpoint {
  CheckpointInfo info;
  Classifier<Scalar> model;
  SgdOptimizer<Scalar> optimizer;
};

/// Versioned binary container: header, parameters, buffers, optimizer state.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& file, const Classifier<Scalar>& model,
                     const SgdOptimizer<Scalar>* optimizer, const CheckpointInfo& info);

/// Throws ConfigError on a bad magic, version, or scalar type.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& file);

/// Loads weights into an existing model; refuses on architecture/shape mismatch.
template <typename Scalar>
CheckpointInfo load_weights_into(const std::filesystem::path& file, Classifier<Scalar>& model);

}  // namespace rssl
