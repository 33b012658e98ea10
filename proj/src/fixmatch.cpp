#include "rebalance_ssl/fixmatch.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "rebalance_ssl/parallel.hpp"

namespace rssl {

void validate(const TrainConfig& c) {
  if (!(c.tau > 0.0 && c.tau <= 1.0)) throw ConfigError("train.tau must be in (0,1]");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.unlabeled_ratio < 1) throw ConfigError("train.unlabeled_ratio must be >= 1");
  if (!(c.lambda_u >= 0.0)) throw ConfigError("train.lambda_u must be >= 0");
  if (c.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (c.iterations_per_epoch < 1) throw ConfigError("train.iterations_per_epoch must be >= 1");
  if (c.checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be >= 0");
}

long total_steps(const TrainConfig& c) { return static_cast<long>(c.epochs) * c.iterations_per_epoch; }

std::string TrainTrace::to_csv() const {
  std::string out = "step,sup_loss,unsup_loss,mask_fraction,lr\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%ld,%.9g,%.9g,%.9g,%.9g\n", r.step, r.sup_loss, r.unsup_loss,
                  r.mask_fraction, r.lr);
    out += line;
  }
  return out;
}

void TrainTrace::write_csv(const std::filesystem::path& file) const {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ConfigError("cannot write trace: " + file.string());
  os << to_csv();
}

EpochSampler::EpochSampler(std::size_t n, RngStream rng) : order_(n), rng_(std::move(rng)) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  reshuffle();
}

void EpochSampler::reshuffle() {
  rng_.shuffle(std::span<std::size_t>(order_));
  cursor_ = 0;
}

std::vector<std::size_t> EpochSampler::next(std::size_t count) {
  std::vector<std::size_t> out;
  if (order_.empty()) return out;
  out.reserve(count);
  while (out.size() < count) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

namespace {

enum class View : std::uint64_t { LabeledWeak = 1, UnlabeledWeak = 2, UnlabeledStrong = 3 };

struct Slot {
  const Image* source;
  std::size_t example_id;
  View view;
};

std::vector<Image> augment_slots(const std::vector<Slot>& slots, const AugmentPolicies& policies,
                                 std::uint64_t seed, long step) {
  std::vector<Image> out(slots.size());
  parallel_for(slots.size(), [&](std::size_t i) {
    const Slot& s = slots[i];
    auto rng = RngStream::derive({seed, tag_hash("augment"), static_cast<std::uint64_t>(step), i,
                                  s.example_id, static_cast<std::uint64_t>(s.view)});
    out[i] = s.view == View::UnlabeledStrong ? strong_augment(*s.source, policies.strong, rng)
                                             : weak_augment(*s.source, policies.weak, rng);
  });
  return out;
}

std::vector<const Image*> pointers(const std::vector<Image>& images, std::size_t from, std::size_t count) {
  std::vector<const Image*> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = &images[from + i];
  return out;
}

bool has_batch_statistics(Arch arch) { return arch == Arch::WideResNet28_2; }

}  // namespace

TrainResult train_generation(std::span<const LabeledExample> labeled, std::span<const UnlabeledExample> unlabeled,
                             const TrainConfig& train, const OptimizerConfig& optim, const AugmentPolicies& policies,
                             const ModelSpec& spec, const ChannelStats& stats, std::uint64_t seed,
                             const TrainHooks& hooks) {
  validate(train);
  validate(optim);
  if (labeled.empty()) throw ContractError("train_generation: labeled set is empty");
  if (spec.num_classes < 2) throw ContractError("train_generation: need at least 2 classes");

  Classifier<float> model = hooks.warm_start_from
                                ? *hooks.warm_start_from
                                : Classifier<float>(spec.arch, spec.num_classes, spec.input_size, seed);
  SgdOptimizer<float> optimizer(model);
  std::optional<WeightAverage<float>> average;
  if (optim.ema_decay > 0.0) average.emplace(model);

  EpochSampler labeled_sampler(labeled.size(), RngStream::derive({seed, tag_hash("labeled-order")}));
  EpochSampler unlabeled_sampler(unlabeled.size(), RngStream::derive({seed, tag_hash("unlabeled-order")}));

  const bool use_unlabeled = train.lambda_u > 0.0 && !unlabeled.empty();
  const std::size_t B = static_cast<std::size_t>(train.batch_size);
  const std::size_t U = use_unlabeled ? B * static_cast<std::size_t>(train.unlabeled_ratio) : 0;
  const long steps = total_steps(train);
  // Without batch statistics the weak views need no backward pass, so they go
  // through the inference path; otherwise all views share one forward.
  const bool joint_forward = has_batch_statistics(spec.arch);

  TrainResult result{model, optimizer, {}, {}};
  result.trace.rows.reserve(static_cast<std::size_t>(steps));
  std::vector<int> labels(B);

  for (long step = 0; step < steps; ++step) {
    const auto lab_idx = labeled_sampler.next(B);
    const auto unl_idx = use_unlabeled ? unlabeled_sampler.next(U) : std::vector<std::size_t>{};

    // Slot layout: [labeled weak | unlabeled weak | unlabeled strong].
    std::vector<Slot> slots;
    slots.reserve(B + 2 * U);
    for (std::size_t i = 0; i < B; ++i) {
      const auto& ex = labeled[lab_idx[i]];
      slots.push_back({&ex.image, ex.id, View::LabeledWeak});
      labels[i] = ex.class_id;
    }
    for (std::size_t i : unl_idx) slots.push_back({&unlabeled[i].image, unlabeled[i].id, View::UnlabeledWeak});
    for (std::size_t i : unl_idx) slots.push_back({&unlabeled[i].image, unlabeled[i].id, View::UnlabeledStrong});
    const std::vector<Image> views = augment_slots(slots, policies, seed, step);

    nn::Mat<float> grad_logits;
    double sup = 0.0;
    UnsupervisedLoss unsup;
    ProbMatrix weak_probs;

    if (joint_forward || !use_unlabeled) {
      const auto batch = pointers(views, 0, views.size());
      const nn::Mat<float> logits = model.forward(to_input<float>(batch, stats, spec.input_size));
      grad_logits = nn::Mat<float>::Zero(logits.rows(), logits.cols());
      nn::Mat<float> g;
      sup = supervised_loss(logits.leftCols(B), labels, &g);
      grad_logits.leftCols(B) = g;
      if (use_unlabeled) {
        weak_probs = softmax_columns(logits.middleCols(B, U));
        unsup = unsupervised_loss(weak_probs, logits.rightCols(U), train.tau, &g);
        grad_logits.rightCols(U) = static_cast<float>(train.lambda_u) * g;
      }
    } else {
      const auto weak = pointers(views, B, U);
      weak_probs = softmax_columns(model.infer(to_input<float>(weak, stats, spec.input_size)));
      std::vector<const Image*> trained = pointers(views, 0, B);
      const auto strong = pointers(views, B + U, U);
      trained.insert(trained.end(), strong.begin(), strong.end());
      const nn::Mat<float> logits = model.forward(to_input<float>(trained, stats, spec.input_size));
      grad_logits = nn::Mat<float>::Zero(logits.rows(), logits.cols());
      nn::Mat<float> g;
      sup = supervised_loss(logits.leftCols(B), labels, &g);
      grad_logits.leftCols(B) = g;
      unsup = unsupervised_loss(weak_probs, logits.rightCols(U), train.tau, &g);
      grad_logits.rightCols(U) = static_cast<float>(train.lambda_u) * g;
    }

    const double total = sup + train.lambda_u * unsup.value;
    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (sup=" << sup << ", unsup=" << unsup.value
          << ", mask=" << unsup.mask_fraction << ")";
      throw TrainingError(msg.str());
    }

    model.zero_grad();
    model.backward(grad_logits);
    double lr = 0.0;
    try {
      lr = sgd_step(model, optimizer, optim, step, steps);
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
    if (average) average->update(model, optim.ema_decay);

    for (std::size_t i = 0; i < U; ++i) {
      const std::size_t id = unlabeled[unl_idx[i]].id;
      if (auto pl = pseudo_label(weak_probs.col(static_cast<Eigen::Index>(i)), train.tau))
        result.last_masks[id] = *pl;
      else
        result.last_masks.erase(id);
    }

    const TraceRow row{step, sup, unsup.value, unsup.mask_fraction, lr};
    result.trace.rows.push_back(row);
    if (hooks.on_step) hooks.on_step(row);

    if (train.checkpoint_interval > 0 && !hooks.checkpoint_path.empty() && (step + 1) % train.checkpoint_interval == 0) {
      CheckpointInfo info;
      info.config_hash = hooks.config_hash;
      info.step = step + 1;
      save_checkpoint(hooks.checkpoint_path, average ? average->model() : model, &optimizer, info);
    }
  }

  result.model = average ? average->model() : model;
  result.optimizer = std::move(optimizer);
  return result;
}

}  // namespace rssl
