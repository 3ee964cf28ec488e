#pragma once

#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "poi/config.hpp"
#include "poi/dataset.hpp"
#include "poi/model.hpp"
#include "poi/objective.hpp"
#include "poi/prior.hpp"

namespace poi {

/// Raised when a training step produces a non-finite value.
struct TrainingAborted : NumericError {
  using NumericError::NumericError;
};

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown breakdown;
};

inline nlohmann::json to_json(const StepLog& s) {
  nlohmann::json j{{"step", s.step}, {"epoch", s.epoch}, {"lr", s.lr}};
  j.update(to_json(s.breakdown));
  return j;
}

using StepSink = std::function<void(const StepLog&)>;

inline ForwardOptions forward_options(const RunConfig& cfg) {
  ForwardOptions o;
  o.T = cfg.hp.T;
  o.L_sub = cfg.L_sub();
  o.with_pin = !cfg.flags.baseline_only;
  o.with_gate = !cfg.flags.disable_inpre;
  o.uem_class_mean = cfg.flags.uem_class_mean;
  return o;
}

/// Learning rate for a 0-based epoch under the single-drop schedule.
inline double scheduled_lr(const HyperParams& hp, std::size_t epoch) {
  return epoch >= hp.lr_drop_epoch ? hp.lr * hp.lr_drop_factor : hp.lr;
}

/// One SGD step on a batch; returns the loss breakdown of the forward pass.
inline LossBreakdown train_step(PoiModel& model, const Tensor& images, std::span<const std::size_t> labels,
                                const AUPriorTable& table, const RunConfig& cfg, double lr) {
  Tape tape;
  const ForwardResult fr = model.poi_forward(tape, images, Mode::Train, forward_options(cfg));
  Objective obj = total_loss(tape, fr, labels, table, cfg.hp, cfg.flags);
  model.params().zero_grad();
  tape.backward(obj.objective);
  for (const Param& p : model.params()) check_finite(p.value.grad, "gradient");
  model.params().sgd_step(lr, cfg.hp.momentum, cfg.hp.weight_decay);
  return obj.breakdown;
}

/// Seeded minibatch SGD over `train_set`. Labels are the possibly noisy
/// ones; clean labels are never read here.
inline PoiModel train(const RunConfig& cfg, const AUPriorTable& table, const std::vector<Sample>& train_set,
                      const StepSink& sink = {}) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  PoiModel model(cfg.model, table, derive_seed(cfg.hp.seed, kInit));
  std::mt19937_64 shuffle_rng(derive_seed(cfg.hp.seed, kShuffle));
  std::mt19937_64 augment_rng(derive_seed(cfg.hp.seed, kAugment));

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = cfg.hp.batch_size;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.hp.epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.hp, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(train_set[i].label);
      const Tensor images = make_batch(train_set, idx, cfg.data.image_size, cfg.data.translate,
                                       cfg.data.augment ? &augment_rng : nullptr);
      StepLog log{step, epoch, lr, {}};
      try {
        log.breakdown = train_step(model, images, labels, table, cfg, lr);
      } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << "training aborted at step " << step << " (epoch " << epoch << "): " << e.what();
        throw TrainingAborted(msg.str());
      }
      if (sink) sink(log);
      ++step;
    }
  }
  return model;
}

}  // namespace poi
