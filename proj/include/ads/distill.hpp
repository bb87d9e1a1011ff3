#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "ads/model.hpp"

namespace ads::distill {

enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  double warmup_fraction = 0.10;
  int batch_size = 32;
  int epochs = 4;
  uint64_t optimizer_seed = 0;
  int eval_interval_steps = 10;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct LossCurves {
  std::vector<std::pair<long, double>> train_loss;
  std::vector<std::pair<long, double>> holdout_loss;
};

// Cosine schedule with linear warmup: peak at the last warmup step, exactly
// zero at the final step.
double scheduled_lr(const TrainConfig& cfg, long step, long total_steps);

// Full-parameter fine-tuning on the traces; holdout loss is evaluated before
// training and every eval_interval_steps. Deterministic given config seeds.
std::pair<TransformerModel, LossCurves> finetune(const TransformerModel& student,
                                                 std::span<const MaskedSequence> traces,
                                                 std::span<const MaskedSequence> holdout,
                                                 const TrainConfig& cfg);

// One gradient-ascent step of size eta on log p(token|prefix), and the
// resulting change of the downstream loss over the bound holdout set:
// returns (theta_plus, loss(theta_plus) - loss(theta)).
std::pair<ParamVector, double> single_step_oracle(const TransformerModel& proxy,
                                                  std::span<const MaskedSequence> holdout,
                                                  std::span<const int> prefix, int token,
                                                  double eta);

void write_loss_curves_csv(const std::filesystem::path& path, const LossCurves& curves);

}  // namespace ads::distill
