#include "ads/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>

#include "ads/errors.hpp"
#include "ads/rng.hpp"
#include "ads/threading.hpp"

namespace ads::distill {

void TrainConfig::validate() const {
  if (learning_rate < 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (warmup_fraction < 0.0 || warmup_fraction > 0.5)
    throw std::invalid_argument("TrainConfig: warmup_fraction must be in [0, 0.5]");
  if (batch_size <= 0 || epochs <= 0 || eval_interval_steps <= 0)
    throw std::invalid_argument("TrainConfig: batch_size/epochs/eval_interval must be positive");
}

double scheduled_lr(const TrainConfig& cfg, long step, long total_steps) {
  if (total_steps <= 0) return cfg.learning_rate;
  const long warmup = std::lround(cfg.warmup_fraction * static_cast<double>(total_steps));
  if (step < warmup)
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps - 1 <= warmup) return cfg.learning_rate;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - 1 - warmup);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

double holdout_mean_nll(const TransformerModel& model, std::span<const MaskedSequence> holdout) {
  std::vector<double> losses(holdout.size());
  parallel_for(holdout.size(), [&](size_t i) { losses[i] = sequence_nll(model, holdout[i]); });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(holdout.size());
}

}  // namespace

std::pair<TransformerModel, LossCurves> finetune(const TransformerModel& student,
                                                 std::span<const MaskedSequence> traces,
                                                 std::span<const MaskedSequence> holdout,
                                                 const TrainConfig& cfg) {
  cfg.validate();
  if (traces.empty()) throw std::invalid_argument("finetune: empty trace set");

  TransformerModel model = student;
  LossCurves curves;
  const size_t n = traces.size();
  const long steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;

  ParamVector m = ParamVector::zeros_like(model.params);
  ParamVector v = ParamVector::zeros_like(model.params);

  if (!holdout.empty()) curves.holdout_loss.emplace_back(0, holdout_mean_nll(model, holdout));

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  Rng shuffle_rng(derive_seed(cfg.optimizer_seed, 0xface));
  long step = 0;
  std::vector<MaskedSequence> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = n; i > 1; --i) {
      const size_t j = static_cast<size_t>(shuffle_rng.next_below(i));
      std::swap(order[i - 1], order[j]);
    }
    for (long b = 0; b < steps_per_epoch; ++b) {
      batch.clear();
      const size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      const size_t end = std::min(begin + cfg.batch_size, n);
      for (size_t i = begin; i < end; ++i) batch.push_back(traces[order[i]]);

      double loss = 0.0;
      ParamVector grad;
      try {
        std::tie(loss, grad) = accumulate_loss_grad(model, batch);
      } catch (const NumericError& e) {
        throw TrainingError(step, e.what());
      }
      if (!std::isfinite(loss)) throw TrainingError(step, "non-finite training loss");
      curves.train_loss.emplace_back(step + 1, loss);

      if (cfg.grad_clip_norm > 0.0) {
        const double gnorm = grad.l2_norm();
        if (gnorm > cfg.grad_clip_norm) {
          const double scale = cfg.grad_clip_norm / gnorm;
          for (double& gv : grad.values()) gv *= scale;
        }
      }

      const double lr = scheduled_lr(cfg, step, total_steps);
      auto& theta = model.params.values();
      if (cfg.optimizer == OptimizerKind::sgd) {
        for (size_t i = 0; i < theta.size(); ++i)
          theta[i] -= lr * (grad.values()[i] + cfg.weight_decay * theta[i]);
      } else {
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
        for (size_t i = 0; i < theta.size(); ++i) {
          const double gi = grad.values()[i];
          m.values()[i] = cfg.beta1 * m.values()[i] + (1.0 - cfg.beta1) * gi;
          v.values()[i] = cfg.beta2 * v.values()[i] + (1.0 - cfg.beta2) * gi * gi;
          const double mhat = m.values()[i] / bc1;
          const double vhat = v.values()[i] / bc2;
          theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * theta[i]);
        }
      }
      ++step;
      if (!holdout.empty() && (step % cfg.eval_interval_steps == 0 || step == total_steps))
        curves.holdout_loss.emplace_back(step, holdout_mean_nll(model, holdout));
    }
  }
  return {std::move(model), std::move(curves)};
}

std::pair<ParamVector, double> single_step_oracle(const TransformerModel& proxy,
                                                  std::span<const MaskedSequence> holdout,
                                                  std::span<const int> prefix, int token,
                                                  double eta) {
  if (eta <= 0.0) throw std::invalid_argument("single_step_oracle: eta must be positive");
  if (holdout.empty()) throw std::invalid_argument("single_step_oracle: empty holdout set");
  if (prefix.empty()) throw std::invalid_argument("single_step_oracle: empty prefix");
  if (token < 0 || token >= proxy.config.vocab_size)
    throw std::invalid_argument("single_step_oracle: token out of range");

  // gradient of log p(token|prefix) via a single-target weighted NLL:
  // -d(nll)/dtheta with weight 1 on the appended token
  MaskedSequence seq;
  seq.tokens.assign(prefix.begin(), prefix.end());
  seq.tokens.push_back(token);
  seq.loss_mask.assign(prefix.size(), 0);
  seq.loss_mask.push_back(1);
  std::vector<MaskedSequence> one{seq};
  auto [nll, nll_grad] = accumulate_loss_grad(proxy, one);
  (void)nll;

  ParamVector theta_plus = proxy.params;
  theta_plus.axpy(-eta, nll_grad);  // ascent on log p = descent on nll

  const double base = holdout_mean_nll(proxy, holdout);
  const double after =
      holdout_mean_nll(TransformerModel{proxy.config, theta_plus}, holdout);
  return {std::move(theta_plus), after - base};
}

void write_loss_curves_csv(const std::filesystem::path& path, const LossCurves& curves) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_loss_curves_csv: cannot open " + path.string());
  os.precision(12);
  os << "step,train_loss,holdout_loss\n";
  // rows keyed by step; a series leaves its cell empty where it has no sample
  std::map<long, std::pair<std::optional<double>, std::optional<double>>> merged;
  for (const auto& [s, v] : curves.train_loss) merged[s].first = v;
  for (const auto& [s, v] : curves.holdout_loss) merged[s].second = v;
  for (const auto& [s, row] : merged) {
    os << s << ",";
    if (row.first) os << *row.first;
    os << ",";
    if (row.second) os << *row.second;
    os << "\n";
  }
}

}  // namespace ads::distill
