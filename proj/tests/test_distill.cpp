#include <doctest.h>

#include <cmath>
#include <cstring>

#include "ads/distill.hpp"
#include "ads/errors.hpp"
#include "ads/sampler.hpp"
#include "ads/tasks.hpp"
#include "test_util.hpp"

using namespace ads;
using namespace ads::distill;

namespace {

std::vector<MaskedSequence> gold_sequences(uint64_t seed, int count) {
  const auto data = tasks::generate_dataset(seed, count, {2, 3}, {1, 1});
  std::vector<MaskedSequence> out;
  for (const auto& inst : data)
    out.push_back(tasks::to_masked_sequence(inst.prompt_tokens, inst.gold_trace_tokens));
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("distill");

TEST_CASE("zero learning rate is a no-op") {
  const auto cfg = ads_test::tiny_model_config(101);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(1, 8);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 2;
  tc.batch_size = 4;
  auto [trained, curves] = finetune(model, traces, {}, tc);
  CHECK(std::memcmp(trained.params.values().data(), model.params.values().data(),
                    model.params.size() * sizeof(double)) == 0);
  CHECK(curves.train_loss.size() == 4);
}

TEST_CASE("cosine schedule peaks at the end of warmup and ends at zero") {
  TrainConfig tc;
  tc.learning_rate = 3e-4;
  tc.warmup_fraction = 0.10;
  const long total = 100;
  CHECK(scheduled_lr(tc, 0, total) == doctest::Approx(3e-5).epsilon(1e-12));
  CHECK(scheduled_lr(tc, 9, total) == doctest::Approx(3e-4).epsilon(1e-12));  // last warmup step
  CHECK(scheduled_lr(tc, 11, total) < 3e-4);
  CHECK(scheduled_lr(tc, total - 1, total) == doctest::Approx(0.0).epsilon(1e-15));
  // strictly decreasing after warmup
  for (long s = 10; s + 1 < total; ++s)
    CHECK(scheduled_lr(tc, s + 1, total) < scheduled_lr(tc, s, total));
}

TEST_CASE("one full-batch sgd step equals hand-stepped gradient descent") {
  const auto cfg = ads_test::tiny_model_config(103);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(2, 6);
  TrainConfig tc;
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 1e-2;
  tc.weight_decay = 0.0;
  tc.grad_clip_norm = 0.0;  // off
  tc.warmup_fraction = 0.0;
  tc.batch_size = static_cast<int>(traces.size());
  tc.epochs = 1;
  auto [trained, curves] = finetune(model, traces, {}, tc);

  auto [loss, grad] = accumulate_loss_grad(model, traces);
  ParamVector expect = model.params;
  expect.axpy(-tc.learning_rate, grad);
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(trained.params.values()[i] - expect.values()[i]) < 1e-10);
  CHECK(curves.train_loss.front().second == doctest::Approx(loss).epsilon(1e-12));
}

TEST_CASE("one adamw step matches the hand-stepped update") {
  const auto cfg = ads_test::tiny_model_config(107);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(3, 5);
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.weight_decay = 0.1;
  tc.grad_clip_norm = 0.0;
  tc.warmup_fraction = 0.0;
  tc.batch_size = static_cast<int>(traces.size());
  tc.epochs = 1;
  auto [trained, curves] = finetune(model, traces, {}, tc);

  auto [loss, grad] = accumulate_loss_grad(model, traces);
  for (size_t i = 0; i < model.params.size(); ++i) {
    const double g = grad.values()[i];
    const double theta = model.params.values()[i];
    // first-step bias correction reduces m-hat to g and v-hat to g^2
    const double step = tc.learning_rate * (g / (std::abs(g) + tc.adam_eps) + tc.weight_decay * theta);
    CHECK(std::abs(trained.params.values()[i] - (theta - step)) < 1e-12);
  }
}

TEST_CASE("gradient clipping bounds the applied step") {
  const auto cfg = ads_test::tiny_model_config(109);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(4, 4);
  TrainConfig tc;
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 1.0;
  tc.weight_decay = 0.0;
  tc.grad_clip_norm = 1e-4;
  tc.warmup_fraction = 0.0;
  tc.batch_size = 4;
  tc.epochs = 1;
  auto [trained, curves] = finetune(model, traces, {}, tc);
  ParamVector diff = trained.params;
  diff.axpy(-1.0, model.params);
  CHECK(diff.l2_norm() <= tc.grad_clip_norm * tc.learning_rate * 1.0000001);
}

TEST_CASE("distilling on gold traces reduces training loss") {
  const auto cfg = ads_test::tiny_model_config(113);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(5, 32);
  auto holdout = gold_sequences(6, 8);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.eval_interval_steps = 4;
  auto [trained, curves] = finetune(model, traces, holdout, tc);
  REQUIRE(!curves.train_loss.empty());
  REQUIRE(!curves.holdout_loss.empty());
  CHECK(curves.train_loss.back().second < curves.train_loss.front().second);
  CHECK(curves.holdout_loss.front().first == 0);  // evaluated before training
  // steps strictly increasing
  for (size_t i = 1; i < curves.train_loss.size(); ++i)
    CHECK(curves.train_loss[i].first > curves.train_loss[i - 1].first);
  for (size_t i = 1; i < curves.holdout_loss.size(); ++i)
    CHECK(curves.holdout_loss[i].first > curves.holdout_loss[i - 1].first);
}

TEST_CASE("finetune is bitwise reproducible") {
  const auto cfg = ads_test::tiny_model_config(127);
  const auto model = init_model(cfg);
  auto traces = gold_sequences(7, 16);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.optimizer_seed = 99;
  auto [a, ca] = finetune(model, traces, {}, tc);
  auto [b, cb] = finetune(model, traces, {}, tc);
  CHECK(std::memcmp(a.params.values().data(), b.params.values().data(),
                    a.params.size() * sizeof(double)) == 0);
  CHECK(ca.train_loss == cb.train_loss);
}

TEST_CASE("non-finite loss raises a training failure with the step index") {
  const auto cfg = ads_test::tiny_model_config(131);
  auto model = init_model(cfg);
  model.params.values()[10] = std::numeric_limits<double>::quiet_NaN();
  auto traces = gold_sequences(8, 4);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 1;
  try {
    (void)finetune(model, traces, {}, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("single-step oracle converges to the exact directional derivative") {
  const auto cfg = ads_test::tiny_model_config(137);
  const auto proxy = init_model(cfg);
  auto holdout = gold_sequences(9, 8);
  ParamVector g = ParamVector::zeros_like(proxy.params);
  {
    auto [loss, grad] = accumulate_loss_grad(proxy, holdout);
    g = grad;
  }
  Rng rng(11);
  int checked = 0;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<int> prefix;
    for (int t = 0; t < 6; ++t)
      prefix.push_back(static_cast<int>(rng.next_below(cfg.vocab_size)));
    const auto exact = sampler::delta_exact(proxy, g, prefix);
    // probe the strongest-coupled token so the relative error is well posed
    int token = 0;
    for (size_t v = 1; v < exact.size(); ++v)
      if (std::abs(exact[v]) > std::abs(exact[static_cast<size_t>(token)]))
        token = static_cast<int>(v);
    const double eta = 1e-5;
    auto [theta_plus, loss_delta] = single_step_oracle(proxy, holdout, prefix, token, eta);
    const double limit = loss_delta / eta;
    INFO("rep ", rep, " token ", token, " exact ", exact[static_cast<size_t>(token)], " fd ",
         limit);
    CHECK(std::abs(limit - exact[static_cast<size_t>(token)]) <
          1e-3 * std::max(1e-6, std::abs(exact[static_cast<size_t>(token)])));
    ++checked;
  }
  CHECK(checked == 10);
}

TEST_SUITE_END();
