#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ads/model.hpp"
#include "ads/rng.hpp"
#include "test_util.hpp"

using namespace ads;

TEST_SUITE_BEGIN("model");

TEST_CASE("init is deterministic per seed and sensitive to it") {
  const auto cfg = ads_test::tiny_model_config(1);
  const auto a = init_model(cfg);
  const auto b = init_model(cfg);
  CHECK(std::memcmp(a.params.values().data(), b.params.values().data(),
                    a.params.size() * sizeof(double)) == 0);

  auto cfg2 = cfg;
  cfg2.init_seed = 2;
  const auto c = init_model(cfg2);
  CHECK(a.params.values() != c.params.values());

  // norm gains start at one, biases at zero
  const auto gain = a.params.slice("layer0.ln1.gain");
  CHECK(std::all_of(gain.begin(), gain.end(), [](double v) { return v == 1.0; }));
  const auto bias = a.params.slice("layer0.attn.bq");
  CHECK(std::all_of(bias.begin(), bias.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("parameter count matches an independent per-layer count") {
  const ModelConfig cfg{32, 32, 2, 2, 64, 48, 9, false};
  const long v = 32, d = 32, f = 64, len = 48, layers = 2;
  const long embeddings = v * d + len * d;
  const long per_layer = 2 * d                   // ln1
                         + 4 * (d * d + d)       // wq/wk/wv/wo with biases
                         + 2 * d                 // ln2
                         + (d * f + f)           // mlp in
                         + (f * d + d);          // mlp out
  const long head = 2 * d + d * v;               // final norm + untied head
  const long expected = embeddings + layers * per_layer + head;
  CHECK(param_count(cfg) == static_cast<size_t>(expected));
  CHECK(init_model(cfg).params.size() == static_cast<size_t>(expected));
}

TEST_CASE("forward logits shape and input validation") {
  const auto cfg = ads_test::tiny_model_config();
  const auto model = init_model(cfg);
  std::vector<int> tokens{1, 2, 3, 4, 5};
  const auto logits = forward_logits(model, tokens);
  CHECK(logits.shape == std::vector<int64_t>{5, cfg.vocab_size});
  CHECK(logits.all_finite());

  std::vector<int> bad{1, cfg.vocab_size};
  CHECK_THROWS_AS((void)forward_logits(model, bad), std::invalid_argument);
  CHECK_THROWS_AS((void)forward_logits(model, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("causality: suffix mutation leaves earlier rows unchanged") {
  const auto cfg = ads_test::tiny_model_config();
  const auto model = init_model(cfg);
  Rng rng(3);
  std::vector<int> tokens;
  for (int t = 0; t < 12; ++t)
    tokens.push_back(static_cast<int>(rng.next_below(cfg.vocab_size)));
  const auto before = forward_logits(model, tokens);
  for (int cut : {4, 8, 11}) {
    auto mutated = tokens;
    mutated[static_cast<size_t>(cut)] = (mutated[static_cast<size_t>(cut)] + 7) % cfg.vocab_size;
    const auto after = forward_logits(model, mutated);
    for (int64_t t = 0; t < cut; ++t)
      for (int64_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(std::abs(before.at(t, v) - after.at(t, v)) < 1e-12);
    // the mutated row itself must move (kept strict by the task of predicting it)
    double moved = 0;
    for (int64_t v = 0; v < cfg.vocab_size; ++v)
      moved += std::abs(before.at(cut, v) - after.at(cut, v));
    CHECK(moved > 0.0);
  }
}

TEST_CASE("packed tape batch reproduces single-sequence logits") {
  const auto cfg = ads_test::tiny_model_config();
  const auto model = init_model(cfg);
  Rng rng(17);
  std::vector<MaskedSequence> seqs;
  for (int s = 0; s < 3; ++s)
    seqs.push_back(ads_test::random_sequence(rng, cfg.vocab_size, 6 + 3 * s, 2));
  std::vector<double> weights(seqs.size(), 1.0 / seqs.size());
  const auto batch = pack_sequences(seqs, weights);

  Tape tape;
  const auto leaves = make_param_leaves(tape, model.params);
  const auto logits = transformer_logits_graph(tape, cfg, leaves, batch);
  const Tensor& packed = tape.val(logits);

  for (size_t s = 0; s < seqs.size(); ++s) {
    const auto single = forward_logits(model, seqs[s].tokens);
    const auto span = batch.spans[s];
    for (int64_t t = 0; t < span.len; ++t)
      for (int64_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(std::abs(single.at(t, v) - packed.at(span.offset + t, v)) < 1e-12);
  }
}

TEST_CASE("sequence_nll of a zero-head model is log V") {
  const auto cfg = ads_test::tiny_model_config();
  auto model = init_model(cfg);
  auto head = model.params.slice("head.w");
  std::fill(head.begin(), head.end(), 0.0);
  MaskedSequence seq;
  for (int t = 0; t < 8; ++t) {
    seq.tokens.push_back(t % cfg.vocab_size);
    seq.loss_mask.push_back(t >= 2);
  }
  CHECK(sequence_nll(model, seq) ==
        doctest::Approx(std::log(cfg.vocab_size)).epsilon(1e-12));
}

TEST_CASE("sequence_nll with a single masked target equals that row's log-softmax") {
  const auto cfg = ads_test::tiny_model_config();
  const auto model = init_model(cfg);
  Rng rng(23);
  auto seq = ads_test::random_sequence(rng, cfg.vocab_size, 9, 9);
  seq.loss_mask[5] = 1;  // only position 5 is a target
  const auto logits = forward_logits(model, seq.tokens);
  std::vector<double> row(static_cast<size_t>(cfg.vocab_size));
  for (int64_t v = 0; v < cfg.vocab_size; ++v) row[static_cast<size_t>(v)] = logits.at(4, v);
  const auto logp = log_softmax(row);
  CHECK(sequence_nll(model, seq) ==
        doctest::Approx(-logp[static_cast<size_t>(seq.tokens[5])]).epsilon(1e-12));
}

TEST_CASE("sequence_nll matches a manual summation oracle") {
  const auto cfg = ads_test::tiny_model_config(7);
  const auto model = init_model(cfg);
  Rng rng(29);
  const auto seq = ads_test::random_sequence(rng, cfg.vocab_size, 14, 5);
  const auto logits = forward_logits(model, seq.tokens);

  long double total = 0.0L;
  int count = 0;
  for (size_t t = 1; t < seq.tokens.size(); ++t) {
    if (!seq.loss_mask[t]) continue;
    long double lse = 0.0L;
    long double mx = logits.at(static_cast<int64_t>(t - 1), 0);
    for (int64_t v = 1; v < cfg.vocab_size; ++v)
      mx = std::max<long double>(mx, logits.at(static_cast<int64_t>(t - 1), v));
    for (int64_t v = 0; v < cfg.vocab_size; ++v)
      lse += std::exp(static_cast<long double>(logits.at(static_cast<int64_t>(t - 1), v)) - mx);
    lse = mx + std::log(lse);
    total += lse - logits.at(static_cast<int64_t>(t - 1), seq.tokens[t]);
    ++count;
  }
  CHECK(sequence_nll(model, seq) ==
        doctest::Approx(static_cast<double>(total / count)).epsilon(1e-12));

  MaskedSequence unmasked = seq;
  std::fill(unmasked.loss_mask.begin(), unmasked.loss_mask.end(), 0);
  CHECK_THROWS_AS((void)sequence_nll(model, unmasked), std::invalid_argument);
}

TEST_CASE("accumulate_loss_grad: singleton, shards, full-batch oracle, ordering") {
  const auto cfg = ads_test::tiny_model_config(13);
  const auto model = init_model(cfg);
  Rng rng(31);
  std::vector<MaskedSequence> data;
  for (int s = 0; s < 8; ++s)
    data.push_back(ads_test::random_sequence(rng, cfg.vocab_size, 7 + (s % 4), 2));

  SUBCASE("singleton equals value_and_grad of that sequence") {
    std::vector<MaskedSequence> one{data[0]};
    auto [value, grad] = accumulate_loss_grad(model, one);
    CHECK(value == doctest::Approx(sequence_nll(model, data[0])).epsilon(1e-12));
    std::vector<double> w{1.0};
    const auto batch = pack_sequences({data.data(), 1}, w);
    auto [v2, g2] = value_and_grad(
        [&](Tape& tape, const ParamLeafMap& leaves) {
          return transformer_loss_graph(tape, cfg, leaves, batch);
        },
        model.params);
    CHECK(value == doctest::Approx(v2).epsilon(1e-12));
    for (size_t i = 0; i < grad.size(); ++i)
      CHECK(std::abs(grad.values()[i] - g2.values()[i]) < 1e-12);
  }

  SUBCASE("two shards recombine to the whole-dataset gradient") {
    auto [v_all, g_all] = accumulate_loss_grad(model, data);
    std::span<const MaskedSequence> all(data);
    auto [v1, g1] = accumulate_loss_grad(model, all.subspan(0, 3));
    auto [v2, g2] = accumulate_loss_grad(model, all.subspan(3));
    const double w1 = 3.0 / 8.0, w2 = 5.0 / 8.0;
    CHECK(v_all == doctest::Approx(w1 * v1 + w2 * v2).epsilon(1e-12));
    for (size_t i = 0; i < g_all.size(); ++i)
      CHECK(std::abs(g_all.values()[i] - (w1 * g1.values()[i] + w2 * g2.values()[i])) < 1e-10);
  }

  SUBCASE("matches the no-accumulation full-batch oracle") {
    auto [v_all, g_all] = accumulate_loss_grad(model, data);
    ParamVector mean = ParamVector::zeros_like(model.params);
    double mean_loss = 0.0;
    for (const auto& seq : data) {
      std::vector<MaskedSequence> one{seq};
      auto [v, g] = accumulate_loss_grad(model, one);
      mean_loss += v / data.size();
      mean.axpy(1.0 / data.size(), g);
    }
    CHECK(v_all == doctest::Approx(mean_loss).epsilon(1e-12));
    for (size_t i = 0; i < g_all.size(); ++i)
      CHECK(std::abs(g_all.values()[i] - mean.values()[i]) < 1e-10);
  }

  SUBCASE("invariant to dataset ordering") {
    auto [v_fwd, g_fwd] = accumulate_loss_grad(model, data);
    std::vector<MaskedSequence> reversed(data.rbegin(), data.rend());
    auto [v_rev, g_rev] = accumulate_loss_grad(model, reversed);
    CHECK(v_fwd == doctest::Approx(v_rev).epsilon(1e-12));
    for (size_t i = 0; i < g_fwd.size(); ++i)
      CHECK(std::abs(g_fwd.values()[i] - g_rev.values()[i]) < 1e-10);
  }

  SUBCASE("empty dataset is rejected") {
    CHECK_THROWS_AS((void)accumulate_loss_grad(model, std::span<const MaskedSequence>{}),
                    std::invalid_argument);
  }
}

TEST_CASE("checkpoints round trip bitwise") {
  ads_test::TempDir tmp("ckpt");
  const auto cfg = ads_test::tiny_model_config(21);
  const auto model = init_model(cfg);
  save_checkpoint(model, tmp.path, "m");
  const auto back = load_checkpoint(tmp.path, "m");
  CHECK(back.config.to_json() == model.config.to_json());
  CHECK(std::memcmp(back.params.values().data(), model.params.values().data(),
                    model.params.size() * sizeof(double)) == 0);
}

TEST_CASE("tied output head differentiates cleanly") {
  ModelConfig cfg = ads_test::tiny_model_config(25);
  cfg.tied_head = true;
  const auto model = init_model(cfg);
  Rng rng(77);
  const auto seq = ads_test::random_sequence(rng, cfg.vocab_size, 8, 3);
  std::vector<MaskedSequence> one{seq};
  auto [value, grad] = accumulate_loss_grad(model, one);
  CHECK(std::isfinite(value));
  const double h = 1e-5;
  const size_t stride = model.params.size() / 41;
  for (size_t i = 0; i < model.params.size(); i += stride) {
    auto theta = model.params;
    theta.values()[i] += h;
    const double up = sequence_nll({cfg, theta}, seq);
    theta.values()[i] -= 2 * h;
    const double down = sequence_nll({cfg, theta}, seq);
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(grad.values()[i] - fd) <= 1e-5 * std::abs(fd) + 1e-8);
  }
}

TEST_SUITE_END();
