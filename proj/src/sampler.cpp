#include "ads/sampler.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "ads/errors.hpp"
#include "ads/hashing.hpp"
#include "ads/tasks.hpp"
#include "ads/threading.hpp"

namespace ads::sampler {

std::string kind_name(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::temperature: return "temperature";
    case SamplerKind::antidistill: return "antidistill";
    case SamplerKind::permutation: return "permutation";
    case SamplerKind::exact_oracle: return "exact-oracle";
  }
  throw std::invalid_argument("kind_name: bad kind");
}

SamplerKind kind_from_name(const std::string& name) {
  if (name == "temperature") return SamplerKind::temperature;
  if (name == "antidistill") return SamplerKind::antidistill;
  if (name == "permutation") return SamplerKind::permutation;
  if (name == "exact-oracle") return SamplerKind::exact_oracle;
  throw std::invalid_argument("kind_from_name: unknown sampler kind '" + name + "'");
}

void SamplerSpec::validate() const {
  if (tau < 0.0) throw std::invalid_argument("SamplerSpec: tau must be >= 0");
  if (lambda < 0.0) throw std::invalid_argument("SamplerSpec: lambda must be >= 0");
  if (max_tokens <= 0) throw std::invalid_argument("SamplerSpec: max_tokens must be positive");
  if (is_penalty_kind()) {
    if (tau <= 0.0)
      throw std::invalid_argument("SamplerSpec: penalty kinds require tau > 0");
    if (epsilon <= 0.0)
      throw std::invalid_argument("SamplerSpec: penalty kinds require epsilon > 0");
  }
}

std::string SamplerSpec::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind_name(kind);
  j["tau"] = tau;
  j["lambda"] = lambda;
  j["epsilon"] = epsilon;
  j["max_tokens"] = max_tokens;
  j["rng_seed"] = rng_seed;
  return j.dump();
}

SamplerSpec SamplerSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SamplerSpec spec;
  spec.kind = kind_from_name(j.at("kind").get<std::string>());
  spec.tau = j.at("tau").get<double>();
  spec.lambda = j.at("lambda").get<double>();
  spec.epsilon = j.at("epsilon").get<double>();
  spec.max_tokens = j.at("max_tokens").get<int>();
  spec.rng_seed = j.at("rng_seed").get<uint64_t>();
  return spec;
}

PenaltyContext make_penalty_context(const TransformerModel& proxy,
                                    const gradstore::GradientArtifact& artifact, double epsilon,
                                    const std::string& grad_artifact_name) {
  if (artifact.proxy_config_hash != proxy.config.hash())
    throw std::invalid_argument(
        "make_penalty_context: gradient was computed for a different proxy config");
  PenaltyContext ctx;
  ctx.proxy = proxy;
  ctx.proxy_plus = TransformerModel{proxy.config, perturb(proxy.params, artifact.g, epsilon, +1)};
  ctx.proxy_minus = TransformerModel{proxy.config, perturb(proxy.params, artifact.g, epsilon, -1)};
  ctx.grad = artifact.g;
  ctx.epsilon = epsilon;
  ctx.grad_hash = fnv1a64({reinterpret_cast<const char*>(artifact.g.values().data()),
                           artifact.g.values().size() * sizeof(double)});
  ctx.grad_artifact_name = grad_artifact_name;
  return ctx;
}

std::vector<double> delta_hat(const PenaltyContext& ctx, std::span<const int> prefix) {
  if (prefix.empty()) throw std::invalid_argument("delta_hat: empty prefix");
  std::vector<double> logp_plus = forward_last_logits(ctx.proxy_plus, prefix);
  std::vector<double> logp_minus = forward_last_logits(ctx.proxy_minus, prefix);
  log_softmax_inplace(logp_plus.data(), logp_plus.size());
  log_softmax_inplace(logp_minus.data(), logp_minus.size());
  const double inv = 1.0 / (2.0 * ctx.epsilon);
  std::vector<double> delta(logp_plus.size());
  for (size_t v = 0; v < delta.size(); ++v) {
    delta[v] = (logp_plus[v] - logp_minus[v]) * inv;
    if (!std::isfinite(delta[v])) throw NumericError("delta_hat", "non-finite penalty entry");
  }
  return delta;
}

std::vector<double> exact_delta_from_graph(Tape& tape, Tape::Id log_probs, int64_t row,
                                           const ParamLeafMap& leaves, const ParamVector& g) {
  const auto v_count = tape.val(log_probs).cols();
  std::vector<double> delta(static_cast<size_t>(v_count));
  std::vector<Tape::Id> picks;
  picks.reserve(static_cast<size_t>(v_count));
  for (int64_t v = 0; v < v_count; ++v) picks.push_back(tape.pick(log_probs, row, v));
  for (int64_t v = 0; v < v_count; ++v) {
    tape.backward(picks[static_cast<size_t>(v)]);
    double inner = 0.0;
    for (const auto& e : g.layout()) {
      const Tensor& grad = tape.grad(leaves.at(e.name));
      const auto slice = g.slice(e.name);
      for (size_t i = 0; i < slice.size(); ++i) inner += grad.data[i] * slice[i];
    }
    if (!std::isfinite(inner)) throw NumericError("delta_exact", "non-finite inner product");
    delta[static_cast<size_t>(v)] = inner;
  }
  return delta;
}

std::vector<double> delta_exact(const TransformerModel& proxy, const ParamVector& g,
                                std::span<const int> prefix) {
  if (prefix.empty()) throw std::invalid_argument("delta_exact: empty prefix");
  if (!proxy.params.same_layout(g))
    throw std::invalid_argument("delta_exact: gradient layout does not match proxy");
  MaskedSequence seq;
  seq.tokens.assign(prefix.begin(), prefix.end());
  seq.loss_mask.assign(prefix.size(), 0);
  PackedBatch batch;
  batch.tokens = seq.tokens;
  for (size_t t = 0; t < prefix.size(); ++t) batch.positions.push_back(static_cast<int>(t));
  batch.spans.push_back({0, static_cast<int64_t>(prefix.size())});
  batch.targets.assign(prefix.size(), -1);
  batch.weights.assign(prefix.size(), 0.0);

  Tape tape;
  ParamLeafMap leaves = make_param_leaves(tape, proxy.params);
  Tape::Id logits = transformer_logits_graph(tape, proxy.config, leaves, batch);
  Tape::Id logp = tape.log_softmax_rows(logits);
  return exact_delta_from_graph(tape, logp, static_cast<int64_t>(prefix.size()) - 1, leaves, g);
}

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

double signed_cosine(std::span<const double> delta, std::span<const double> delta_hat) {
  if (delta.size() != delta_hat.size())
    throw std::invalid_argument("signed_cosine: length mismatch");
  const double na = norm2(delta), nb = norm2(delta_hat);
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("signed_cosine: zero-norm input");
  return std::clamp(inner(delta, delta_hat) / (na * nb), -1.0, 1.0);
}

double relative_error(std::span<const double> delta, std::span<const double> delta_hat) {
  const double c = signed_cosine(delta, delta_hat);
  return std::sqrt(std::max(0.0, 1.0 - c * c));
}

std::vector<double> adjusted_distribution(std::span<const double> teacher_logp,
                                          const std::vector<double>* delta, double tau,
                                          double lambda) {
  if (teacher_logp.empty()) throw std::invalid_argument("adjusted_distribution: empty input");
  if (tau <= 0.0) throw std::invalid_argument("adjusted_distribution: tau must be > 0");
  if (lambda < 0.0) throw std::invalid_argument("adjusted_distribution: lambda must be >= 0");
  if ((lambda > 0.0) != (delta != nullptr))
    throw std::invalid_argument("adjusted_distribution: delta must be present iff lambda > 0");
  for (double lp : teacher_logp)
    if (!std::isfinite(lp) || lp > 1e-9)
      throw std::invalid_argument("adjusted_distribution: not a log-probability vector");
  if (delta && delta->size() != teacher_logp.size())
    throw std::invalid_argument("adjusted_distribution: delta length mismatch");

  const size_t n = teacher_logp.size();
  std::vector<double> z(n);
  for (size_t i = 0; i < n; ++i)
    z[i] = teacher_logp[i] / tau + (delta ? lambda * (*delta)[i] : 0.0);
  const double mx = *std::max_element(z.begin(), z.end());
  if (!std::isfinite(mx)) throw NumericError("adjusted_distribution", "non-finite logit");
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    z[i] = std::exp(z[i] - mx);
    sum += z[i];
  }
  for (double& p : z) p /= sum;
  return z;
}

std::vector<double> permute_signflip(std::span<const double> delta, Rng& rng) {
  std::vector<double> out(delta.begin(), delta.end());
  // Fisher-Yates, then independent sign flips
  for (size_t i = out.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.next_below(i));
    std::swap(out[i - 1], out[j]);
  }
  for (double& v : out)
    if (rng.next_u64() & 1) v = -v;
  return out;
}

namespace {

int sample_inverse_cdf(std::span<const double> probs, double u) {
  double cum = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

int greedy_lowest_id(std::span<const double> logp) {
  int best = 0;
  for (size_t i = 1; i < logp.size(); ++i)
    if (logp[i] > logp[static_cast<size_t>(best)]) best = static_cast<int>(i);
  return best;
}

}  // namespace

TraceRecord generate_trace(const TransformerModel& teacher, const SamplerSpec& spec,
                           const PenaltyContext* ctx, std::span<const int> prompt,
                           std::optional<long> gold_answer) {
  spec.validate();
  if (prompt.empty()) throw std::invalid_argument("generate_trace: empty prompt");
  if (spec.is_penalty_kind() != (ctx != nullptr))
    throw std::invalid_argument(
        "generate_trace: penalty context required iff kind is a penalty kind");

  TraceRecord record;
  record.prompt_tokens.assign(prompt.begin(), prompt.end());
  record.spec = spec;

  Rng rng_sample(derive_seed(spec.rng_seed, 0));
  Rng rng_perm(derive_seed(spec.rng_seed, 1));

  std::vector<int> seq(prompt.begin(), prompt.end());
  const int max_len = teacher.config.max_seq_len;
  for (int step = 0; step < spec.max_tokens; ++step) {
    if (static_cast<int>(seq.size()) >= max_len) break;  // truncated generation
    std::vector<double> logp = forward_last_logits(teacher, seq);
    log_softmax_inplace(logp.data(), logp.size());
    record.teacher_forward_count += 1;

    std::vector<double> delta;
    switch (spec.kind) {
      case SamplerKind::temperature:
        break;
      case SamplerKind::antidistill:
        delta = delta_hat(*ctx, seq);
        record.proxy_forward_count += 2;
        break;
      case SamplerKind::permutation:
        // re-permuted independently at every token step
        delta = permute_signflip(delta_hat(*ctx, seq), rng_perm);
        record.proxy_forward_count += 2;
        break;
      case SamplerKind::exact_oracle:
        delta = delta_exact(ctx->proxy, ctx->grad, seq);
        record.proxy_forward_count += 1;
        break;
    }

    int token;
    if (spec.kind == SamplerKind::temperature && spec.tau == 0.0) {
      token = greedy_lowest_id(logp);
    } else {
      const bool use_delta = spec.is_penalty_kind() && spec.lambda > 0.0;
      std::vector<double> probs =
          adjusted_distribution(logp, use_delta ? &delta : nullptr, spec.tau, spec.lambda);
      token = sample_inverse_cdf(probs, rng_sample.next_double());
    }
    seq.push_back(token);
    record.generated_tokens.push_back(token);
    if (token == tasks::Vocab::kEos) break;
  }

  record.extracted_answer = tasks::extract_answer(record.generated_tokens);
  record.correct =
      gold_answer.has_value() && record.extracted_answer.has_value() &&
      *record.extracted_answer == *gold_answer;
  return record;
}

std::vector<TraceRecord> generate_traces(const TransformerModel& teacher,
                                         const SamplerSpec& spec, const PenaltyContext* ctx,
                                         std::span<const std::vector<int>> prompts,
                                         std::span<const long> gold_answers) {
  if (!gold_answers.empty() && gold_answers.size() != prompts.size())
    throw std::invalid_argument("generate_traces: gold answer count mismatch");
  std::vector<TraceRecord> out(prompts.size());
  parallel_for(prompts.size(), [&](size_t i) {
    SamplerSpec per_trace = spec;
    per_trace.rng_seed = derive_seed(spec.rng_seed, i);
    std::optional<long> gold;
    if (!gold_answers.empty()) gold = gold_answers[i];
    out[i] = generate_trace(teacher, per_trace, ctx, prompts[i], gold);
  });
  return out;
}

std::vector<EpsSweepRow> epsilon_error_sweep(const TransformerModel& proxy,
                                             const ParamVector& g,
                                             std::span<const std::vector<int>> contexts,
                                             std::span<const double> eps_grid) {
  if (contexts.size() < 10)
    throw std::invalid_argument("epsilon_error_sweep: need at least 10 contexts");
  if (eps_grid.empty()) throw std::invalid_argument("epsilon_error_sweep: empty grid");
  const auto [lo, hi] = std::minmax_element(eps_grid.begin(), eps_grid.end());
  if (*lo <= 0.0) throw std::invalid_argument("epsilon_error_sweep: epsilons must be positive");
  if (*hi / *lo < 1e6)
    throw std::invalid_argument("epsilon_error_sweep: grid must span >= 6 orders of magnitude");
  if (g.l2_norm() == 0.0)
    throw std::invalid_argument("epsilon_error_sweep: g = 0 leaves the error undefined");

  std::vector<std::vector<double>> exact(contexts.size());
  parallel_for(contexts.size(), [&](size_t i) { exact[i] = delta_exact(proxy, g, contexts[i]); });

  std::vector<EpsSweepRow> rows;
  rows.reserve(eps_grid.size());
  for (double eps : eps_grid) {
    PenaltyContext ctx;
    ctx.proxy = proxy;
    ctx.proxy_plus = TransformerModel{proxy.config, perturb(proxy.params, g, eps, +1)};
    ctx.proxy_minus = TransformerModel{proxy.config, perturb(proxy.params, g, eps, -1)};
    ctx.grad = g;
    ctx.epsilon = eps;
    std::vector<double> errors(contexts.size()), cosines(contexts.size());
    parallel_for(contexts.size(), [&](size_t i) {
      const std::vector<double> fd = delta_hat(ctx, contexts[i]);
      errors[i] = relative_error(exact[i], fd);
      cosines[i] = signed_cosine(exact[i], fd);
    });
    EpsSweepRow row{eps, 0.0, 0.0};
    for (size_t i = 0; i < contexts.size(); ++i) {
      row.mean_error += errors[i];
      row.mean_cosine += cosines[i];
    }
    row.mean_error /= static_cast<double>(contexts.size());
    row.mean_cosine /= static_cast<double>(contexts.size());
    rows.push_back(row);
  }
  return rows;
}

double default_epsilon() { return 1e-5; }

void write_traces_jsonl(const std::filesystem::path& path, std::span<const TraceRecord> traces) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_traces_jsonl: cannot open " + path.string());
  for (const auto& t : traces) {
    nlohmann::ordered_json j;
    j["prompt_tokens"] = t.prompt_tokens;
    j["generated_tokens"] = t.generated_tokens;
    j["sampler"] = nlohmann::json::parse(t.spec.to_json());
    j["teacher_forward_count"] = t.teacher_forward_count;
    j["proxy_forward_count"] = t.proxy_forward_count;
    if (t.extracted_answer)
      j["extracted_answer"] = *t.extracted_answer;
    else
      j["extracted_answer"] = nullptr;
    j["correct"] = t.correct;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_traces_jsonl: write failed for " + path.string());
}

std::vector<TraceRecord> read_traces_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_traces_jsonl: cannot open " + path.string());
  std::vector<TraceRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TraceRecord t;
    t.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
    t.generated_tokens = j.at("generated_tokens").get<std::vector<int>>();
    t.spec = SamplerSpec::from_json(j.at("sampler").dump());
    t.teacher_forward_count = j.at("teacher_forward_count").get<long>();
    t.proxy_forward_count = j.at("proxy_forward_count").get<long>();
    if (!j.at("extracted_answer").is_null()) t.extracted_answer = j.at("extracted_answer").get<long>();
    t.correct = j.at("correct").get<bool>();
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<MaskedSequence> traces_to_masked_sequences(std::span<const TraceRecord> traces) {
  std::vector<MaskedSequence> out;
  out.reserve(traces.size());
  for (const auto& t : traces)
    out.push_back(tasks::to_masked_sequence(t.prompt_tokens, t.generated_tokens));
  return out;
}

}  // namespace ads::sampler
