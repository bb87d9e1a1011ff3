#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ads/gradstore.hpp"
#include "ads/model.hpp"
#include "ads/rng.hpp"

namespace ads::sampler {

enum class SamplerKind { temperature, antidistill, permutation, exact_oracle };

std::string kind_name(SamplerKind kind);
SamplerKind kind_from_name(const std::string& name);

struct SamplerSpec {
  SamplerKind kind = SamplerKind::temperature;
  double tau = 0.6;
  double lambda = 0.0;
  double epsilon = 1e-5;  // see default_epsilon() for the swept value
  int max_tokens = 24;
  uint64_t rng_seed = 0;

  bool is_penalty_kind() const {
    return kind == SamplerKind::antidistill || kind == SamplerKind::permutation ||
           kind == SamplerKind::exact_oracle;
  }
  // temperature permits tau = 0 (greedy); penalty kinds require tau > 0
  // because Eq-style scaling only divides the teacher term by tau, so a
  // greedy limit would silently erase the penalty.
  void validate() const;

  std::string to_json() const;
  static SamplerSpec from_json(const std::string& text);
};

// The two perturbed proxy copies are built once and reused for every token;
// each delta_hat costs exactly two proxy forward passes.
struct PenaltyContext {
  TransformerModel proxy;  // unperturbed theta_P (exact-oracle kind, diagnostics)
  TransformerModel proxy_plus;
  TransformerModel proxy_minus;
  ParamVector grad;  // raw downstream-loss gradient g
  double epsilon = 0.0;
  uint64_t grad_hash = 0;
  std::string grad_artifact_name;
};

PenaltyContext make_penalty_context(const TransformerModel& proxy,
                                    const gradstore::GradientArtifact& artifact, double epsilon,
                                    const std::string& grad_artifact_name = "student_grad");

struct TraceRecord {
  std::vector<int> prompt_tokens;
  std::vector<int> generated_tokens;
  SamplerSpec spec;
  long teacher_forward_count = 0;
  long proxy_forward_count = 0;
  std::optional<long> extracted_answer;
  bool correct = false;
};

// Central finite difference of proxy log-probs along g, all tokens at once.
std::vector<double> delta_hat(const PenaltyContext& ctx, std::span<const int> prefix);

// Exact inner products <g, grad_theta log p(v|prefix)>, one reverse pass per
// vocabulary entry. Desk scale only.
std::vector<double> delta_exact(const TransformerModel& proxy, const ParamVector& g,
                                std::span<const int> prefix);

// Shared core of delta_exact, exposed so toy models with hand-derivable
// gradients can drive the same code path in tests.
std::vector<double> exact_delta_from_graph(Tape& tape, Tape::Id log_probs, int64_t row,
                                           const ParamLeafMap& leaves, const ParamVector& g);

// |sin(angle)| between the two vectors: sqrt(1 - cos^2). Sign-insensitive.
double relative_error(std::span<const double> delta, std::span<const double> delta_hat);
double signed_cosine(std::span<const double> delta, std::span<const double> delta_hat);

// softmax((1/tau) * teacher_logp + lambda * delta); delta must be present
// exactly when lambda > 0.
std::vector<double> adjusted_distribution(std::span<const double> teacher_logp,
                                          const std::vector<double>* delta, double tau,
                                          double lambda);

// Uniformly random permutation with independent per-entry sign flips;
// preserves the magnitude multiset exactly.
std::vector<double> permute_signflip(std::span<const double> delta, Rng& rng);

TraceRecord generate_trace(const TransformerModel& teacher, const SamplerSpec& spec,
                           const PenaltyContext* ctx, std::span<const int> prompt,
                           std::optional<long> gold_answer = std::nullopt);

// One trace per prompt, each with an rng derived from (spec.rng_seed, index);
// parallel and serial runs produce identical outputs.
std::vector<TraceRecord> generate_traces(const TransformerModel& teacher,
                                         const SamplerSpec& spec, const PenaltyContext* ctx,
                                         std::span<const std::vector<int>> prompts,
                                         std::span<const long> gold_answers);

struct EpsSweepRow {
  double epsilon = 0.0;
  double mean_error = 0.0;
  double mean_cosine = 0.0;
};

// Mean sine-error of delta_hat against delta_exact per epsilon. The signed
// cosine column is diagnostic only (the sine formula cannot see sign flips).
std::vector<EpsSweepRow> epsilon_error_sweep(const TransformerModel& proxy,
                                             const ParamVector& g,
                                             std::span<const std::vector<int>> contexts,
                                             std::span<const double> eps_grid);

// Double-precision sweet spot for the default desk-scale proxy, recorded
// from the epsilon sweep.
double default_epsilon();

void write_traces_jsonl(const std::filesystem::path& path, std::span<const TraceRecord> traces);
std::vector<TraceRecord> read_traces_jsonl(const std::filesystem::path& path);

std::vector<MaskedSequence> traces_to_masked_sequences(std::span<const TraceRecord> traces);

}  // namespace ads::sampler
