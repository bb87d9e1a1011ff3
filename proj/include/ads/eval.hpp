#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ads/config.hpp"
#include "ads/sampler.hpp"
#include "ads/tasks.hpp"

namespace ads::pipeline {
class ArtifactStore;
}

namespace ads::eval {

// One point of the utility-distillability trade-off.
struct MetricsRow {
  std::string method;  // temperature | antidistill | permutation
  double knob = 0.0;   // tau for temperature rows, lambda otherwise
  uint64_t seed = 0;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
  double undistilled_accuracy = 0.0;
  double final_holdout_loss = 0.0;
  std::string trace_artifact;  // train traces the student distilled on
  std::string manifest_hash;
};

// Fraction of instances whose generated trace parses to the gold answer;
// unparseable or truncated generations count as incorrect.
double evaluate_accuracy(const TransformerModel& model,
                         std::span<const tasks::TaskInstance> instances,
                         const sampler::SamplerSpec& spec, const sampler::PenaltyContext* ctx);

struct BootstrapCi {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

// Seeded percentile bootstrap of the mean.
BootstrapCi bootstrap_ci(std::span<const double> values, int resamples, double confidence,
                         uint64_t seed);

struct RowSpec {
  std::string method;
  double knob = 0.0;
  uint64_t seed = 0;
};

// temperature rows vary tau, antidistill rows vary lambda; one row per seed.
std::vector<RowSpec> sweep_plan(const ExperimentConfig& cfg);

// Resolves the row's artifacts through the store and assembles the metrics.
MetricsRow run_row(pipeline::ArtifactStore& store, const RowSpec& row);

// Every planned row, appended to the store's metrics CSV as produced.
std::vector<MetricsRow> tradeoff_sweep(pipeline::ArtifactStore& store);

void append_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace ads::eval
