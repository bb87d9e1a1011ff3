#include "ads/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ads/hashing.hpp"
#include "ads/pipeline.hpp"
#include "ads/rng.hpp"

namespace ads::eval {

double evaluate_accuracy(const TransformerModel& model,
                         std::span<const tasks::TaskInstance> instances,
                         const sampler::SamplerSpec& spec, const sampler::PenaltyContext* ctx) {
  if (instances.empty()) throw std::invalid_argument("evaluate_accuracy: empty instances");
  std::vector<std::vector<int>> prompts;
  std::vector<long> gold;
  prompts.reserve(instances.size());
  gold.reserve(instances.size());
  for (const auto& inst : instances) {
    prompts.push_back(inst.prompt_tokens);
    gold.push_back(inst.gold_answer);
  }
  const auto traces = sampler::generate_traces(model, spec, ctx, prompts, gold);
  size_t correct = 0;
  for (const auto& t : traces) correct += t.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(traces.size());
}

BootstrapCi bootstrap_ci(std::span<const double> values, int resamples, double confidence,
                         uint64_t seed) {
  if (values.size() < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 values");
  if (resamples < 1) throw std::invalid_argument("bootstrap_ci: resamples must be positive");
  if (confidence <= 0.0 || confidence >= 1.0)
    throw std::invalid_argument("bootstrap_ci: confidence must be in (0, 1)");

  const size_t n = values.size();
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);

  Rng rng(seed);
  std::vector<double> means(static_cast<size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += values[rng.next_below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = static_cast<size_t>(std::ceil(pos));
    const double frac = pos - static_cast<double>(lo);
    return means[lo] * (1.0 - frac) + means[hi] * frac;
  };
  const double alpha = 1.0 - confidence;
  return {mean, quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

std::vector<RowSpec> sweep_plan(const ExperimentConfig& cfg) {
  std::vector<RowSpec> rows;
  for (uint64_t seed : cfg.seeds) {
    for (double tau : cfg.tau_grid) rows.push_back({"temperature", tau, seed});
    for (double lambda : cfg.lambda_grid) rows.push_back({"antidistill", lambda, seed});
  }
  return rows;
}

namespace {

// temperature rows at the base tau share the lambda=0.0 artifacts; the
// Procedure's lambda=0 command is plain temperature sampling
pipeline::ArtifactName row_teacher_traces(const ExperimentConfig& cfg, const RowSpec& row,
                                          const std::string& split) {
  pipeline::ArtifactName name;
  name.type = pipeline::ArtifactName::Type::teacher_traces;
  name.split = split;
  name.seed = row.seed;
  if (row.method == "temperature") {
    if (row.knob == cfg.tau) {
      name.axis = "lambda";
      name.knob = 0.0;
    } else {
      name.axis = "tau";
      name.knob = row.knob;
    }
  } else if (row.method == "antidistill") {
    name.axis = "lambda";
    name.knob = row.knob;
  } else if (row.method == "permutation") {
    name.axis = "perm";
    name.knob = row.knob;
  } else {
    throw std::invalid_argument("run_row: unknown method '" + row.method + "'");
  }
  return name;
}

}  // namespace

MetricsRow run_row(pipeline::ArtifactStore& store, const RowSpec& row) {
  const ExperimentConfig& cfg = store.config();
  pipeline::ArtifactName teacher_test = row_teacher_traces(cfg, row, "test");
  pipeline::ArtifactName teacher_train = row_teacher_traces(cfg, row, "train");
  pipeline::ArtifactName student_ckpt = teacher_train;
  student_ckpt.type = pipeline::ArtifactName::Type::student_ckpt;
  student_ckpt.split.clear();
  pipeline::ArtifactName student_test = student_ckpt;
  student_test.type = pipeline::ArtifactName::Type::student_traces;
  student_test.split = "test";
  pipeline::ArtifactName undistilled;
  undistilled.type = pipeline::ArtifactName::Type::student_base_test;
  undistilled.seed = row.seed;

  for (const auto& name :
       {teacher_test.canonical(), student_test.canonical(), undistilled.canonical()})
    store.ensure(name);

  MetricsRow out;
  out.method = row.method;
  out.knob = row.knob;
  out.seed = row.seed;
  out.teacher_accuracy = store.record(teacher_test.canonical()).meta.at("accuracy").get<double>();
  out.student_accuracy = store.record(student_test.canonical()).meta.at("accuracy").get<double>();
  out.undistilled_accuracy =
      store.record(undistilled.canonical()).meta.at("accuracy").get<double>();
  out.final_holdout_loss =
      store.record(student_ckpt.canonical()).meta.at("final_holdout_loss").get<double>();
  out.trace_artifact = teacher_train.canonical();

  uint64_t manifest = cfg.hash();
  for (const auto& name : {teacher_test.canonical(), teacher_train.canonical(),
                           student_ckpt.canonical(), student_test.canonical(),
                           undistilled.canonical()})
    manifest = fnv1a64_extend(manifest, store.record(name).payload_hash);
  out.manifest_hash = hex64(manifest);
  return out;
}

std::vector<MetricsRow> tradeoff_sweep(pipeline::ArtifactStore& store) {
  std::vector<MetricsRow> rows;
  for (const auto& spec : sweep_plan(store.config())) {
    rows.push_back(run_row(store, spec));
    append_metrics_csv(store.metrics_csv_path(), {&rows.back(), 1});
  }
  return rows;
}

void append_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("append_metrics_csv: cannot open " + path.string());
  os.precision(12);
  if (fresh)
    os << "method,knob,seed,teacher_acc,student_acc,undistilled_acc,final_holdout_loss,"
          "trace_artifact,manifest_hash\n";
  for (const auto& r : rows) {
    os << r.method << "," << r.knob << "," << r.seed << "," << r.teacher_accuracy << ","
       << r.student_accuracy << "," << r.undistilled_accuracy << "," << r.final_holdout_loss
       << "," << r.trace_artifact << "," << r.manifest_hash << "\n";
  }
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_metrics_csv: cannot open " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MetricsRow r;
    std::getline(ss, r.method, ',');
    std::getline(ss, field, ',');
    r.knob = std::stod(field);
    std::getline(ss, field, ',');
    r.seed = std::stoull(field);
    std::getline(ss, field, ',');
    r.teacher_accuracy = std::stod(field);
    std::getline(ss, field, ',');
    r.student_accuracy = std::stod(field);
    std::getline(ss, field, ',');
    r.undistilled_accuracy = std::stod(field);
    std::getline(ss, field, ',');
    r.final_holdout_loss = std::stod(field);
    std::getline(ss, r.trace_artifact, ',');
    std::getline(ss, r.manifest_hash, ',');
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ads::eval
