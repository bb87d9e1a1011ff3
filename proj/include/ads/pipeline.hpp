#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ads/config.hpp"
#include "ads/gradstore.hpp"
#include "ads/sampler.hpp"
#include "ads/tasks.hpp"

namespace ads::pipeline {

// "0.0", "0.5", "1.0": integral knobs keep one decimal so names match the
// x.y convention; parsing round-trips through strtod.
std::string format_knob(double knob);

// Canonical artifact names:
//   datasets | teacher_ckpt | proxy_base | student_base | student_grad
//   teacher_<axis>=<knob>_<split>[_seed=<s>]   (generated traces)
//   student_<axis>=<knob>[_seed=<s>]           (distilled checkpoint)
//   student_<axis>=<knob>_test[_seed=<s>]      (student-generated test traces)
//   student_base_test[_seed=<s>]               (undistilled ICL baseline)
// where <axis> is lambda (antidistillation; 0.0 degenerates to temperature
// sampling at the base tau), tau (temperature baseline), or perm
// (permutation baseline at penalty weight <knob>).
struct ArtifactName {
  enum class Type {
    datasets,
    teacher_ckpt,
    proxy_base,
    student_base,
    student_grad,
    teacher_traces,
    student_ckpt,
    student_traces,
    student_base_test,
  };

  Type type = Type::datasets;
  std::string axis;  // lambda | tau | perm
  double knob = 0.0;
  std::string split;  // train | holdout | test
  std::optional<uint64_t> seed;

  std::string canonical() const;
  static ArtifactName parse(const std::string& name);
};

struct ArtifactRecord {
  std::string name;
  uint64_t config_hash = 0;
  std::map<std::string, std::string> input_hashes;  // dep name -> payload hash
  std::vector<std::string> payload_files;
  std::string payload_hash;
  std::string created_at;
  nlohmann::json meta;
};

// Directory-per-artifact store with content-addressed staleness checks.
// Payload bytes are a pure function of config + dependency payloads, so a
// warm cache never recomputes and a cold rebuild is byte-identical.
class ArtifactStore {
 public:
  ArtifactStore(std::filesystem::path root, ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path artifact_dir(const std::string& name) const { return root_ / name; }
  std::filesystem::path metrics_csv_path() const { return root_ / "metrics.csv"; }

  std::vector<std::string> dependencies(const std::string& name) const;
  bool has_record(const std::string& name) const;
  bool is_valid(const std::string& name) const;

  // Topologically ordered build steps covering exactly the missing/stale
  // closure; empty on a warm cache.
  std::vector<std::string> resolve_plan(const std::string& name) const;

  // resolve_plan + run_stage for each step
  void ensure(const std::string& name);

  // Runs one stage; all dependencies must already be valid. Partial outputs
  // are deleted on failure.
  ArtifactRecord run_stage(const std::string& name);

  ArtifactRecord record(const std::string& name) const;
  void remove(const std::string& name);
  std::vector<std::string> list() const;

  // --- typed payload accessors -----------------------------------------
  TransformerModel load_model(const std::string& name) const;
  std::vector<sampler::TraceRecord> load_traces(const std::string& name) const;
  gradstore::GradientArtifact load_gradient_artifact() const;
  // datasets payloads
  std::vector<tasks::TaskInstance> load_split(const std::string& split) const;

 private:
  ArtifactRecord execute_stage(const ArtifactName& name, const std::string& canonical,
                               const std::filesystem::path& out_dir);
  std::string payload_hash_of(const std::string& name) const;
  sampler::PenaltyContext build_penalty_context() const;
  uint64_t stage_rng_seed(const std::string& canonical) const;

  std::filesystem::path root_;
  ExperimentConfig cfg_;
};

}  // namespace ads::pipeline
