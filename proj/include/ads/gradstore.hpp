#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "ads/model.hpp"
#include "ads/param_vector.hpp"

namespace ads::gradstore {

// The stored downstream-loss gradient g and its provenance. g is kept raw
// (not unit-normalized); the norm rides along so epsilon sweeps can stay
// scale-aware.
struct GradientArtifact {
  ParamVector g;
  std::string source_trace_artifact;
  uint64_t proxy_config_hash = 0;
  double norm = 0.0;
  double loss = 0.0;  // mean masked NLL the gradient was taken at
  std::string created_at;
};

// Gradient of the mean masked NLL of the proxy over the holdout traces.
// Sign convention: positive delta later means "sampling this token hurts
// the student".
GradientArtifact compute_downstream_grad(const TransformerModel& proxy,
                                         std::span<const MaskedSequence> holdout_traces,
                                         const std::string& source_trace_artifact);

// <name>.json metadata sidecar + <name>.params.bin values.
void save_gradient(const GradientArtifact& artifact, const std::filesystem::path& dir,
                   const std::string& name);
GradientArtifact load_gradient(const std::filesystem::path& dir, const std::string& name);

}  // namespace ads::gradstore
