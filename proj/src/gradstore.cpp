#include "ads/gradstore.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <stdexcept>

namespace ads::gradstore {

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

GradientArtifact compute_downstream_grad(const TransformerModel& proxy,
                                         std::span<const MaskedSequence> holdout_traces,
                                         const std::string& source_trace_artifact) {
  if (holdout_traces.empty())
    throw std::invalid_argument("compute_downstream_grad: empty holdout traces");
  auto [loss, grad] = accumulate_loss_grad(proxy, holdout_traces);
  GradientArtifact artifact;
  artifact.norm = grad.l2_norm();
  artifact.g = std::move(grad);
  artifact.source_trace_artifact = source_trace_artifact;
  artifact.proxy_config_hash = proxy.config.hash();
  artifact.loss = loss;
  artifact.created_at = iso_timestamp();
  return artifact;
}

void save_gradient(const GradientArtifact& artifact, const std::filesystem::path& dir,
                   const std::string& name) {
  std::filesystem::create_directories(dir);
  artifact.g.save(dir / (name + ".params.bin"));
  nlohmann::ordered_json j;
  j["source_trace_artifact"] = artifact.source_trace_artifact;
  j["proxy_config_hash"] = artifact.proxy_config_hash;
  j["norm"] = artifact.norm;
  j["loss"] = artifact.loss;
  j["created_at"] = artifact.created_at;
  std::ofstream os(dir / (name + ".json"));
  if (!os) throw std::runtime_error("save_gradient: cannot write sidecar for " + name);
  os << j.dump(2) << "\n";
}

GradientArtifact load_gradient(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream is(dir / (name + ".json"));
  if (!is) throw std::runtime_error("load_gradient: missing sidecar for " + name);
  nlohmann::json j;
  is >> j;
  GradientArtifact artifact;
  artifact.g = ParamVector::load(dir / (name + ".params.bin"));
  artifact.source_trace_artifact = j.at("source_trace_artifact").get<std::string>();
  artifact.proxy_config_hash = j.at("proxy_config_hash").get<uint64_t>();
  artifact.norm = j.at("norm").get<double>();
  artifact.loss = j.value("loss", 0.0);
  artifact.created_at = j.value("created_at", "");
  const double actual = artifact.g.l2_norm();
  if (std::abs(actual - artifact.norm) > 1e-9 * std::max(1.0, artifact.norm))
    throw std::runtime_error("load_gradient: stored norm does not match values for " + name);
  return artifact;
}

}  // namespace ads::gradstore
