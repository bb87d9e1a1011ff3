#pragma once

#include <stdexcept>
#include <string>

namespace ads {

// Thrown when a computation produces a non-finite value. Carries the name of
// the operation that first went non-finite.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string op, const std::string& what)
      : std::runtime_error("numeric failure in '" + op + "': " + what), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// Training diverged (non-finite loss) at a given optimizer step.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(long step, const std::string& what)
      : std::runtime_error("training failure at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// A pipeline stage is missing a dependency artifact.
class DependencyError : public std::runtime_error {
 public:
  explicit DependencyError(std::string artifact)
      : std::runtime_error("missing dependency artifact '" + artifact + "'"),
        artifact_(std::move(artifact)) {}
  const std::string& artifact() const { return artifact_; }

 private:
  std::string artifact_;
};

}  // namespace ads
