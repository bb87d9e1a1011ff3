#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ads/distill.hpp"
#include "ads/model.hpp"

namespace ads {

// Everything a full experiment run needs: task shape, the three model
// configs, training recipes, sampling knobs, and the sweep grids. Serialized
// as line-oriented key=value; the canonical dump participates in artifact
// hashing.
struct ExperimentConfig {
  // task
  int operand_count_min = 2;
  int operand_count_max = 3;
  int operand_digit_min = 1;
  int operand_digit_max = 1;
  int pool_size = 400;
  double train_fraction = 0.7;
  int test_size = 160;
  int aux_size = 320;  // pretraining corpus for the proxy/student bases
  uint64_t data_seed = 101;
  uint64_t test_seed = 202;
  uint64_t aux_seed = 303;
  int icl_k = 2;

  ModelConfig teacher;
  ModelConfig proxy;
  ModelConfig student;

  distill::TrainConfig teacher_train;
  distill::TrainConfig base_train;
  distill::TrainConfig distill_train;

  // sampling
  double tau = 0.6;
  double epsilon = 1e-5;
  int max_gen_tokens = 24;
  uint64_t gen_seed_base = 9000;

  // sweep grids
  std::vector<double> lambda_grid{0.0, 0.5, 1.0, 2.0};
  std::vector<double> tau_grid{0.6, 0.9, 1.3};
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};

  // bootstrap aggregation
  int bootstrap_resamples = 10000;
  double confidence = 0.95;
  uint64_t bootstrap_seed = 4242;

  static ExperimentConfig defaults();

  // stable key=value dump in fixed key order
  std::string canonical() const;
  uint64_t hash() const;

  void apply_line(const std::string& line);  // one key=value assignment
  static ExperimentConfig from_file(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace ads
