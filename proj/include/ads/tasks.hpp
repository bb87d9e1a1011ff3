#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ads/model.hpp"

namespace ads::tasks {

// Fixed symbol set for the synthetic multi-operand addition task.
// Numbers are big-endian digit runs, one symbol per token.
struct Vocab {
  static constexpr int kPlus = 10;
  static constexpr int kEquals = 11;
  static constexpr int kSep = 12;
  static constexpr int kQuestion = 13;  // <Q>
  static constexpr int kReason = 14;    // <R>
  static constexpr int kAnswer = 15;    // <ANS>
  static constexpr int kEos = 16;       // <EOS>
  static constexpr int kPad = 17;       // <PAD>
  static constexpr int kSize = 18;

  static bool is_digit(int id) { return id >= 0 && id <= 9; }
  static std::string token_str(int id);
  static std::string detokenize(std::span<const int> tokens);
  static std::vector<int> tokenize(const std::string& text);
};

// One addition problem. The prompt is "<Q> a0 + a1 (+ ai)* =", the gold
// trace lists cumulative partial sums and ends "<ANS> sum <EOS>".
struct TaskInstance {
  std::vector<int> prompt_tokens;
  std::vector<int> gold_trace_tokens;
  long gold_answer = 0;
};

struct DatasetSplits {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> holdout;
  std::vector<TaskInstance> test;
};

// Number of distinct prompts expressible under the given ranges.
double problem_space_size(std::pair<int, int> operand_count_range,
                          std::pair<int, int> operand_digit_range);

// Builds the instance for a fixed operand list (at least two operands).
TaskInstance make_instance(std::span<const long> operands);

// Deterministic per seed; prompts are unique (resampled on collision).
std::vector<TaskInstance> generate_dataset(uint64_t seed, int count,
                                           std::pair<int, int> operand_count_range,
                                           std::pair<int, int> operand_digit_range);

// First floor(train_fraction * n) instances become train, the rest holdout;
// order preserved. The test split is generated separately by the caller.
DatasetSplits split_dataset(std::vector<TaskInstance> pool, double train_fraction);

// Drops candidates whose prompt already appears in reference.
std::vector<TaskInstance> remove_prompt_overlap(std::vector<TaskInstance> candidates,
                                                std::span<const TaskInstance> reference);

// Digit run immediately after the last <ANS>; nullopt when absent or empty.
std::optional<long> extract_answer(std::span<const int> trace_tokens);

// k exemplar (prompt + gold trace) blocks followed by the instance prompt.
std::vector<int> build_icl_prompt(const TaskInstance& instance,
                                  std::span<const TaskInstance> exemplars, int k,
                                  int max_seq_len);

// prompt masked out, trace masked in
MaskedSequence to_masked_sequence(std::span<const int> prompt_tokens,
                                  std::span<const int> trace_tokens);

// --- JSONL dataset/trace files ------------------------------------------

void write_instances_jsonl(const std::filesystem::path& path,
                           std::span<const TaskInstance> instances, const std::string& split,
                           const std::string& source_artifact);
std::vector<TaskInstance> read_instances_jsonl(const std::filesystem::path& path);

}  // namespace ads::tasks
