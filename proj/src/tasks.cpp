#include "ads/tasks.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "ads/rng.hpp"

namespace ads::tasks {

namespace {

void append_number(std::vector<int>& out, long value) {
  if (value == 0) {
    out.push_back(0);
    return;
  }
  int digits[20];
  int n = 0;
  for (long v = value; v > 0; v /= 10) digits[n++] = static_cast<int>(v % 10);
  for (int i = n - 1; i >= 0; --i) out.push_back(digits[i]);
}

std::string prompt_key(std::span<const int> prompt) {
  std::string key;
  key.reserve(prompt.size());
  for (int t : prompt) key.push_back(static_cast<char>('a' + t));
  return key;
}

long operand_range_low(int digits) {
  if (digits <= 1) return 0;
  long v = 1;
  for (int i = 1; i < digits; ++i) v *= 10;
  return v;
}

long operand_range_high(int digits) {
  long v = 1;
  for (int i = 0; i < digits; ++i) v *= 10;
  return v - 1;
}

}  // namespace

TaskInstance make_instance(std::span<const long> operands) {
  if (operands.size() < 2) throw std::invalid_argument("make_instance: need at least two operands");
  TaskInstance inst;
  inst.prompt_tokens.push_back(Vocab::kQuestion);
  for (size_t i = 0; i < operands.size(); ++i) {
    if (i > 0) inst.prompt_tokens.push_back(Vocab::kPlus);
    append_number(inst.prompt_tokens, operands[i]);
  }
  inst.prompt_tokens.push_back(Vocab::kEquals);

  inst.gold_trace_tokens.push_back(Vocab::kReason);
  long running = operands[0];
  for (size_t i = 1; i < operands.size(); ++i) {
    running += operands[i];
    if (i > 1) inst.gold_trace_tokens.push_back(Vocab::kSep);
    append_number(inst.gold_trace_tokens, running);
  }
  inst.gold_trace_tokens.push_back(Vocab::kAnswer);
  append_number(inst.gold_trace_tokens, running);
  inst.gold_trace_tokens.push_back(Vocab::kEos);
  inst.gold_answer = running;
  return inst;
}

std::string Vocab::token_str(int id) {
  if (is_digit(id)) return std::string(1, static_cast<char>('0' + id));
  switch (id) {
    case kPlus: return "+";
    case kEquals: return "=";
    case kSep: return ";";
    case kQuestion: return "<Q>";
    case kReason: return "<R>";
    case kAnswer: return "<ANS>";
    case kEos: return "<EOS>";
    case kPad: return "<PAD>";
    default: throw std::invalid_argument("Vocab: unknown token id " + std::to_string(id));
  }
}

std::string Vocab::detokenize(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) out += token_str(t);
  return out;
}

std::vector<int> Vocab::tokenize(const std::string& text) {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c >= '0' && c <= '9') {
      out.push_back(c - '0');
      ++i;
    } else if (c == '+') {
      out.push_back(kPlus);
      ++i;
    } else if (c == '=') {
      out.push_back(kEquals);
      ++i;
    } else if (c == ';') {
      out.push_back(kSep);
      ++i;
    } else if (c == '<') {
      const size_t close = text.find('>', i);
      if (close == std::string::npos) throw std::invalid_argument("tokenize: unterminated marker");
      const std::string marker = text.substr(i, close - i + 1);
      if (marker == "<Q>") out.push_back(kQuestion);
      else if (marker == "<R>") out.push_back(kReason);
      else if (marker == "<ANS>") out.push_back(kAnswer);
      else if (marker == "<EOS>") out.push_back(kEos);
      else if (marker == "<PAD>") out.push_back(kPad);
      else throw std::invalid_argument("tokenize: unknown marker " + marker);
      i = close + 1;
    } else {
      throw std::invalid_argument("tokenize: unexpected character '" + std::string(1, c) + "'");
    }
  }
  return out;
}

double problem_space_size(std::pair<int, int> operand_count_range,
                          std::pair<int, int> operand_digit_range) {
  const auto [kmin, kmax] = operand_count_range;
  const auto [dmin, dmax] = operand_digit_range;
  double per_operand = 0;
  for (int d = dmin; d <= dmax; ++d)
    per_operand += static_cast<double>(operand_range_high(d) - operand_range_low(d) + 1);
  double total = 0;
  for (int k = kmin; k <= kmax; ++k) total += std::pow(per_operand, k);
  return total;
}

std::vector<TaskInstance> generate_dataset(uint64_t seed, int count,
                                           std::pair<int, int> operand_count_range,
                                           std::pair<int, int> operand_digit_range) {
  const auto [kmin, kmax] = operand_count_range;
  const auto [dmin, dmax] = operand_digit_range;
  if (count <= 0) throw std::invalid_argument("generate_dataset: count must be positive");
  if (kmin < 2 || kmax < kmin)
    throw std::invalid_argument("generate_dataset: bad operand count range");
  if (dmin < 1 || dmax < dmin || dmax > 9)
    throw std::invalid_argument("generate_dataset: bad operand digit range");
  if (static_cast<double>(count) > problem_space_size(operand_count_range, operand_digit_range))
    throw std::invalid_argument("generate_dataset: count exceeds number of distinct problems");

  Rng rng(seed);
  std::vector<TaskInstance> out;
  out.reserve(static_cast<size_t>(count));
  std::unordered_set<std::string> seen;
  std::vector<long> operands;
  // dedup by resampling; the count<=space precondition guarantees progress
  while (out.size() < static_cast<size_t>(count)) {
    const int k = kmin + static_cast<int>(rng.next_below(static_cast<uint64_t>(kmax - kmin + 1)));
    operands.clear();
    for (int i = 0; i < k; ++i) {
      const int d = dmin + static_cast<int>(rng.next_below(static_cast<uint64_t>(dmax - dmin + 1)));
      const long lo = operand_range_low(d), hi = operand_range_high(d);
      operands.push_back(lo + static_cast<long>(rng.next_below(static_cast<uint64_t>(hi - lo + 1))));
    }
    TaskInstance inst = make_instance(operands);
    if (seen.insert(prompt_key(inst.prompt_tokens)).second) out.push_back(std::move(inst));
  }
  return out;
}

DatasetSplits split_dataset(std::vector<TaskInstance> pool, double train_fraction) {
  if (pool.size() < 2) throw std::invalid_argument("split_dataset: pool smaller than 2");
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw std::invalid_argument("split_dataset: train_fraction must be in (0, 1)");
  const auto n_train =
      static_cast<size_t>(std::floor(train_fraction * static_cast<double>(pool.size())));
  DatasetSplits splits;
  splits.train.assign(pool.begin(), pool.begin() + static_cast<long>(n_train));
  splits.holdout.assign(pool.begin() + static_cast<long>(n_train), pool.end());
  return splits;
}

std::vector<TaskInstance> remove_prompt_overlap(std::vector<TaskInstance> candidates,
                                                std::span<const TaskInstance> reference) {
  std::unordered_set<std::string> keys;
  for (const auto& inst : reference) keys.insert(prompt_key(inst.prompt_tokens));
  std::erase_if(candidates, [&](const TaskInstance& inst) {
    return keys.contains(prompt_key(inst.prompt_tokens));
  });
  return candidates;
}

std::optional<long> extract_answer(std::span<const int> trace_tokens) {
  size_t start = trace_tokens.size();
  for (size_t i = trace_tokens.size(); i-- > 0;) {
    if (trace_tokens[i] == Vocab::kAnswer) {
      start = i + 1;
      break;
    }
  }
  if (start >= trace_tokens.size()) return std::nullopt;
  long value = 0;
  size_t n_digits = 0;
  for (size_t i = start; i < trace_tokens.size() && Vocab::is_digit(trace_tokens[i]); ++i) {
    if (++n_digits > 18) return std::nullopt;  // not a plausible answer
    value = value * 10 + trace_tokens[i];
  }
  if (n_digits == 0) return std::nullopt;
  return value;
}

std::vector<int> build_icl_prompt(const TaskInstance& instance,
                                  std::span<const TaskInstance> exemplars, int k,
                                  int max_seq_len) {
  if (k < 0 || static_cast<size_t>(k) > exemplars.size())
    throw std::invalid_argument("build_icl_prompt: k exceeds exemplar count");
  std::vector<int> out;
  for (int i = 0; i < k; ++i) {
    const auto& ex = exemplars[static_cast<size_t>(i)];
    if (ex.prompt_tokens == instance.prompt_tokens)
      throw std::invalid_argument("build_icl_prompt: exemplar collides with instance");
    out.insert(out.end(), ex.prompt_tokens.begin(), ex.prompt_tokens.end());
    out.insert(out.end(), ex.gold_trace_tokens.begin(), ex.gold_trace_tokens.end());
  }
  out.insert(out.end(), instance.prompt_tokens.begin(), instance.prompt_tokens.end());
  if (static_cast<int>(out.size()) > max_seq_len)
    throw std::invalid_argument("build_icl_prompt: prompt exceeds max_seq_len");
  return out;
}

MaskedSequence to_masked_sequence(std::span<const int> prompt_tokens,
                                  std::span<const int> trace_tokens) {
  MaskedSequence seq;
  seq.tokens.reserve(prompt_tokens.size() + trace_tokens.size());
  seq.tokens.insert(seq.tokens.end(), prompt_tokens.begin(), prompt_tokens.end());
  seq.tokens.insert(seq.tokens.end(), trace_tokens.begin(), trace_tokens.end());
  seq.loss_mask.assign(prompt_tokens.size(), 0);
  seq.loss_mask.resize(seq.tokens.size(), 1);
  return seq;
}

void write_instances_jsonl(const std::filesystem::path& path,
                           std::span<const TaskInstance> instances, const std::string& split,
                           const std::string& source_artifact) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_instances_jsonl: cannot open " + path.string());
  for (const auto& inst : instances) {
    nlohmann::ordered_json j;
    j["prompt_tokens"] = inst.prompt_tokens;
    j["trace_tokens"] = inst.gold_trace_tokens;
    j["gold_answer"] = inst.gold_answer;
    j["split"] = split;
    j["source_artifact"] = source_artifact;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write_instances_jsonl: write failed for " + path.string());
}

std::vector<TaskInstance> read_instances_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_instances_jsonl: cannot open " + path.string());
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TaskInstance inst;
    inst.prompt_tokens = j.at("prompt_tokens").get<std::vector<int>>();
    inst.gold_trace_tokens = j.at("trace_tokens").get<std::vector<int>>();
    inst.gold_answer = j.at("gold_answer").get<long>();
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace ads::tasks
