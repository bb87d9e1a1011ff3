#include "ads/pipeline.hpp"

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "ads/distill.hpp"
#include "ads/errors.hpp"
#include "ads/hashing.hpp"
#include "ads/rng.hpp"

namespace ads::pipeline {

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// exclusive store-wide lock held for the duration of a stage write
class StoreLock {
 public:
  explicit StoreLock(const std::filesystem::path& root) {
    fd_ = ::open((root / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw std::runtime_error("store: cannot open lock file");
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw std::runtime_error("store: cannot acquire lock");
    }
  }
  ~StoreLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  StoreLock(const StoreLock&) = delete;
  StoreLock& operator=(const StoreLock&) = delete;

 private:
  int fd_;
};

bool parse_suffix_seed(std::string& body, std::optional<uint64_t>& seed) {
  const std::string tag = "_seed=";
  const auto pos = body.rfind(tag);
  if (pos == std::string::npos) return true;
  const std::string digits = body.substr(pos + tag.size());
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) return false;
  seed = std::stoull(digits);
  body.resize(pos);
  return true;
}

}  // namespace

std::string format_knob(double knob) {
  char buf[40];
  if (knob == static_cast<long>(knob) && std::abs(knob) < 1e15) {
    std::snprintf(buf, sizeof(buf), "%.1f", knob);
  } else {
    std::snprintf(buf, sizeof(buf), "%g", knob);
  }
  return buf;
}

std::string ArtifactName::canonical() const {
  std::string out;
  switch (type) {
    case Type::datasets: return "datasets";
    case Type::teacher_ckpt: return "teacher_ckpt";
    case Type::proxy_base: return "proxy_base";
    case Type::student_base: return "student_base";
    case Type::student_grad: return "student_grad";
    case Type::teacher_traces:
      out = "teacher_" + axis + "=" + format_knob(knob) + "_" + split;
      break;
    case Type::student_ckpt:
      out = "student_" + axis + "=" + format_knob(knob);
      break;
    case Type::student_traces:
      out = "student_" + axis + "=" + format_knob(knob) + "_test";
      break;
    case Type::student_base_test:
      out = "student_base_test";
      break;
  }
  if (seed) out += "_seed=" + std::to_string(*seed);
  return out;
}

ArtifactName ArtifactName::parse(const std::string& name) {
  ArtifactName out;
  std::string body = name;
  if (!parse_suffix_seed(body, out.seed))
    throw std::invalid_argument("artifact name: bad seed suffix in '" + name + "'");

  const auto simple = [&](const std::string& text, Type type) {
    if (body != text) return false;
    out.type = type;
    return true;
  };
  if (simple("datasets", Type::datasets) || simple("teacher_ckpt", Type::teacher_ckpt) ||
      simple("proxy_base", Type::proxy_base) || simple("student_base", Type::student_base) ||
      simple("student_grad", Type::student_grad) ||
      simple("student_base_test", Type::student_base_test)) {
    if (out.seed && (out.type != Type::student_base_test))
      throw std::invalid_argument("artifact name: '" + name + "' does not take a seed");
    return out;
  }

  std::string rest;
  bool teacher = false;
  if (body.starts_with("teacher_")) {
    teacher = true;
    rest = body.substr(8);
  } else if (body.starts_with("student_")) {
    rest = body.substr(8);
  } else {
    throw std::invalid_argument("artifact name: cannot parse '" + name + "'");
  }

  const auto eq = rest.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("artifact name: cannot parse '" + name + "'");
  out.axis = rest.substr(0, eq);
  if (out.axis != "lambda" && out.axis != "tau" && out.axis != "perm")
    throw std::invalid_argument("artifact name: unknown axis '" + out.axis + "' in '" + name + "'");
  std::string knob_str = rest.substr(eq + 1);

  std::string split;
  for (const char* s : {"_train", "_holdout", "_test"}) {
    if (knob_str.ends_with(s)) {
      split = std::string(s).substr(1);
      knob_str.resize(knob_str.size() - split.size() - 1);
      break;
    }
  }
  if (knob_str.empty() || knob_str.find_first_not_of("0123456789.-e+") != std::string::npos)
    throw std::invalid_argument("artifact name: bad knob in '" + name + "'");
  out.knob = std::stod(knob_str);

  if (teacher) {
    if (split.empty())
      throw std::invalid_argument("artifact name: teacher traces need a split in '" + name + "'");
    out.type = Type::teacher_traces;
    out.split = split;
  } else if (split == "test") {
    out.type = Type::student_traces;
    out.split = split;
  } else if (split.empty()) {
    out.type = Type::student_ckpt;
  } else {
    throw std::invalid_argument("artifact name: student artifacts only take _test in '" + name +
                                "'");
  }
  return out;
}

ArtifactStore::ArtifactStore(std::filesystem::path root, ExperimentConfig cfg)
    : root_(std::move(root)), cfg_(std::move(cfg)) {
  std::filesystem::create_directories(root_);
}

std::vector<std::string> ArtifactStore::dependencies(const std::string& name) const {
  const ArtifactName parsed = ArtifactName::parse(name);
  const std::string seed_suffix = parsed.seed ? "_seed=" + std::to_string(*parsed.seed) : "";
  switch (parsed.type) {
    case ArtifactName::Type::datasets:
      return {};
    case ArtifactName::Type::teacher_ckpt:
    case ArtifactName::Type::proxy_base:
    case ArtifactName::Type::student_base:
      return {"datasets"};
    case ArtifactName::Type::student_grad:
      return {"teacher_lambda=0.0_holdout", "proxy_base"};
    case ArtifactName::Type::teacher_traces: {
      std::vector<std::string> deps{"datasets", "teacher_ckpt"};
      const bool penalty = (parsed.axis == "lambda" && parsed.knob > 0.0) || parsed.axis == "perm";
      if (penalty) {
        deps.push_back("student_grad");
        deps.push_back("proxy_base");
      }
      return deps;
    }
    case ArtifactName::Type::student_ckpt: {
      ArtifactName train = parsed;
      train.type = ArtifactName::Type::teacher_traces;
      train.split = "train";
      return {"student_base", train.canonical(), "teacher_lambda=0.0_holdout"};
    }
    case ArtifactName::Type::student_traces: {
      ArtifactName ckpt = parsed;
      ckpt.type = ArtifactName::Type::student_ckpt;
      ckpt.split.clear();
      return {"datasets", ckpt.canonical()};
    }
    case ArtifactName::Type::student_base_test:
      return {"datasets", "student_base"};
  }
  throw std::logic_error("dependencies: unreachable");
}

bool ArtifactStore::has_record(const std::string& name) const {
  return std::filesystem::exists(artifact_dir(name) / "record.json");
}

ArtifactRecord ArtifactStore::record(const std::string& name) const {
  std::ifstream is(artifact_dir(name) / "record.json");
  if (!is) throw DependencyError(name);
  nlohmann::json j;
  is >> j;
  ArtifactRecord rec;
  rec.name = j.at("name").get<std::string>();
  rec.config_hash = j.at("config_hash").get<uint64_t>();
  rec.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
  rec.payload_files = j.at("payload_files").get<std::vector<std::string>>();
  rec.payload_hash = j.at("payload_hash").get<std::string>();
  rec.created_at = j.at("created_at").get<std::string>();
  rec.meta = j.value("meta", nlohmann::json::object());
  return rec;
}

std::string ArtifactStore::payload_hash_of(const std::string& name) const {
  return record(name).payload_hash;
}

bool ArtifactStore::is_valid(const std::string& name) const {
  if (!has_record(name)) return false;
  ArtifactRecord rec = record(name);
  if (rec.config_hash != cfg_.hash()) return false;
  const auto deps = dependencies(name);
  if (rec.input_hashes.size() != deps.size()) return false;
  for (const auto& dep : deps) {
    if (!is_valid(dep)) return false;
    const auto it = rec.input_hashes.find(dep);
    if (it == rec.input_hashes.end() || it->second != payload_hash_of(dep)) return false;
  }
  return true;
}

std::vector<std::string> ArtifactStore::resolve_plan(const std::string& name) const {
  std::vector<std::string> plan;
  std::set<std::string> planned;
  std::set<std::string> visiting;
  // postorder DFS over the stale closure
  const std::function<void(const std::string&)> visit = [&](const std::string& node) {
    if (planned.contains(node)) return;
    if (visiting.contains(node))
      throw std::logic_error("resolve_plan: dependency cycle at '" + node + "'");
    visiting.insert(node);
    for (const auto& dep : dependencies(node)) visit(dep);
    visiting.erase(node);
    if (!is_valid(node)) {
      plan.push_back(node);
      planned.insert(node);
    }
  };
  visit(name);
  return plan;
}

void ArtifactStore::ensure(const std::string& name) {
  for (const auto& step : resolve_plan(name)) run_stage(step);
}

ArtifactRecord ArtifactStore::run_stage(const std::string& name) {
  const ArtifactName parsed = ArtifactName::parse(name);
  const std::string canonical = parsed.canonical();
  for (const auto& dep : dependencies(name))
    if (!is_valid(dep)) throw DependencyError(dep);

  StoreLock lock(root_);
  const std::filesystem::path final_dir = artifact_dir(canonical);
  const std::filesystem::path tmp_dir = root_ / ("." + canonical + ".tmp");
  std::filesystem::remove_all(tmp_dir);
  std::filesystem::create_directories(tmp_dir);
  ArtifactRecord rec;
  try {
    rec = execute_stage(parsed, canonical, tmp_dir);
  } catch (...) {
    std::filesystem::remove_all(tmp_dir);  // no partial outputs
    throw;
  }

  rec.name = canonical;
  rec.config_hash = cfg_.hash();
  for (const auto& dep : dependencies(name)) rec.input_hashes[dep] = payload_hash_of(dep);
  rec.created_at = iso_timestamp();

  rec.payload_files.clear();
  for (const auto& entry : std::filesystem::directory_iterator(tmp_dir))
    rec.payload_files.push_back(entry.path().filename().string());
  std::sort(rec.payload_files.begin(), rec.payload_files.end());
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& file : rec.payload_files) {
    h = fnv1a64_extend(h, file);
    h = fnv1a64_extend(h, hex64(hash_file((tmp_dir / file).string())));
  }
  rec.payload_hash = hex64(h);

  nlohmann::ordered_json j;
  j["name"] = rec.name;
  j["config_hash"] = rec.config_hash;
  j["input_hashes"] = rec.input_hashes;
  j["payload_files"] = rec.payload_files;
  j["payload_hash"] = rec.payload_hash;
  j["created_at"] = rec.created_at;
  j["meta"] = rec.meta;
  {
    std::ofstream os(tmp_dir / "record.json");
    if (!os) throw std::runtime_error("run_stage: cannot write record for " + canonical);
    os << j.dump(2) << "\n";
  }

  std::filesystem::remove_all(final_dir);
  std::filesystem::rename(tmp_dir, final_dir);
  return rec;
}

void ArtifactStore::remove(const std::string& name) {
  std::filesystem::remove_all(artifact_dir(name));
}

std::vector<std::string> ArtifactStore::list() const {
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(root_)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.starts_with(".")) continue;
    if (std::filesystem::exists(entry.path() / "record.json")) names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  return names;
}

uint64_t ArtifactStore::stage_rng_seed(const std::string& canonical) const {
  return derive_seed(cfg_.gen_seed_base, fnv1a64(canonical));
}

sampler::PenaltyContext ArtifactStore::build_penalty_context() const {
  TransformerModel proxy = load_model("proxy_base");
  gradstore::GradientArtifact grad = load_gradient_artifact();
  return sampler::make_penalty_context(proxy, grad, cfg_.epsilon, "student_grad");
}

TransformerModel ArtifactStore::load_model(const std::string& name) const {
  if (!has_record(name)) throw DependencyError(name);
  return load_checkpoint(artifact_dir(name), name);
}

std::vector<sampler::TraceRecord> ArtifactStore::load_traces(const std::string& name) const {
  if (!has_record(name)) throw DependencyError(name);
  return sampler::read_traces_jsonl(artifact_dir(name) / (name + ".jsonl"));
}

gradstore::GradientArtifact ArtifactStore::load_gradient_artifact() const {
  if (!has_record("student_grad")) throw DependencyError("student_grad");
  return gradstore::load_gradient(artifact_dir("student_grad"), "student_grad");
}

std::vector<tasks::TaskInstance> ArtifactStore::load_split(const std::string& split) const {
  if (!has_record("datasets")) throw DependencyError("datasets");
  return tasks::read_instances_jsonl(artifact_dir("datasets") / (split + ".jsonl"));
}

namespace {

std::vector<MaskedSequence> gold_masked_sequences(std::span<const tasks::TaskInstance> instances) {
  std::vector<MaskedSequence> out;
  out.reserve(instances.size());
  for (const auto& inst : instances)
    out.push_back(tasks::to_masked_sequence(inst.prompt_tokens, inst.gold_trace_tokens));
  return out;
}

double trace_accuracy(std::span<const sampler::TraceRecord> traces) {
  if (traces.empty()) return 0.0;
  size_t correct = 0;
  for (const auto& t : traces) correct += t.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(traces.size());
}

}  // namespace

ArtifactRecord ArtifactStore::execute_stage(const ArtifactName& parsed,
                                            const std::string& canonical,
                                            const std::filesystem::path& out_dir) {
  ArtifactRecord rec;
  switch (parsed.type) {
    case ArtifactName::Type::datasets: {
      const std::pair<int, int> counts{cfg_.operand_count_min, cfg_.operand_count_max};
      const std::pair<int, int> digits{cfg_.operand_digit_min, cfg_.operand_digit_max};
      const double space = tasks::problem_space_size(counts, digits);
      auto pool = tasks::generate_dataset(cfg_.data_seed, cfg_.pool_size, counts, digits);
      auto splits = tasks::split_dataset(pool, cfg_.train_fraction);

      const auto gen_disjoint = [&](uint64_t seed, int want,
                                    std::vector<const std::vector<tasks::TaskInstance>*> avoid) {
        int candidates = want;
        for (const auto* ref : avoid) candidates += static_cast<int>(ref->size());
        candidates = std::min(candidates, static_cast<int>(space));
        auto out = tasks::generate_dataset(seed, candidates, counts, digits);
        for (const auto* ref : avoid) out = tasks::remove_prompt_overlap(std::move(out), *ref);
        if (static_cast<int>(out.size()) < want)
          throw std::invalid_argument(
              "datasets: problem space too small for disjoint splits; shrink counts or widen "
              "ranges");
        out.resize(static_cast<size_t>(want));
        return out;
      };
      splits.test = gen_disjoint(cfg_.test_seed, cfg_.test_size, {&pool});
      auto aux = gen_disjoint(cfg_.aux_seed, cfg_.aux_size, {&pool, &splits.test});

      tasks::write_instances_jsonl(out_dir / "train.jsonl", splits.train, "train", canonical);
      tasks::write_instances_jsonl(out_dir / "holdout.jsonl", splits.holdout, "holdout",
                                   canonical);
      tasks::write_instances_jsonl(out_dir / "test.jsonl", splits.test, "test", canonical);
      tasks::write_instances_jsonl(out_dir / "aux.jsonl", aux, "aux", canonical);
      rec.meta["train_size"] = splits.train.size();
      rec.meta["holdout_size"] = splits.holdout.size();
      rec.meta["test_size"] = splits.test.size();
      rec.meta["aux_size"] = aux.size();
      break;
    }

    case ArtifactName::Type::teacher_ckpt:
    case ArtifactName::Type::proxy_base:
    case ArtifactName::Type::student_base: {
      const bool is_teacher = parsed.type == ArtifactName::Type::teacher_ckpt;
      ModelConfig mc = is_teacher ? cfg_.teacher
                      : parsed.type == ArtifactName::Type::proxy_base ? cfg_.proxy
                                                                      : cfg_.student;
      if (mc.vocab_size < tasks::Vocab::kSize)
        throw std::invalid_argument("model config vocab_size smaller than the task vocabulary");
      std::vector<tasks::TaskInstance> data;
      std::vector<tasks::TaskInstance> monitor;
      distill::TrainConfig tc;
      if (is_teacher) {
        data = load_split("train");
        const auto holdout = load_split("holdout");
        data.insert(data.end(), holdout.begin(), holdout.end());
        monitor = holdout;
        tc = cfg_.teacher_train;
      } else {
        data = load_split("aux");
        tc = cfg_.base_train;
      }
      tc.optimizer_seed = derive_seed(tc.optimizer_seed, fnv1a64(canonical));
      const auto seqs = gold_masked_sequences(data);
      const auto monitor_seqs = gold_masked_sequences(monitor);
      auto [model, curves] = distill::finetune(init_model(mc), seqs, monitor_seqs, tc);
      save_checkpoint(model, out_dir, canonical);
      distill::write_loss_curves_csv(out_dir / (canonical + ".losses.csv"), curves);
      if (!curves.train_loss.empty()) rec.meta["final_train_loss"] = curves.train_loss.back().second;
      break;
    }

    case ArtifactName::Type::teacher_traces: {
      TransformerModel teacher = load_model("teacher_ckpt");
      const auto instances = load_split(parsed.split);
      sampler::SamplerSpec spec;
      spec.max_tokens = cfg_.max_gen_tokens;
      spec.rng_seed = stage_rng_seed(canonical);
      spec.epsilon = cfg_.epsilon;
      std::optional<sampler::PenaltyContext> ctx;
      if (parsed.axis == "tau") {
        spec.kind = sampler::SamplerKind::temperature;
        spec.tau = parsed.knob;
      } else if (parsed.axis == "lambda" && parsed.knob == 0.0) {
        // the Procedure's lambda=0 command carries no --perturb flag:
        // plain temperature sampling at the base tau
        spec.kind = sampler::SamplerKind::temperature;
        spec.tau = cfg_.tau;
      } else {
        spec.kind = parsed.axis == "perm" ? sampler::SamplerKind::permutation
                                          : sampler::SamplerKind::antidistill;
        spec.tau = cfg_.tau;
        spec.lambda = parsed.knob;
        ctx = build_penalty_context();
      }
      std::vector<std::vector<int>> prompts;
      std::vector<long> gold;
      for (const auto& inst : instances) {
        prompts.push_back(inst.prompt_tokens);
        gold.push_back(inst.gold_answer);
      }
      const auto traces = sampler::generate_traces(teacher, spec, ctx ? &*ctx : nullptr, prompts,
                                                   gold);
      sampler::write_traces_jsonl(out_dir / (canonical + ".jsonl"), traces);
      rec.meta["sampler"] = nlohmann::json::parse(spec.to_json());
      rec.meta["accuracy"] = trace_accuracy(traces);
      rec.meta["teacher_config_hash"] = cfg_.teacher.hash();
      if (ctx) rec.meta["grad_hash"] = ctx->grad_hash;
      break;
    }

    case ArtifactName::Type::student_grad: {
      TransformerModel proxy = load_model("proxy_base");
      const auto traces = load_traces("teacher_lambda=0.0_holdout");
      const auto seqs = sampler::traces_to_masked_sequences(traces);
      auto artifact =
          gradstore::compute_downstream_grad(proxy, seqs, "teacher_lambda=0.0_holdout");
      gradstore::save_gradient(artifact, out_dir, canonical);
      rec.meta["norm"] = artifact.norm;
      rec.meta["loss"] = artifact.loss;
      break;
    }

    case ArtifactName::Type::student_ckpt: {
      TransformerModel base = load_model("student_base");
      ArtifactName train_name = parsed;
      train_name.type = ArtifactName::Type::teacher_traces;
      train_name.split = "train";
      const auto traces = load_traces(train_name.canonical());
      const auto train_seqs = sampler::traces_to_masked_sequences(traces);
      const auto holdout_seqs =
          sampler::traces_to_masked_sequences(load_traces("teacher_lambda=0.0_holdout"));
      distill::TrainConfig tc = cfg_.distill_train;
      tc.optimizer_seed = derive_seed(tc.optimizer_seed, fnv1a64(canonical));
      auto [model, curves] = distill::finetune(base, train_seqs, holdout_seqs, tc);
      save_checkpoint(model, out_dir, canonical);
      distill::write_loss_curves_csv(out_dir / (canonical + ".losses.csv"), curves);
      rec.meta["final_train_loss"] = curves.train_loss.back().second;
      rec.meta["initial_holdout_loss"] = curves.holdout_loss.front().second;
      rec.meta["final_holdout_loss"] = curves.holdout_loss.back().second;
      rec.meta["train_trace_artifact"] = train_name.canonical();
      break;
    }

    case ArtifactName::Type::student_traces: {
      ArtifactName ckpt = parsed;
      ckpt.type = ArtifactName::Type::student_ckpt;
      ckpt.split.clear();
      TransformerModel student = load_model(ckpt.canonical());
      const auto instances = load_split("test");
      sampler::SamplerSpec spec;  // students are always evaluated clean
      spec.kind = sampler::SamplerKind::temperature;
      spec.tau = cfg_.tau;
      spec.max_tokens = cfg_.max_gen_tokens;
      spec.rng_seed = stage_rng_seed(canonical);
      std::vector<std::vector<int>> prompts;
      std::vector<long> gold;
      for (const auto& inst : instances) {
        prompts.push_back(inst.prompt_tokens);
        gold.push_back(inst.gold_answer);
      }
      const auto traces = sampler::generate_traces(student, spec, nullptr, prompts, gold);
      sampler::write_traces_jsonl(out_dir / (canonical + ".jsonl"), traces);
      rec.meta["sampler"] = nlohmann::json::parse(spec.to_json());
      rec.meta["accuracy"] = trace_accuracy(traces);
      rec.meta["student_ckpt"] = ckpt.canonical();
      break;
    }

    case ArtifactName::Type::student_base_test: {
      TransformerModel base = load_model("student_base");
      const auto instances = load_split("test");
      const auto train = load_split("train");
      sampler::SamplerSpec spec;
      spec.kind = sampler::SamplerKind::temperature;
      spec.tau = cfg_.tau;
      spec.max_tokens = cfg_.max_gen_tokens;
      spec.rng_seed = stage_rng_seed(canonical);
      std::vector<std::vector<int>> prompts;
      std::vector<long> gold;
      for (const auto& inst : instances) {
        prompts.push_back(tasks::build_icl_prompt(inst, train, cfg_.icl_k,
                                                  cfg_.student.max_seq_len - cfg_.max_gen_tokens));
        gold.push_back(inst.gold_answer);
      }
      const auto traces = sampler::generate_traces(base, spec, nullptr, prompts, gold);
      sampler::write_traces_jsonl(out_dir / (canonical + ".jsonl"), traces);
      rec.meta["accuracy"] = trace_accuracy(traces);
      rec.meta["icl_k"] = cfg_.icl_k;
      break;
    }
  }
  return rec;
}

}  // namespace ads::pipeline
