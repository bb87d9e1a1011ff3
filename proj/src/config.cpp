#include "ads/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "ads/hashing.hpp"

namespace ads {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_u64(uint64_t v) { return std::to_string(v); }

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt_double(v[i]);
  return out;
}

std::string join_u64(const std::vector<uint64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt_u64(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

Field int_field(const char* key, int ExperimentConfig::* member) {
  return {key, [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = std::stoi(v); }};
}

Field dbl_field(const char* key, double ExperimentConfig::* member) {
  return {key, [member](const ExperimentConfig& c) { return fmt_double(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = std::stod(v); }};
}

Field u64_field(const char* key, uint64_t ExperimentConfig::* member) {
  return {key, [member](const ExperimentConfig& c) { return fmt_u64(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = std::stoull(v); }};
}

void add_model_fields(std::vector<Field>& fields, const char* prefix,
                      ModelConfig ExperimentConfig::* member) {
  const std::string p(prefix);
  auto push = [&fields](std::string key, auto g, auto s) {
    fields.push_back({std::move(key), g, s});
  };
  push(p + ".vocab_size",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).vocab_size); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).vocab_size = std::stoi(v); });
  push(p + ".d_model",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).d_model); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).d_model = std::stoi(v); });
  push(p + ".n_layers",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).n_layers); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).n_layers = std::stoi(v); });
  push(p + ".n_heads",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).n_heads); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).n_heads = std::stoi(v); });
  push(p + ".d_ff",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).d_ff); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).d_ff = std::stoi(v); });
  push(p + ".max_seq_len",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).max_seq_len); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).max_seq_len = std::stoi(v);
       });
  push(p + ".init_seed",
       [member](const ExperimentConfig& c) { return fmt_u64((c.*member).init_seed); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).init_seed = std::stoull(v);
       });
  push(p + ".tied_head",
       [member](const ExperimentConfig& c) {
         return (c.*member).tied_head ? std::string("true") : std::string("false");
       },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).tied_head = (v == "true" || v == "1");
       });
}

void add_train_fields(std::vector<Field>& fields, const char* prefix,
                      distill::TrainConfig ExperimentConfig::* member) {
  const std::string p(prefix);
  auto push = [&fields](std::string key, auto g, auto s) {
    fields.push_back({std::move(key), g, s});
  };
  push(p + ".learning_rate",
       [member](const ExperimentConfig& c) { return fmt_double((c.*member).learning_rate); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).learning_rate = std::stod(v);
       });
  push(p + ".weight_decay",
       [member](const ExperimentConfig& c) { return fmt_double((c.*member).weight_decay); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).weight_decay = std::stod(v);
       });
  push(p + ".grad_clip_norm",
       [member](const ExperimentConfig& c) { return fmt_double((c.*member).grad_clip_norm); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).grad_clip_norm = std::stod(v);
       });
  push(p + ".warmup_fraction",
       [member](const ExperimentConfig& c) { return fmt_double((c.*member).warmup_fraction); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).warmup_fraction = std::stod(v);
       });
  push(p + ".batch_size",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).batch_size); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).batch_size = std::stoi(v);
       });
  push(p + ".epochs",
       [member](const ExperimentConfig& c) { return std::to_string((c.*member).epochs); },
       [member](ExperimentConfig& c, const std::string& v) { (c.*member).epochs = std::stoi(v); });
  push(p + ".optimizer_seed",
       [member](const ExperimentConfig& c) { return fmt_u64((c.*member).optimizer_seed); },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).optimizer_seed = std::stoull(v);
       });
  push(p + ".eval_interval_steps",
       [member](const ExperimentConfig& c) {
         return std::to_string((c.*member).eval_interval_steps);
       },
       [member](ExperimentConfig& c, const std::string& v) {
         (c.*member).eval_interval_steps = std::stoi(v);
       });
  push(p + ".optimizer",
       [member](const ExperimentConfig& c) {
         return (c.*member).optimizer == distill::OptimizerKind::adamw ? std::string("adamw")
                                                                       : std::string("sgd");
       },
       [member](ExperimentConfig& c, const std::string& v) {
         if (v == "adamw")
           (c.*member).optimizer = distill::OptimizerKind::adamw;
         else if (v == "sgd")
           (c.*member).optimizer = distill::OptimizerKind::sgd;
         else
           throw std::invalid_argument("config: unknown optimizer '" + v + "'");
       });
}

const std::vector<Field>& fields() {
  static const std::vector<Field>* registry = [] {
    auto* f = new std::vector<Field>();
    f->push_back(int_field("task.operand_count_min", &ExperimentConfig::operand_count_min));
    f->push_back(int_field("task.operand_count_max", &ExperimentConfig::operand_count_max));
    f->push_back(int_field("task.operand_digit_min", &ExperimentConfig::operand_digit_min));
    f->push_back(int_field("task.operand_digit_max", &ExperimentConfig::operand_digit_max));
    f->push_back(int_field("task.pool_size", &ExperimentConfig::pool_size));
    f->push_back(dbl_field("task.train_fraction", &ExperimentConfig::train_fraction));
    f->push_back(int_field("task.test_size", &ExperimentConfig::test_size));
    f->push_back(int_field("task.aux_size", &ExperimentConfig::aux_size));
    f->push_back(u64_field("task.data_seed", &ExperimentConfig::data_seed));
    f->push_back(u64_field("task.test_seed", &ExperimentConfig::test_seed));
    f->push_back(u64_field("task.aux_seed", &ExperimentConfig::aux_seed));
    f->push_back(int_field("task.icl_k", &ExperimentConfig::icl_k));
    add_model_fields(*f, "teacher", &ExperimentConfig::teacher);
    add_model_fields(*f, "proxy", &ExperimentConfig::proxy);
    add_model_fields(*f, "student", &ExperimentConfig::student);
    add_train_fields(*f, "teacher_train", &ExperimentConfig::teacher_train);
    add_train_fields(*f, "base_train", &ExperimentConfig::base_train);
    add_train_fields(*f, "distill_train", &ExperimentConfig::distill_train);
    f->push_back(dbl_field("sampler.tau", &ExperimentConfig::tau));
    f->push_back(dbl_field("sampler.epsilon", &ExperimentConfig::epsilon));
    f->push_back(int_field("sampler.max_gen_tokens", &ExperimentConfig::max_gen_tokens));
    f->push_back(u64_field("sampler.gen_seed_base", &ExperimentConfig::gen_seed_base));
    f->push_back({"sweep.lambda_grid",
                  [](const ExperimentConfig& c) { return join_doubles(c.lambda_grid); },
                  [](ExperimentConfig& c, const std::string& v) {
                    c.lambda_grid.clear();
                    for (const auto& s : split_commas(v)) c.lambda_grid.push_back(std::stod(s));
                  }});
    f->push_back({"sweep.tau_grid",
                  [](const ExperimentConfig& c) { return join_doubles(c.tau_grid); },
                  [](ExperimentConfig& c, const std::string& v) {
                    c.tau_grid.clear();
                    for (const auto& s : split_commas(v)) c.tau_grid.push_back(std::stod(s));
                  }});
    f->push_back({"sweep.seeds", [](const ExperimentConfig& c) { return join_u64(c.seeds); },
                  [](ExperimentConfig& c, const std::string& v) {
                    c.seeds.clear();
                    for (const auto& s : split_commas(v)) c.seeds.push_back(std::stoull(s));
                  }});
    f->push_back(int_field("bootstrap.resamples", &ExperimentConfig::bootstrap_resamples));
    f->push_back(dbl_field("bootstrap.confidence", &ExperimentConfig::confidence));
    f->push_back(u64_field("bootstrap.seed", &ExperimentConfig::bootstrap_seed));
    return f;
  }();
  return *registry;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  cfg.operand_count_max = 4;
  cfg.pool_size = 800;
  cfg.test_size = 200;
  cfg.aux_size = 400;
  cfg.teacher = ModelConfig{18, 128, 4, 4, 512, 96, 11, false};
  cfg.proxy = ModelConfig{18, 64, 2, 2, 256, 96, 22, false};
  cfg.student = ModelConfig{18, 64, 2, 2, 256, 96, 33, false};

  cfg.teacher_train = distill::TrainConfig{};
  cfg.teacher_train.learning_rate = 1e-3;
  cfg.teacher_train.weight_decay = 0.05;
  cfg.teacher_train.epochs = 50;
  cfg.teacher_train.optimizer_seed = 111;
  cfg.teacher_train.eval_interval_steps = 50;

  cfg.base_train = distill::TrainConfig{};
  cfg.base_train.learning_rate = 1e-3;
  cfg.base_train.weight_decay = 0.05;
  cfg.base_train.epochs = 4;
  cfg.base_train.optimizer_seed = 222;
  cfg.base_train.eval_interval_steps = 50;

  cfg.distill_train = distill::TrainConfig{};  // the distillation protocol defaults
  return cfg;
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key;
    out += "=";
    out += f.get(*this);
    out += "\n";
  }
  return out;
}

uint64_t ExperimentConfig::hash() const { return fnv1a64(canonical()); }

void ExperimentConfig::apply_line(const std::string& line) {
  std::string trimmed = line;
  if (auto pos = trimmed.find('#'); pos != std::string::npos) trimmed.resize(pos);
  while (!trimmed.empty() && (trimmed.back() == ' ' || trimmed.back() == '\r' ||
                              trimmed.back() == '\t'))
    trimmed.pop_back();
  size_t start = trimmed.find_first_not_of(" \t");
  if (start == std::string::npos) return;  // blank/comment line
  trimmed = trimmed.substr(start);
  const auto eq = trimmed.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("config: expected key=value, got '" + line + "'");
  const std::string key = trimmed.substr(0, eq);
  const std::string value = trimmed.substr(eq + 1);
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  ExperimentConfig cfg = defaults();
  std::string line;
  while (std::getline(is, line)) cfg.apply_line(line);
  return cfg;
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("config: cannot write " + path.string());
  os << canonical();
}

}  // namespace ads
