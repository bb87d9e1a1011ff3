#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

#include "ads/config.hpp"
#include "ads/distill.hpp"
#include "ads/errors.hpp"
#include "ads/eval.hpp"
#include "ads/pipeline.hpp"
#include "ads/sampler.hpp"
#include "ads/tasks.hpp"

namespace {

using ads::pipeline::ArtifactName;

std::string resolve_store_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("ADS_STORE")) return env;
  return "ads_store";
}

ads::ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ads::ExperimentConfig::defaults();
  return ads::ExperimentConfig::from_file(path);
}

int run_gradcheck() {
  ads::ModelConfig cfg{24, 16, 2, 2, 32, 24, 3, false};
  auto model = ads::init_model(cfg);
  std::printf("gradcheck model: %zu parameters\n", ads::param_count(cfg));
  ads::MaskedSequence seq;
  for (int t = 0; t < 12; ++t) {
    seq.tokens.push_back((t * 7 + 3) % cfg.vocab_size);
    seq.loss_mask.push_back(t > 3);
  }
  std::vector<ads::MaskedSequence> one{seq};
  auto [value, grad] = ads::accumulate_loss_grad(model, one);
  const double h = 1e-5;
  double worst = 0.0;
  size_t worst_i = 0;
  for (size_t i = 0; i < model.params.size(); ++i) {
    auto theta = model.params;
    theta.values()[i] += h;
    const double up = ads::sequence_nll({cfg, theta}, seq);
    theta.values()[i] -= 2 * h;
    const double down = ads::sequence_nll({cfg, theta}, seq);
    const double fd = (up - down) / (2 * h);
    const double err = std::abs(fd - grad.values()[i]) / (std::abs(fd) + 1e-3);
    if (err > worst) {
      worst = err;
      worst_i = i;
    }
  }
  std::printf("loss %.6f, worst relative error %.3e (coordinate %zu)\n", value, worst, worst_i);
  if (worst >= 1e-5) {
    std::fprintf(stderr, "gradcheck FAILED\n");
    return 4;
  }
  std::printf("gradcheck OK\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"antidistillation sampling experiment pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string store_flag;
  app.add_option("--config", config_path, "experiment config file (key=value lines)");
  app.add_option("--store", store_flag, "artifact store root (default $ADS_STORE or ./ads_store)");

  auto* gencot = app.add_subcommand("gencot", "generate chain-of-thought traces");
  std::string model_type, lambda_value = "0.0", split = "train", perturb, method;
  std::optional<double> tau_flag;
  std::optional<uint64_t> seed_flag;
  gencot->add_option("--model_type", model_type, "teacher | student")->required();
  gencot->add_option("--lambda_value", lambda_value,
                     "penalty weight, or 'base' for the undistilled student");
  gencot->add_option("--split", split, "train | holdout | test")->required();
  gencot->add_option("--perturb", perturb, "gradient artifact for the penalty (student_grad)");
  gencot->add_option("--tau", tau_flag, "temperature-baseline tau (teacher rows)");
  gencot->add_option("--method", method, "permutation for the sign-flip baseline");
  gencot->add_option("--seed", seed_flag, "sweep seed qualifier");

  auto* save_grad =
      app.add_subcommand("save-grad", "compute and store the downstream-loss gradient");

  auto* sft = app.add_subcommand("sft", "distill a student on teacher traces");
  std::string sft_lambda = "0.0", sft_method;
  std::optional<uint64_t> sft_seed;
  sft->add_option("--lambda_value", sft_lambda, "penalty weight of the training traces")
      ->required();
  sft->add_option("--method", sft_method, "permutation to train on the baseline traces");
  sft->add_option("--seed", sft_seed, "sweep seed qualifier");

  auto* eval_cmd = app.add_subcommand("eval", "compute one metrics row");
  std::string eval_method = "antidistill";
  double eval_knob = 0.0;
  uint64_t eval_seed = 0;
  std::string eval_artifact;
  eval_cmd->add_option("--method", eval_method, "temperature | antidistill | permutation");
  eval_cmd->add_option("--knob", eval_knob, "tau (temperature) or lambda (penalty methods)");
  eval_cmd->add_option("--seed", eval_seed, "sweep seed");
  eval_cmd->add_option("--artifact", eval_artifact,
                       "alternatively: a student_..._test artifact name");

  auto* sweep_cmd = app.add_subcommand("sweep", "run the full utility-distillability sweep");

  auto* eps_cmd = app.add_subcommand("eps-sweep", "finite-difference error vs epsilon table");
  double eps_min = 1e-8, eps_max = 1.0;
  int eps_per_decade = 1, eps_contexts = 20;
  eps_cmd->add_option("--min", eps_min, "smallest epsilon");
  eps_cmd->add_option("--max", eps_max, "largest epsilon");
  eps_cmd->add_option("--per-decade", eps_per_decade, "grid points per decade");
  eps_cmd->add_option("--contexts", eps_contexts, "number of prefixes");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gradcheck_cmd->parsed()) return run_gradcheck();

    ads::ExperimentConfig cfg = load_config(config_path);
    ads::pipeline::ArtifactStore store(resolve_store_root(store_flag), cfg);

    if (gencot->parsed()) {
      ArtifactName name;
      name.seed = seed_flag;
      if (model_type == "teacher") {
        name.type = ArtifactName::Type::teacher_traces;
        name.split = split;
        if (tau_flag) {
          name.axis = "tau";
          name.knob = *tau_flag;
        } else {
          name.axis = method == "permutation" ? "perm" : "lambda";
          name.knob = std::stod(lambda_value);
        }
        const bool penalty = name.axis == "perm" || (name.axis == "lambda" && name.knob > 0.0);
        if (penalty && perturb != "student_grad")
          throw std::invalid_argument("gencot: penalty sampling requires --perturb student_grad");
        if (!penalty && !perturb.empty())
          throw std::invalid_argument("gencot: --perturb given but sampling is unperturbed");
      } else if (model_type == "student") {
        if (split != "test")
          throw std::invalid_argument("gencot: student generation uses --split test");
        if (lambda_value == "base") {
          name.type = ArtifactName::Type::student_base_test;
        } else {
          name.type = ArtifactName::Type::student_traces;
          name.axis = method == "permutation" ? "perm" : "lambda";
          name.knob = std::stod(lambda_value);
          name.split = "test";
        }
      } else {
        throw std::invalid_argument("gencot: --model_type must be teacher or student");
      }
      store.ensure(name.canonical());
      std::printf("%s\n", name.canonical().c_str());
      return 0;
    }

    if (save_grad->parsed()) {
      store.ensure("student_grad");
      std::printf("student_grad norm %.6f\n",
                  store.record("student_grad").meta.at("norm").get<double>());
      return 0;
    }

    if (sft->parsed()) {
      ArtifactName name;
      name.type = ArtifactName::Type::student_ckpt;
      name.axis = sft_method == "permutation" ? "perm" : "lambda";
      name.knob = std::stod(sft_lambda);
      name.seed = sft_seed;
      store.ensure(name.canonical());
      std::printf("%s\n", name.canonical().c_str());
      return 0;
    }

    if (eval_cmd->parsed()) {
      ads::eval::RowSpec row{eval_method, eval_knob, eval_seed};
      if (!eval_artifact.empty()) {
        const ArtifactName parsed = ArtifactName::parse(eval_artifact);
        if (parsed.type != ArtifactName::Type::student_traces)
          throw std::invalid_argument("eval: --artifact must be a student_..._test name");
        row.method = parsed.axis == "perm"  ? "permutation"
                     : parsed.axis == "tau" ? "temperature"
                                            : "antidistill";
        row.knob = parsed.knob;
        row.seed = parsed.seed.value_or(0);
      }
      const auto metrics = ads::eval::run_row(store, row);
      ads::eval::append_metrics_csv(store.metrics_csv_path(), {&metrics, 1});
      std::printf("%s knob=%g seed=%llu teacher=%.4f student=%.4f undistilled=%.4f\n",
                  metrics.method.c_str(), metrics.knob,
                  static_cast<unsigned long long>(metrics.seed), metrics.teacher_accuracy,
                  metrics.student_accuracy, metrics.undistilled_accuracy);
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const auto rows = ads::eval::tradeoff_sweep(store);
      std::printf("wrote %zu rows to %s\n", rows.size(), store.metrics_csv_path().c_str());
      return 0;
    }

    if (eps_cmd->parsed()) {
      store.ensure("student_grad");
      const auto proxy = store.load_model("proxy_base");
      const auto grad = store.load_gradient_artifact();
      const auto holdout = store.load_traces("teacher_lambda=0.0_holdout");
      std::vector<std::vector<int>> contexts;
      for (const auto& t : holdout) {
        if (static_cast<int>(contexts.size()) >= eps_contexts) break;
        std::vector<int> prefix = t.prompt_tokens;
        const size_t keep = t.generated_tokens.size() / 2;
        prefix.insert(prefix.end(), t.generated_tokens.begin(),
                      t.generated_tokens.begin() + static_cast<long>(keep));
        contexts.push_back(std::move(prefix));
      }
      std::vector<double> grid;
      for (double e = eps_min; e <= eps_max * 1.0000001;
           e *= std::pow(10.0, 1.0 / eps_per_decade))
        grid.push_back(e);
      const auto rows = ads::sampler::epsilon_error_sweep(proxy, grad.g, contexts, grid);
      std::printf("epsilon,mean_error,mean_cosine\n");
      for (const auto& r : rows)
        std::printf("%.3e,%.6e,%.6f\n", r.epsilon, r.mean_error, r.mean_cosine);
      return 0;
    }
  } catch (const ads::DependencyError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ads::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const ads::TrainingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
