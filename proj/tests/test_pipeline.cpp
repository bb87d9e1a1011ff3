#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "ads/errors.hpp"
#include "ads/eval.hpp"
#include "ads/pipeline.hpp"
#include "test_util.hpp"

using namespace ads;
using namespace ads::pipeline;

namespace {

size_t index_of(const std::vector<std::string>& plan, const std::string& name) {
  const auto it = std::find(plan.begin(), plan.end(), name);
  REQUIRE(it != plan.end());
  return static_cast<size_t>(it - plan.begin());
}

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("artifact names round trip") {
  const std::vector<std::string> names{
      "datasets",
      "teacher_ckpt",
      "proxy_base",
      "student_base",
      "student_grad",
      "teacher_lambda=0.0_holdout",
      "teacher_lambda=0.5_train_seed=3",
      "teacher_tau=0.9_test_seed=12",
      "teacher_perm=2.0_train_seed=1",
      "student_lambda=1.0_seed=2",
      "student_lambda=0.5_test_seed=2",
      "student_perm=0.5_test",
      "student_base_test_seed=4",
      "student_base_test",
  };
  for (const auto& name : names) {
    CAPTURE(name);
    CHECK(ArtifactName::parse(name).canonical() == name);
  }
  CHECK(format_knob(0.0) == "0.0");
  CHECK(format_knob(1.0) == "1.0");
  CHECK(format_knob(0.5) == "0.5");
  CHECK(format_knob(0.25) == "0.25");

  for (const auto& bad :
       {"teacher_lambda=0.5", "bogus", "teacher_gamma=1.0_train", "student_lambda=x_test",
        "teacher_lambda=0.5_train_seed=x", "datasets_seed=3"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS((void)ArtifactName::parse(bad), std::invalid_argument);
  }
}

TEST_CASE("resolve_plan walks the dependency closure in topological order") {
  ads_test::TempDir tmp("plan");
  ArtifactStore store(tmp.path, ads_test::micro_experiment());

  SUBCASE("student_grad from an empty store") {
    const auto plan = store.resolve_plan("student_grad");
    const size_t teacher = index_of(plan, "teacher_ckpt");
    const size_t holdout = index_of(plan, "teacher_lambda=0.0_holdout");
    const size_t grad = index_of(plan, "student_grad");
    CHECK(teacher < holdout);
    CHECK(holdout < grad);
    CHECK(index_of(plan, "datasets") < teacher);
    CHECK(index_of(plan, "proxy_base") < grad);
    CHECK(plan.back() == "student_grad");
    // every step's dependencies appear earlier
    for (size_t i = 0; i < plan.size(); ++i)
      for (const auto& dep : store.dependencies(plan[i]))
        CHECK(index_of(plan, dep) < i);
  }

  SUBCASE("warm cache yields an empty plan") {
    store.ensure("teacher_lambda=0.0_train");
    CHECK(store.resolve_plan("teacher_lambda=0.0_train").empty());
  }

  SUBCASE("only the missing closure is planned") {
    store.ensure("student_grad");
    const auto plan = store.resolve_plan("student_lambda=0.5");
    CHECK(plan.size() == 3);  // student_base was never built by student_grad
    CHECK(index_of(plan, "teacher_lambda=0.5_train") < index_of(plan, "student_lambda=0.5"));
    store.ensure("student_base");
    const auto plan2 = store.resolve_plan("student_lambda=0.5");
    REQUIRE(plan2.size() == 2);
    CHECK(plan2[0] == "teacher_lambda=0.5_train");
    CHECK(plan2[1] == "student_lambda=0.5");
  }

  SUBCASE("missing dependencies are named in errors") {
    CHECK_THROWS_AS((void)store.run_stage("student_grad"), DependencyError);
    try {
      (void)store.run_stage("student_lambda=0.5");
    } catch (const DependencyError& e) {
      CHECK(!e.artifact().empty());
    }
  }
}

TEST_CASE("micro pipeline end to end") {
  ads_test::TempDir tmp("micro");
  const auto cfg = ads_test::micro_experiment();
  ArtifactStore store(tmp.path, cfg);

  SUBCASE("lambda 0 traces embed a temperature-equivalent sampler spec") {
    store.ensure("teacher_lambda=0.0_train");
    const auto traces = store.load_traces("teacher_lambda=0.0_train");
    REQUIRE(!traces.empty());
    for (const auto& t : traces) {
      CHECK(t.spec.kind == sampler::SamplerKind::temperature);
      CHECK(t.spec.lambda == 0.0);
      CHECK(t.spec.tau == cfg.tau);
      CHECK(t.proxy_forward_count == 0);
    }
  }

  SUBCASE("penalty traces count two proxy forwards per teacher forward") {
    store.ensure("teacher_lambda=0.5_train");
    for (const auto& t : store.load_traces("teacher_lambda=0.5_train")) {
      CHECK(t.spec.kind == sampler::SamplerKind::antidistill);
      CHECK(t.proxy_forward_count == 2 * t.teacher_forward_count);
    }
  }

  SUBCASE("rerunning a stage with identical inputs reproduces the payload hash") {
    store.ensure("student_lambda=0.5");
    const auto first = store.record("student_lambda=0.5").payload_hash;
    store.remove("student_lambda=0.5");
    store.ensure("student_lambda=0.5");
    CHECK(store.record("student_lambda=0.5").payload_hash == first);
  }

  SUBCASE("warm cache performs zero model computation") {
    store.ensure("student_lambda=0.5_test");
    const uint64_t before = model_compute_counter().load();
    store.ensure("student_lambda=0.5_test");
    CHECK(model_compute_counter().load() == before);
    CHECK(store.resolve_plan("student_lambda=0.5_test").empty());
  }

  SUBCASE("config change invalidates the cache") {
    store.ensure("datasets");
    auto changed = cfg;
    changed.pool_size += 2;
    ArtifactStore store2(tmp.path, changed);
    CHECK(!store2.resolve_plan("datasets").empty());
  }

  SUBCASE("eval rows are consistent between the lambda-0 and base-tau routes") {
    const eval::RowSpec anti{"antidistill", 0.0, 1};
    const eval::RowSpec temp{"temperature", cfg.tau, 1};
    const auto row_a = eval::run_row(store, anti);
    const auto row_t = eval::run_row(store, temp);
    CHECK(row_a.teacher_accuracy == row_t.teacher_accuracy);
    CHECK(row_a.student_accuracy == row_t.student_accuracy);
    CHECK(row_a.undistilled_accuracy == row_t.undistilled_accuracy);
    CHECK(row_a.trace_artifact == row_t.trace_artifact);
  }
}

TEST_CASE("experiment config round trips through its key=value form") {
  ads_test::TempDir tmp("cfg");
  auto cfg = ads_test::micro_experiment();
  cfg.lambda_grid = {0.0, 0.25, 1.5};
  cfg.save(tmp.path / "exp.cfg");
  const auto back = ExperimentConfig::from_file(tmp.path / "exp.cfg");
  CHECK(back.canonical() == cfg.canonical());
  CHECK(back.hash() == cfg.hash());

  // comments and blank lines are tolerated, unknown keys are not
  std::ofstream os(tmp.path / "partial.cfg");
  os << "# comment\n\ntask.pool_size=64\nsweep.lambda_grid=0,2\n";
  os.close();
  const auto partial = ExperimentConfig::from_file(tmp.path / "partial.cfg");
  CHECK(partial.pool_size == 64);
  REQUIRE(partial.lambda_grid.size() == 2);
  CHECK(partial.lambda_grid[1] == 2.0);
  ExperimentConfig bad;
  CHECK_THROWS_AS(bad.apply_line("nope=1"), std::invalid_argument);
}

TEST_SUITE_END();
