#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bbal/error.hpp"
#include "bbal/experiment.hpp"
#include "bbal/synthetic.hpp"

using namespace bbal;
using nlohmann::json;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::gate;
}

// Small world so whole runs finish in well under a second.
ExperimentConfig tiny(Method m, LabelSpace space = LabelSpace::disjoint) {
  ExperimentConfig c;
  c.method = m;
  c.label_space = space;
  c.data.source_classes = 4;
  c.data.source_per_class = 20;
  c.data.target_classes = 3;
  c.data.shots = 4;
  c.data.test_per_class = 10;
  c.data.image_size = 6;
  c.data.canvas_size = 10;
  c.service.model.hidden = {16};
  c.service.model.train.epochs = 5;
  c.local.hidden = {8};
  c.local.train.epochs = 5;
  c.priming.epochs = 5;
  c.vr.epochs = 3;
  c.zoo.steps = 6;
  c.zoo.batch = 4;
  return c;
}

}  // namespace

TEST(GenerateTask, NoiselessClassesAreIdentical) {
  TaskSpec s;
  s.classes = 3;
  s.per_class = 4;
  s.height = s.width = 8;
  s.seed = 1;
  const SyntheticTask t = generate_task(s);
  ASSERT_EQ(t.data.size(), 12u);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 1; i < 4; ++i) {
      const auto a = t.data.images.row(k * 4);
      const auto b = t.data.images.row(k * 4 + i);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
      EXPECT_EQ(t.data.labels[k * 4 + i], k);
    }
  }
  const auto a = t.data.images.row(0);
  const auto b = t.data.images.row(4);
  EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(GenerateTask, SeedDeterminesBytes) {
  TaskSpec s;
  s.kind = TaskKind::target;
  s.classes = 5;
  s.per_class = 3;
  s.seed = 9;
  s.shift = {20.0, 0.05};
  const Dataset a = generate_task(s).data;
  const Dataset b = generate_task(s).data;
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  s.seed = 10;
  EXPECT_FALSE(generate_task(s).data.images == a.images);
  for (double v : a.images.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(GenerateTask, TooManyClassesIsConfiguration) {
  TaskSpec s;
  s.classes = kPatternSlots + 1;
  s.per_class = 1;
  EXPECT_EQ(code_of([&] { generate_task(s); }), ErrorCode::configuration);
}

TEST(Dataset, FileRoundTrip) {
  TaskSpec s;
  s.classes = 2;
  s.per_class = 3;
  s.seed = 4;
  s.shift.noise_sigma = 0.1;
  const Dataset d = generate_task(s).data;
  const auto path = std::filesystem::temp_directory_path() / "bbal_test_dataset.bbds";
  write_dataset(path, d);
  const Dataset back = read_dataset(path);
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.classes, d.classes);
  {
    std::ofstream out(path, std::ios::binary);
    out << "nope";
  }
  EXPECT_EQ(code_of([&] { read_dataset(path); }), ErrorCode::io);
  std::filesystem::remove(path);
}

TEST(SelectPath, Goldens) {
  EXPECT_EQ(select_path(0.479, 0.857, 0.0), Path::local);
  EXPECT_EQ(select_path(0.859, 0.688, 0.0), Path::api);
  EXPECT_EQ(select_path(0.75, 0.5, 0.25), Path::local);
  EXPECT_EQ(select_path(0.7, 0.7, 0.0), Path::local);
  EXPECT_EQ(select_path(0.859, 0.688, 0.2), Path::local);
}

TEST(SelectPath, MonotoneInLocalAccuracyAndTau) {
  for (int z = 0; z <= 20; ++z) {
    for (int t = 0; t <= 5; ++t) {
      bool was_local = false;
      for (int l = 0; l <= 20; ++l) {
        const bool local = select_path(z / 20.0, l / 20.0, t / 20.0) == Path::local;
        EXPECT_TRUE(!was_local || local);
        was_local = local;
        if (local) EXPECT_EQ(select_path(z / 20.0, l / 20.0, (t + 1) / 20.0), Path::local);
      }
    }
  }
}

TEST(Config, StrictParsing) {
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"methd", "ares"}}); }), ErrorCode::configuration);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"vr", {{"lrr", 1}}}}); }), ErrorCode::configuration);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"method", "nope"}}); }), ErrorCode::configuration);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"seed", "x"}}); }), ErrorCode::configuration);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"vr", {{"prompt_init", 1.0}}}}); }),
            ErrorCode::configuration);
  EXPECT_EQ(code_of([] { ExperimentConfig::from_json({{"map", "identity"}}); }), ErrorCode::configuration);
  EXPECT_EQ(code_of([] {
              ExperimentConfig::from_json({{"label_space", "disjoint"}, {"theory", {{"enabled", true}}}});
            }),
            ErrorCode::configuration);
  EXPECT_EQ(code_of([] {
              ExperimentConfig::from_json({{"service", {{"output_mode", "topk_hard"}, {"k", 20}}}});
            }),
            ErrorCode::configuration);
}

TEST(Config, DefaultsAndRoundTrip) {
  const ExperimentConfig c = ExperimentConfig::from_json(json::object());
  EXPECT_EQ(c.method, Method::ares);
  EXPECT_EQ(c.effective_map(), MapKind::flm);
  EXPECT_EQ(c.geometry().border_size(), 320u);
  EXPECT_DOUBLE_EQ(c.vr.prompt_init, 3.0 / 7.0);
  ExperimentConfig s = c;
  s.label_space = LabelSpace::shared;
  EXPECT_EQ(s.effective_map(), MapKind::identity);

  ExperimentConfig d = tiny(Method::zoo_rgf);
  d.zoo.max_calls = 1000;
  d.world_seed = 5;
  const json j = d.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
}

TEST(RunExperiment, CostIdentityAndCallCounts) {
  for (Method m : {Method::ares, Method::zoo_spsa, Method::zoo_rgf, Method::local_vr, Method::local_vr_lp}) {
    const ExperimentReport r = run_experiment(tiny(m));
    EXPECT_DOUBLE_EQ(r.cost, static_cast<double>(r.train_calls + r.infer_calls) * r.price_per_call);
    ASSERT_TRUE(r.test_accuracy.has_value());
    const auto& cfg = tiny(m);
    const std::size_t n = cfg.data.target_classes * cfg.data.shots;
    switch (m) {
      case Method::ares:
        EXPECT_EQ(r.train_calls, n);
        EXPECT_EQ(r.infer_calls, 0u);
        break;
      case Method::zoo_spsa:
      case Method::zoo_rgf: {
        ZooConfig z = cfg.zoo;
        z.estimator = m == Method::zoo_rgf ? Estimator::rgf : Estimator::spsa_gc;
        EXPECT_EQ(r.train_calls, expected_zoo_calls(z, n));
        EXPECT_EQ(r.infer_calls, cfg.data.target_classes * cfg.data.test_per_class);
        break;
      }
      default:
        EXPECT_EQ(r.train_calls + r.infer_calls, 0u);
    }
  }
}

TEST(RunExperiment, ExpectedZooCallsClosedForm) {
  ZooConfig z;
  z.steps = 100;
  z.batch = 16;
  EXPECT_EQ(expected_zoo_calls(z, 80), 3200u);
  z.estimator = Estimator::rgf;
  EXPECT_EQ(expected_zoo_calls(z, 80), 9600u);
  z.estimator = Estimator::spsa_gc;
  EXPECT_EQ(expected_zoo_calls(z, 40), 100u / 3 * 80 + 32);
}

TEST(RunExperiment, ZeroShotOnSharedLabels) {
  const ExperimentConfig c = tiny(Method::zero_shot, LabelSpace::shared);
  const ExperimentReport r = run_experiment(c);
  ASSERT_TRUE(r.test_accuracy.has_value());
  EXPECT_EQ(r.train_calls, 0u);
  EXPECT_EQ(r.infer_calls, c.data.target_classes * c.data.test_per_class);

  const ExperimentReport d = run_experiment(tiny(Method::zero_shot));
  EXPECT_FALSE(d.test_accuracy.has_value());
  EXPECT_EQ(d.train_calls + d.infer_calls, 0u);
}

TEST(RunExperiment, ModelSelectionRecordsItsDecision) {
  const ExperimentConfig c = tiny(Method::ares_ms, LabelSpace::shared);
  const ExperimentReport r = run_experiment(c);
  ASSERT_TRUE(r.selection.is_object());
  const std::string decision = r.selection["decision"];
  EXPECT_TRUE(decision == "local" || decision == "api");
  const double zs = r.selection["zero_shot_accuracy"];
  const double pl = r.selection["primed_local_accuracy"];
  EXPECT_EQ(decision, std::string(to_string(select_path(zs, pl, c.tau))));
  const std::size_t n = c.data.target_classes * c.data.shots;
  EXPECT_EQ(r.train_calls, n);
  EXPECT_EQ(r.infer_calls, decision == "api" ? c.data.target_classes * c.data.test_per_class : 0u);
}

TEST(RunExperiment, ReportsAreDeterministic) {
  const ExperimentConfig c = tiny(Method::ares);
  const std::string a = run_experiment(c).dump();
  clear_world_cache();
  const std::string b = run_experiment(c).dump();
  EXPECT_EQ(a, b);
  ExperimentConfig other = c;
  other.seed = 1;
  EXPECT_NE(run_experiment(other).dump(), a);
}

TEST(RunExperiment, TheoryReportOnSharedLabels) {
  ExperimentConfig c = tiny(Method::ares, LabelSpace::shared);
  c.service.debug_logits = true;
  c.theory.enabled = true;
  const ExperimentReport r = run_experiment(c);
  ASSERT_TRUE(r.theory.has_value());
  EXPECT_GT(r.debug_calls, 0u);
  EXPECT_EQ(r.train_calls, c.data.target_classes * c.data.shots);
  EXPECT_TRUE(r.theory->pre.left_holds);
  EXPECT_TRUE(r.to_json()["theory"].contains("right_bound_post"));
}

TEST(CompareSuite, RowsCsvAndFailures) {
  std::vector<ExperimentConfig> configs{tiny(Method::local_vr), tiny(Method::zoo_spsa), tiny(Method::zero_shot)};
  configs[1].zoo.max_calls = 10;  // budget error on every seed
  const std::vector<std::uint64_t> seeds{0, 1};
  const auto rows = compare_suite(configs, seeds);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_EQ(rows[0].runs, 2u);
  EXPECT_NE(rows[1].status.find("failed"), std::string::npos);
  EXPECT_EQ(rows[1].runs, 0u);
  EXPECT_EQ(rows[2].status, "not-applicable");
  const std::string csv = suite_csv(rows);
  EXPECT_EQ(csv.rfind("label,method,runs,mean_accuracy,std_accuracy,mean_train_calls,mean_infer_calls,mean_cost,status\n",
                      0),
            0u);
  EXPECT_EQ(csv, suite_csv(compare_suite(configs, seeds)));
  EXPECT_EQ(code_of([&] { compare_suite({}, seeds); }), ErrorCode::configuration);
}
