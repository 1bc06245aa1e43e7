#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "bbal/error.hpp"
#include "bbal/experiment.hpp"
#include "bbal/priming.hpp"
#include "bbal/prompt.hpp"
#include "oracles.hpp"

using namespace bbal;

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

Architecture mlp(std::vector<std::size_t> hidden, std::size_t classes, std::size_t side = 6) {
  Architecture a;
  a.height = a.width = side;
  a.hidden = std::move(hidden);
  a.classes = classes;
  return a;
}

Tensor random_images(std::size_t n, std::size_t side, Rng& rng) {
  Tensor t({n, side, side, 1});
  for (double& v : t.values()) v = rng.uniform();
  return t;
}

double sum(const Tensor& t) {
  double s = 0;
  for (double v : t.values()) s += v;
  return s;
}

// World for the seed-7 benchmark runs; built once and cached by the harness.
const World& world7() {
  static const auto w = [] {
    ExperimentConfig c;
    c.seed = 7;
    return build_world(c);
  }();
  return *w;
}

ServiceOptions debug_options() {
  ServiceOptions o;
  o.debug_logits = true;
  return o;
}

}  // namespace

TEST(ExpandTopkSoft, Examples) {
  const std::vector<std::pair<std::size_t, double>> one{{3, 0.7}};
  const Tensor p = expand_topk_soft(one, 10);
  EXPECT_DOUBLE_EQ(p[3], 0.7);
  for (std::size_t c = 0; c < 10; ++c) {
    if (c != 3) EXPECT_NEAR(p[c], 0.3 / 9.0, 1e-15);
  }
  EXPECT_NEAR(p[0], 0.03333, 5e-6);

  const std::vector<std::pair<std::size_t, double>> all{{2, 0.5}, {0, 0.3}, {1, 0.2}};
  const Tensor q = expand_topk_soft(all, 3);
  EXPECT_EQ(q[0], 0.3);
  EXPECT_EQ(q[1], 0.2);
  EXPECT_EQ(q[2], 0.5);

  const std::vector<std::pair<std::size_t, double>> two{{4, 0.75}, {1, 0.25}};
  const Tensor r = expand_topk_soft(two, 6);
  for (std::size_t c : {0, 2, 3, 5}) EXPECT_EQ(r[c], 0.0);

  const std::vector<std::pair<std::size_t, double>> dup{{1, 0.5}, {1, 0.2}};
  EXPECT_EQ(code_of([&] { expand_topk_soft(dup, 4); }), ErrorCode::invalid_input);
  const std::vector<std::pair<std::size_t, double>> heavy{{0, 0.8}, {1, 0.3}};
  EXPECT_EQ(code_of([&] { expand_topk_soft(heavy, 4); }), ErrorCode::invalid_distribution);
}

TEST(ExpandTopkSoft, SimplexForAllSmallShapes) {
  Rng rng(40);
  for (std::size_t k_total = 1; k_total <= 64; ++k_total) {
    for (std::size_t k = 1; k <= k_total; ++k) {
      const auto full = oracle::random_simplex(rng, k_total + 1);
      std::vector<std::pair<std::size_t, double>> pairs;
      const auto order = rng.permutation(k_total);
      for (std::size_t r = 0; r < k; ++r) pairs.emplace_back(order[r], full[r]);
      const Tensor p = expand_topk_soft(pairs, k_total);
      double total = 0, revealed = 0;
      for (double v : p.values()) {
        ASSERT_GE(v, 0.0);
        total += v;
      }
      for (const auto& [c, v] : pairs) {
        ASSERT_EQ(p[c], v);
        revealed += v;
      }
      if (k < k_total) {
        ASSERT_NEAR(total, 1.0, 1e-12);
      } else {
        ASSERT_NEAR(total, revealed, 1e-12);
      }
    }
  }
}

TEST(ExpandTopkHard, Examples) {
  const std::vector<std::size_t> top1{6};
  const Tensor p = expand_topk_hard(top1, 10);
  EXPECT_NEAR(p[6], 0.5, 1e-15);
  for (std::size_t c = 0; c < 10; ++c) {
    if (c != 6) EXPECT_NEAR(p[c], 1.0 / 18.0, 1e-15);
  }
  const std::vector<std::size_t> top2{2, 7};
  const Tensor q = expand_topk_hard(top2, 10);
  EXPECT_NEAR(q[2], 4.0 / 9.0, 1e-15);
  EXPECT_NEAR(q[7], 2.0 / 9.0, 1e-15);
  EXPECT_NEAR(q[0], 1.0 / 24.0, 1e-15);

  const std::vector<std::size_t> dup{1, 1};
  EXPECT_EQ(code_of([&] { expand_topk_hard(dup, 4); }), ErrorCode::invalid_input);
  const std::vector<std::size_t> every{0, 1, 2};
  EXPECT_EQ(code_of([&] { expand_topk_hard(every, 3); }), ErrorCode::invalid_input);
}

TEST(ExpandTopkHard, MatchesFormulaExhaustively) {
  // c(k) = k/(k+1) over ranks with weight 1/r, 1/(k+1) spread evenly.
  Rng rng(41);
  for (std::size_t k_total = 2; k_total <= 64; ++k_total) {
    for (std::size_t k = 1; k < k_total; ++k) {
      auto order = rng.permutation(k_total);
      order.resize(k);
      const Tensor p = expand_topk_hard(order, k_total);
      long double h = 0;
      for (std::size_t r = 1; r <= k; ++r) h += 1.0L / r;
      const long double c = static_cast<long double>(k) / (k + 1);
      std::vector<bool> revealed(k_total, false);
      for (std::size_t r = 1; r <= k; ++r) {
        revealed[order[r - 1]] = true;
        ASSERT_NEAR(p[order[r - 1]], double(c * (1.0L / r) / h), 1e-15);
      }
      for (std::size_t j = 0; j < k_total; ++j) {
        if (!revealed[j]) ASSERT_NEAR(p[j], double((1.0L / (k + 1)) / (k_total - k)), 1e-15);
      }
      ASSERT_NEAR(sum(p), 1.0, 1e-12);
    }
  }
}

TEST(CollectSoftLabels, OneCallPerImage) {
  Rng rng(3);
  ServiceApi api(Classifier(mlp({8}, 5), 2), {});
  const Tensor x = random_images(160, 6, rng);
  const SoftLabelSet s = collect_soft_labels(api, x);
  EXPECT_EQ(api.calls(Phase::train), 160u);
  EXPECT_EQ(api.calls(Phase::infer), 0u);
  ASSERT_EQ(s.size(), 160u);
  for (const auto& p : s.provenance) EXPECT_EQ(p, "full");
  s.validate();
  EXPECT_EQ(code_of([&] { collect_soft_labels(api, Tensor()); }), ErrorCode::invalid_input);
}

TEST(CollectSoftLabels, TruncatedModesAreExpanded) {
  Rng rng(3);
  ServiceOptions soft;
  soft.output = {OutputMode::topk_soft, 2};
  ServiceOptions hard;
  hard.output = {OutputMode::topk_hard, 3};
  ServiceApi a(Classifier(mlp({8}, 5), 2), soft);
  ServiceApi b(Classifier(mlp({8}, 5), 2), hard);
  const Tensor x = random_images(4, 6, rng);
  const auto sa = collect_soft_labels(a, x);
  const auto sb = collect_soft_labels(b, x);
  EXPECT_EQ(sa.provenance[0], "expanded-topk-soft(2)");
  EXPECT_EQ(sb.provenance[3], "expanded-topk-hard(3)");
  sa.validate();
  sb.validate();
}

TEST(CollectSoftLabels, ServiceErrorsNameTheImage) {
  ServiceApi api(Classifier(mlp({8}, 5), 2), {});
  Tensor bad({2, 6, 6, 1}, 0.5);
  bad[40] = NAN;
  try {
    collect_soft_labels(api, bad);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_input);
    EXPECT_NE(std::string(e.what()).find("image 1"), std::string::npos);
  }
}

TEST(SoftLabelCache, RoundTrip) {
  Rng rng(5);
  SoftLabelSet s;
  s.probs = Tensor({3, 4});
  for (std::size_t i = 0; i < 3; ++i) {
    const auto p = oracle::random_simplex(rng, 4);
    std::copy(p.begin(), p.end(), s.probs.row(i).begin());
    s.provenance.push_back(i == 1 ? "expanded-topk-soft(2)" : "full");
  }
  const auto path = std::filesystem::temp_directory_path() / "bbal_soft_labels.jsonl";
  write_soft_labels(path, s);
  const SoftLabelSet back = read_soft_labels(path);
  EXPECT_EQ(back.probs, s.probs);
  EXPECT_EQ(back.provenance, s.provenance);
  std::filesystem::remove(path);
}

TEST(Prime, SelfLabelsAreAFixedPoint) {
  Rng rng(8);
  Classifier pre(mlp({8}, 4), 3);
  oracle::randomize(pre.params(), rng, 0.5);
  LocalModel local = LocalModel::with_fresh_head(pre, 5);
  oracle::randomize(local.head(), rng, 0.5);
  const Tensor x = random_images(40, 6, rng);
  PrimingConfig cfg;
  cfg.epochs = 1;
  // Labels are regenerated from the current head each round: Adam rescales
  // the tiny residual gradient of a stale near-fixed point to a full step.
  for (int epoch = 0; epoch < 5; ++epoch) {
    SoftLabelSet s;
    s.probs = local.logits(x);
    for (std::size_t i = 0; i < 40; ++i) {
      const Tensor p = softmax(Tensor::vector({s.probs.row(i).begin(), s.probs.row(i).end()}));
      std::copy(p.values().begin(), p.values().end(), s.probs.row(i).begin());
      s.provenance.push_back("full");
    }
    const ParamSet before = local.head();
    prime(local, x, s, cfg);
    double drift = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      for (std::size_t j = 0; j < before.value(i).size(); ++j) {
        drift = std::max(drift, std::abs(before.value(i)[j] - local.head().value(i)[j]));
      }
    }
    EXPECT_LT(drift, 1e-6) << "epoch " << epoch;
  }
}

TEST(Prime, ErrorsAndFrozenEncoder) {
  Rng rng(9);
  Classifier pre(mlp({8}, 4), 3);
  LocalModel local = LocalModel::with_fresh_head(pre, 4);
  const Tensor x = random_images(6, 6, rng);
  ServiceApi api(Classifier(mlp({5}, 3), 1), {});
  const SoftLabelSet s = collect_soft_labels(api, x);
  EXPECT_EQ(code_of([&] { prime(local, x, s, {}); }), ErrorCode::configuration);

  LocalModel narrow = LocalModel::with_fresh_head(pre, 3);
  PrimingConfig logit_cfg;
  logit_cfg.loss = PrimingLossKind::l2_logit;
  EXPECT_EQ(code_of([&] { prime(narrow, x, s, logit_cfg); }), ErrorCode::capability);
  PrimingConfig zero;
  zero.epochs = 0;
  EXPECT_EQ(code_of([&] { prime(narrow, x, s, zero); }), ErrorCode::configuration);

  const auto before = narrow.encoder_checksum();
  PrimingConfig quick;
  quick.epochs = 3;
  prime(narrow, x, s, quick);
  EXPECT_EQ(narrow.encoder_checksum(), before);
  Dataset d;
  d.images = x;
  d.labels = {0, 1, 0, 1, 0, 1};
  d.classes = 2;
  linear_probe(narrow, d, quick);
  EXPECT_EQ(narrow.encoder_checksum(), before);
  EXPECT_EQ(narrow.head_classes(), 2u);
}

TEST(Prime, RealizableCloneDrivesEpsilonToZero) {
  // The service shares the local encoder and adds a head with zero-mean
  // logits.
  Rng rng(10);
  Classifier pre(mlp({12}, 4), 3);
  oracle::randomize(pre.params(), rng, 0.6);
  ParamSet sp = pre.params();
  Architecture sa = pre.architecture();
  sa.classes = 5;
  Tensor w({12, 5}), b({5});
  for (std::size_t i = 0; i < 12; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < 5; ++j) mean += w.at(i, j) = rng.normal();
    for (std::size_t j = 0; j < 5; ++j) w.at(i, j) -= mean / 5;
  }
  ParamSet service_params;
  service_params.add(layer_weight_name(0), sp.value(layer_weight_name(0)), true);
  service_params.add(layer_bias_name(0), sp.value(layer_bias_name(0)), true);
  service_params.add(layer_weight_name(1), w, true);
  service_params.add(layer_bias_name(1), b, true);
  ServiceApi api(Classifier(sa, service_params), debug_options());

  const Tensor x = random_images(200, 6, rng);
  SoftLabelSet labels = collect_soft_labels(api, x);
  labels.logits = api.debug_logits(x);
  const Tensor zs = api.debug_logits(x);

  // Logit-space priming identifies the service logits themselves.
  {
    LocalModel local = LocalModel::with_fresh_head(pre, 5);
    const double before = measure_epsilon(local, api, x).epsilon_pre;
    PrimingConfig cfg;
    cfg.loss = PrimingLossKind::l2_logit;
    cfg.lr = 0.01;
    cfg.epochs = 400;
    prime(local, x, labels, cfg);
    const double after = measure_epsilon(local, api, x).epsilon_pre;
    EXPECT_LT(after, 0.01 * before);
    EXPECT_LT(after, 0.05);
  }
  // Probability-space priming pins logits only up to a per-image shift, so
  // the gap is measured after centering each logit row.
  {
    LocalModel local = LocalModel::with_fresh_head(pre, 5);
    PrimingConfig cfg;
    cfg.lr = 0.01;
    cfg.epochs = 400;
    prime(local, x, labels, cfg);
    const Tensor zl = local.logits(x);
    double centered = 0, raw_centered = 0, prob_gap = 0;
    for (std::size_t i = 0; i < 200; ++i) {
      double ms = 0, ml = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        ms += zs.at(i, j) / 5;
        ml += zl.at(i, j) / 5;
      }
      for (std::size_t j = 0; j < 5; ++j) {
        centered += std::abs((zs.at(i, j) - ms) - (zl.at(i, j) - ml)) / 200;
        raw_centered += std::abs(zs.at(i, j) - ms) / 200;
      }
      const auto ps = oracle::softmax({zs.row(i).begin(), zs.row(i).end()});
      const auto pl = oracle::softmax({zl.row(i).begin(), zl.row(i).end()});
      for (std::size_t j = 0; j < 5; ++j) prob_gap += static_cast<double>(std::abs(ps[j] - pl[j])) / 200;
    }
    EXPECT_LT(centered, 0.05 * raw_centered);
    EXPECT_LT(prob_gap, 0.01);
  }
}

TEST(Prime, BenchmarkLossDropsByHalf) {
  const World& w = world7();
  ServiceApi api(Classifier(w.service.architecture(), w.service.params()), {});
  LocalModel local = LocalModel::with_fresh_head(w.local, api.num_classes());
  const auto before = local.encoder_checksum();
  const SoftLabelSet s = collect_soft_labels(api, w.source.images);
  EXPECT_EQ(api.calls(Phase::train), w.source.size());
  PrimingConfig cfg;
  cfg.seed = 7;
  const auto r = prime(local, w.source.images, s, cfg);
  ASSERT_EQ(r.loss_curve.size(), 100u);
  EXPECT_LE(r.loss_curve.back(), 0.5 * r.loss_curve.front());
  EXPECT_EQ(local.encoder_checksum(), before);
  EXPECT_EQ(api.calls(Phase::train), w.source.size());
}

TEST(Prime, DisjointLabelSpaceStillLearns) {
  // Soft labels are K_source wide while the target task has K_target classes.
  const World& w = world7();
  ServiceApi api(Classifier(w.service.architecture(), w.service.params()), {});
  ExperimentConfig c;
  const Tensor raw = make_prompt(c).apply(w.target_train.images);
  const SoftLabelSet s = collect_soft_labels(api, raw);
  ASSERT_NE(s.classes(), w.target_train.classes);
  LocalModel local = LocalModel::with_fresh_head(w.local, s.classes());
  const auto r = prime(local, raw, s, {});
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
}

TEST(LinearProbe, SeparableOneShotAndDeterminism) {
  Rng rng(12);
  Classifier pre(mlp({16}, 4), 3);
  oracle::randomize(pre.params(), rng, 0.8);
  Dataset d;
  d.images = random_images(4, 6, rng);
  d.labels = {0, 1, 2, 3};
  d.classes = 4;
  PrimingConfig cfg;
  cfg.lr = 0.05;
  cfg.epochs = 300;
  LocalModel a = LocalModel::with_fresh_head(pre, 2);
  LocalModel b = LocalModel::with_fresh_head(pre, 2);
  linear_probe(a, d, cfg);
  linear_probe(b, d, cfg);
  EXPECT_EQ(accuracy(predict_classes(a.logits(d.images)), d.labels), 1.0);
  EXPECT_EQ(a.head().checksum(), b.head().checksum());
}

TEST(LinearProbe, BenchmarkBeatsChance) {
  const World& w = world7();
  LocalModel local = LocalModel::with_fresh_head(w.local, w.target_train.classes);
  ExperimentConfig c;
  const Prompt zero = make_prompt(c);
  Dataset train = w.target_train;
  train.images = zero.apply(train.images);
  linear_probe(local, train, {});
  const double acc =
      accuracy(predict_classes(local.logits(zero.apply(w.target_test.images))), w.target_test.labels);
  EXPECT_GT(acc, 1.0 / static_cast<double>(w.target_test.classes));
}

TEST(MeasureEpsilon, CloneIsZeroAndDisabledIsCapability) {
  Rng rng(14);
  Classifier model(mlp({8}, 4), 3);
  oracle::randomize(model.params(), rng, 0.7);
  ServiceApi api(Classifier(model.architecture(), model.params()), debug_options());
  const LocalModel clone = LocalModel::with_pretrained_head(model);
  const Tensor x = random_images(10, 6, rng);
  const auto r = measure_epsilon(clone, api, x);
  EXPECT_EQ(r.epsilon_pre, 0.0);
  EXPECT_EQ(r.epsilon_post, 0.0);
  EXPECT_EQ(r.samples, 10u);
  EXPECT_EQ(api.total_calls(), 0u);
  EXPECT_EQ(api.debug_calls(), 10u);

  const LocalModel other = LocalModel::with_fresh_head(model, 4);
  EXPECT_GT(measure_epsilon(other, api, x).epsilon_pre, 0.0);

  ServiceApi closed(Classifier(model.architecture(), model.params()), {});
  EXPECT_EQ(code_of([&] { measure_epsilon(clone, closed, x); }), ErrorCode::capability);
}

TEST(MeasureEpsilon, PrimingShrinksTheGapOnTheBenchmark) {
  const World& w = world7();
  ServiceApi api(Classifier(w.service.architecture(), w.service.params()), debug_options());
  ExperimentConfig c;
  const Tensor raw = make_prompt(c).apply(w.target_train.images);
  LocalModel local = LocalModel::with_fresh_head(w.local, api.num_classes());
  const double before = measure_epsilon(local, api, raw).epsilon_pre;
  PrimingConfig cfg;
  cfg.seed = 7;
  prime(local, raw, collect_soft_labels(api, raw), cfg);
  const double after = measure_epsilon(local, api, raw).epsilon_pre;
  EXPECT_LT(after, before);
}
