#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "bbal/autodiff.hpp"
#include "bbal/error.hpp"
#include "bbal/gradcheck.hpp"
#include "bbal/losses.hpp"
#include "bbal/rng.hpp"
#include "bbal/tensor.hpp"
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

Tensor vec(std::vector<double> v) { return Tensor::vector(std::move(v)); }

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_EQ(code_of([] { Tensor({2, 2}, std::vector<double>{1, 2, 3}); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { Tensor({2, 0}); }), ErrorCode::invalid_input);
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.reshaped({3, 2}).at(2, 0), 5.0);
  EXPECT_EQ(code_of([&] { t.reshaped({4, 2}); }), ErrorCode::invalid_input);
}

TEST(Tensor, MatmulAgreesWithTransposedForms) {
  Rng rng(3);
  Tensor a({3, 4}), b({4, 2});
  for (double& v : a.values()) v = rng.normal();
  for (double& v : b.values()) v = rng.normal();
  const Tensor c = matmul(a, b);
  Tensor at({4, 3}), bt({2, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) at.at(j, i) = a.at(i, j);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) bt.at(j, i) = b.at(i, j);
  const Tensor c1 = matmul_transpose_a(at, b);
  const Tensor c2 = matmul_transpose_b(a, bt);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(c1[i], c[i], 1e-12);
    EXPECT_NEAR(c2[i], c[i], 1e-12);
  }
}

TEST(Softmax, Examples) {
  auto p = softmax(vec({0, 0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  p = softmax(vec({1, 0}));
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(p[1], 1 / (e + 1), 1e-15);
  EXPECT_NEAR(p[0], 0.73106, 5e-6);
  EXPECT_NEAR(p[1], 0.26894, 5e-6);
  p = softmax(vec({5, 5, 5, 5}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_EQ(code_of([] { softmax(vec({1, NAN})); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { softmax(vec({INFINITY, 0})); }), ErrorCode::invalid_input);
  EXPECT_EQ(code_of([] { softmax(vec({1})); }), ErrorCode::invalid_input);
}

TEST(Softmax, SimplexAndShiftInvarianceOnRandomDraws) {
  Rng rng(11);
  double worst_sum = 0, worst_shift = 0, worst_oracle = 0;
  for (int i = 0; i < 100000; ++i) {
    const std::size_t k = 2 + rng.below(63);
    const auto z = oracle::random_logits(rng, k, 1.0 + 9.0 * rng.uniform());
    const double c = 20.0 * (rng.uniform() - 0.5);
    std::vector<double> zc(z);
    for (double& v : zc) v += c;
    const Tensor p = softmax(vec(z));
    const Tensor q = softmax(vec(zc));
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      ASSERT_GT(p[j], 0.0);
      ASSERT_LE(p[j], 1.0);
      total += p[j];
      worst_shift = std::max(worst_shift, std::abs(p[j] - q[j]));
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    if (i % 100 == 0) {
      const auto ref = oracle::softmax(z);
      for (std::size_t j = 0; j < k; ++j) worst_oracle = std::max(worst_oracle, double(std::abs(p[j] - ref[j])));
    }
  }
  EXPECT_LE(worst_sum, 1e-12);
  EXPECT_LE(worst_shift, 1e-12);
  EXPECT_LE(worst_oracle, 1e-14);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(vec({0, 0}), 0), 0.69315, 5e-6);
  EXPECT_NEAR(cross_entropy(vec({0, 0}), 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(cross_entropy(vec({1, 0}), 0), 0.31326, 5e-6);
  EXPECT_NEAR(cross_entropy(vec({1, 0}), 0), double(oracle::cross_entropy({1, 0}, 0)), 1e-15);
  EXPECT_NEAR(cross_entropy(vec({100, 0}), 0), 0.0, 1e-40);
  EXPECT_EQ(code_of([] { cross_entropy(vec({0, 0}), 2); }), ErrorCode::index);
}

TEST(CrossEntropy, OneLipschitzInL1) {
  Rng rng(5);
  for (int i = 0; i < 100000; ++i) {
    const std::size_t k = 2 + rng.below(31);
    const auto z1 = oracle::random_logits(rng, k, 3.0);
    const auto z2 = oracle::random_logits(rng, k, 3.0);
    const std::size_t y = rng.below(k);
    const double lhs = std::abs(cross_entropy(vec(z1), y) - cross_entropy(vec(z2), y));
    ASSERT_LE(lhs, l1_distance(z1, z2) + 1e-12);
  }
}

TEST(FocalLoss, Examples) {
  EXPECT_NEAR(focal_loss(vec({0, 0}), 0, 0.0), 0.69315, 5e-6);
  EXPECT_NEAR(focal_loss(vec({0, 0}), 0, 2.0), 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(vec({0, 0}), 0, 2.0), 0.17329, 5e-6);
  EXPECT_NEAR(focal_loss(vec({30, 0}), 0, 2.0), 0.0, 1e-30);
  EXPECT_EQ(code_of([] { focal_loss(vec({0, 0}), 5, 2.0); }), ErrorCode::index);
}

TEST(FocalLoss, GammaZeroIsCrossEntropyBitForBit) {
  Rng rng(8);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t k = 2 + rng.below(15);
    const Tensor z = vec(oracle::random_logits(rng, k, 4.0));
    const std::size_t y = rng.below(k);
    ASSERT_EQ(focal_loss(z, y, 0.0), cross_entropy(z, y));
  }
}

TEST(PrimingLoss, Examples) {
  const Tensor half = vec({0.5, 0.5});
  EXPECT_NEAR(priming_loss(half, half), std::log(2.0), 1e-15);
  const Tensor sharp = vec({1 - 1e-12, 1e-12});
  EXPECT_LT(priming_loss(sharp, sharp), 1e-9);
  EXPECT_EQ(code_of([] { priming_loss(vec({0.5, 0.6}), vec({0.5, 0.5})); }), ErrorCode::invalid_distribution);
  EXPECT_EQ(code_of([] { priming_loss(vec({0.5, 0.5}), vec({-0.1, 1.1})); }), ErrorCode::invalid_distribution);
}

TEST(PrimingLoss, GibbsInequality) {
  Rng rng(21);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t k = 2 + rng.below(20);
    const Tensor p = vec(oracle::random_simplex(rng, k));
    const Tensor q = vec(oracle::random_simplex(rng, k));
    const double gap = priming_loss(q, p) - entropy(p);
    ASSERT_GE(gap, -1e-12);
    ASSERT_NEAR(gap, kl_divergence(p, q), 1e-12);
    ASSERT_NEAR(priming_loss(p, p) - entropy(p), 0.0, 1e-12);
  }
}

TEST(PrimingLoss, LogitGradientEqualsKlGradient) {
  // d/dz KL(t || softmax z) = softmax(z) - t, which does not involve H(t).
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + rng.below(10);
    const auto z = oracle::random_logits(rng, k, 2.0);
    const auto t = oracle::random_simplex(rng, k);
    ParamSet ps;
    ps.add("z", Tensor({1, k}, z), true);
    Graph g;
    NodeId loss = g.soft_cross_entropy(g.parameter(ps, "z"), Tensor({1, k}, t));
    g.backward(loss);
    const auto p = oracle::softmax(z);
    for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR(ps.grad("z")[j], double(p[j] - t[j]), 1e-10);
  }
}

TEST(AltPrimingLoss, Examples) {
  const Tensor p = vec({0.3, 0.7});
  EXPECT_EQ(alt_priming_loss(PrimingLossKind::l1_prob, p, p, ServiceAccess::probabilities_only), 0.0);
  EXPECT_DOUBLE_EQ(alt_priming_loss(PrimingLossKind::l2_logit, vec({1, 0}), vec({0, 0}), ServiceAccess::debug_logits),
                   1.0);
  EXPECT_DOUBLE_EQ(alt_priming_loss(PrimingLossKind::l1_logit, vec({1, 0}), vec({0, 1}), ServiceAccess::debug_logits),
                   2.0);
  EXPECT_DOUBLE_EQ(alt_priming_loss(PrimingLossKind::kl, p, p, ServiceAccess::probabilities_only), priming_loss(p, p));
  EXPECT_EQ(code_of([] {
              alt_priming_loss(PrimingLossKind::l1_logit, vec({1, 0}), vec({0, 1}), ServiceAccess::probabilities_only);
            }),
            ErrorCode::capability);
}

TEST(Backward, SumGivesOnes) {
  ParamSet ps;
  ps.add("x", Tensor({2, 3}, std::vector<double>{1, -2, 3, 0.5, 7, -1}), true);
  Graph g;
  g.backward(g.sum(g.parameter(ps, "x")));
  for (double v : ps.grad("x").values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, CrossEntropyGradientIsProbabilitiesMinusOneHot) {
  ParamSet ps;
  ps.add("z", Tensor({1, 3}, std::vector<double>{0.2, -1.0, 2.0}), true);
  Graph g;
  const std::vector<std::size_t> y{1};
  g.backward(g.softmax_cross_entropy(g.parameter(ps, "z"), y));
  const auto p = oracle::softmax({0.2, -1.0, 2.0});
  EXPECT_NEAR(ps.grad("z")[0], double(p[0]), 1e-15);
  EXPECT_NEAR(ps.grad("z")[1], double(p[1] - 1), 1e-15);
  EXPECT_NEAR(ps.grad("z")[2], double(p[2]), 1e-15);
}

TEST(Backward, StateErrors) {
  Graph empty;
  EXPECT_EQ(code_of([&] { empty.backward(0); }), ErrorCode::state);
  ParamSet ps;
  ps.add("x", Tensor({1, 2}, 1.0), true);
  Graph g;
  NodeId x = g.parameter(ps, "x");
  EXPECT_EQ(code_of([&] { g.grad(x); }), ErrorCode::state);
  EXPECT_EQ(code_of([&] { g.backward(x); }), ErrorCode::state);  // not scalar
  NodeId s = g.sum(x);
  EXPECT_EQ(code_of([&] { g.backward(s + 10); }), ErrorCode::state);
  g.backward(s);
  EXPECT_EQ(code_of([&] { g.backward(s); }), ErrorCode::state);
}

TEST(Backward, FrozenParametersReceiveNoGradient) {
  ParamSet ps;
  ps.add("w", Tensor({2, 2}, 1.0), false);
  ps.add("x", Tensor({1, 2}, 1.0), true);
  Graph g;
  g.backward(g.sum(g.tanh(g.matmul(g.parameter(ps, "x"), g.parameter(ps, "w")))));
  for (double v : ps.grad("w").values()) EXPECT_EQ(v, 0.0);
  for (double v : ps.grad("x").values()) EXPECT_NE(v, 0.0);
}

namespace {

// Three dense layers recorded by hand on the graph, with a label-mapped loss.
struct ThreeLayer {
  std::vector<std::size_t> labels{0, 2, 1, 2};
  Tensor x{{4, 5}};
  Tensor map{{3, 4}};

  ThreeLayer() {
    Rng rng(17);
    for (double& v : x.values()) v = rng.normal();
    for (double& v : map.values()) v = 0.1 + rng.uniform();
  }

  static void add_params(ParamSet& ps, Rng& rng) {
    const std::size_t widths[] = {5, 6, 6, 4};
    for (std::size_t l = 0; l < 3; ++l) {
      Tensor w({widths[l], widths[l + 1]}), b({widths[l + 1]});
      for (double& v : w.values()) v = 0.7 * rng.normal();
      for (double& v : b.values()) v = 0.2 * rng.normal();
      ps.add("w" + std::to_string(l), w, true);
      ps.add("b" + std::to_string(l), b, true);
    }
  }

  NodeId forward(Graph& g, const std::vector<NodeId>& p) const {
    NodeId h = g.constant(x);
    h = g.tanh(g.add_bias(g.matmul(h, p[0]), p[1]));
    h = g.relu(g.add_bias(g.matmul(h, p[2]), p[3]));
    return g.add_bias(g.matmul(h, p[4]), p[5]);
  }
};

}  // namespace

TEST(Backward, ThreeLayerNetworkMatchesFiniteDifferences) {
  const ThreeLayer net;
  Rng rng(23);
  for (int point = 0; point < 3; ++point) {
    ParamSet ps;
    ThreeLayer::add_params(ps, rng);
    {
      Graph g;
      std::vector<NodeId> p;
      for (std::size_t i = 0; i < ps.size(); ++i) p.push_back(g.parameter(ps, ps.name(i)));
      g.backward(g.mapped_nll(net.forward(g, p), net.labels, net.map));
    }
    auto objective = [&](const ParamSet& q) {
      Graph g;
      std::vector<NodeId> p;
      for (std::size_t i = 0; i < q.size(); ++i) p.push_back(g.constant(q.value(i)));
      return g.value(g.mapped_nll(net.forward(g, p), net.labels, net.map))[0];
    };
    EXPECT_LT(oracle::worst_gradient_error(objective, ps), 1e-4) << "point " << point;
  }
}

TEST(Backward, LossPrimitivesMatchFiniteDifferences) {
  Rng rng(31);
  Tensor targets({3, 4}), logit_targets({3, 4});
  for (std::size_t i = 0; i < 3; ++i) {
    const auto t = oracle::random_simplex(rng, 4);
    for (std::size_t j = 0; j < 4; ++j) {
      targets.at(i, j) = t[j];
      logit_targets.at(i, j) = rng.normal();
    }
  }
  using Loss = std::function<NodeId(Graph&, NodeId)>;
  const std::vector<std::pair<const char*, Loss>> losses = {
      {"soft_ce", [&](Graph& g, NodeId z) { return g.soft_cross_entropy(z, targets); }},
      {"l1_prob", [&](Graph& g, NodeId z) { return g.probability_distance(z, targets, 1); }},
      {"l2_prob", [&](Graph& g, NodeId z) { return g.probability_distance(z, targets, 2); }},
      {"l1_logit", [&](Graph& g, NodeId z) { return g.logit_distance(z, logit_targets, 1); }},
      {"l2_logit", [&](Graph& g, NodeId z) { return g.logit_distance(z, logit_targets, 2); }},
      {"clamp", [&](Graph& g, NodeId z) { return g.sum(g.clamp(g.mul_constant(z, logit_targets), -0.5, 0.5)); }},
  };
  for (const auto& [name, loss] : losses) {
    for (int point = 0; point < 3; ++point) {
      ParamSet ps;
      Tensor z({3, 4});
      for (double& v : z.values()) v = 1.5 * rng.normal();
      ps.add("z", z, true);
      {
        Graph g;
        g.backward(loss(g, g.parameter(ps, "z")));
      }
      auto objective = [&](const ParamSet& q) {
        Graph g;
        return g.value(loss(g, g.constant(q.value("z"))))[0];
      };
      EXPECT_LT(oracle::worst_gradient_error(objective, ps), 1e-4) << name;
    }
  }
}

TEST(Backward, DeterministicForIdenticalForward) {
  const ThreeLayer net;
  Rng r1(2), r2(2);
  ParamSet a, b;
  ThreeLayer::add_params(a, r1);
  ThreeLayer::add_params(b, r2);
  for (ParamSet* ps : {&a, &b}) {
    Graph g;
    std::vector<NodeId> p;
    for (std::size_t i = 0; i < ps->size(); ++i) p.push_back(g.parameter(*ps, ps->name(i)));
    g.backward(g.mapped_nll(net.forward(g, p), net.labels, net.map));
  }
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.grad(i), b.grad(i));
}

TEST(FiniteDifference, Examples) {
  ParamSet ps;
  ps.add("p", Tensor({1}, 1.0), true);
  auto square = [](const ParamSet& q) { return q.value("p")[0] * q.value("p")[0]; };
  EXPECT_NEAR(finite_difference_grad(square, ps)[0][0], 2.0, 1e-8);
  EXPECT_EQ(ps.value("p")[0], 1.0);

  ParamSet v;
  v.add("p", Tensor({4}, std::vector<double>{0.3, -2, 5, 1e3}), true);
  v.add("frozen", Tensor({2}, 1.0), false);
  auto constant = [](const ParamSet&) { return 4.2; };
  auto total = [](const ParamSet& q) {
    const auto x = q.value("p").values();
    return std::accumulate(x.begin(), x.end(), 0.0);
  };
  const auto zeros = finite_difference_grad(constant, v);
  for (double g : zeros[0].values()) EXPECT_EQ(g, 0.0);
  const auto ones = finite_difference_grad(total, v);
  for (double g : ones[0].values()) EXPECT_NEAR(g, 1.0, 1e-6);
  for (double g : ones[1].values()) EXPECT_EQ(g, 0.0);
}
