#include "headlab/graph.hpp"
#include "headlab/optim.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>

using namespace headlab;
using testsupport::matmul_oracle;

namespace {

Tensor random_tensor(Rng& rng, std::vector<Eigen::Index> shape, double lo,
                     double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("dense forward: identity, zero weight, matmul oracle") {
  Graph g;
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  NodeId y = g.dense(g.constant(Tensor::row({1, 2, 3})), g.constant(eye),
                     g.constant(Tensor::zeros({3})));
  CHECK(g.value(y).at(0, 0) == 1.0);
  CHECK(g.value(y).at(0, 1) == 2.0);
  CHECK(g.value(y).at(0, 2) == 3.0);

  Tensor b = Tensor::zeros({2});
  b[0] = b[1] = 5.0;
  NodeId z = g.dense(g.constant(Tensor::row({-7, 3, 0})),
                     g.constant(Tensor::zeros({2, 3})), g.constant(b));
  CHECK(g.value(z).at(0, 0) == 5.0);
  CHECK(g.value(z).at(0, 1) == 5.0);

  Rng rng(11);
  Tensor x = random_tensor(rng, {2, 3}, -2, 2);
  Tensor w = random_tensor(rng, {4, 3}, -2, 2);
  Tensor bias = random_tensor(rng, {4}, -1, 1);
  NodeId out = g.dense(g.constant(x), g.constant(w), g.constant(bias));
  const MatrixRM expect = matmul_oracle(x.mat(), w.mat(), bias.flat());
  CHECK((g.value(out).mat() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dense rejects mismatched shapes") {
  Graph g;
  CHECK_THROWS_AS(g.dense(g.constant(Tensor::zeros({2, 3})),
                          g.constant(Tensor::zeros({4, 5})),
                          g.constant(Tensor::zeros({4}))),
                  std::invalid_argument);
}

TEST_CASE("relu forward and indicator backward") {
  Graph g;
  NodeId x = g.input(Tensor::row({-1, 0, 2}));
  NodeId y = g.relu(x);
  CHECK(g.value(y).at(0, 0) == 0.0);
  CHECK(g.value(y).at(0, 1) == 0.0);
  CHECK(g.value(y).at(0, 2) == 2.0);

  Graph g2;
  NodeId neg = g2.relu(g2.constant(Tensor::row({-3, -0.5, -100})));
  CHECK(g2.value(neg).flat().maxCoeff() == 0.0);

  // upstream (1,1) through a unit-weight sum
  Graph g3;
  NodeId x3 = g3.input(Tensor::row({-1, 2}));
  Tensor ones = Tensor::zeros({1, 2});
  ones.at(0, 0) = ones.at(0, 1) = 1.0;
  NodeId s = g3.dense(g3.relu(x3), g3.constant(ones),
                      g3.constant(Tensor::zeros({1})));
  g3.backward(s);
  CHECK(g3.grad(x3).at(0, 0) == 0.0);
  CHECK(g3.grad(x3).at(0, 1) == 1.0);
}

TEST_CASE("smooth l1 worked values") {
  Graph g;
  NodeId perfect = g.smooth_l1(g.input(Tensor::row({1, 2, 3})),
                               Tensor::row({1, 2, 3}));
  CHECK(g.scalar(perfect) == 0.0);
  NodeId inner = g.smooth_l1(g.input(Tensor::row({0.5})), Tensor::row({0}));
  CHECK(g.scalar(inner) == doctest::Approx(0.125).epsilon(1e-15));
  NodeId outer = g.smooth_l1(g.input(Tensor::row({2})), Tensor::row({0}));
  CHECK(g.scalar(outer) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK_THROWS_AS(
      g.smooth_l1(g.input(Tensor::row({1, 2})), Tensor::row({1})),
      std::invalid_argument);
}

TEST_CASE("softmax cross entropy worked values") {
  Graph g;
  NodeId uniform = g.softmax_cross_entropy(
      g.input(Tensor::zeros({1, 4})), {2});
  CHECK(g.scalar(uniform) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor sat = Tensor::zeros({1, 3});
  sat.at(0, 1) = 1000.0;
  NodeId saturated = g.softmax_cross_entropy(g.input(sat), {1});
  CHECK(g.scalar(saturated) == doctest::Approx(0.0).epsilon(1e-9));

  NodeId two = g.softmax_cross_entropy(g.input(Tensor::row({1, 0})), {0});
  CHECK(g.scalar(two) ==
        doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));

  CHECK_THROWS_AS(
      g.softmax_cross_entropy(g.input(Tensor::zeros({1, 3})), {3}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      g.softmax_cross_entropy(g.input(Tensor::zeros({1, 3})), {-1}),
      std::invalid_argument);
}

TEST_CASE("softmax cross entropy is shift invariant per row") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor(rng, {3, 5}, -4, 4);
    Tensor shifted = logits;
    for (Eigen::Index r = 0; r < 3; ++r) {
      const double c = rng.uniform(-50, 50);
      for (Eigen::Index k = 0; k < 5; ++k) shifted.at(r, k) += c;
    }
    std::vector<int> labels{1, 0, 4};
    Graph g;
    const double a = g.scalar(g.softmax_cross_entropy(g.input(logits), labels));
    const double b =
        g.scalar(g.softmax_cross_entropy(g.input(shifted), labels));
    CHECK(std::abs(a - b) < 1e-9);
  }
}

TEST_CASE("sgd steps: plain, momentum iteration, defaults") {
  ParameterStore store;
  Parameter& p = store.create("p", Tensor::scalar(1.0));
  p.grad[0] = 2.0;
  sgd_step(store, {0.1, 0.0});
  CHECK(p.value[0] == doctest::Approx(0.8).epsilon(1e-15));

  ParameterStore store2;
  Parameter& q = store2.create("q", Tensor::scalar(0.0));
  q.grad[0] = 1.0;
  sgd_step(store2, {1.0, 0.9});
  CHECK(q.value[0] == doctest::Approx(-1.0).epsilon(1e-15));
  q.grad[0] = 1.0;
  sgd_step(store2, {1.0, 0.9});
  CHECK(q.value[0] == doctest::Approx(-2.9).epsilon(1e-15));

  const SgdConfig defaults;
  CHECK(defaults.learning_rate == 2e-3);
  CHECK(defaults.momentum == 0.9);
}

TEST_CASE("backward of every primitive matches central finite differences") {
  // composite touching dense, relu, slice, concat, gather, both losses
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    ParameterStore store;
    Parameter& w1 = store.create("w1", random_tensor(rng, {5, 4}, -1, 1));
    Parameter& b1 = store.create("b1", random_tensor(rng, {5}, -0.5, 0.5));
    Parameter& w2 = store.create("w2", random_tensor(rng, {4, 5}, -1, 1));
    Parameter& b2 = store.create("b2", random_tensor(rng, {4}, -0.5, 0.5));

    Tensor x = random_tensor(rng, {3, 4}, -2, 2);
    Tensor target = random_tensor(rng, {2, 4}, -2, 2);
    std::vector<int> labels{1, 3, 0};

    auto loss = [&](bool grads) {
      Graph g;
      NodeId h = g.relu(g.dense(g.constant(x), g.param(w1), g.param(b1)));
      NodeId out = g.dense(h, g.param(w2), g.param(b2));
      NodeId picked = g.gather_rows(out, {0, 2});
      NodeId both = g.concat_cols(
          {g.slice_cols(picked, 0, 2), g.slice_cols(picked, 2, 2)});
      NodeId l1 = g.smooth_l1(both, target);
      NodeId ce = g.softmax_cross_entropy(out, labels);
      NodeId total = g.linear_combination({l1, ce}, {1.0, 0.7});
      if (grads) g.backward(total);
      return g.scalar(total);
    };

    // central differences are only valid away from the relu and smooth-l1
    // kinks; skip the rare seed that lands within the perturbation radius
    {
      Graph g;
      NodeId pre = g.dense(g.constant(x), g.param(w1), g.param(b1));
      NodeId out = g.dense(g.relu(pre), g.param(w2), g.param(b2));
      NodeId picked = g.gather_rows(out, {0, 2});
      double margin = 1e9;
      for (Eigen::Index i = 0; i < g.value(pre).size(); ++i)
        margin = std::min(margin, std::abs(g.value(pre)[i]));
      for (Eigen::Index i = 0; i < g.value(picked).size(); ++i) {
        const double d = std::abs(g.value(picked)[i] - target[i]);
        margin = std::min(margin, std::abs(d - 1.0));
      }
      if (margin < 1e-4) continue;
    }

    const GradientCheckReport report = gradient_check(store, loss, 1e-5);
    CHECK(report.checked == store.total_size());
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradient_check: exact on a linear model with quadratic loss") {
  ParameterStore store;
  Parameter& w = store.create("w", Tensor::row({0.5, -1.5}));
  const Tensor x = Tensor::row({2.0, 3.0});
  auto loss = [&](bool grads) {
    // 0.5 * (w . x)^2 via smooth-l1 stays quadratic only near zero, so use
    // the analytic quadratic directly on a tape: (w.x) as dense then squared
    // through smooth_l1 with |d| < 1
    Graph g;
    NodeId y = g.dense(g.constant(Tensor::of({1, 2}, x.flat())),
                       g.param(w), g.constant(Tensor::zeros({1})));
    NodeId l = g.smooth_l1(y, Tensor::row({4.0}));  // |w.x - 4| = 0.5 < 1
    if (grads) g.backward(l);
    return g.scalar(l);
  };
  const GradientCheckReport report = gradient_check(store, loss, 1e-5);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("gradient_check: two-layer head with smooth l1") {
  Rng rng(77);
  ParameterStore store;
  Parameter& w1 = store.create("w1", random_tensor(rng, {6, 3}, -1, 1));
  Parameter& b1 = store.create("b1", random_tensor(rng, {6}, -0.3, 0.3));
  Parameter& w2 = store.create("w2", random_tensor(rng, {2, 6}, -1, 1));
  Parameter& b2 = store.create("b2", random_tensor(rng, {2}, -0.3, 0.3));
  const Tensor x = random_tensor(rng, {4, 3}, -1.5, 1.5);
  const Tensor target = random_tensor(rng, {4, 2}, -2, 2);
  auto loss = [&](bool grads) {
    Graph g;
    NodeId h = g.relu(g.dense(g.constant(x), g.param(w1), g.param(b1)));
    NodeId l = g.smooth_l1(g.dense(h, g.param(w2), g.param(b2)), target);
    if (grads) g.backward(l);
    return g.scalar(l);
  };
  CHECK(gradient_check(store, loss, 1e-5).max_rel_error < 1e-4);
}

TEST_CASE("gradient_check: zero-parameter model gives an empty report") {
  ParameterStore store;
  auto loss = [&](bool) { return 1.0; };
  const GradientCheckReport report = gradient_check(store, loss, 1e-5);
  CHECK(report.checked == 0);
  CHECK(report.max_rel_error == 0.0);
}

TEST_CASE("gradient_check rejects non-finite losses and bad epsilon") {
  ParameterStore store;
  store.create("w", Tensor::scalar(1.0));
  auto bad = [&](bool) { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(gradient_check(store, bad, 1e-5), std::runtime_error);
  auto fine = [&](bool) { return 0.0; };
  CHECK_THROWS_AS(gradient_check(store, fine, 0.5), std::invalid_argument);
}

namespace {

// naive 3x3 same-padded convolution; weight row c holds the kernel laid out
// as (dy, dx, cin)
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int p,
                   int cin) {
  const Eigen::Index n = x.dim(0);
  const Eigen::Index cout = w.dim(0);
  Tensor y = Tensor::zeros({n, static_cast<Eigen::Index>(p) * p * cout});
  for (Eigen::Index s = 0; s < n; ++s) {
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < p; ++j) {
        for (Eigen::Index c = 0; c < cout; ++c) {
          double acc = b[c];
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int r = i + dy, q = j + dx;
              if (r < 0 || r >= p || q < 0 || q >= p) continue;
              const int k = (dy + 1) * 3 + (dx + 1);
              for (int ch = 0; ch < cin; ++ch)
                acc += x.at(s, (static_cast<Eigen::Index>(r) * p + q) * cin + ch) *
                       w.at(c, k * cin + ch);
            }
          }
          y.at(s, (static_cast<Eigen::Index>(i) * p + j) * cout + c) = acc;
        }
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("conv3x3 matches a naive convolution and its gradients check out") {
  Rng rng(321);
  const int p = 4, cin = 2, cout = 3;
  ParameterStore store;
  Parameter& w = store.create("w", random_tensor(rng, {cout, 9 * cin}, -1, 1));
  Parameter& b = store.create("b", random_tensor(rng, {cout}, -0.5, 0.5));
  const Tensor x = random_tensor(rng, {2, p * p * cin}, -1, 1);

  Graph g;
  NodeId y = g.conv3x3(g.constant(x), g.param(w), g.param(b), p, cin);
  const Tensor expect = conv_oracle(x, w.value, b.value, p, cin);
  CHECK((g.value(y).flat() - expect.flat()).cwiseAbs().maxCoeff() < 1e-12);

  const Tensor target = random_tensor(rng, {2, p * p * cout}, -1, 1);
  auto loss = [&](bool grads) {
    Graph gg;
    NodeId out = gg.conv3x3(gg.constant(x), gg.param(w), gg.param(b), p, cin);
    NodeId l = gg.smooth_l1(out, target);
    if (grads) gg.backward(l);
    return gg.scalar(l);
  };
  CHECK(gradient_check(store, loss, 1e-5).max_rel_error < 1e-4);
}

TEST_CASE("a training step is bit-deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    Parameter& w = store.create("w", random_tensor(rng, {3, 4}, -1, 1));
    Parameter& b = store.create("b", Tensor::zeros({3}));
    const Tensor x = random_tensor(rng, {5, 4}, -1, 1);
    const Tensor t = random_tensor(rng, {5, 3}, -1, 1);
    for (int step = 0; step < 5; ++step) {
      Graph g;
      NodeId l = g.smooth_l1(g.dense(g.constant(x), g.param(w), g.param(b)), t);
      store.zero_grads();
      g.backward(l);
      sgd_step(store, {1e-2, 0.9});
    }
    return std::make_pair(Eigen::VectorXd(w.value.flat()),
                          Eigen::VectorXd(b.value.flat()));
  };
  const auto a = run(9);
  const auto b = run(9);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
