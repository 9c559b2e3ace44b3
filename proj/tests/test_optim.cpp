#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "l2p/errors.hpp"
#include "l2p/optim.hpp"

using l2p::AdamConfig;
using l2p::AdamState;
using l2p::Optimizer;
using l2p::Parameter;
using l2p::Tensor;

TEST_CASE("sgd update rule arithmetic") {
  Parameter p("p", Tensor(1, 1, 1.0));
  p.grad[0] = 0.5;
  l2p::sgd_step(p, 0.1);
  CHECK(p.value[0] == doctest::Approx(0.95).epsilon(1e-15));

  Parameter q("q", Tensor(1, 1, 1.0));
  q.grad[0] = 0.0;
  l2p::sgd_step(q, 0.1, 5e-4);
  CHECK(q.value[0] == doctest::Approx(0.99995).epsilon(1e-15));

  CHECK_THROWS_AS(l2p::sgd_step(p, 0.0), l2p::ConfigError);
  CHECK_THROWS_AS(l2p::sgd_step(p, -1.0), l2p::ConfigError);
  CHECK_THROWS_AS(l2p::sgd_step(p, 0.1, -1.0), l2p::ConfigError);
}

TEST_CASE("adam first step has magnitude close to lr for any gradient scale") {
  for (double g : {0.01, 0.5, 40.0}) {
    Parameter p("p", Tensor(1, 1, 3.0));
    p.grad[0] = g;
    AdamState st;
    AdamConfig cfg;
    cfg.lr = 0.05;
    l2p::adam_step(p, st, cfg);
    // mhat = g and vhat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
    CHECK(std::abs(3.0 - p.value[0]) == doctest::Approx(0.05).epsilon(1e-5));
    CHECK(p.value[0] < 3.0);
    CHECK(st.step == 1);
  }
}

TEST_CASE("adam converges on a quadratic") {
  Parameter p("p", Tensor(1, 1, 1.0));
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.05;
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    p.grad[0] = 2.0 * p.value[0];  // d/dx of x^2
    l2p::adam_step(p, st, cfg);
  }
  CHECK(std::abs(p.value[0]) < 0.05);
}

TEST_CASE("adam rejects bad hyperparameters") {
  Parameter p("p", Tensor(1, 1, 0.0));
  AdamState st;
  AdamConfig cfg;
  cfg.lr = -1.0;
  CHECK_THROWS_AS(l2p::adam_step(p, st, cfg), l2p::ConfigError);
  cfg.lr = 0.1;
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(l2p::adam_step(p, st, cfg), l2p::ConfigError);
  cfg.beta1 = 0.9;
  cfg.eps = 0.0;
  CHECK_THROWS_AS(l2p::adam_step(p, st, cfg), l2p::ConfigError);
}

TEST_CASE("optimizer wrapper applies the chosen rule to every parameter") {
  Parameter a("a", Tensor(1, 1, 1.0));
  Parameter b("b", Tensor(1, 2, 2.0));
  Optimizer opt(Optimizer::Kind::sgd, {&a, &b}, 0.5);
  a.grad[0] = 1.0;
  b.grad[0] = 2.0;
  b.grad[1] = -2.0;
  opt.step();
  CHECK(a.value[0] == doctest::Approx(0.5));
  CHECK(b.value[0] == doctest::Approx(1.0));
  CHECK(b.value[1] == doctest::Approx(3.0));

  opt.zero_grad();
  CHECK(a.grad[0] == 0.0);
  CHECK(b.grad[0] == 0.0);

  CHECK(Optimizer::parse_kind("adam") == Optimizer::Kind::adam);
  CHECK(Optimizer::parse_kind("sgd") == Optimizer::Kind::sgd);
  CHECK_THROWS_AS(Optimizer::parse_kind("momentum"), l2p::ConfigError);
  CHECK_THROWS_AS(Optimizer(Optimizer::Kind::sgd, {&a}, 0.0), l2p::ConfigError);
  CHECK_THROWS_AS(opt.set_lr(-0.1), l2p::ConfigError);
}
