#include "l2p/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "l2p/backbone.hpp"
#include "l2p/errors.hpp"
#include "l2p/head.hpp"
#include "l2p/rng.hpp"
#include "l2p/sparse.hpp"
#include "l2p/tape.hpp"
#include "l2p/trainers.hpp"

namespace l2p {

namespace {

Tensor rand_normal(int rows, int cols, Rng& rng, double scale = 1.0) {
  Tensor t(rows, cols, 0.0);
  for (size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

/// Normal draws pushed at least 0.05 away from zero, so relu stays off its
/// kink for the whole finite-difference stencil.
Tensor rand_off_kink(int rows, int cols, Rng& rng) {
  Tensor t = rand_normal(rows, cols, rng);
  for (size_t i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < 0.05) t[i] = t[i] < 0.0 ? t[i] - 0.1 : t[i] + 0.1;
  }
  return t;
}

Tensor rand_positive(int rows, int cols, Rng& rng) {
  Tensor t(rows, cols, 0.0);
  for (size_t i = 0; i < t.size(); ++i) t[i] = 0.5 + rng.uniform01();
  return t;
}

CsrMatrix random_sparse(int rows, int cols, Rng& rng) {
  std::vector<std::pair<std::pair<int, int>, double>> trips;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (rng.uniform01() < 0.6) trips.push_back({{r, c}, rng.normal()});
  if (trips.empty()) trips.push_back({{0, 0}, 1.0});
  return CsrMatrix::from_triplets(rows, cols, trips);
}

struct Suite {
  double max_error = 0.0;
  int checks = 0;

  void check(const std::function<ValueId(Tape&)>& f,
             const std::vector<Parameter*>& params) {
    max_error = std::max(max_error, grad_check(f, params, 1e-5));
    ++checks;
  }
};

/// Reduce any tensor-valued op to a scalar with a fixed random cotangent.
ValueId against(Tape& t, ValueId out, const Tensor& cotangent) {
  return t.reduce_mean(t.pointwise_mul(out, t.constant(cotangent)));
}

void check_tape_ops(Suite& s, Rng& rng) {
  Parameter a("a", rand_off_kink(3, 4, rng));
  Parameter a2("a2", rand_normal(3, 4, rng));
  Parameter b("b", rand_normal(4, 2, rng));
  Parameter row("row", rand_normal(1, 4, rng));
  Parameter col("col", rand_normal(3, 1, rng));
  Parameter col2("col2", rand_normal(3, 1, rng));
  Parameter pos("pos", rand_positive(3, 4, rng));
  Parameter h("h", rand_normal(4, 3, rng));

  const Tensor c34 = rand_normal(3, 4, rng);
  const Tensor c32 = rand_normal(3, 2, rng);
  const Tensor c44 = rand_normal(4, 4, rng);
  const Tensor c43 = rand_normal(4, 3, rng);
  const Tensor c31 = rand_normal(3, 1, rng);
  const Tensor c33 = rand_normal(3, 3, rng);
  const CsrMatrix adj = random_sparse(4, 4, rng);
  const CsrMatrix x = random_sparse(3, 4, rng);
  const std::vector<int> labels = {1, 0, 3};
  const std::vector<bool> mask = {true, false, true};
  Rng idle(7);

  s.check([&](Tape& t) { return against(t, t.matmul(t.param(a), t.param(b)), c32); },
          {&a, &b});
  s.check([&](Tape& t) { return against(t, t.add(t.param(a), t.param(a2)), c34); },
          {&a, &a2});
  s.check([&](Tape& t) { return against(t, t.add(t.param(a), t.param(row)), c34); },
          {&a, &row});
  s.check([&](Tape& t) { return against(t, t.sub(t.param(a), t.param(a2)), c34); },
          {&a, &a2});
  s.check([&](Tape& t) { return against(t, t.scale(t.param(a), 1.7), c34); }, {&a});
  s.check([&](Tape& t) { return against(t, t.add_const(t.param(a), 0.3), c34); },
          {&a});
  s.check([&](Tape& t) { return against(t, t.relu(t.param(a)), c34); }, {&a});
  s.check([&](Tape& t) { return against(t, t.sigmoid(t.param(a2)), c34); }, {&a2});
  s.check(
      [&](Tape& t) { return against(t, t.exp(t.scale(t.param(a2), 0.5)), c34); },
      {&a2});
  s.check([&](Tape& t) { return against(t, t.log_clamped(t.param(pos)), c34); },
          {&pos});
  s.check([&](Tape& t) { return against(t, t.row_log_softmax(t.param(a2)), c34); },
          {&a2});
  s.check(
      [&](Tape& t) { return against(t, t.dropout(t.param(a2), 0.3, false, idle), c34); },
      {&a2});
  s.check(
      [&](Tape& t) {
        return against(t, t.gather_rows(t.param(a2), {2, 0, 1, 2}), c44);
      },
      {&a2});
  s.check(
      [&](Tape& t) {
        std::vector<ValueId> cols = {t.param(col), t.param(col2)};
        return against(t, t.concat_cols(cols), c32);
      },
      {&col, &col2});
  s.check([&](Tape& t) { return against(t, t.column(t.param(a2), 1), c31); },
          {&a2});
  s.check(
      [&](Tape& t) {
        return against(t, t.pointwise_mul(t.param(a), t.param(a2)), c34);
      },
      {&a, &a2});
  s.check(
      [&](Tape& t) {
        return against(t, t.scale_rows(t.param(a2), t.param(col)), c34);
      },
      {&a2, &col});
  s.check([&](Tape& t) { return against(t, t.row_sum(t.param(a2)), c31); }, {&a2});
  s.check([&](Tape& t) { return t.reduce_mean(t.param(a2)); }, {&a2});
  s.check([&](Tape& t) { return t.masked_mean(t.param(col), mask); }, {&col});
  s.check(
      [&](Tape& t) {
        ValueId logp = t.row_log_softmax(t.param(a2));
        return against(t, t.select_class(logp, labels), c31);
      },
      {&a2});
  s.check(
      [&](Tape& t) {
        ValueId logp = t.row_log_softmax(t.matmul(t.param(a), t.param(b)));
        std::vector<int> small_labels = {1, 0, 1};
        return t.nll_loss(logp, small_labels, mask);
      },
      {&a, &b});
  s.check(
      [&](Tape& t) { return against(t, t.sparse_aggregate(adj, t.param(h)), c43); },
      {&h});
  s.check([&](Tape& t) { return against(t, t.sparse_linear(x, t.param(h)), c33); },
          {&h});
}

/// Full model loss (backbone + head + relaxed sample + breakdown) on a tiny
/// random graph; checks both head kinds end to end.
void check_heads(Suite& s, Rng& rng, uint64_t salt) {
  const int n = 5, dim = 4, classes = 2, depth = 2;
  Graph g;
  g.num_nodes = n;
  g.features = rand_normal(n, dim, rng);
  g.labels = {0, 1, 0, 1, 1};
  g.edges = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 4}};
  g.train_mask.assign(n, true);
  g.val_mask.assign(n, false);
  g.test_mask.assign(n, false);
  const CsrMatrix x = CsrMatrix::from_dense(g.features);
  const CsrMatrix adj = normalize_adjacency(g);

  BackboneConfig bcfg;
  bcfg.kind = "appnp";
  bcfg.input_dim = dim;
  bcfg.hidden = 5;
  bcfg.repr_dim = 4;
  bcfg.num_classes = classes;
  bcfg.depth = depth;
  bcfg.alpha = 0.2;
  bcfg.dropout = 0.0;

  Rng noise_rng(salt * 2654435761u + 17u);
  const Tensor noise = draw_gumbel_noise(n, depth, noise_rng);

  for (const char* kind : {"l2s", "l2q"}) {
    Rng init = rng.child(std::hash<std::string>{}(kind) & 0xffff);
    BackboneParams backbone(bcfg, init);
    HeadParams head(kind, depth, bcfg.repr_dim, true, init);
    TrainContext ctx;
    ctx.graph = &g;
    ctx.features = &x;
    ctx.adj = &adj;
    ctx.backbone = &backbone;
    ctx.head = &head;
    ctx.prior = uniform_prior(depth, 1);
    ctx.gamma = 0.7;

    std::vector<Parameter*> params = backbone.all();
    for (Parameter* p : head.all()) params.push_back(p);

    s.check(
        [&](Tape& t) {
          LossSpec spec;
          spec.mask = &g.train_mask;
          spec.style = ElboStyle::sampled;
          spec.gumbel_noise = &noise;
          spec.train_mode = false;
          return build_loss(t, ctx, spec).total;
        },
        params);
    s.check(
        [&](Tape& t) {
          LossSpec spec;
          spec.mask = &g.train_mask;
          spec.style = ElboStyle::expected;
          spec.train_mode = false;
          return build_loss(t, ctx, spec).total;
        },
        params);
  }
}

}  // namespace

GradSuiteResult run_grad_suite(int num_seeds) {
  if (num_seeds < 1) throw ConfigError("gradient suite needs at least one seed");
  Suite s;
  for (int seed = 1; seed <= num_seeds; ++seed) {
    Rng rng(static_cast<uint64_t>(seed) * 1000003u);
    check_tape_ops(s, rng);
    check_heads(s, rng, static_cast<uint64_t>(seed));
  }
  return {s.max_error, s.checks};
}

}  // namespace l2p
