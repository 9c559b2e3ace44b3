#include "l2p/tape.hpp"

#include <cmath>
#include <cstddef>
#include <utility>

#include "l2p/errors.hpp"
#include "l2p/parallel.hpp"

namespace l2p {

ValueId Tape::push(Tensor value, bool needs_grad, const char* op) {
  if (!value.all_finite())
    throw NumericError(std::string(op) + " produced a non-finite value");
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return ValueId{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(ValueId v) {
  if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
    throw ContractError("invalid value id (wrong tape?)");
  return nodes_[static_cast<std::size_t>(v.idx)];
}

const Tape::Node& Tape::node(ValueId v) const {
  if (v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
    throw ContractError("invalid value id (wrong tape?)");
  return nodes_[static_cast<std::size_t>(v.idx)];
}

const Tensor& Tape::value(ValueId v) const { return node(v).value; }

Tensor& Tape::grad_buffer(ValueId v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::set_back(ValueId v, std::function<void(Tape&)> fn) {
  node(v).back = std::move(fn);
}

ValueId Tape::constant(Tensor t) { return push(std::move(t), false, "constant"); }

ValueId Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return ValueId{it->second};
  ValueId v = push(p.value, true, "param");  // snapshot of the current value
  node(v).bound = &p;
  param_nodes_.emplace(&p, v.idx);
  return v;
}

void Tape::backward(ValueId loss) {
  if (!grad_enabled_) throw ContractError("backward on a forward-only tape");
  if (backward_done_) throw ContractError("backward already run on this tape");
  backward_done_ = true;
  Node& ln = node(loss);
  if (!ln.value.is_scalar())
    throw ContractError("backward needs a scalar loss, got " + ln.value.shape_str());
  if (!ln.needs_grad) return;  // no parameter reaches the loss
  grad_buffer(loss).fill(1.0);
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.back || n.grad.empty()) continue;  // leaf, or not on a path to loss
    n.back(*this);
  }
  for (auto& [ptr, idx] : param_nodes_) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (n.grad.empty()) continue;
    Parameter& p = *n.bound;
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
    if (!p.grad.all_finite())
      throw NumericError("non-finite gradient for parameter " + p.name);
  }
}

// ---- ops ------------------------------------------------------------------

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.cols() != B.rows())
    throw ShapeError("matmul: " + A.shape_str() + " x " + B.shape_str());
  bool ng = wants_grad(a) || wants_grad(b);
  ValueId out = push(matmul_nn(A, B), ng, "matmul");
  if (node(out).needs_grad) {
    set_back(out, [a, b, out](Tape& t) {
      const Tensor& g = t.node(out).grad;
      if (t.wants_grad(a)) acc_matmul_nt(t.grad_buffer(a), g, t.node(b).value);
      if (t.wants_grad(b)) acc_matmul_tn(t.grad_buffer(b), t.node(a).value, g);
    });
  }
  return out;
}

ValueId Tape::sparse_aggregate(const CsrMatrix& adj, ValueId h) {
  const Tensor& H = value(h);
  if (adj.cols != H.rows())
    throw ShapeError("sparse_aggregate: adjacency cols " + std::to_string(adj.cols) +
                     " vs features " + H.shape_str());
  ValueId out = push(spmm(adj, H), wants_grad(h), "sparse_aggregate");
  if (node(out).needs_grad) {
    const CsrMatrix* ap = &adj;
    set_back(out, [ap, h, out](Tape& t) {
      const Tensor& g = t.node(out).grad;
      Tensor& dh = t.grad_buffer(h);
      if (ap->symmetric && ap->rows == ap->cols)
        acc_spmm(dh, *ap, g);
      else
        acc_spmm_transposed(dh, *ap, g);
    });
  }
  return out;
}

ValueId Tape::sparse_linear(const CsrMatrix& x, ValueId w, double dropout_rate,
                            bool train, Rng* rng) {
  const Tensor& W = value(w);
  if (x.cols != W.rows())
    throw ShapeError("sparse_linear: input cols " + std::to_string(x.cols) + " vs weight " +
                     W.shape_str());
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("sparse_linear: dropout rate must be in [0, 1)");
  std::vector<double> scale;  // empty means all-ones
  if (train && dropout_rate > 0.0) {
    if (rng == nullptr) throw ContractError("sparse_linear: dropout needs an rng");
    const double keep_scale = 1.0 / (1.0 - dropout_rate);
    scale.resize(static_cast<std::size_t>(x.nnz()));
    for (double& s : scale) s = rng->bernoulli(1.0 - dropout_rate) ? keep_scale : 0.0;
  }
  ValueId out = push(spmm_scaled(x, scale, W), wants_grad(w), "sparse_linear");
  if (node(out).needs_grad) {
    const CsrMatrix* xp = &x;
    set_back(out, [xp, w, out, scale = std::move(scale)](Tape& t) {
      acc_spmm_scaled_transposed(t.grad_buffer(w), *xp, scale, t.node(out).grad);
    });
  }
  return out;
}

ValueId Tape::binary_broadcast(ValueId a, ValueId b, double sign, const char* opname) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const bool same = A.same_shape(B);
  const bool bcast = !same && B.rows() == 1 && B.cols() == A.cols();
  if (!same && !bcast)
    throw ShapeError(std::string(opname) + ": " + A.shape_str() + " vs " + B.shape_str());
  Tensor out = A;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * B[i];
  } else {
    for (int r = 0; r < out.rows(); ++r)
      for (int c = 0; c < out.cols(); ++c) out.at(r, c) += sign * B.at(0, c);
  }
  bool ng = wants_grad(a) || wants_grad(b);
  ValueId o = push(std::move(out), ng, opname);
  if (node(o).needs_grad) {
    set_back(o, [a, b, o, sign, same](Tape& t) {
      const Tensor& g = t.node(o).grad;
      if (t.wants_grad(a)) {
        Tensor& da = t.grad_buffer(a);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
      }
      if (t.wants_grad(b)) {
        Tensor& db = t.grad_buffer(b);
        if (same) {
          for (std::size_t i = 0; i < db.size(); ++i) db[i] += sign * g[i];
        } else {
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) db.at(0, c) += sign * g.at(r, c);
        }
      }
    });
  }
  return o;
}

ValueId Tape::add(ValueId a, ValueId b) { return binary_broadcast(a, b, 1.0, "add"); }
ValueId Tape::sub(ValueId a, ValueId b) { return binary_broadcast(a, b, -1.0, "sub"); }

ValueId Tape::scale(ValueId a, double c) {
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  ValueId o = push(std::move(out), wants_grad(a), "scale");
  if (node(o).needs_grad) {
    set_back(o, [a, o, c](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += c * g[i];
    });
  }
  return o;
}

ValueId Tape::add_const(ValueId a, double c) {
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  ValueId o = push(std::move(out), wants_grad(a), "add_const");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
    });
  }
  return o;
}

ValueId Tape::relu(ValueId a) {
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  ValueId o = push(std::move(out), wants_grad(a), "relu");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      const Tensor& x = t.node(a).value;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i)
        if (x[i] > 0.0) da[i] += g[i];
    });
  }
  return o;
}

ValueId Tape::sigmoid(ValueId a) {
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  ValueId o = push(std::move(out), wants_grad(a), "sigmoid");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      const Tensor& y = t.node(o).value;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }
  return o;
}

ValueId Tape::exp(ValueId a) {
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  ValueId o = push(std::move(out), wants_grad(a), "exp");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      const Tensor& y = t.node(o).value;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * y[i];
    });
  }
  return o;
}

ValueId Tape::log_clamped(ValueId a, double floor) {
  if (!(floor > 0.0)) throw ConfigError("log_clamped: floor must be positive");
  const Tensor& A = value(a);
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(out[i] > floor ? out[i] : floor);
  ValueId o = push(std::move(out), wants_grad(a), "log_clamped");
  if (node(o).needs_grad) {
    set_back(o, [a, o, floor](Tape& t) {
      const Tensor& g = t.node(o).grad;
      const Tensor& x = t.node(a).value;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i)
        da[i] += g[i] / (x[i] > floor ? x[i] : floor);
    });
  }
  return o;
}

ValueId Tape::row_log_softmax(ValueId a) {
  const Tensor& A = value(a);
  if (A.cols() < 1) throw ShapeError("row_log_softmax: empty rows");
  Tensor out(A.rows(), A.cols());
  parallel_rows(A.rows(), [&](int lo, int hi) {
    for (int r = lo; r < hi; ++r) {
      double m = A.at(r, 0);
      for (int c = 1; c < A.cols(); ++c) m = std::max(m, A.at(r, c));
      double s = 0.0;
      for (int c = 0; c < A.cols(); ++c) s += std::exp(A.at(r, c) - m);
      const double lse = m + std::log(s);
      for (int c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) - lse;
    }
  });
  ValueId o = push(std::move(out), wants_grad(a), "row_log_softmax");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      const Tensor& y = t.node(o).value;
      Tensor& da = t.grad_buffer(a);
      parallel_rows(g.rows(), [&](int lo, int hi) {
        for (int r = lo; r < hi; ++r) {
          double gs = 0.0;
          for (int c = 0; c < g.cols(); ++c) gs += g.at(r, c);
          for (int c = 0; c < g.cols(); ++c)
            da.at(r, c) += g.at(r, c) - std::exp(y.at(r, c)) * gs;
        }
      });
    });
  }
  return o;
}

ValueId Tape::dropout(ValueId a, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return a;  // identity, and no rng draws
  const Tensor& A = value(a);
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor s(A.rows(), A.cols());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = rng.bernoulli(1.0 - rate) ? keep_scale : 0.0;
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s[i];
  ValueId o = push(std::move(out), wants_grad(a), "dropout");
  if (node(o).needs_grad) {
    set_back(o, [a, o, s = std::move(s)](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * s[i];
    });
  }
  return o;
}

ValueId Tape::gather_rows(ValueId a, std::vector<int> rows) {
  const Tensor& A = value(a);
  Tensor out(static_cast<int>(rows.size()), A.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= A.rows())
      throw ContractError("gather_rows: index " + std::to_string(r) + " out of range");
    for (int c = 0; c < A.cols(); ++c) out.at(static_cast<int>(i), c) = A.at(r, c);
  }
  ValueId o = push(std::move(out), wants_grad(a), "gather_rows");
  if (node(o).needs_grad) {
    set_back(o, [a, o, rows = std::move(rows)](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < g.cols(); ++c) da.at(rows[i], c) += g.at(static_cast<int>(i), c);
    });
  }
  return o;
}

ValueId Tape::concat_cols(std::span<const ValueId> cols) {
  if (cols.empty()) throw ContractError("concat_cols: no inputs");
  const int n = value(cols[0]).rows();
  const int k = static_cast<int>(cols.size());
  Tensor out(n, k);
  bool ng = false;
  for (int j = 0; j < k; ++j) {
    const Tensor& cj = value(cols[j]);
    if (cj.cols() != 1 || cj.rows() != n)
      throw ShapeError("concat_cols: input " + std::to_string(j) + " is " + cj.shape_str());
    for (int r = 0; r < n; ++r) out.at(r, j) = cj.at(r, 0);
    ng = ng || wants_grad(cols[j]);
  }
  ValueId o = push(std::move(out), ng, "concat_cols");
  if (node(o).needs_grad) {
    std::vector<ValueId> ids(cols.begin(), cols.end());
    set_back(o, [ids = std::move(ids), o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      for (int j = 0; j < static_cast<int>(ids.size()); ++j) {
        if (!t.wants_grad(ids[j])) continue;
        Tensor& dj = t.grad_buffer(ids[j]);
        for (int r = 0; r < g.rows(); ++r) dj.at(r, 0) += g.at(r, j);
      }
    });
  }
  return o;
}

ValueId Tape::column(ValueId a, int k) {
  const Tensor& A = value(a);
  if (k < 0 || k >= A.cols())
    throw ShapeError("column: index " + std::to_string(k) + " out of " + A.shape_str());
  Tensor out(A.rows(), 1);
  for (int r = 0; r < A.rows(); ++r) out.at(r, 0) = A.at(r, k);
  ValueId o = push(std::move(out), wants_grad(a), "column");
  if (node(o).needs_grad) {
    set_back(o, [a, o, k](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (int r = 0; r < g.rows(); ++r) da.at(r, k) += g.at(r, 0);
    });
  }
  return o;
}

ValueId Tape::pointwise_mul(ValueId a, ValueId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B))
    throw ShapeError("pointwise_mul: " + A.shape_str() + " vs " + B.shape_str());
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  bool ng = wants_grad(a) || wants_grad(b);
  ValueId o = push(std::move(out), ng, "pointwise_mul");
  if (node(o).needs_grad) {
    set_back(o, [a, b, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      if (t.wants_grad(a)) {
        const Tensor& bv = t.node(b).value;
        Tensor& da = t.grad_buffer(a);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
      }
      if (t.wants_grad(b)) {
        const Tensor& av = t.node(a).value;
        Tensor& db = t.grad_buffer(b);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
      }
    });
  }
  return o;
}

ValueId Tape::scale_rows(ValueId m, ValueId s) {
  const Tensor& M = value(m);
  const Tensor& S = value(s);
  if (S.cols() != 1 || S.rows() != M.rows())
    throw ShapeError("scale_rows: " + M.shape_str() + " vs scales " + S.shape_str());
  Tensor out = M;
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) *= S.at(r, 0);
  bool ng = wants_grad(m) || wants_grad(s);
  ValueId o = push(std::move(out), ng, "scale_rows");
  if (node(o).needs_grad) {
    set_back(o, [m, s, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      if (t.wants_grad(m)) {
        const Tensor& sv = t.node(s).value;
        Tensor& dm = t.grad_buffer(m);
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < g.cols(); ++c) dm.at(r, c) += g.at(r, c) * sv.at(r, 0);
      }
      if (t.wants_grad(s)) {
        const Tensor& mv = t.node(m).value;
        Tensor& ds = t.grad_buffer(s);
        for (int r = 0; r < g.rows(); ++r) {
          double acc = 0.0;
          for (int c = 0; c < g.cols(); ++c) acc += g.at(r, c) * mv.at(r, c);
          ds.at(r, 0) += acc;
        }
      }
    });
  }
  return o;
}

ValueId Tape::row_sum(ValueId a) {
  const Tensor& A = value(a);
  Tensor out(A.rows(), 1);
  for (int r = 0; r < A.rows(); ++r) {
    double acc = 0.0;
    for (int c = 0; c < A.cols(); ++c) acc += A.at(r, c);
    out.at(r, 0) = acc;
  }
  ValueId o = push(std::move(out), wants_grad(a), "row_sum");
  if (node(o).needs_grad) {
    set_back(o, [a, o](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& da = t.grad_buffer(a);
      for (int r = 0; r < da.rows(); ++r)
        for (int c = 0; c < da.cols(); ++c) da.at(r, c) += g.at(r, 0);
    });
  }
  return o;
}

ValueId Tape::reduce_mean(ValueId a) {
  const Tensor& A = value(a);
  if (A.size() == 0) throw ContractError("reduce_mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) acc += A[i];
  const double inv = 1.0 / static_cast<double>(A.size());
  ValueId o = push(Tensor(1, 1, acc * inv), wants_grad(a), "reduce_mean");
  if (node(o).needs_grad) {
    set_back(o, [a, o, inv](Tape& t) {
      const double g = t.node(o).grad.scalar();
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g * inv;
    });
  }
  return o;
}

ValueId Tape::masked_mean(ValueId a, const std::vector<bool>& mask) {
  const Tensor& A = value(a);
  if (A.cols() != 1) throw ShapeError("masked_mean: expected a column, got " + A.shape_str());
  if (static_cast<int>(mask.size()) != A.rows())
    throw ShapeError("masked_mean: mask size " + std::to_string(mask.size()) + " vs " +
                     A.shape_str());
  int m = 0;
  double acc = 0.0;
  for (int r = 0; r < A.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    acc += A.at(r, 0);
    ++m;
  }
  if (m == 0) throw ContractError("masked_mean: mask selects no rows");
  const double inv = 1.0 / m;
  ValueId o = push(Tensor(1, 1, acc * inv), wants_grad(a), "masked_mean");
  if (node(o).needs_grad) {
    set_back(o, [a, o, inv, mask](Tape& t) {
      const double g = t.node(o).grad.scalar();
      Tensor& da = t.grad_buffer(a);
      for (int r = 0; r < da.rows(); ++r)
        if (mask[static_cast<std::size_t>(r)]) da.at(r, 0) += g * inv;
    });
  }
  return o;
}

ValueId Tape::select_class(ValueId logp, const std::vector<int>& labels) {
  const Tensor& L = value(logp);
  if (static_cast<int>(labels.size()) != L.rows())
    throw ShapeError("select_class: " + std::to_string(labels.size()) + " labels vs " +
                     L.shape_str());
  Tensor out(L.rows(), 1);
  for (int r = 0; r < L.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0) continue;  // unlabeled rows contribute 0
    if (y >= L.cols())
      throw ContractError("select_class: label " + std::to_string(y) + " out of range");
    out.at(r, 0) = L.at(r, y);
  }
  ValueId o = push(std::move(out), wants_grad(logp), "select_class");
  if (node(o).needs_grad) {
    set_back(o, [logp, o, labels](Tape& t) {
      const Tensor& g = t.node(o).grad;
      Tensor& dl = t.grad_buffer(logp);
      for (int r = 0; r < g.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y >= 0) dl.at(r, y) += g.at(r, 0);
      }
    });
  }
  return o;
}

ValueId Tape::nll_loss(ValueId logp, const std::vector<int>& labels,
                       const std::vector<bool>& mask) {
  const Tensor& L = value(logp);
  if (static_cast<int>(labels.size()) != L.rows() ||
      static_cast<int>(mask.size()) != L.rows())
    throw ShapeError("nll_loss: labels/mask length vs " + L.shape_str());
  int m = 0;
  double acc = 0.0;
  for (int r = 0; r < L.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0) throw ContractError("nll_loss: masked row " + std::to_string(r) + " unlabeled");
    if (y >= L.cols())
      throw ContractError("nll_loss: label " + std::to_string(y) + " out of range");
    acc -= L.at(r, y);
    ++m;
  }
  if (m == 0) throw ContractError("nll_loss: mask selects no rows");
  const double inv = 1.0 / m;
  ValueId o = push(Tensor(1, 1, acc * inv), wants_grad(logp), "nll_loss");
  if (node(o).needs_grad) {
    set_back(o, [logp, o, inv, labels, mask](Tape& t) {
      const double g = t.node(o).grad.scalar();
      Tensor& dl = t.grad_buffer(logp);
      for (int r = 0; r < dl.rows(); ++r)
        if (mask[static_cast<std::size_t>(r)])
          dl.at(r, labels[static_cast<std::size_t>(r)]) -= g * inv;
    });
  }
  return o;
}

// ---- finite-difference checker ---------------------------------------------

double grad_check(const std::function<ValueId(Tape&)>& f,
                  std::span<Parameter* const> params, double eps) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw ConfigError("grad_check: eps must be in (0, 1e-2]");
  auto eval = [&f]() {
    Tape t(false);
    ValueId l = f(t);
    const Tensor& v = t.value(l);
    if (!v.is_scalar()) throw ContractError("grad_check: f must return a scalar");
    return v.scalar();
  };
  const double l0 = eval();
  if (eval() != l0)
    throw ContractError("grad_check: f is not deterministic across tapes");

  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(f(t));
  }

  double worst = 0.0;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double lp = eval();
      p->value[i] = keep - eps;
      const double lm = eval();
      p->value[i] = keep;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::abs(analytic) + std::abs(numeric) + 1e-12;
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace l2p
