#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cclis {

/// Dense row-major tensor of 64-bit floats, rank 0..2.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (numel_of(shape) != values.size()) {
      throw std::invalid_argument("Tensor: shape/value size mismatch");
    }
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<std::size_t> s, double v) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 1); }
  std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const {
    if (!is_scalar()) throw std::invalid_argument("Tensor: not a scalar");
    return values[0];
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ")";
    return os.str();
  }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Stack two matrices (or an empty tensor and a matrix) row-wise.
inline Tensor vstack(const Tensor& a, const Tensor& b) {
  if (a.numel() == 0) return b;
  if (b.numel() == 0) return a;
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("vstack: column mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor out = Tensor::zeros({a.rows() + b.rows(), a.cols()});
  std::copy(a.values.begin(), a.values.end(), out.values.begin());
  std::copy(b.values.begin(), b.values.end(), out.values.begin() + a.numel());
  return out;
}

/// Reverse-mode differentiation tape. Nodes are appended in topological
/// order; backward() walks them once in reverse and is single-shot.
class Tape {
 public:
  using NodeId = std::size_t;

  NodeId leaf(Tensor value) {
    return push(std::move(value), {}, nullptr);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }

  NodeId add(NodeId a, NodeId b) {
    require_same_shape("add", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    check_finite(out, "add");
    return push(std::move(out), {a, b}, [](const Tensor& up, Grads& g, const Ctx& c) {
      g.accumulate(c.parents[0], up);
      g.accumulate(c.parents[1], up);
    });
  }

  NodeId sub(NodeId a, NodeId b) {
    require_same_shape("sub", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    check_finite(out, "sub");
    return push(std::move(out), {a, b}, [](const Tensor& up, Grads& g, const Ctx& c) {
      g.accumulate(c.parents[0], up);
      Tensor neg = up;
      for (auto& v : neg.values) v = -v;
      g.accumulate(c.parents[1], neg);
    });
  }

  /// Elementwise (Hadamard) product.
  NodeId mul(NodeId a, NodeId b) {
    require_same_shape("mul", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    check_finite(out, "mul");
    return push(std::move(out), {a, b}, [](const Tensor& up, Grads& g, const Ctx& c) {
      Tensor da = up, db = up;
      const Tensor& va = c.tape->value(c.parents[0]);
      const Tensor& vb2 = c.tape->value(c.parents[1]);
      for (std::size_t i = 0; i < up.numel(); ++i) {
        da[i] *= vb2[i];
        db[i] *= va[i];
      }
      g.accumulate(c.parents[0], da);
      g.accumulate(c.parents[1], db);
    });
  }

  NodeId scalar_mul(double c, NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.values) v *= c;
    check_finite(out, "scalar_mul");
    return push(std::move(out), {a}, [c](const Tensor& up, Grads& g, const Ctx& ctx) {
      Tensor da = up;
      for (auto& v : da.values) v *= c;
      g.accumulate(ctx.parents[0], da);
    });
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows()) {
      throw std::invalid_argument("matmul: shape mismatch " + va.shape_str() + " vs " +
                                  vb.shape_str());
    }
    const std::size_t m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = va.at(i, p);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * vb.at(p, j);
      }
    check_finite(out, "matmul");
    return push(std::move(out), {a, b}, [m, k, n](const Tensor& up, Grads& g, const Ctx& c) {
      const Tensor& va2 = c.tape->value(c.parents[0]);
      const Tensor& vb2 = c.tape->value(c.parents[1]);
      Tensor da = Tensor::zeros({m, k});
      Tensor db = Tensor::zeros({k, n});
      // dA = up * B^T, dB = A^T * up
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double u = up.at(i, j);
          if (u == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            da.at(i, p) += u * vb2.at(p, j);
            db.at(p, j) += va2.at(i, p) * u;
          }
        }
      g.accumulate(c.parents[0], da);
      g.accumulate(c.parents[1], db);
    });
  }

  NodeId transpose(NodeId a) {
    const Tensor& va = value(a);
    if (va.rank() != 2) throw std::invalid_argument("transpose: needs rank-2 input");
    const std::size_t m = va.rows(), n = va.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return push(std::move(out), {a}, [m, n](const Tensor& up, Grads& g, const Ctx& c) {
      Tensor da = Tensor::zeros({m, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da.at(i, j) = up.at(j, i);
      g.accumulate(c.parents[0], da);
    });
  }

  /// out[r,:] = a[r,:] + v
  NodeId add_rowvec(NodeId a, NodeId v) {
    const Tensor& va = value(a);
    const Tensor& vv = value(v);
    if (va.rank() != 2 || vv.rank() != 1 || va.cols() != vv.numel()) {
      throw std::invalid_argument("add_rowvec: shape mismatch " + va.shape_str() + " vs " +
                                  vv.shape_str());
    }
    Tensor out = va;
    for (std::size_t r = 0; r < va.rows(); ++r)
      for (std::size_t c = 0; c < va.cols(); ++c) out.at(r, c) += vv[c];
    return push(std::move(out), {a, v}, [](const Tensor& up, Grads& g, const Ctx& c) {
      g.accumulate(c.parents[0], up);
      Tensor dv = Tensor::zeros({up.cols()});
      for (std::size_t r = 0; r < up.rows(); ++r)
        for (std::size_t col = 0; col < up.cols(); ++col) dv[col] += up.at(r, col);
      g.accumulate(c.parents[1], dv);
    });
  }

  NodeId relu(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.values) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), {a}, [](const Tensor& up, Grads& g, const Ctx& c) {
      const Tensor& va = c.tape->value(c.parents[0]);
      Tensor da = up;
      for (std::size_t i = 0; i < up.numel(); ++i)
        if (va[i] <= 0.0) da[i] = 0.0;
      g.accumulate(c.parents[0], da);
    });
  }

  NodeId exp_op(NodeId a) {
    Tensor out = value(a);
    for (auto& v : out.values) v = std::exp(v);
    if (!out.all_finite()) throw std::runtime_error("exp: overflow to non-finite value");
    return push(std::move(out), {a}, [](const Tensor& up, Grads& g, const Ctx& c) {
      const Tensor& vo = c.tape->value(c.self);
      Tensor da = up;
      for (std::size_t i = 0; i < up.numel(); ++i) da[i] *= vo[i];
      g.accumulate(c.parents[0], da);
    });
  }

  NodeId log_op(NodeId a) {
    const Tensor& va = value(a);
    Tensor out = va;
    for (auto& v : out.values) {
      if (v <= 0.0) throw std::runtime_error("log: non-positive input");
      v = std::log(v);
    }
    return push(std::move(out), {a}, [](const Tensor& up, Grads& g, const Ctx& c) {
      const Tensor& va2 = c.tape->value(c.parents[0]);
      Tensor da = up;
      for (std::size_t i = 0; i < up.numel(); ++i) da[i] /= va2[i];
      g.accumulate(c.parents[0], da);
    });
  }

  /// Row-wise L2 normalization. eps == 0 makes a zero row a hard error;
  /// eps > 0 clamps the divisor (training paths use eps = 1e-12).
  NodeId l2_normalize_rows(NodeId a, double eps = 0.0) {
    const Tensor& va = value(a);
    if (va.rank() != 2 && va.rank() != 1)
      throw std::invalid_argument("l2_normalize_rows: needs rank 1 or 2");
    const std::size_t R = va.rank() == 2 ? va.rows() : 1;
    const std::size_t C = va.rank() == 2 ? va.cols() : va.numel();
    Tensor out = va;
    std::vector<double> norms(R);
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += va[r * C + c] * va[r * C + c];
      double n = std::sqrt(s);
      if (n == 0.0 && eps == 0.0)
        throw std::runtime_error("l2_normalize_rows: zero row " + std::to_string(r));
      n = std::max(n, eps);
      norms[r] = n;
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= n;
    }
    return push(std::move(out), {a},
                [R, C, norms](const Tensor& up, Grads& g, const Ctx& c) {
                  const Tensor& y = c.tape->value(c.self);
                  Tensor da = Tensor::zeros(c.tape->value(c.parents[0]).shape);
                  for (std::size_t r = 0; r < R; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < C; ++j) dot += up[r * C + j] * y[r * C + j];
                    for (std::size_t j = 0; j < C; ++j)
                      da[r * C + j] = (up[r * C + j] - y[r * C + j] * dot) / norms[r];
                  }
                  g.accumulate(c.parents[0], da);
                });
  }

  /// Row-wise softmax with max subtraction.
  NodeId softmax_rows(NodeId a) {
    const Tensor& va = value(a);
    if (va.rank() != 2 && va.rank() != 1)
      throw std::invalid_argument("softmax_rows: needs rank 1 or 2");
    const std::size_t R = va.rank() == 2 ? va.rows() : 1;
    const std::size_t C = va.rank() == 2 ? va.cols() : va.numel();
    Tensor out = va;
    for (std::size_t r = 0; r < R; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, va[r * C + c]);
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        out[r * C + c] = std::exp(va[r * C + c] - mx);
        s += out[r * C + c];
      }
      for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= s;
    }
    check_finite(out, "softmax_rows");
    return push(std::move(out), {a}, [R, C](const Tensor& up, Grads& g, const Ctx& c) {
      const Tensor& y = c.tape->value(c.self);
      Tensor da = Tensor::zeros(c.tape->value(c.parents[0]).shape);
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < C; ++j) dot += up[r * C + j] * y[r * C + j];
        for (std::size_t j = 0; j < C; ++j)
          da[r * C + j] = y[r * C + j] * (up[r * C + j] - dot);
      }
      g.accumulate(c.parents[0], da);
    });
  }

  NodeId dot(NodeId a, NodeId b) {
    require_same_shape("dot", a, b);
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    double s = 0.0;
    for (std::size_t i = 0; i < va.numel(); ++i) s += va[i] * vb[i];
    Tensor out = Tensor::scalar(s);
    check_finite(out, "dot");
    return push(std::move(out), {a, b}, [](const Tensor& up, Grads& g, const Ctx& c) {
      const double u = up[0];
      const Tensor& va2 = c.tape->value(c.parents[0]);
      const Tensor& vb2 = c.tape->value(c.parents[1]);
      Tensor da = vb2, db = va2;
      for (auto& v : da.values) v *= u;
      for (auto& v : db.values) v *= u;
      g.accumulate(c.parents[0], da);
      g.accumulate(c.parents[1], db);
    });
  }

  NodeId sum(NodeId a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (double v : va.values) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite(out, "sum");
    return push(std::move(out), {a}, [](const Tensor& up, Grads& g, const Ctx& c) {
      Tensor da = Tensor::full(c.tape->value(c.parents[0]).shape, up[0]);
      g.accumulate(c.parents[0], da);
    });
  }

  NodeId mean(NodeId a) {
    const Tensor& va = value(a);
    if (va.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    double s = 0.0;
    for (double v : va.values) s += v;
    Tensor out = Tensor::scalar(s / static_cast<double>(va.numel()));
    return push(std::move(out), {a}, [](const Tensor& up, Grads& g, const Ctx& c) {
      const auto n = static_cast<double>(c.tape->value(c.parents[0]).numel());
      Tensor da = Tensor::full(c.tape->value(c.parents[0]).shape, up[0] / n);
      g.accumulate(c.parents[0], da);
    });
  }

  /// Scalar entry a[r, c].
  NodeId entry(NodeId a, std::size_t r, std::size_t c) {
    const Tensor& va = value(a);
    if (r >= va.rows() || c >= va.cols())
      throw std::invalid_argument("entry: index out of range");
    Tensor out = Tensor::scalar(va.at(r, c));
    return push(std::move(out), {a}, [r, c](const Tensor& up, Grads& g, const Ctx& ctx) {
      Tensor da = Tensor::zeros(ctx.tape->value(ctx.parents[0]).shape);
      da.at(r, c) += up[0];
      g.accumulate(ctx.parents[0], da);
    });
  }

  /// Vector of entries a[row, cols[i]]; repeated columns accumulate gradient.
  NodeId gather_row(NodeId a, std::size_t row, std::vector<std::size_t> cols) {
    const Tensor& va = value(a);
    if (row >= va.rows()) throw std::invalid_argument("gather_row: row out of range");
    Tensor out = Tensor::zeros({cols.size()});
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (cols[i] >= va.cols()) throw std::invalid_argument("gather_row: column out of range");
      out[i] = va.at(row, cols[i]);
    }
    return push(std::move(out), {a},
                [row, cols = std::move(cols)](const Tensor& up, Grads& g, const Ctx& c) {
                  Tensor da = Tensor::zeros(c.tape->value(c.parents[0]).shape);
                  for (std::size_t i = 0; i < cols.size(); ++i) da.at(row, cols[i]) += up[i];
                  g.accumulate(c.parents[0], da);
                });
  }

  /// Negative-log-likelihood gather: -sum_r logprobs[r, labels[r]].
  NodeId nll_gather(NodeId logprobs, std::vector<std::size_t> labels) {
    const Tensor& lp = value(logprobs);
    if (lp.rank() != 2 || labels.size() != lp.rows())
      throw std::invalid_argument("nll_gather: shape mismatch " + lp.shape_str());
    double s = 0.0;
    for (std::size_t r = 0; r < lp.rows(); ++r) {
      if (labels[r] >= lp.cols()) throw std::invalid_argument("nll_gather: label out of range");
      s -= lp.at(r, labels[r]);
    }
    Tensor out = Tensor::scalar(s);
    return push(std::move(out), {logprobs},
                [labels = std::move(labels)](const Tensor& up, Grads& g, const Ctx& c) {
                  Tensor da = Tensor::zeros(c.tape->value(c.parents[0]).shape);
                  for (std::size_t r = 0; r < labels.size(); ++r)
                    da.at(r, labels[r]) -= up[0];
                  g.accumulate(c.parents[0], da);
                });
  }

  /// log(sum_i exp(v_i + offset_i)), computed with max subtraction. Offsets
  /// are constants (not differentiated); they carry importance-weight terms.
  NodeId logsumexp(NodeId v, std::vector<double> offsets) {
    const Tensor& vv = value(v);
    if (vv.rank() != 1 || offsets.size() != vv.numel())
      throw std::invalid_argument("logsumexp: needs a vector and matching offsets");
    if (vv.numel() == 0) throw std::invalid_argument("logsumexp: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < vv.numel(); ++i) mx = std::max(mx, vv[i] + offsets[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < vv.numel(); ++i) s += std::exp(vv[i] + offsets[i] - mx);
    Tensor out = Tensor::scalar(mx + std::log(s));
    check_finite(out, "logsumexp");
    return push(std::move(out), {v},
                [offsets = std::move(offsets)](const Tensor& up, Grads& g, const Ctx& c) {
                  const Tensor& vv2 = c.tape->value(c.parents[0]);
                  const double lse = c.tape->value(c.self)[0];
                  Tensor da = Tensor::zeros(vv2.shape);
                  for (std::size_t i = 0; i < vv2.numel(); ++i)
                    da[i] = up[0] * std::exp(vv2[i] + offsets[i] - lse);
                  g.accumulate(c.parents[0], da);
                });
  }

  /// Gradients of root w.r.t. every node reachable from it, keyed by NodeId.
  /// Unreached nodes map to a zero tensor of their shape. Consumes the tape:
  /// further ops or a second backward() throw.
  std::vector<Tensor> backward(NodeId root) {
    if (consumed_) throw std::logic_error("Tape: backward on a consumed tape");
    if (!value(root).is_scalar())
      throw std::invalid_argument("backward: root must be a scalar, got " +
                                  value(root).shape_str());
    consumed_ = true;
    Grads grads(*this);
    grads.accumulate(root, Tensor::scalar(1.0));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backprop || !grads.has(i)) continue;
      Ctx ctx{this, node.parents, i};
      node.backprop(grads.get(i), grads, ctx);
    }
    return grads.release();
  }

 private:
  struct Ctx {
    const Tape* tape;
    const std::vector<NodeId>& parents;
    NodeId self;
  };

  class Grads {
   public:
    explicit Grads(const Tape& t) : tape_(t), slots_(t.size()), present_(t.size(), false) {}
    void accumulate(NodeId id, const Tensor& g) {
      if (!present_[id]) {
        slots_[id] = g;
        present_[id] = true;
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) slots_[id][i] += g[i];
      }
    }
    bool has(NodeId id) const { return present_[id]; }
    const Tensor& get(NodeId id) const { return slots_[id]; }
    std::vector<Tensor> release() {
      for (std::size_t i = 0; i < slots_.size(); ++i)
        if (!present_[i]) slots_[i] = Tensor::zeros(tape_.value(i).shape);
      return std::move(slots_);
    }

   private:
    const Tape& tape_;
    std::vector<Tensor> slots_;
    std::vector<bool> present_;
  };

  struct Node {
    Tensor value;
    std::vector<NodeId> parents;
    std::function<void(const Tensor&, Grads&, const Ctx&)> backprop;
  };

  NodeId push(Tensor v, std::vector<NodeId> parents,
              std::function<void(const Tensor&, Grads&, const Ctx&)> bp) {
    if (consumed_) throw std::logic_error("Tape: op on a consumed tape");
    nodes_.push_back(Node{std::move(v), std::move(parents), std::move(bp)});
    return nodes_.size() - 1;
  }

  void require_same_shape(const char* op, NodeId a, NodeId b) const {
    if (!value(a).same_shape(value(b))) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  value(a).shape_str() + " vs " + value(b).shape_str());
    }
  }

  static void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite())
      throw std::runtime_error(std::string(op) + ": non-finite value in forward result");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
/// `value_fn` must be deterministic; `grad_fn` returns one gradient tensor per
/// parameter, same shapes.
inline double finite_diff_check(
    const std::function<double(const std::vector<Tensor>&)>& value_fn,
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&)>& grad_fn,
    std::vector<Tensor> params, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  const std::vector<Tensor> analytic = grad_fn(params);
  if (analytic.size() != params.size())
    throw std::invalid_argument("finite_diff_check: gradient count mismatch");
  double max_rel = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!analytic[p].same_shape(params[p]))
      throw std::invalid_argument("finite_diff_check: gradient shape mismatch");
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + h;
      const double fp = value_fn(params);
      params[p][i] = orig - h;
      const double fm = value_fn(params);
      params[p][i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_check: non-finite value at perturbed point");
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[p][i];
      max_rel = std::max(max_rel, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return max_rel;
}

}  // namespace cclis
