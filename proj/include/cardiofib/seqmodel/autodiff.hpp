#ifndef CARDIOFIB_SEQMODEL_AUTODIFF_HPP
#define CARDIOFIB_SEQMODEL_AUTODIFF_HPP

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Parameters live outside
// the tape in a ParameterSet; Tape::param() binds one as a leaf, and
// Tape::backward() accumulates into Parameter::grad. A fresh tape is used for
// every forward pass.

#include "../core.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cardiofib::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Named parameter tensors in registration order. Registration order is the
/// serialization order of checkpoints.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    Matrix zero = Matrix::Zero(init.rows(), init.cols());
    params_.push_back({name, std::move(init), std::move(zero)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter& operator[](const std::string& name) { return params_[lookup(name)]; }
  const Parameter& operator[](const std::string& name) const { return params_[lookup(name)]; }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

struct Var {
  int id = -1;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  Var constant(Matrix m) { return push(std::move(m), false); }

  Var param(Parameter& p) { return param(p, &p); }

  /// Leaf holding p's value whose gradient is added to sink->grad. A null
  /// sink makes the leaf a constant.
  Var param(const Parameter& p, Parameter* sink) {
    Var v = push(p.value, sink != nullptr);
    nodes_[v.id].param = sink;
    return v;
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() target w.r.t. v; empty if v did not
  /// influence it.
  const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 node. Parameter leaves add their gradient
  /// into Parameter::grad.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw DataError("backward: target must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param) {
        if (!n.grad.allFinite()) throw NumericError("non-finite gradient for parameter " + n.param->name);
        n.param->grad += n.grad;
      }
    }
  }

  // -- Linear algebra ---------------------------------------------------------

  Var matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul");
    Var out = push(value(a) * value(b), needs(a) || needs(b));
    on_back(out, [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g * value(b).transpose());
      if (needs(b)) acc(b, value(a).transpose() * g);
    });
    return out;
  }

  Var transpose(Var a) {
    Var out = push(value(a).transpose(), needs(a));
    on_back(out, [this, a, out] { acc(a, nodes_[out.id].grad.transpose()); });
    return out;
  }

  Var add(Var a, Var b) {
    check(same_shape(a, b), "add");
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    on_back(out, [this, a, b, out] {
      if (needs(a)) acc(a, nodes_[out.id].grad);
      if (needs(b)) acc(b, nodes_[out.id].grad);
    });
    return out;
  }

  /// a (r x c) plus a 1 x c row broadcast over rows.
  Var add_row(Var a, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row");
    Matrix v = value(a);
    v.rowwise() += value(row).row(0);
    Var out = push(std::move(v), needs(a) || needs(row));
    on_back(out, [this, a, row, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g);
      if (needs(row)) acc(row, g.colwise().sum());
    });
    return out;
  }

  Var add_const(Var a, const Matrix& c) {
    check(value(a).rows() == c.rows() && value(a).cols() == c.cols(), "add_const");
    Var out = push(value(a) + c, needs(a));
    on_back(out, [this, a, out] { acc(a, nodes_[out.id].grad); });
    return out;
  }

  Var mul(Var a, Var b) {
    check(same_shape(a, b), "mul");
    Var out = push(value(a).cwiseProduct(value(b)), needs(a) || needs(b));
    on_back(out, [this, a, b, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g.cwiseProduct(value(b)));
      if (needs(b)) acc(b, g.cwiseProduct(value(a)));
    });
    return out;
  }

  Var mul_const(Var a, const Matrix& c) {
    check(value(a).rows() == c.rows() && value(a).cols() == c.cols(), "mul_const");
    Var out = push(value(a).cwiseProduct(c), needs(a));
    on_back(out, [this, a, c, out] { acc(a, nodes_[out.id].grad.cwiseProduct(c)); });
    return out;
  }

  Var scale(Var a, double s) {
    Var out = push(value(a) * s, needs(a));
    on_back(out, [this, a, s, out] { acc(a, nodes_[out.id].grad * s); });
    return out;
  }

  // -- Elementwise nonlinearities --------------------------------------------

  Var sigmoid(Var a) {
    Matrix v = value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    Var out = push(std::move(v), needs(a));
    on_back(out, [this, a, out] {
      const Matrix& y = value(out);
      acc(a, nodes_[out.id].grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
    return out;
  }

  Var tanh(Var a) {
    Var out = push(value(a).array().tanh().matrix(), needs(a));
    on_back(out, [this, a, out] {
      const Matrix& y = value(out);
      acc(a, nodes_[out.id].grad.cwiseProduct((1.0 - y.array().square()).matrix()));
    });
    return out;
  }

  Var relu(Var a) {
    Var out = push(value(a).cwiseMax(0.0), needs(a));
    on_back(out, [this, a, out] {
      const Matrix mask = (value(a).array() > 0.0).cast<double>().matrix();
      acc(a, nodes_[out.id].grad.cwiseProduct(mask));
    });
    return out;
  }

  // -- Shape ------------------------------------------------------------------

  Var slice(Var a, Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
    const Matrix& va = value(a);
    check(r0 >= 0 && c0 >= 0 && r0 + nr <= va.rows() && c0 + nc <= va.cols(), "slice");
    Var out = push(va.block(r0, c0, nr, nc), needs(a));
    on_back(out, [this, a, r0, c0, nr, nc, out] {
      Matrix& dst = nodes_[a.id].grad;
      if (dst.size() == 0) dst = Matrix::Zero(value(a).rows(), value(a).cols());
      dst.block(r0, c0, nr, nc) += nodes_[out.id].grad;
    });
    return out;
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index nc) { return slice(a, 0, value(a).rows(), c0, nc); }
  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index nr) { return slice(a, r0, nr, 0, value(a).cols()); }

  Var concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_cols");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool ng = false;
    for (Var p : parts) {
      check(value(p).rows() == rows, "concat_cols");
      cols += value(p).cols();
      ng = ng || needs(p);
    }
    Matrix v(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      v.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    Var out = push(std::move(v), ng);
    on_back(out, [this, parts, out] {
      Eigen::Index col = 0;
      for (Var p : parts) {
        const Eigen::Index w = value(p).cols();
        if (needs(p)) acc(p, nodes_[out.id].grad.middleCols(col, w));
        col += w;
      }
    });
    return out;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_rows");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool ng = false;
    for (Var p : parts) {
      check(value(p).cols() == cols, "concat_rows");
      rows += value(p).rows();
      ng = ng || needs(p);
    }
    Matrix v(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      v.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    Var out = push(std::move(v), ng);
    on_back(out, [this, parts, out] {
      Eigen::Index row = 0;
      for (Var p : parts) {
        const Eigen::Index h = value(p).rows();
        if (needs(p)) acc(p, nodes_[out.id].grad.middleRows(row, h));
        row += h;
      }
    });
    return out;
  }

  /// Row-wise selection: row r comes from `taken` where keep[r], else from
  /// `kept`. Rejected rows contribute nothing, not even through a zero product,
  /// so non-finite values there cannot leak.
  Var select_rows(Var taken, Var kept, const std::vector<char>& keep) {
    check(same_shape(taken, kept) && static_cast<Eigen::Index>(keep.size()) == value(taken).rows(),
          "select_rows");
    Matrix v = value(kept);
    for (std::size_t r = 0; r < keep.size(); ++r)
      if (keep[r]) v.row(r) = value(taken).row(r);
    Var out = push(std::move(v), needs(taken) || needs(kept));
    on_back(out, [this, taken, kept, keep, out] {
      const Matrix& g = nodes_[out.id].grad;
      Matrix gt = Matrix::Zero(g.rows(), g.cols());
      Matrix gk = Matrix::Zero(g.rows(), g.cols());
      for (std::size_t r = 0; r < keep.size(); ++r) (keep[r] ? gt : gk).row(r) = g.row(r);
      if (needs(taken)) acc(taken, gt);
      if (needs(kept)) acc(kept, gk);
    });
    return out;
  }

  // -- Normalization and attention -------------------------------------------

  /// Softmax over each row restricted to columns with valid[c]; the other
  /// columns get probability exactly 0.
  Var masked_softmax_rows(Var a, const std::vector<char>& valid) {
    const Matrix& s = value(a);
    check(static_cast<Eigen::Index>(valid.size()) == s.cols(), "masked_softmax_rows");
    if (std::find(valid.begin(), valid.end(), 1) == valid.end())
      throw DataError("masked_softmax_rows: no valid keys");
    Matrix p = Matrix::Zero(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < s.cols(); ++c)
        if (valid[c]) mx = std::max(mx, s(r, c));
      double z = 0.0;
      for (Eigen::Index c = 0; c < s.cols(); ++c)
        if (valid[c]) z += (p(r, c) = std::exp(s(r, c) - mx));
      for (Eigen::Index c = 0; c < s.cols(); ++c)
        if (valid[c]) p(r, c) /= z;
    }
    Var out = push(std::move(p), needs(a));
    on_back(out, [this, a, out] {
      const Matrix& y = value(out);
      const Matrix& g = nodes_[out.id].grad;
      const Vector dot = g.cwiseProduct(y).rowwise().sum();
      Matrix d = y.cwiseProduct(g);
      for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) -= dot[r] * y.row(r);
      acc(a, d);
    });
    return out;
  }

  /// Per-row layer normalization with 1 x c gain and bias, eps 1e-5.
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& x = value(a);
    const Eigen::Index n = x.cols();
    check(value(gain).rows() == 1 && value(gain).cols() == n && same_shape(gain, bias), "layer_norm");
    Matrix xhat(x.rows(), n);
    Vector inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mu = x.row(r).mean();
      const double var = (x.row(r).array() - mu).square().mean();
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
    }
    Matrix y = xhat.array().rowwise() * value(gain).row(0).array();
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), needs(a) || needs(gain) || needs(bias));
    on_back(out, [this, a, gain, bias, xhat, inv_std, n, out] {
      const Matrix& g = nodes_[out.id].grad;
      if (needs(gain)) acc(gain, g.cwiseProduct(xhat).colwise().sum());
      if (needs(bias)) acc(bias, g.colwise().sum());
      if (needs(a)) {
        const Matrix dxhat = g.array().rowwise() * value(gain).row(0).array();
        Matrix dx(dxhat.rows(), n);
        for (Eigen::Index r = 0; r < dx.rows(); ++r) {
          const double s1 = dxhat.row(r).sum();
          const double s2 = dxhat.row(r).dot(xhat.row(r));
          dx.row(r) = (static_cast<double>(n) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2) *
                      (inv_std[r] / static_cast<double>(n));
        }
        acc(a, dx);
      }
    });
    return out;
  }

  // -- Losses -----------------------------------------------------------------

  /// Mean of squared errors over entries with mask != 0. Masked entries are
  /// skipped outright.
  Var masked_mse(Var pred, const Matrix& target, const Matrix& mask) {
    const Matrix& p = value(pred);
    check(p.rows() == target.rows() && p.cols() == target.cols() && mask.rows() == p.rows() &&
              mask.cols() == p.cols(),
          "masked_mse");
    double sum = 0.0, count = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c)
        if (mask(r, c) != 0.0) {
          const double d = p(r, c) - target(r, c);
          sum += d * d;
          count += 1.0;
        }
    if (count == 0.0) throw DataError("masked_mse: mask has no valid entries");
    Var out = push(Matrix::Constant(1, 1, sum / count), needs(pred));
    on_back(out, [this, pred, target, mask, count, out] {
      const double g = nodes_[out.id].grad(0, 0);
      const Matrix& pv = value(pred);
      Matrix d = Matrix::Zero(pv.rows(), pv.cols());
      for (Eigen::Index r = 0; r < pv.rows(); ++r)
        for (Eigen::Index c = 0; c < pv.cols(); ++c)
          if (mask(r, c) != 0.0) d(r, c) = 2.0 * g * (pv(r, c) - target(r, c)) / count;
      acc(pred, d);
    });
    return out;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    std::function<void()> back;
  };

  Var push(Matrix v, bool needs_grad) {
    nodes_.push_back(Node{std::move(v), Matrix(), needs_grad, nullptr, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  bool same_shape(Var a, Var b) const {
    return value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols();
  }

  static void check(bool ok, const char* op) {
    if (!ok) throw DataError(std::string("dimension mismatch in ") + op);
  }

  template <typename F>
  void on_back(Var out, F&& f) {
    if (nodes_[out.id].needs_grad) nodes_[out.id].back = std::forward<F>(f);
  }

  template <typename Expr>
  void acc(Var v, const Expr& g) {
    Matrix& dst = nodes_[v.id].grad;
    if (dst.size() == 0)
      dst = g;
    else
      dst += g;
  }

  std::vector<Node> nodes_;
};

/// Binds named parameters onto a tape once per forward pass. With a null
/// gradient sink every parameter enters as a constant (inference).
class Binder {
 public:
  Binder(Tape& tape, const ParameterSet& params, ParameterSet* sink) : tape_(tape), params_(params), sink_(sink) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Var v = tape_.param(params_[name], sink_ ? &(*sink_)[name] : nullptr);
    bound_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParameterSet& params_;
  ParameterSet* sink_;
  std::map<std::string, Var> bound_;
};

}  // namespace cardiofib::ad

#endif  // CARDIOFIB_SEQMODEL_AUTODIFF_HPP
