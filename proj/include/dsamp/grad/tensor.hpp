#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dsamp::grad {

/// Dense row-major 64-bit array; every tape value is two-dimensional.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

class Tape;
class GradBuffer;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) noexcept : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const noexcept { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Matrix& value() const;
  /// Gradient accumulated by Tape::backward (leaves only).
  const Matrix& grad() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const {
    require(rows() == 1 && cols() == 1, "item() on non-scalar tensor");
    return value()(0, 0);
  }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Per-call gradient scratch used while walking the tape backwards.
class GradBuffer {
 public:
  GradBuffer(const Tape& tape, std::size_t n) : tape_(tape), g_(n) {}

  template <class Expr>
  void add(std::size_t id, const Expr& g);

  Matrix& at(std::size_t id) { return g_[id]; }
  bool has(std::size_t id) const { return g_[id].size() != 0; }
  void release(std::size_t id) { g_[id] = Matrix(); }

 private:
  const Tape& tape_;
  std::vector<Matrix> g_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Tape&, const Matrix& upstream, GradBuffer&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix v) { return push(std::move(v), false, true, {}); }

  Tensor leaf(Matrix v, bool requires_grad = true) {
    return push(std::move(v), requires_grad, true, {});
  }

  static Matrix scalar_matrix(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
  }
  Tensor scalar(double v) { return constant(scalar_matrix(v)); }

  /// Records an op result. The node needs a gradient iff any parent does;
  /// otherwise the backward closure is dropped.
  Tensor record(Matrix v, std::initializer_list<Tensor> parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(v), rg, false, rg ? std::move(fn) : BackwardFn{});
  }

  Tensor record(Matrix v, std::span<const Tensor> parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(v), rg, false, rg ? std::move(fn) : BackwardFn{});
  }

  /// Reverse accumulation from a scalar root. Leaf gradients accumulate
  /// across calls until zero_grad().
  void backward(Tensor root) {
    require(root.valid() && &root.tape() == this, "backward: root is not on this tape");
    const Matrix& rv = nodes_[root.id()].value;
    require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a scalar");
    if (!nodes_[root.id()].requires_grad) return;
    GradBuffer buf(*this, root.id() + 1);
    buf.at(root.id()) = scalar_matrix(1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      if (!buf.has(i)) continue;
      Node& n = nodes_[i];
      if (n.is_leaf) {
        if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.grad += buf.at(i);
      } else if (n.backward) {
        n.backward(*this, buf.at(i), buf);
      }
      buf.release(i);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Matrix();
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const {
    static const Matrix empty;
    return nodes_[id].grad.size() ? nodes_[id].grad : empty;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  Tensor push(Matrix v, bool rg, bool leaf, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Matrix(), rg, leaf, std::move(fn)});
    return Tensor(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Tensor::value() const { return tape_->value(id_); }
inline const Matrix& Tensor::grad() const { return tape_->grad(id_); }
inline bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

template <class Expr>
void GradBuffer::add(std::size_t id, const Expr& g) {
  if (!tape_.requires_grad(id)) return;
  if (g_[id].size() == 0)
    g_[id] = g;
  else
    g_[id] += g;
}

// ---------------------------------------------------------------------------
// Ops. Shapes are checked eagerly; mismatches are contract violations.

namespace detail {
inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(op) + ": shape mismatch");
}
inline void same_tape(const Tensor& a, const Tensor& b) {
  require(&a.tape() == &b.tape(), "operands live on different tapes");
}
}  // namespace detail

inline Tensor detach(const Tensor& a) { return a.tape().constant(a.value()); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           if (t.requires_grad(ia)) gb.add(ia, g * t.value(ib).transpose());
                           if (t.requires_grad(ib)) gb.add(ib, t.value(ia).transpose() * g);
                         });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b},
                         [ia, ib](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g);
                           gb.add(ib, g);
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b},
                         [ia, ib](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g);
                           gb.add(ib, -g);
                         });
}

/// Element-wise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "mul");
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           if (t.requires_grad(ia)) gb.add(ia, g.cwiseProduct(t.value(ib)));
                           if (t.requires_grad(ib)) gb.add(ib, g.cwiseProduct(t.value(ia)));
                         });
}

/// a (n x m) + row (1 x m), broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  detail::same_tape(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols");
  Matrix out = a.value().rowwise() + row.value().row(0);
  const auto ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {a, row},
                         [ia, ir](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g);
                           gb.add(ir, g.colwise().sum());
                         });
}

/// a + s where s is a 1x1 tensor broadcast to every element.
inline Tensor add_scalar(const Tensor& a, const Tensor& s) {
  detail::same_tape(a, s);
  require(s.rows() == 1 && s.cols() == 1, "add_scalar: scalar operand must be 1x1");
  Matrix out = a.value().array() + s.value()(0, 0);
  const auto ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {a, s},
                         [ia, is](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g);
                           gb.add(is, Tape::scalar_matrix(g.sum()));
                         });
}

inline Tensor scale(const Tensor& a, double c) {
  const auto ia = a.id();
  return a.tape().record(a.value() * c, {a},
                         [ia, c](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g * c);
                         });
}

inline Tensor shift(const Tensor& a, double c) {
  const auto ia = a.id();
  Matrix out = a.value().array() + c;
  return a.tape().record(std::move(out), {a},
                         [ia](const Tape&, const Matrix& g, GradBuffer& gb) { gb.add(ia, g); });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor square(const Tensor& a) {
  const auto ia = a.id();
  Matrix out = a.value().array().square();
  return a.tape().record(std::move(out), {a},
                         [ia](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, (2.0 * g.array() * t.value(ia).array()).matrix());
                         });
}

inline Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh();
  const auto ia = a.id();
  Tape& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a},
                     [ia, io](const Tape& t, const Matrix& g, GradBuffer& gb) {
                       const auto& y = t.value(io).array();
                       gb.add(ia, (g.array() * (1.0 - y.square())).matrix());
                     });
}

inline Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp();
  const auto ia = a.id();
  Tape& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a},
                     [ia, io](const Tape& t, const Matrix& g, GradBuffer& gb) {
                       gb.add(ia, g.cwiseProduct(t.value(io)));
                     });
}

inline Tensor log(const Tensor& a) {
  Matrix out = a.value().array().log();
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g.cwiseQuotient(t.value(ia)));
                         });
}

inline Tensor sqrt(const Tensor& a) {
  Matrix out = a.value().array().sqrt();
  const auto ia = a.id();
  Tape& tape = a.tape();
  const std::size_t io = tape.size();
  return tape.record(std::move(out), {a},
                     [ia, io](const Tape& t, const Matrix& g, GradBuffer& gb) {
                       gb.add(ia, (0.5 * g.array() / t.value(io).array()).matrix());
                     });
}

/// Exact GELU, x * Phi(x). The local derivative is formed once on the forward pass.
inline Tensor gelu(const Tensor& a) {
  const auto& x = a.value().array();
  Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cdf(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) cdf.data()[i] = 0.5 * std::erfc(-x.data()[i] * std::numbers::sqrt2 / 2.0);
  Matrix out = (x * cdf).matrix();
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  auto dydx = std::make_shared<const Matrix>((cdf + x * inv_sqrt_2pi * (-0.5 * x.square()).exp()).matrix());
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, dydx](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g.cwiseProduct(*dydx));
                         });
}

/// Clamp to [lo, hi]; the gradient is zero where the clamp is active.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, lo, hi](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           const auto& x = t.value(ia).array();
                           gb.add(ia, (g.array() * ((x >= lo) && (x <= hi)).cast<double>()).matrix());
                         });
}

inline Tensor sum(const Tensor& a) {
  const auto ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().record(Tape::scalar_matrix(a.value().sum()), {a},
                         [ia, r, c](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, Matrix::Constant(r, c, g(0, 0)));
                         });
}

inline Tensor mean(const Tensor& a) {
  require(a.value().size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// n x m -> n x 1, summing each row.
inline Tensor row_sum(const Tensor& a) {
  const auto ia = a.id();
  const Index c = a.cols();
  Matrix out = a.value().rowwise().sum();
  return a.tape().record(std::move(out), {a},
                         [ia, c](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g.replicate(1, c));
                         });
}

inline Tensor slice_rows(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  const auto ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a},
                         [ia, r, c, start, count](const Tape&, const Matrix& g, GradBuffer& gb) {
                           Matrix full = Matrix::Zero(r, c);
                           full.middleRows(start, count) = g;
                           gb.add(ia, full);
                         });
}

inline Tensor slice_cols(const Tensor& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  const auto ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a},
                         [ia, r, c, start, count](const Tape&, const Matrix& g, GradBuffer& gb) {
                           Matrix full = Matrix::Zero(r, c);
                           full.middleCols(start, count) = g;
                           gb.add(ia, full);
                         });
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const Index c = parts[0].cols();
  Index r = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    require(&p.tape() == &parts[0].tape(), "concat_rows: mixed tapes");
    r += p.rows();
  }
  Matrix out(r, c);
  std::vector<std::size_t> ids;
  std::vector<Index> offs;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    ids.push_back(p.id());
    offs.push_back(off);
    off += p.rows();
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids, offs](const Tape& t, const Matrix& g, GradBuffer& gb) {
        for (std::size_t k = 0; k < ids.size(); ++k)
          if (t.requires_grad(ids[k])) gb.add(ids[k], g.middleRows(offs[k], t.value(ids[k]).rows()));
      });
}

/// Block repeat: row r of the result is row r / reps of `a`.
inline Tensor repeat_rows(const Tensor& a, Index reps) {
  require(reps >= 1, "repeat_rows: reps must be positive");
  const Index k = a.rows(), c = a.cols();
  Matrix out(k * reps, c);
  for (Index i = 0; i < k; ++i) out.middleRows(i * reps, reps) = a.value().row(i).replicate(reps, 1);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, k, c, reps](const Tape&, const Matrix& g, GradBuffer& gb) {
                           Matrix acc(k, c);
                           for (Index i = 0; i < k; ++i) acc.row(i) = g.middleRows(i * reps, reps).colwise().sum();
                           gb.add(ia, acc);
                         });
}

/// Scales consecutive equal-height row blocks of `a` by factors[block].
inline Tensor scale_blocks(const Tensor& a, std::vector<double> factors) {
  const Index nb = static_cast<Index>(factors.size());
  require(nb > 0 && a.rows() % nb == 0, "scale_blocks: rows not divisible by block count");
  const Index b = a.rows() / nb;
  Matrix out = a.value();
  for (Index i = 0; i < nb; ++i) out.middleRows(i * b, b) *= factors[i];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, b, f = std::move(factors)](const Tape&, const Matrix& g, GradBuffer& gb) {
                           Matrix d = g;
                           for (std::size_t i = 0; i < f.size(); ++i)
                             d.middleRows(static_cast<Index>(i) * b, b) *= f[i];
                           gb.add(ia, d);
                         });
}

/// Sums `nblocks` consecutive equal-height row blocks: (nb*B) x m -> B x m.
inline Tensor sum_blocks(const Tensor& a, Index nblocks) {
  require(nblocks > 0 && a.rows() % nblocks == 0, "sum_blocks: rows not divisible by block count");
  const Index b = a.rows() / nblocks;
  Matrix out = Matrix::Zero(b, a.cols());
  for (Index i = 0; i < nblocks; ++i) out += a.value().middleRows(i * b, b);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, nblocks](const Tape&, const Matrix& g, GradBuffer& gb) {
                           gb.add(ia, g.replicate(nblocks, 1));
                         });
}

/// Row-wise diagonal Gaussian log-density: n x d inputs -> n x 1.
inline Tensor gaussian_logpdf(const Tensor& x, const Tensor& mean, const Tensor& var) {
  detail::same_shape(x, mean, "gaussian_logpdf(x, mean)");
  detail::same_shape(x, var, "gaussian_logpdf(x, var)");
  const Index d = x.cols();
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const auto diff = (x.value() - mean.value()).array();
  const auto& v = var.value().array();
  Matrix out = (-0.5 * ((diff.square() / v) + v.log() + log2pi)).matrix().rowwise().sum();
  const auto ix = x.id(), im = mean.id(), iv = var.id();
  return x.tape().record(std::move(out), {x, mean, var},
                         [ix, im, iv, d](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           const auto df = (t.value(ix) - t.value(im)).array();
                           const auto& vv = t.value(iv).array();
                           const Matrix up = g.replicate(1, d);
                           const auto u = up.array();
                           if (t.requires_grad(ix) || t.requires_grad(im)) {
                             Matrix s = (u * df / vv).matrix();
                             if (t.requires_grad(ix)) gb.add(ix, -s);
                             if (t.requires_grad(im)) gb.add(im, s);
                           }
                           if (t.requires_grad(iv))
                             gb.add(iv, (0.5 * u * (df.square() / vv.square() - 1.0 / vv)).matrix());
                         });
}

/// Row-wise scalar function with a user-supplied gradient: n x d -> n x 1.
/// `fn(row)` returns the value, `grad_fn(row, out)` writes d partials.
template <class Fn, class GradFn>
Tensor rowwise_scalar(const Tensor& x, Fn fn, GradFn grad_fn) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), 1);
  for (Index r = 0; r < xv.rows(); ++r) out(r, 0) = fn(xv.row(r));
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, grad_fn](const Tape& t, const Matrix& g, GradBuffer& gb) {
                           const Matrix& v = t.value(ix);
                           Matrix d(v.rows(), v.cols());
                           Eigen::RowVectorXd row(v.cols());
                           for (Index r = 0; r < v.rows(); ++r) {
                             grad_fn(v.row(r), row);
                             d.row(r) = g(r, 0) * row;
                           }
                           gb.add(ix, d);
                         });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace dsamp::grad
