#pragma once
// Reverse-mode automatic differentiation on a linear tape.
//
// Design notes:
//  * float64 only.  Matrices are dense row-major; Eigen maps provide the
//    matmul kernels, everything else is straight loops.
//  * A Tape owns the forward graph.  Parameters live outside the tape as
//    plain Mat objects owned by network modules; they are attached per
//    forward pass either tracked (tape.param) or frozen (tape.constant).
//    Freezing is how stop-gradient contracts are enforced: a frozen leaf
//    never receives a gradient buffer, so e.g. critic weights stay untouched
//    by an actor backward pass by construction.
//  * backward() walks the tape once in reverse creation order, accumulating
//    into lazily allocated per-node gradient buffers.  Deterministic: no
//    hashing, no threads, no reordering.
//  * Optional NaN guard (enabled in tests): every op output is scanned for
//    non-finite entries and throws NumericalError on the first hit.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "p2plab/common.hpp"

namespace p2plab::ad {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major matrix.  Scalars are 1x1, row vectors 1xN.
struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}

  static Mat scalar(double v) {
    Mat m(1, 1);
    m.a[0] = v;
    return m;
  }
  static Mat row(std::initializer_list<double> vs) {
    Mat m(1, static_cast<int>(vs.size()));
    int j = 0;
    for (double v : vs) m.a[j++] = v;
    return m;
  }

  std::size_t size() const { return a.size(); }
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return a[static_cast<std::size_t>(r) * cols + c];
  }

  Eigen::Map<RowMat> map() { return {a.data(), rows, cols}; }
  Eigen::Map<const RowMat> map() const { return {a.data(), rows, cols}; }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

enum class Op {
  Input,
  MatMul,       // optional transpose flags on either side
  Bmm,          // block-diagonal batched matmul, block height in i0
  Add,          // same shape, or rhs 1xD row bias, or rhs 1x1
  Sub,          // same broadcast rules as Add
  Mul,          // Hadamard; rhs may be 1xD or 1x1
  Scale,        // c0 * x + c1
  Tanh,
  Exp,
  Log,
  Clamp,        // [c0, c1]
  SoftmaxRows,
  ConcatCols,
  ConcatRows,
  SliceCols,    // [i0, i0+i1)
  GatherRows,   // row permutation/selection
  Reshape,
  Sum,          // all entries -> 1x1
  Mean,         // all entries -> 1x1
  SumRows,      // BxD -> Bx1
  Square,
  Sqrt,
  AbsSmooth,    // sqrt(x^2 + eps^2), eps in c0
  Min,          // elementwise min of two same-shape inputs
};

struct Node {
  Op op;
  int a = -1, b = -1;   // input node ids
  Mat val;
  int i0 = 0, i1 = 0;   // op-specific ints (slice offset/len, bmm block, flags)
  double c0 = 0, c1 = 0;
  std::vector<int> rows;  // GatherRows permutation
  bool trainable = false;
  const Mat* src = nullptr;  // external parameter identity (tracked leaves)
};

// Handle to a tape node.
class Tape;
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Mat& val() const;
};

inline bool& nan_guard_flag() {
  static bool on = false;
  return on;
}
inline void set_nan_guard(bool on) { nan_guard_flag() = on; }

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  // --- leaves -----------------------------------------------------------
  // Idempotent per matrix: attaching the same parameter twice on one tape
  // returns the original leaf, so every use accumulates into one gradient.
  Var param(Mat& m) {
    auto it = param_ids_.find(&m);
    if (it != param_ids_.end()) return {this, it->second};
    Var v = push(Op::Input, -1, -1, m);
    nodes_[v.id].trainable = true;
    nodes_[v.id].src = &m;
    param_ids_[&m] = v.id;
    return v;
  }
  Var constant(const Mat& m) { return push(Op::Input, -1, -1, m); }
  Var value(Mat m) { return push_owned(Op::Input, -1, -1, std::move(m)); }

  const Mat& val(int id) const { return nodes_[id].val; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // --- backward ---------------------------------------------------------
  void backward(Var loss) {
    if (loss.tape != this) throw NumericalError("backward: foreign var");
    const Mat& lv = nodes_[loss.id].val;
    if (lv.rows != 1 || lv.cols != 1)
      throw NumericalError("backward: loss must be scalar (1x1)");
    grads_.assign(nodes_.size(), Mat{});
    grads_[loss.id] = Mat(1, 1, 1.0);
    for (int i = loss.id; i >= 0; --i) {
      if (grads_[i].a.empty()) continue;
      pull(i);
    }
    ran_backward_ = true;
  }

  // Gradient of a node (zeros if it never received one).
  Mat grad(Var v) const {
    if (!ran_backward_) throw NumericalError("grad: backward not run");
    const Mat& g = grads_[v.id];
    if (!g.a.empty()) return g;
    const Mat& val = nodes_[v.id].val;
    return Mat(val.rows, val.cols, 0.0);
  }

  // Gradient w.r.t. an externally owned parameter.  Zero matrix if the
  // parameter was attached but unreached; throws if it was never attached
  // as trainable (frozen leaves by design have no gradient).
  Mat grad_of(const Mat& m) const {
    auto it = param_ids_.find(&m);
    if (it == param_ids_.end())
      throw NumericalError("grad_of: matrix was not attached as a parameter");
    return grad({const_cast<Tape*>(this), it->second});
  }
  bool tracks(const Mat& m) const { return param_ids_.count(&m) > 0; }

  // --- forward ops ------------------------------------------------------
  Var matmul(Var x, Var y, bool trans_a = false, bool trans_b = false) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    int ar = trans_a ? A.cols : A.rows, ac = trans_a ? A.rows : A.cols;
    int br = trans_b ? B.cols : B.rows, bc = trans_b ? B.rows : B.cols;
    if (ac != br) throw NumericalError("matmul: inner dims disagree");
    Mat out(ar, bc);
    auto Am = A.map(), Bm = B.map();
    if (!trans_a && !trans_b)
      out.map().noalias() = Am * Bm;
    else if (trans_a && !trans_b)
      out.map().noalias() = Am.transpose() * Bm;
    else if (!trans_a && trans_b)
      out.map().noalias() = Am * Bm.transpose();
    else
      out.map().noalias() = Am.transpose() * Bm.transpose();
    Var v = push_owned(Op::MatMul, x.id, y.id, std::move(out));
    nodes_[v.id].i0 = trans_a;
    nodes_[v.id].i1 = trans_b;
    return v;
  }

  // Block-diagonal batched matmul.  Inputs are stacks of per-sample blocks of
  // height `block`.  trans_b=true:  Z_b = X_b * Y_b^T (X: (S*block)xp, Y:
  // (S*block)xp -> Z: (S*block)xblock).  trans_b=false: Z_b = X_b * Y_b with
  // X cols == block (X: (S*block)xblock, Y: (S*block)xq -> (S*block)xq).
  Var bmm(Var x, Var y, int block, bool trans_b) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    if (A.rows != B.rows || A.rows % block != 0)
      throw NumericalError("bmm: row counts must match and divide block");
    int nb = A.rows / block;
    Mat out;
    if (trans_b) {
      if (A.cols != B.cols) throw NumericalError("bmm_nt: col dims disagree");
      out = Mat(A.rows, block);
      for (int s = 0; s < nb; ++s)
        out.map().middleRows(s * block, block).noalias() =
            A.map().middleRows(s * block, block) *
            B.map().middleRows(s * block, block).transpose();
    } else {
      if (A.cols != block) throw NumericalError("bmm_nn: lhs cols != block");
      out = Mat(A.rows, B.cols);
      for (int s = 0; s < nb; ++s)
        out.map().middleRows(s * block, block).noalias() =
            A.map().middleRows(s * block, block) *
            B.map().middleRows(s * block, block);
    }
    Var v = push_owned(Op::Bmm, x.id, y.id, std::move(out));
    nodes_[v.id].i0 = block;
    nodes_[v.id].i1 = trans_b;
    return v;
  }

  Var add(Var x, Var y) { return ew2(Op::Add, x, y); }
  Var sub(Var x, Var y) { return ew2(Op::Sub, x, y); }
  Var mul(Var x, Var y) { return ew2(Op::Mul, x, y); }

  Var minimum(Var x, Var y) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    if (A.rows != B.rows || A.cols != B.cols)
      throw NumericalError("min: shape mismatch");
    Mat out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i)
      out.a[i] = A.a[i] <= B.a[i] ? A.a[i] : B.a[i];
    return push_owned(Op::Min, x.id, y.id, std::move(out));
  }

  Var scale(Var x, double k, double shift = 0.0) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) out.a[i] = k * A.a[i] + shift;
    Var v = push_owned(Op::Scale, x.id, -1, std::move(out));
    nodes_[v.id].c0 = k;
    nodes_[v.id].c1 = shift;
    return v;
  }

  Var tanh(Var x) {
    return map1(Op::Tanh, x, [](double v) { return std::tanh(v); });
  }
  Var exp(Var x) {
    return map1(Op::Exp, x, [](double v) { return std::exp(v); });
  }
  Var log(Var x) {
    return map1(Op::Log, x, [](double v) { return std::log(v); });
  }
  Var square(Var x) {
    return map1(Op::Square, x, [](double v) { return v * v; });
  }
  Var sqrt(Var x) {
    return map1(Op::Sqrt, x, [](double v) { return std::sqrt(v); });
  }

  Var clamp(Var x, double lo, double hi) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i)
      out.a[i] = A.a[i] < lo ? lo : (A.a[i] > hi ? hi : A.a[i]);
    Var v = push_owned(Op::Clamp, x.id, -1, std::move(out));
    nodes_[v.id].c0 = lo;
    nodes_[v.id].c1 = hi;
    return v;
  }

  Var abs_smooth(Var x, double eps = 1e-8) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i)
      out.a[i] = std::sqrt(A.a[i] * A.a[i] + eps * eps);
    Var v = push_owned(Op::AbsSmooth, x.id, -1, std::move(out));
    nodes_[v.id].c0 = eps;
    return v;
  }

  // Numerically stable row softmax (shift by row max).
  Var softmax_rows(Var x) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r) {
      double mx = A.at(r, 0);
      for (int c = 1; c < A.cols; ++c) mx = std::max(mx, A.at(r, c));
      double z = 0.0;
      for (int c = 0; c < A.cols; ++c) {
        double e = std::exp(A.at(r, c) - mx);
        out.at(r, c) = e;
        z += e;
      }
      for (int c = 0; c < A.cols; ++c) out.at(r, c) /= z;
    }
    return push_owned(Op::SoftmaxRows, x.id, -1, std::move(out));
  }

  Var concat_cols(Var x, Var y) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    if (A.rows != B.rows) throw NumericalError("concat_cols: row mismatch");
    Mat out(A.rows, A.cols + B.cols);
    for (int r = 0; r < A.rows; ++r) {
      for (int c = 0; c < A.cols; ++c) out.at(r, c) = A.at(r, c);
      for (int c = 0; c < B.cols; ++c) out.at(r, A.cols + c) = B.at(r, c);
    }
    Var v = push_owned(Op::ConcatCols, x.id, y.id, std::move(out));
    nodes_[v.id].i0 = A.cols;
    return v;
  }

  Var concat_rows(Var x, Var y) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    if (A.cols != B.cols) throw NumericalError("concat_rows: col mismatch");
    Mat out(A.rows + B.rows, A.cols);
    std::copy(A.a.begin(), A.a.end(), out.a.begin());
    std::copy(B.a.begin(), B.a.end(), out.a.begin() + A.size());
    Var v = push_owned(Op::ConcatRows, x.id, y.id, std::move(out));
    nodes_[v.id].i0 = A.rows;
    return v;
  }

  Var slice_cols(Var x, int start, int len) {
    const Mat& A = nodes_[x.id].val;
    if (start < 0 || start + len > A.cols)
      throw NumericalError("slice_cols: out of range");
    Mat out(A.rows, len);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < len; ++c) out.at(r, c) = A.at(r, start + c);
    Var v = push_owned(Op::SliceCols, x.id, -1, std::move(out));
    nodes_[v.id].i0 = start;
    nodes_[v.id].i1 = len;
    return v;
  }

  Var gather_rows(Var x, std::vector<int> rows) {
    const Mat& A = nodes_[x.id].val;
    Mat out(static_cast<int>(rows.size()), A.cols);
    for (int r = 0; r < out.rows; ++r) {
      if (rows[r] < 0 || rows[r] >= A.rows)
        throw NumericalError("gather_rows: index out of range");
      for (int c = 0; c < A.cols; ++c) out.at(r, c) = A.at(rows[r], c);
    }
    Var v = push_owned(Op::GatherRows, x.id, -1, std::move(out));
    nodes_[v.id].rows = std::move(rows);
    return v;
  }

  // Total-size-preserving reshape of contiguous row-major data.
  Var reshape(Var x, int r, int c) {
    const Mat& A = nodes_[x.id].val;
    if (static_cast<std::size_t>(r) * c != A.size())
      throw NumericalError("reshape: size mismatch");
    Mat out(r, c);
    out.a = A.a;
    Var v = push_owned(Op::Reshape, x.id, -1, std::move(out));
    return v;
  }

  Var sum(Var x) { return reduce(Op::Sum, x); }
  Var mean(Var x) { return reduce(Op::Mean, x); }

  Var sum_rows(Var x) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, 1);
    for (int r = 0; r < A.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < A.cols; ++c) s += A.at(r, c);
      out.at(r, 0) = s;
    }
    return push_owned(Op::SumRows, x.id, -1, std::move(out));
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Mat> grads_;
  std::unordered_map<const Mat*, int> param_ids_;
  bool ran_backward_ = false;

  Var push(Op op, int a, int b, const Mat& val) {
    return push_owned(op, a, b, Mat(val));
  }
  Var push_owned(Op op, int a, int b, Mat val) {
    if (nan_guard_flag() && !val.all_finite())
      throw NumericalError("non-finite value produced by op " +
                           std::to_string(static_cast<int>(op)));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = std::move(val);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  Var map1(Op op, Var x, F f) {
    const Mat& A = nodes_[x.id].val;
    Mat out(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) out.a[i] = f(A.a[i]);
    return push_owned(op, x.id, -1, std::move(out));
  }

  Var reduce(Op op, Var x) {
    const Mat& A = nodes_[x.id].val;
    double s = 0.0;
    for (double v : A.a) s += v;
    if (op == Op::Mean) s /= static_cast<double>(A.size());
    return push_owned(op, x.id, -1, Mat::scalar(s));
  }

  // Elementwise binary with limited broadcasting on the rhs: same shape,
  // 1xD row (bias), or 1x1 scalar.
  Var ew2(Op op, Var x, Var y) {
    const Mat& A = nodes_[x.id].val;
    const Mat& B = nodes_[y.id].val;
    bool same = A.rows == B.rows && A.cols == B.cols;
    bool rowb = B.rows == 1 && B.cols == A.cols;
    bool scal = B.rows == 1 && B.cols == 1;
    if (!same && !rowb && !scal)
      throw NumericalError("elementwise: incompatible shapes");
    Mat out(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r)
      for (int c = 0; c < A.cols; ++c) {
        double bv = same ? B.at(r, c) : (rowb ? B.at(0, c) : B.a[0]);
        double av = A.at(r, c);
        out.at(r, c) = op == Op::Add   ? av + bv
                       : op == Op::Sub ? av - bv
                                       : av * bv;
      }
    return push_owned(op, x.id, y.id, std::move(out));
  }

  // --- backward rules ---------------------------------------------------
  Mat& gbuf(int id) {
    Mat& g = grads_[id];
    if (g.a.empty()) {
      const Mat& v = nodes_[id].val;
      g = Mat(v.rows, v.cols, 0.0);
    }
    return g;
  }

  // Accumulate dC into an input that may have been broadcast.
  void acc_bcast(int id, const Mat& dC) {
    Mat& g = gbuf(id);
    if (g.rows == dC.rows && g.cols == dC.cols) {
      for (std::size_t i = 0; i < g.size(); ++i) g.a[i] += dC.a[i];
    } else if (g.rows == 1 && g.cols == dC.cols) {
      for (int r = 0; r < dC.rows; ++r)
        for (int c = 0; c < dC.cols; ++c) g.at(0, c) += dC.at(r, c);
    } else {  // 1x1
      double s = 0.0;
      for (double v : dC.a) s += v;
      g.a[0] += s;
    }
  }

  void pull(int i) {
    Node& n = nodes_[i];
    const Mat& dC = grads_[i];
    switch (n.op) {
      case Op::Input:
        break;
      case Op::MatMul: {
        const Mat& A = nodes_[n.a].val;
        const Mat& B = nodes_[n.b].val;
        bool ta = n.i0, tb = n.i1;
        Mat& dA = gbuf(n.a);
        Mat& dB = gbuf(n.b);
        auto dCm = dC.map();
        if (!ta && !tb) {
          dA.map().noalias() += dCm * B.map().transpose();
          dB.map().noalias() += A.map().transpose() * dCm;
        } else if (ta && !tb) {
          dA.map().noalias() += B.map() * dCm.transpose();
          dB.map().noalias() += A.map() * dCm;
        } else if (!ta && tb) {
          dA.map().noalias() += dCm * B.map();
          dB.map().noalias() += dCm.transpose() * A.map();
        } else {
          dA.map().noalias() += B.map().transpose() * dCm.transpose();
          dB.map().noalias() += dCm.transpose() * A.map().transpose();
        }
        break;
      }
      case Op::Bmm: {
        const Mat& A = nodes_[n.a].val;
        const Mat& B = nodes_[n.b].val;
        int block = n.i0;
        bool tb = n.i1;
        int nb = A.rows / block;
        Mat& dA = gbuf(n.a);
        Mat& dB = gbuf(n.b);
        for (int s = 0; s < nb; ++s) {
          auto dZ = dC.map().middleRows(s * block, block);
          auto Ab = A.map().middleRows(s * block, block);
          auto Bb = B.map().middleRows(s * block, block);
          if (tb) {  // Z = A B^T
            dA.map().middleRows(s * block, block).noalias() += dZ * Bb;
            dB.map().middleRows(s * block, block).noalias() +=
                dZ.transpose() * Ab;
          } else {  // Z = A B
            dA.map().middleRows(s * block, block).noalias() +=
                dZ * Bb.transpose();
            dB.map().middleRows(s * block, block).noalias() +=
                Ab.transpose() * dZ;
          }
        }
        break;
      }
      case Op::Add: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += dC.a[k];
        acc_bcast(n.b, dC);
        break;
      }
      case Op::Sub: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += dC.a[k];
        Mat neg(dC.rows, dC.cols);
        for (std::size_t k = 0; k < neg.size(); ++k) neg.a[k] = -dC.a[k];
        acc_bcast(n.b, neg);
        break;
      }
      case Op::Mul: {
        const Mat& A = nodes_[n.a].val;
        const Mat& B = nodes_[n.b].val;
        bool same = B.rows == A.rows && B.cols == A.cols;
        bool rowb = B.rows == 1 && B.cols == A.cols;
        Mat& dA = gbuf(n.a);
        for (int r = 0; r < A.rows; ++r)
          for (int c = 0; c < A.cols; ++c) {
            double bv = same ? B.at(r, c) : (rowb ? B.at(0, c) : B.a[0]);
            dA.at(r, c) += dC.at(r, c) * bv;
          }
        Mat dBfull(A.rows, A.cols);
        for (int r = 0; r < A.rows; ++r)
          for (int c = 0; c < A.cols; ++c)
            dBfull.at(r, c) = dC.at(r, c) * A.at(r, c);
        acc_bcast(n.b, dBfull);
        break;
      }
      case Op::Scale: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += n.c0 * dC.a[k];
        break;
      }
      case Op::Tanh: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] * (1.0 - n.val.a[k] * n.val.a[k]);
        break;
      }
      case Op::Exp: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] * n.val.a[k];
        break;
      }
      case Op::Log: {
        const Mat& A = nodes_[n.a].val;
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] / A.a[k];
        break;
      }
      case Op::Clamp: {
        const Mat& A = nodes_[n.a].val;
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          if (A.a[k] >= n.c0 && A.a[k] <= n.c1) dA.a[k] += dC.a[k];
        break;
      }
      case Op::SoftmaxRows: {
        // dX = Y o (dY - rowsum(dY o Y))
        const Mat& Y = n.val;
        Mat& dA = gbuf(n.a);
        for (int r = 0; r < Y.rows; ++r) {
          double dot = 0.0;
          for (int c = 0; c < Y.cols; ++c) dot += dC.at(r, c) * Y.at(r, c);
          for (int c = 0; c < Y.cols; ++c)
            dA.at(r, c) += Y.at(r, c) * (dC.at(r, c) - dot);
        }
        break;
      }
      case Op::ConcatCols: {
        int ac = n.i0;
        Mat& dA = gbuf(n.a);
        Mat& dB = gbuf(n.b);
        for (int r = 0; r < dC.rows; ++r) {
          for (int c = 0; c < ac; ++c) dA.at(r, c) += dC.at(r, c);
          for (int c = ac; c < dC.cols; ++c) dB.at(r, c - ac) += dC.at(r, c);
        }
        break;
      }
      case Op::ConcatRows: {
        int ar = n.i0;
        Mat& dA = gbuf(n.a);
        Mat& dB = gbuf(n.b);
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += dC.a[k];
        for (std::size_t k = 0; k < dB.size(); ++k)
          dB.a[k] += dC.a[dA.size() + k];
        (void)ar;
        break;
      }
      case Op::SliceCols: {
        Mat& dA = gbuf(n.a);
        for (int r = 0; r < dC.rows; ++r)
          for (int c = 0; c < n.i1; ++c) dA.at(r, n.i0 + c) += dC.at(r, c);
        break;
      }
      case Op::GatherRows: {
        Mat& dA = gbuf(n.a);
        for (int r = 0; r < dC.rows; ++r)
          for (int c = 0; c < dC.cols; ++c)
            dA.at(n.rows[r], c) += dC.at(r, c);
        break;
      }
      case Op::Reshape: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += dC.a[k];
        break;
      }
      case Op::Sum: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += dC.a[0];
        break;
      }
      case Op::Mean: {
        Mat& dA = gbuf(n.a);
        double g = dC.a[0] / static_cast<double>(dA.size());
        for (std::size_t k = 0; k < dA.size(); ++k) dA.a[k] += g;
        break;
      }
      case Op::SumRows: {
        Mat& dA = gbuf(n.a);
        for (int r = 0; r < dA.rows; ++r)
          for (int c = 0; c < dA.cols; ++c) dA.at(r, c) += dC.at(r, 0);
        break;
      }
      case Op::Square: {
        const Mat& A = nodes_[n.a].val;
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] * 2.0 * A.a[k];
        break;
      }
      case Op::Sqrt: {
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] * 0.5 / n.val.a[k];
        break;
      }
      case Op::AbsSmooth: {
        const Mat& A = nodes_[n.a].val;
        Mat& dA = gbuf(n.a);
        for (std::size_t k = 0; k < dA.size(); ++k)
          dA.a[k] += dC.a[k] * A.a[k] / n.val.a[k];
        break;
      }
      case Op::Min: {
        const Mat& A = nodes_[n.a].val;
        const Mat& B = nodes_[n.b].val;
        Mat& dA = gbuf(n.a);
        Mat& dB = gbuf(n.b);
        for (std::size_t k = 0; k < dA.size(); ++k) {
          if (A.a[k] <= B.a[k])
            dA.a[k] += dC.a[k];
          else
            dB.a[k] += dC.a[k];
        }
        break;
      }
    }
  }
};

inline const Mat& Var::val() const { return tape->val(id); }

// --- finite-difference gradient checker ---------------------------------
// f builds a scalar loss from the attached parameter Vars.  Returns the
// maximum relative error over every coordinate of every input, comparing the
// tape gradient against central differences with step h.
inline double grad_check(
    const std::function<Var(Tape&, std::vector<Var>&)>& f, std::vector<Mat> xs,
    double h = 1e-5) {
  // Analytic pass.
  std::vector<Mat> grads;
  {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (Mat& m : xs) vars.push_back(t.param(m));
    Var loss = f(t, vars);
    t.backward(loss);
    for (Mat& m : xs) grads.push_back(t.grad_of(m));
  }
  auto eval = [&](const std::vector<Mat>& pt) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(pt.size());
    for (const Mat& m : pt) vars.push_back(t.constant(m));
    return f(t, vars).val().a[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      std::vector<Mat> pt = xs;
      pt[i].a[k] += h;
      double up = eval(pt);
      pt[i].a[k] -= 2 * h;
      double dn = eval(pt);
      double fd = (up - dn) / (2 * h);
      double err =
          std::abs(grads[i].a[k] - fd) / std::max(std::abs(fd), 1e-6);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace p2plab::ad
