#include "dcss/autodiff.hpp"

#include <cmath>

namespace dcss::ad {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

Tape& same_tape(Var a, Var b) {
  require(a.valid() && b.valid() && a.tape == b.tape,
          "operands must come from one tape");
  return *a.tape;
}

}  // namespace

int Tape::check(Var v) const {
  if (!v.valid() || v.tape != this ||
      v.id >= static_cast<int>(nodes_.size()))
    throw ValidationError("invalid tape variable");
  return v.id;
}

Var Tape::leaf(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Mat value, std::function<void(Tape&)> pull) {
  nodes_.push_back(Node{std::move(value), Mat(), std::move(pull)});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::val(int id) const { return nodes_[id].value; }

Mat& Tape::grad_slot(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accum(int id, const Mat& delta) { grad_slot(id) += delta; }

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  const int id = check(loss);
  require(nodes_[id].value.rows() == 1 && nodes_[id].value.cols() == 1,
          "backward target must be scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_slot(id)(0, 0) = 1.0;
  for (int i = id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.pull && n.grad.size() > 0) n.pull(*this);
  }
}

Var constant(Tape& t, Mat v) { return t.leaf(std::move(v)); }

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.cols() == B.rows(), "matmul shape mismatch");
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.push(A * B, [ia, ib, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    tp.accum(ia, g * tp.val(ib).transpose());
    tp.accum(ib, tp.val(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(t.value(a).transpose(), [ia, self](Tape& tp) {
    tp.accum(ia, tp.grad_slot(self).transpose());
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(t.value(a).rows() == t.value(b).rows() &&
              t.value(a).cols() == t.value(b).cols(),
          "add shape mismatch");
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.push(t.value(a) + t.value(b), [ia, ib, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    tp.accum(ia, g);
    tp.accum(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(t.value(a).rows() == t.value(b).rows() &&
              t.value(a).cols() == t.value(b).cols(),
          "sub shape mismatch");
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.push(t.value(a) - t.value(b), [ia, ib, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    tp.accum(ia, g);
    tp.accum(ib, -g);
  });
}

Var add_rowvec(Var a, Var v) {
  Tape& t = same_tape(a, v);
  const Mat& A = t.value(a);
  const Mat& V = t.value(v);
  require(V.rows() == 1 && V.cols() == A.cols(), "add_rowvec shape mismatch");
  Mat out = A;
  out.rowwise() += V.row(0);
  const int ia = a.id, iv = v.id, self = static_cast<int>(t.size());
  return t.push(std::move(out), [ia, iv, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    tp.accum(ia, g);
    tp.accum(iv, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(t.value(a) * s, [ia, s, self](Tape& tp) {
    tp.accum(ia, tp.grad_slot(self) * s);
  });
}

Var add_scalar(Var a, double c) {
  Tape& t = *a.tape;
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push((t.value(a).array() + c).matrix(),
                [ia, self](Tape& tp) { tp.accum(ia, tp.grad_slot(self)); });
}

Var cmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(t.value(a).rows() == t.value(b).rows() &&
              t.value(a).cols() == t.value(b).cols(),
          "cmul shape mismatch");
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.push(t.value(a).cwiseProduct(t.value(b)),
                [ia, ib, self](Tape& tp) {
                  const Mat& g = tp.grad_slot(self);
                  tp.accum(ia, g.cwiseProduct(tp.val(ib)));
                  tp.accum(ib, g.cwiseProduct(tp.val(ia)));
                });
}

Var cdiv(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(t.value(a).rows() == t.value(b).rows() &&
              t.value(a).cols() == t.value(b).cols(),
          "cdiv shape mismatch");
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.push(t.value(a).cwiseQuotient(t.value(b)),
                [ia, ib, self](Tape& tp) {
                  const Mat& g = tp.grad_slot(self);
                  const Mat& B = tp.val(ib);
                  tp.accum(ia, g.cwiseQuotient(B));
                  tp.accum(ib, -g.cwiseProduct(tp.val(ia))
                                    .cwiseQuotient(B.cwiseProduct(B)));
                });
}

Var cmul_const(Var a, const Mat& m) {
  Tape& t = *a.tape;
  require(t.value(a).rows() == m.rows() && t.value(a).cols() == m.cols(),
          "cmul_const shape mismatch");
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(t.value(a).cwiseProduct(m), [ia, m, self](Tape& tp) {
    tp.accum(ia, tp.grad_slot(self).cwiseProduct(m));
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(A.cwiseMax(0.0), [ia, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    const Mat& x = tp.val(ia);
    tp.accum(ia, (x.array() > 0.0).select(g, Mat::Zero(g.rows(), g.cols())));
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Mat y = t.value(a).unaryExpr(
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    const Mat& y2 = tp.val(self);
    tp.accum(ia, g.cwiseProduct(
                     y2.cwiseProduct((1.0 - y2.array()).matrix())));
  });
}

Var logv(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(t.value(a).array().log().matrix(), [ia, self](Tape& tp) {
    tp.accum(ia, tp.grad_slot(self).cwiseQuotient(tp.val(ia)));
  });
}

Var powc(Var a, double p) {
  Tape& t = *a.tape;
  Mat y = t.value(a).array().pow(p).matrix();
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, p, self](Tape& tp) {
    if (p == 0.0) return;
    const Mat& g = tp.grad_slot(self);
    const Mat dx = (p * tp.val(ia).array().pow(p - 1.0)).matrix();
    tp.accum(ia, g.cwiseProduct(dx));
  });
}

Var clampv(Var a, double lo, double hi) {
  Tape& t = *a.tape;
  Mat y = t.value(a).cwiseMax(lo).cwiseMin(hi);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, lo, hi, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    const Mat& x = tp.val(ia);
    Mat masked = g;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        if (x(i, j) < lo || x(i, j) > hi) masked(i, j) = 0.0;
    tp.accum(ia, masked);
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  Mat y(A.rows(), A.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const double m = A.row(i).maxCoeff();
    Eigen::RowVectorXd e = (A.row(i).array() - m).exp();
    y.row(i) = e / e.sum();
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    const Mat& y2 = tp.val(self);
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double dot = g.row(i).dot(y2.row(i));
      dx.row(i) = (y2.row(i).array() * (g.row(i).array() - dot)).matrix();
    }
    tp.accum(ia, dx);
  });
}

Var normalize_rows(Var a) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  Mat y(A.rows(), A.cols());
  Vec norms(A.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    norms(i) = A.row(i).norm();
    if (norms(i) == 0.0)
      throw DegenerateInputError("zero-norm row " + std::to_string(i) +
                                 " in normalize_rows");
    y.row(i) = A.row(i) / norms(i);
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, norms, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    const Mat& y2 = tp.val(self);
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const double dot = g.row(i).dot(y2.row(i));
      dx.row(i) = (g.row(i) - dot * y2.row(i)) / norms(i);
    }
    tp.accum(ia, dx);
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  Mat y(1, 1);
  y(0, 0) = t.value(a).sum();
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, self](Tape& tp) {
    const double g = tp.grad_slot(self)(0, 0);
    const Mat& x = tp.val(ia);
    tp.accum(ia, Mat::Constant(x.rows(), x.cols(), g));
  });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const double n = static_cast<double>(t.value(a).size());
  Mat y(1, 1);
  y(0, 0) = t.value(a).sum() / n;
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, n, self](Tape& tp) {
    const double g = tp.grad_slot(self)(0, 0) / n;
    const Mat& x = tp.val(ia);
    tp.accum(ia, Mat::Constant(x.rows(), x.cols(), g));
  });
}

Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  const double n = static_cast<double>(A.rows());
  Mat y = A.colwise().mean();
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, n, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);  // 1 x c
    const Mat& x = tp.val(ia);
    tp.accum(ia, (g / n).replicate(x.rows(), 1));
  });
}

Var rows_gather(Var a, const std::vector<int>& idx) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  Mat y(static_cast<Eigen::Index>(idx.size()), A.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < A.rows(), "rows_gather index out of range");
    y.row(static_cast<Eigen::Index>(i)) = A.row(idx[i]);
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, idx, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    Mat dx = Mat::Zero(tp.val(ia).rows(), tp.val(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accum(ia, dx);
  });
}

Var cols_slice(Var a, int c0, int n) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  require(c0 >= 0 && c0 + n <= A.cols(), "cols_slice out of range");
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(A.middleCols(c0, n), [ia, c0, n, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    Mat dx = Mat::Zero(tp.val(ia).rows(), tp.val(ia).cols());
    dx.middleCols(c0, n) = g;
    tp.accum(ia, dx);
  });
}

Var hcat(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  require(A.rows() == B.rows(), "hcat row mismatch");
  Mat y(A.rows(), A.cols() + B.cols());
  y << A, B;
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  const int ca = static_cast<int>(A.cols()), cb = static_cast<int>(B.cols());
  return t.push(std::move(y), [ia, ib, ca, cb, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    tp.accum(ia, g.leftCols(ca));
    tp.accum(ib, g.rightCols(cb));
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("vcat of nothing");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts[0]).cols();
  for (Var p : parts) {
    require(p.tape == &t, "vcat operands must share a tape");
    require(t.value(p).cols() == cols, "vcat col mismatch");
    rows += t.value(p).rows();
  }
  Mat y(rows, cols);
  std::vector<int> ids;
  std::vector<int> offsets;
  Eigen::Index at = 0;
  for (Var p : parts) {
    y.middleRows(at, t.value(p).rows()) = t.value(p);
    ids.push_back(p.id);
    offsets.push_back(static_cast<int>(at));
    at += t.value(p).rows();
  }
  const int self = static_cast<int>(t.size());
  return t.push(std::move(y), [ids, offsets, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Eigen::Index r = tp.val(ids[i]).rows();
      tp.accum(ids[i], g.middleRows(offsets[i], r));
    }
  });
}

Var flatten_pad(Var a, int q) {
  Tape& t = *a.tape;
  require(q >= 1, "flatten_pad length must be positive");
  const Mat& A = t.value(a);
  const int cols = static_cast<int>(A.cols());
  Mat y = Mat::Zero(q, 1);
  const int total = static_cast<int>(A.size());
  for (int pos = 0; pos < std::min(q, total); ++pos)
    y(pos, 0) = A(pos / cols, pos % cols);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, q, cols, total, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    Mat dx = Mat::Zero(tp.val(ia).rows(), tp.val(ia).cols());
    for (int pos = 0; pos < std::min(q, total); ++pos)
      dx(pos / cols, pos % cols) = g(pos, 0);
    tp.accum(ia, dx);
  });
}

Var reshape(Var a, int rows, int cols) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  require(rows * cols == A.size(), "reshape size mismatch");
  const int acols = static_cast<int>(A.cols());
  Mat y(rows, cols);
  for (int pos = 0; pos < rows * cols; ++pos)
    y(pos / cols, pos % cols) = A(pos / acols, pos % acols);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, rows, cols, acols, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    Mat dx(tp.val(ia).rows(), tp.val(ia).cols());
    for (int pos = 0; pos < rows * cols; ++pos)
      dx(pos / acols, pos % acols) = g(pos / cols, pos % cols);
    tp.accum(ia, dx);
  });
}

Var assemble_patches(Var a, int hp, int wp, int f) {
  Tape& t = *a.tape;
  const Mat& A = t.value(a);
  require(A.rows() == static_cast<Eigen::Index>(hp) * wp && A.cols() == f * f,
          "assemble_patches shape mismatch");
  Mat y(hp * f, wp * f);
  for (int n = 0; n < hp * wp; ++n) {
    const int pr = n / wp, pc = n % wp;
    for (int ir = 0; ir < f; ++ir)
      for (int ic = 0; ic < f; ++ic)
        y(pr * f + ir, pc * f + ic) = A(n, ir * f + ic);
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.push(std::move(y), [ia, hp, wp, f, self](Tape& tp) {
    const Mat& g = tp.grad_slot(self);
    Mat dx(static_cast<Eigen::Index>(hp) * wp, f * f);
    for (int n = 0; n < hp * wp; ++n) {
      const int pr = n / wp, pc = n % wp;
      for (int ir = 0; ir < f; ++ir)
        for (int ic = 0; ic < f; ++ic)
          dx(n, ir * f + ic) = g(pr * f + ir, pc * f + ic);
    }
    tp.accum(ia, dx);
  });
}

Var attention(Var q, Var k, Var v) {
  Tape& t = same_tape(q, k);
  const double dk = static_cast<double>(t.value(k).cols());
  Var s = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(dk));
  return matmul(softmax_rows(s), v);
}

Var linear(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  Var y = matmul(x, transpose(w));
  const Mat& B = t.value(b);
  require(B.cols() == 1, "linear bias must be a column");
  return add_rowvec(y, transpose(b));
}

}  // namespace dcss::ad
