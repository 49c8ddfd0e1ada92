#pragma once

#include "dcss/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace dcss::ad {

// Reverse-mode tape over dense double matrices. Values are computed eagerly
// when an op is recorded; backward() runs the pulls in reverse order.
// Vectors are represented as n x 1 matrices throughout.

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  Var leaf(Mat value);

  const Mat& value(Var v) const { return nodes_[check(v)].value; }

  /// Gradient of the last backward() target w.r.t. v. Zero matrix if the
  /// node is not on any path to the target.
  Mat grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // -- internal, used by the op constructors --
  Var push(Mat value, std::function<void(Tape&)> pull);
  const Mat& val(int id) const;
  Mat& grad_slot(int id);
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }
  void accum(int id, const Mat& delta);

 private:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched during backward
    std::function<void(Tape&)> pull;
  };

  int check(Var v) const;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. All shape mismatches throw ValidationError.
// ---------------------------------------------------------------------------

Var constant(Tape& t, Mat v);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a (n x c) plus row vector v (1 x c) broadcast over rows.
Var add_rowvec(Var a, Var v);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
Var cmul(Var a, Var b);
Var cdiv(Var a, Var b);
/// Elementwise product with a constant mask/matrix.
Var cmul_const(Var a, const Mat& m);
Var relu(Var a);
Var sigmoid(Var a);
Var logv(Var a);
/// Elementwise x^p for x > 0; p == 0 yields ones with zero gradient.
Var powc(Var a, double p);
/// Clamp with zero gradient outside [lo, hi].
Var clampv(Var a, double lo, double hi);
Var softmax_rows(Var a);
/// L2-normalizes each row.
Var normalize_rows(Var a);
Var sum(Var a);
Var mean(Var a);
/// Column-wise mean: n x c -> 1 x c.
Var mean_rows(Var a);
Var rows_gather(Var a, const std::vector<int>& idx);
Var cols_slice(Var a, int c0, int n);
Var hcat(Var a, Var b);
Var vcat(const std::vector<Var>& parts);
/// Row-major flatten to a q x 1 column, zero-padded or truncated.
Var flatten_pad(Var a, int q);
/// Row-major reshape.
Var reshape(Var a, int rows, int cols);
/// Tokens laid out as an hp x wp grid, each row of a holding an f*f patch
/// of values (row-major); assembles the (hp*f) x (wp*f) logit image.
Var assemble_patches(Var a, int hp, int wp, int f);

/// softmax(q k^T / sqrt(dk)) v
Var attention(Var q, Var k, Var v);

/// x (n x d_in) times W^T (d_out x d_in) plus bias column b (d_out x 1),
/// broadcast: rows are samples.
Var linear(Var x, Var w, Var b);

}  // namespace dcss::ad
