#include "doctest.h"

#include "dcss/detect.hpp"

#include <climits>
#include <cmath>
#include <cstdint>

using namespace dcss;
using namespace dcss::detect;

namespace {

Mat random_mat(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = scale * rng.gaussian();
  return m;
}

// One-pass reference: thresholded cosines, row selection, argmax with
// smallest-index ties, all in a single fused loop.
struct BruteResult {
  Mat sparse;
  std::vector<int> rows;
  std::vector<std::pair<int, int>> assoc;
};

BruteResult brute_force(const Mat& V, const Mat& E, double tau) {
  BruteResult out;
  out.sparse = Mat::Zero(V.rows(), E.rows());
  for (int n = 0; n < V.rows(); ++n) {
    int best = -1;
    double best_val = 0.0;
    bool any = false;
    for (int k = 0; k < E.rows(); ++k) {
      double dot = 0, nv = 0, ne = 0;
      for (int j = 0; j < V.cols(); ++j) {
        dot += V(n, j) * E(k, j);
        nv += V(n, j) * V(n, j);
        ne += E(k, j) * E(k, j);
      }
      const double cos = dot / (std::sqrt(nv) * std::sqrt(ne));
      if (cos >= tau) {
        out.sparse(n, k) = cos;
        if (!any || cos > best_val) {
          any = true;
          best_val = cos;
          best = k;
        }
      }
    }
    if (any) {
      out.rows.push_back(n);
      out.assoc.emplace_back(n, best);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cosine of a row with itself is 1, with an orthogonal row 0") {
  Mat V(2, 4), E(2, 4);
  V.row(0) << 1, 0, 0, 0;
  V.row(1) << 0, 2, 0, 0;
  E.row(0) << 3, 0, 0, 0;
  E.row(1) << 0, 0, 5, 0;
  Mat S = affinity(V, E);
  CHECK(std::abs(S(0, 0) - 1.0) < 1e-12);
  CHECK(std::abs(S(0, 1)) < 1e-12);
  CHECK(std::abs(S(1, 0)) < 1e-12);
  CHECK(S.minCoeff() >= -1.0 - 1e-12);
  CHECK(S.maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("affinity matches a double-loop oracle") {
  Mat V = random_mat(5, 3, 1), E = random_mat(3, 3, 2);
  Mat S = affinity(V, E);
  for (int n = 0; n < 5; ++n)
    for (int k = 0; k < 3; ++k) {
      double dot = 0, nv = 0, ne = 0;
      for (int j = 0; j < 3; ++j) {
        dot += V(n, j) * E(k, j);
        nv += V(n, j) * V(n, j);
        ne += E(k, j) * E(k, j);
      }
      CHECK(std::abs(S(n, k) - dot / std::sqrt(nv * ne)) < 1e-9);
    }
}

TEST_CASE("zero-norm rows are reported with their index") {
  Mat V = random_mat(3, 4, 3);
  V.row(1).setZero();
  Mat E = random_mat(2, 4, 4);
  CHECK_THROWS_WITH_AS(affinity(V, E), "token row 1 has zero norm",
                       DegenerateInputError);
  CHECK_THROWS_AS(affinity(E, V), DegenerateInputError);
}

TEST_CASE("sparsify keeps the boundary and zeroes the rest") {
  Mat S(2, 2);
  S << 0.3, 0.29999, -0.5, 0.9;
  Mat sp = sparsify(S, 0.3);
  CHECK(sp(0, 0) == 0.3);  // >= tau, boundary inclusive
  CHECK(sp(0, 1) == 0.0);
  CHECK(sp(1, 0) == 0.0);
  CHECK(sp(1, 1) == 0.9);

  Mat low = Mat::Constant(4, 4, 0.1);
  CHECK(sparsify(low, 0.3).isZero());

  CHECK_THROWS_AS(sparsify(S, 0.0), ValidationError);
  CHECK_THROWS_AS(sparsify(S, 1.0), ValidationError);
}

TEST_CASE("empty and singleton selections") {
  Mat tokens = random_mat(8, 4, 5);
  Mat zero = Mat::Zero(8, 3);
  auto sel = select_tokens(zero, tokens);
  CHECK(sel.rows.empty());
  CHECK(sel.assoc.empty());
  CHECK(sel.selected.rows() == 0);
  CHECK(detected_classes(sel).empty());

  Mat one = Mat::Zero(8, 3);
  one(3, 2) = 0.7;
  sel = select_tokens(one, tokens);
  CHECK(sel.rows == std::vector<int>{3});
  CHECK(sel.assoc == std::vector<std::pair<int, int>>{{3, 2}});
  CHECK(sel.selected.row(0) == tokens.row(3));
}

TEST_CASE("argmax ties go to the smaller class index") {
  Mat tokens = random_mat(2, 4, 6);
  Mat sp = Mat::Zero(2, 4);
  sp(0, 1) = 0.6;
  sp(0, 3) = 0.6;  // tie between classes 1 and 3
  sp(1, 0) = 0.4;
  sp(1, 2) = 0.8;
  auto sel = select_tokens(sp, tokens);
  CHECK(sel.assoc[0] == std::pair<int, int>{0, 1});
  CHECK(sel.assoc[1] == std::pair<int, int>{1, 2});
}

TEST_CASE("class scores average the positive column entries") {
  Mat sp = Mat::Zero(3, 2);
  sp(0, 0) = 0.4;
  sp(1, 0) = 0.6;
  Vec r = class_scores(sp);
  CHECK(std::abs(r(0) - 0.5) < 1e-12);
  CHECK(r(1) == 0.0);  // empty column
}

TEST_CASE("class scores match a loop oracle and stay within bounds") {
  const double tau = 0.25;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    Mat V = random_mat(12, 6, seed), E = random_mat(4, 6, seed + 100);
    Mat sp = sparsify(affinity(V, E), tau);
    Vec r = class_scores(sp);
    for (int k = 0; k < 4; ++k) {
      double sum = 0;
      int count = 0;
      double colmax = 0;
      for (int n = 0; n < 12; ++n)
        if (sp(n, k) > 0) {
          sum += sp(n, k);
          ++count;
          colmax = std::max(colmax, sp(n, k));
        }
      if (count == 0) {
        CHECK(r(k) == 0.0);
      } else {
        CHECK(std::abs(r(k) - sum / count) < 1e-12);
        CHECK(r(k) >= tau);
        CHECK(r(k) <= colmax + 1e-12);
      }
    }
  }
}

TEST_CASE("detected classes are exactly the associated ones") {
  TokenSelection sel;
  sel.assoc = {{1, 0}, {4, 0}, {7, 2}};
  CHECK(detected_classes(sel) == std::set<int>{0, 2});
}

TEST_CASE("pipeline equals the fused brute force, ties included") {
  for (std::uint64_t seed = 30; seed < 50; ++seed) {
    Rng rng(seed);
    const int n = rng.uniform_int(2, 24), c = rng.uniform_int(1, 6), d = 8;
    Mat V = random_mat(n, d, seed * 7 + 1);
    Mat E = random_mat(c, d, seed * 7 + 2);
    if (c >= 2) E.row(c - 1) = E.row(0) * 2.0;  // duplicate direction: ties

    const double tau = 0.2;
    Mat sp = sparsify(affinity(V, E), tau);
    auto sel = select_tokens(sp, V);
    auto brute = brute_force(V, E, tau);

    CHECK((sp - brute.sparse).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(sel.rows == brute.rows);
    CHECK(sel.assoc == brute.assoc);

    for (const auto& [row, k] : sel.assoc)
      for (int j = 0; j < c; ++j) CHECK(sp(row, k) >= sp(row, j));
  }
}

TEST_CASE("raising tau never grows the selection") {
  Mat V = random_mat(32, 8, 71), E = random_mat(5, 8, 72);
  Mat S = affinity(V, E);
  std::size_t prev_rows = SIZE_MAX;
  int prev_nonzero = INT_MAX;
  for (double tau : {0.1, 0.2, 0.3, 0.5}) {
    Mat sp = sparsify(S, tau);
    const int nonzero = static_cast<int>((sp.array() != 0.0).count());
    auto sel = select_tokens(sp, V);
    CHECK(sel.rows.size() <= prev_rows);
    CHECK(nonzero <= prev_nonzero);
    prev_rows = sel.rows.size();
    prev_nonzero = nonzero;
  }
}

TEST_CASE("tape affinity and scores agree with the plain path") {
  Mat V = random_mat(10, 6, 80), E = random_mat(3, 6, 81);
  const double tau = 0.2;

  ad::Tape t;
  ad::Var s = affinity_t(t, t.leaf(V), t.leaf(E));
  CHECK((t.value(s) - affinity(V, E)).cwiseAbs().maxCoeff() < 1e-12);

  ad::Var r = class_scores_t(t, s, tau);
  Vec plain = class_scores(sparsify(affinity(V, E), tau));
  CHECK((t.value(r).transpose() - plain).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tape scores backpropagate through the affinity") {
  Mat V = random_mat(6, 4, 90), E = random_mat(2, 4, 91);
  const double tau = 0.15;

  auto eval = [&](const Mat& v_in, ad::Tape& t, ad::Var* v_leaf) {
    ad::Var v = t.leaf(v_in);
    if (v_leaf) *v_leaf = v;
    return ad::sum(class_scores_t(t, affinity_t(t, v, ad::constant(t, E)),
                                  tau));
  };

  ad::Tape t;
  ad::Var leaf;
  ad::Var loss = eval(V, t, &leaf);
  t.backward(loss);
  Mat analytic = t.grad(leaf);
  CHECK(analytic.cwiseAbs().maxCoeff() > 0.0);

  const double eps = 1e-5;
  for (int i = 0; i < V.rows(); ++i)
    for (int j = 0; j < V.cols(); ++j) {
      Mat vp = V, vm = V;
      vp(i, j) += eps;
      vm(i, j) -= eps;
      ad::Tape tp, tm;
      const double numeric = (tp.value(eval(vp, tp, nullptr))(0, 0) -
                              tm.value(eval(vm, tm, nullptr))(0, 0)) /
                             (2 * eps);
      const double denom =
          std::max({std::abs(analytic(i, j)), std::abs(numeric), 1e-8});
      CHECK(std::abs(analytic(i, j) - numeric) / denom < 1e-3);
    }
}
