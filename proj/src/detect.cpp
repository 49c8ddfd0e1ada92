#include "dcss/detect.hpp"

#include <fstream>

namespace dcss::detect {

namespace {

Mat unit_rows(const Mat& m, const char* what) {
  Mat out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0)
      throw DegenerateInputError(std::string(what) + " row " +
                                 std::to_string(i) + " has zero norm");
    out.row(i) = m.row(i) / n;
  }
  return out;
}

}  // namespace

Mat affinity(const Mat& tokens, const Mat& class_embeds) {
  if (tokens.cols() != class_embeds.cols())
    throw ValidationError("token and class embedding dims differ");
  return unit_rows(tokens, "token") * unit_rows(class_embeds, "class").transpose();
}

Mat sparsify(const Mat& affinities, double tau) {
  if (tau <= 0.0 || tau >= 1.0)
    throw ValidationError("tau must lie in (0, 1)");
  Mat out = affinities;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (out(i, j) < tau) out(i, j) = 0.0;
  return out;
}

TokenSelection select_tokens(const Mat& sparse, const Mat& tokens) {
  if (sparse.rows() != tokens.rows())
    throw ValidationError("sparse affinity rows do not match token count");
  TokenSelection sel;
  for (Eigen::Index n = 0; n < sparse.rows(); ++n) {
    bool any = false;
    int best = -1;
    for (Eigen::Index k = 0; k < sparse.cols(); ++k) {
      if (sparse(n, k) == 0.0) continue;
      any = true;
      if (best < 0 || sparse(n, k) > sparse(n, best)) best = static_cast<int>(k);
    }
    if (!any) continue;
    sel.rows.push_back(static_cast<int>(n));
    sel.assoc.emplace_back(static_cast<int>(n), best);
  }
  sel.selected.resize(static_cast<Eigen::Index>(sel.rows.size()),
                      tokens.cols());
  for (std::size_t i = 0; i < sel.rows.size(); ++i)
    sel.selected.row(static_cast<Eigen::Index>(i)) = tokens.row(sel.rows[i]);
  return sel;
}

Vec class_scores(const Mat& sparse) {
  Vec r = Vec::Zero(sparse.cols());
  for (Eigen::Index k = 0; k < sparse.cols(); ++k) {
    double sum = 0.0;
    int count = 0;
    for (Eigen::Index n = 0; n < sparse.rows(); ++n)
      if (sparse(n, k) > 0.0) {
        sum += sparse(n, k);
        ++count;
      }
    if (count > 0) r(k) = sum / count;
  }
  return r;
}

std::set<int> detected_classes(const TokenSelection& sel) {
  std::set<int> out;
  for (const auto& [n, k] : sel.assoc) out.insert(k);
  return out;
}

void dump_csv(const std::filesystem::path& path, const Mat& m) {
  std::ofstream out(path);
  if (!out) throw StateError("cannot write " + path.string());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ",";
      out << m(i, j);
    }
    out << "\n";
  }
}

ad::Var affinity_t(ad::Tape& t, ad::Var tokens, ad::Var class_embeds) {
  if (t.value(tokens).cols() != t.value(class_embeds).cols())
    throw ValidationError("token and class embedding dims differ");
  return ad::matmul(ad::normalize_rows(tokens),
                    ad::transpose(ad::normalize_rows(class_embeds)));
}

ad::Var class_scores_t(ad::Tape& t, ad::Var affinities, double tau) {
  if (tau <= 0.0 || tau >= 1.0)
    throw ValidationError("tau must lie in (0, 1)");
  const Mat& s = t.value(affinities);
  Mat mask = Mat::Zero(s.rows(), s.cols());
  for (Eigen::Index k = 0; k < s.cols(); ++k) {
    int count = 0;
    for (Eigen::Index n = 0; n < s.rows(); ++n)
      if (s(n, k) >= tau) ++count;
    if (count == 0) continue;
    for (Eigen::Index n = 0; n < s.rows(); ++n)
      if (s(n, k) >= tau) mask(n, k) = 1.0 / count;
  }
  Mat ones = Mat::Ones(1, s.rows());
  return ad::matmul(ad::constant(t, ones), ad::cmul_const(affinities, mask));
}

}  // namespace dcss::detect
