#pragma once

#include "dcss/autodiff.hpp"
#include "dcss/common.hpp"

#include <filesystem>
#include <set>
#include <utility>
#include <vector>

namespace dcss::detect {

struct TokenSelection {
  std::vector<int> rows;  // tokens whose sparse row is non-empty, ascending
  std::vector<std::pair<int, int>> assoc;  // (token, argmax class), by token
  Mat selected;                            // |rows| x d, the selected tokens
};

/// Cosine of every token row against every class row: N x c_t in [-1, 1].
Mat affinity(const Mat& tokens, const Mat& class_embeds);

/// Entries >= tau survive, everything else becomes 0.
Mat sparsify(const Mat& affinities, double tau);

/// Rows with surviving entries; per-row argmax class, ties to the smaller
/// class index.
TokenSelection select_tokens(const Mat& sparse, const Mat& tokens);

/// Per class: mean of the strictly positive column entries, 0 when none.
Vec class_scores(const Mat& sparse);

std::set<int> detected_classes(const TokenSelection& sel);

void dump_csv(const std::filesystem::path& path, const Mat& m);

// -- tape versions used inside training graphs --

ad::Var affinity_t(ad::Tape& t, ad::Var tokens, ad::Var class_embeds);

/// Differentiable readout: the >= tau support is fixed from the current
/// values (like a relu mask), the kept entries keep their gradient.
ad::Var class_scores_t(ad::Tape& t, ad::Var affinities, double tau);

}  // namespace dcss::detect
