#pragma once

#include "dcss/autodiff.hpp"
#include "dcss/common.hpp"
#include "dcss/detect.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace dcss::spg {

/// Selected tokens associated with one class, rows in ascending token-index
/// order.
struct ClassTokenSet {
  int class_id = 0;               // class column index in the task bank
  std::vector<int> token_indices;
  Mat tokens;                     // |T_k| x d
};

/// One independent prompt generator per class: a learnable input embedding
/// plus a two-affine MLP with a rectifier between.
struct PGenParams {
  int class_id = 0;
  int input_len = 256;  // Q_m
  int hidden = 128;
  int prompt_count = 6;  // m
  int prompt_dim = 32;   // d_p
  Mat embed;             // Q_m x 1
  Mat w1;                // hidden x Q_m
  Mat b1;                // hidden x 1
  Mat w2;                // (m * d_p) x hidden
  Mat b2;                // (m * d_p) x 1
};

/// Partitions the selected tokens by associated class; classes without any
/// association get empty sets. Result has exactly c_t entries, class ids
/// 0..c_t-1.
std::vector<ClassTokenSet> channel_select(const detect::TokenSelection& sel,
                                          int c_t);

/// Row-major flatten of the token rows, zero-padded or truncated to Q_m,
/// plus the class embedding. Empty token sets yield the embedding alone.
Vec pgen_input(const Mat& tokens, const Mat& embed);

/// relu between two affine maps; output reshaped row-major to m x d_p.
Mat pgen_forward(const Vec& z, const PGenParams& params);

PGenParams init_pgen(int class_id, int input_len, int hidden, int prompt_count,
                     int prompt_dim, std::uint64_t seed);

/// Tensor list in canonical order (embed, w1, b1, w2, b2) for the optimizer
/// and checkpoints.
std::vector<Mat*> pgen_tensors(PGenParams& params);

std::uint64_t pgen_checksum(const PGenParams& params);

// -- tape versions used inside training graphs --

struct PGenVars {
  ad::Var embed, w1, b1, w2, b2;
};

PGenVars make_pgen_vars(ad::Tape& t, const PGenParams& params, bool as_leaves);
std::vector<ad::Var> var_list(const PGenVars& vars);

/// tokens absent = empty token set.
ad::Var pgen_input_t(ad::Tape& t, std::optional<ad::Var> tokens,
                     ad::Var embed, int input_len);
ad::Var pgen_forward_t(ad::Tape& t, ad::Var z, const PGenVars& vars,
                       int prompt_count, int prompt_dim);

// -- checkpoint IO --

void save_pgens(const std::filesystem::path& path,
                const std::vector<PGenParams>& pgens);
std::vector<PGenParams> load_pgens(const std::filesystem::path& path);

}  // namespace dcss::spg
