#pragma once

#include "dcss/autodiff.hpp"
#include "dcss/common.hpp"
#include "dcss/lora.hpp"
#include "dcss/synth_data.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <utility>
#include <vector>

namespace dcss::model {

struct ModelConfig {
  int H = 32;
  int W = 32;
  int C = 3;
  int patch = 4;
  int d = 32;
  int heads = 2;

  int grid_h() const { return H / patch; }
  int grid_w() const { return W / patch; }
  int num_tokens() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * C; }
};

void validate(const ModelConfig& config);

// All parameter tensors are Mat (biases are column matrices) so one binding
// path serves the optimizer, checkpoints, and checksums.
struct AttnLayer {
  Mat wq, wk, wv, wo;  // d x d
  Mat bq, bk, bv, bo;  // d x 1
};

struct BackboneParams {
  ModelConfig config;
  Mat patch_embed_w;  // d x patch_dim
  Mat patch_embed_b;  // d x 1
  Mat pos_embed;      // N x d
  AttnLayer sa1, sa2;
  Mat cls_query;  // 1 x d
  // pretext heads; unused after pretraining but kept in the fixture
  Mat fg_head_w;   // 1 x d
  Mat fg_head_b;   // 1 x 1
  Mat cls_head_w;  // 1 x d
  Mat cls_head_b;  // 1 x 1
};

struct FusionParams {
  AttnLayer text_to_image;  // text queries attend image tokens
  AttnLayer image_to_text;  // image queries attend class embeddings
};

struct VisualTokens {
  Mat tokens;  // N x d
  Vec cls;     // d
};

// -- tape-side parameter handles ------------------------------------------
// The same graph builders serve pretraining (parameters as leaves), adapter
// training (parameters as constants, adapters as leaves), and inference.

struct AttnVars {
  ad::Var wq, wk, wv, wo, bq, bk, bv, bo;
};

struct BackboneVars {
  ad::Var patch_embed_w, patch_embed_b, pos_embed;
  AttnVars sa1, sa2;
  ad::Var cls_query, fg_head_w, fg_head_b, cls_head_w, cls_head_b;
};

struct FusionVars {
  AttnVars text_to_image, image_to_text;
};

/// Tensor list in the canonical binding order shared by make_*_vars,
/// checkpoints, and the optimizer.
std::vector<Mat*> backbone_tensors(BackboneParams& params);
std::vector<Mat*> fusion_tensors(FusionParams& params);

BackboneVars make_backbone_vars(ad::Tape& t, const BackboneParams& params,
                                bool as_leaves);
FusionVars make_fusion_vars(ad::Tape& t, const FusionParams& params,
                            bool as_leaves);

/// Vars in the same order as the corresponding *_tensors list.
std::vector<ad::Var> var_list(const BackboneVars& vars);
std::vector<ad::Var> var_list(const FusionVars& vars);

struct AdapterVars {
  ad::Var A, B;
  double scaling = 0.0;
};

/// (layer, projection) -> on-tape adapter factors.
struct SiteVars {
  std::map<std::pair<int, int>, AdapterVars> sites;

  const AdapterVars* find(int layer, int projection) const {
    const auto it = sites.find({layer, projection});
    return it == sites.end() ? nullptr : &it->second;
  }
};

/// Adapters of the view's task placed on the tape as constants.
SiteVars constant_sites(ad::Tape& t, const lora::AdapterView& view);

struct TokensVar {
  ad::Var tokens;  // N x d
  ad::Var cls;     // 1 x d
};

struct FusedVar {
  ad::Var v;  // N x d
  ad::Var e;  // c_t x d
};

/// Rows = patches in grid row-major order, each row the patch pixels
/// (y, x, channel) row-major.
Mat patchify(const ModelConfig& config, const std::vector<Mat>& image);

/// x W^T + b with the optional low-rank delta.
ad::Var project(ad::Tape& t, ad::Var x, ad::Var w, ad::Var b,
                const AdapterVars* adapter);

ad::Var multihead(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads);

TokensVar encode_image_t(ad::Tape& t, const ModelConfig& config,
                         const BackboneVars& params, const Mat& patches,
                         const SiteVars& adapters);

FusedVar cross_attend_t(ad::Tape& t, const FusionVars& params, ad::Var tokens,
                        ad::Var class_embeds, const SiteVars& adapters,
                        int heads);

// -- plain wrappers (build a throwaway tape, return values) --

VisualTokens encode_image(const BackboneParams& params,
                          const std::vector<Mat>& image,
                          const lora::AdapterView& view);

std::pair<Mat, Mat> cross_attend(const ModelConfig& config,
                                 const FusionParams& params,
                                 const VisualTokens& tokens,
                                 const Mat& class_embeds,
                                 const lora::AdapterView& view);

// -- init, pretraining, fixture IO --

BackboneParams init_backbone(const ModelConfig& config, std::uint64_t seed);
FusionParams init_fusion(const ModelConfig& config, std::uint64_t seed);

struct PretrainConfig {
  int epochs = 30;
  int batch = 8;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 5;
};

/// Trains the backbone on the class-agnostic pretext (per-patch foreground
/// fraction, whole-image foreground fraction) and returns the final
/// epoch-mean loss.
double pretrain_backbone(BackboneParams& params,
                         const std::vector<synth::SegSample>& data,
                         const PretrainConfig& config);

std::uint64_t frozen_checksum(const BackboneParams& backbone,
                              const FusionParams& fusion);

void save_frozen(const std::filesystem::path& path,
                 const BackboneParams& backbone, const FusionParams& fusion);
void load_frozen(const std::filesystem::path& path, BackboneParams& backbone,
                 FusionParams& fusion);

}  // namespace dcss::model
