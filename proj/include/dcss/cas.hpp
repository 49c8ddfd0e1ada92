#pragma once

#include "dcss/autodiff.hpp"
#include "dcss/backbone_fusion.hpp"
#include "dcss/common.hpp"

#include <filesystem>
#include <utility>
#include <vector>

namespace dcss::cas {

struct MaskPrediction {
  Mat mask;                // H x W foreground probabilities
  double confidence = 0.0;  // in [0, 1]
};

/// Class-agnostic promptable decoder: prompts attend the token grid, tokens
/// attend back, and each token emits the logits of its own pixel patch.
/// Pretrained once, then frozen for the whole continual run.
struct SegmenterParams {
  model::ModelConfig config;
  int prompt_count = 6;  // m
  int prompt_dim = 32;   // d_p
  Mat prompt_proj_w;     // d x d_p
  Mat prompt_proj_b;     // d x 1
  Mat pos_grid;          // N x d
  model::AttnLayer prompt_attn;  // prompt queries over image tokens
  model::AttnLayer token_attn;   // token queries over updated prompts
  Mat mask_w;   // d x d, projects the lead prompt into a mask embedding
  Mat mask_b;   // d x 1
  Mat logit_w;  // patch^2 x d
  Mat logit_b;  // patch^2 x 1
  Mat conf_w;   // 1 x d
  Mat conf_b;   // 1 x 1
  bool frozen = false;
};

std::vector<Mat*> seg_tensors(SegmenterParams& params);
std::uint64_t seg_checksum(const SegmenterParams& params);

SegmenterParams init_segmenter(const model::ModelConfig& config,
                               int prompt_count, int prompt_dim,
                               std::uint64_t seed);

// -- tape builder shared by pretraining and inference --

struct SegVars {
  ad::Var prompt_proj_w, prompt_proj_b, pos_grid;
  model::AttnVars prompt_attn, token_attn;
  ad::Var mask_w, mask_b, logit_w, logit_b, conf_w, conf_b;
};

/// as_leaves on frozen params is a state error: the decoder never trains
/// again once frozen.
SegVars make_seg_vars(ad::Tape& t, const SegmenterParams& params,
                      bool as_leaves);
std::vector<ad::Var> var_list(const SegVars& vars);

struct SegOutput {
  ad::Var mask;        // H x W probabilities
  ad::Var confidence;  // 1 x 1
};

SegOutput segment_t(ad::Tape& t, const SegmenterParams& shape,
                    const SegVars& vars, ad::Var tokens, ad::Var prompts);

/// Inference wrapper over the same graph builder. Requires frozen params.
MaskPrediction segment(const SegmenterParams& params, const Mat& tokens,
                       const Mat& prompts);

// -- pretraining on class-agnostic pairs --

/// One pretraining pair: frozen-backbone tokens of an image, a spatial
/// prompt, and the binary target mask of the prompted object.
struct SegTrainPair {
  Mat tokens;  // N x d
  Mat prompt;  // m x d_p
  Mat mask;    // H x W binary
};

struct SegPretrainConfig {
  int epochs = 60;
  int batch = 8;
  double lr = 5e-3;
  double weight_decay = 0.01;
  double conf_weight = 0.5;
  int holdout_every = 10;  // every k-th pair goes to the held-out split
  std::uint64_t seed = 11;
};

struct SegPretrainResult {
  SegmenterParams params;  // frozen
  double holdout_iou = 0.0;
  double final_loss = 0.0;
};

/// Needs at least 100 pairs; trains, measures held-out IoU, freezes.
SegPretrainResult pretrain_segmenter(const SegmenterParams& init,
                                     const std::vector<SegTrainPair>& data,
                                     const SegPretrainConfig& config);

// -- prompt synthesis and mask utilities --

/// Multi-frequency sin/cos encoding of a pixel location, the shared basis
/// between token positions and spatial prompts. dim must be divisible by 4.
Vec fourier_point(double y, double x, int H, int W, int dim);

/// Per-token positional encoding of the patch centers, N x d.
Mat fourier_positions(const model::ModelConfig& config);

/// Spatial prompt for a mask: positional encodings of its centroid and
/// bounding box in the token basis, plus a size row. Empty masks have no
/// centroid.
Mat centroid_prompt(const Mat& mask, int prompt_count, int prompt_dim);

Mat binarize(const Mat& mask, double threshold);

/// Intersection over union of two binary masks; two empty masks agree (1).
double mask_iou(const Mat& a, const Mat& b);

/// Pixel-wise winner by confidence among binarized masks; ties take the
/// smaller class id, uncovered pixels stay background. rows x cols fixes the
/// output size so an empty prediction list still yields a map.
LabelMap aggregate_masks(
    const std::vector<std::pair<int, MaskPrediction>>& preds,
    double binarize_threshold, int rows, int cols);

// -- persistence --

void save_segmenter(const std::filesystem::path& path,
                    const SegmenterParams& params);
SegmenterParams load_segmenter(const std::filesystem::path& path);

/// Labels-only variant of the dataset sample layout (channel count 0).
void save_label_map(const std::filesystem::path& path, const LabelMap& map);
LabelMap load_label_map(const std::filesystem::path& path);
void label_map_csv(const std::filesystem::path& path, const LabelMap& map);

}  // namespace dcss::cas
