#include "dcss/cas.hpp"

#include "dcss/binio.hpp"
#include "dcss/losses.hpp"
#include "dcss/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace dcss::cas {

namespace {

void append_attn(std::vector<Mat*>& out, model::AttnLayer& layer) {
  out.insert(out.end(), {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.bq,
                         &layer.bk, &layer.bv, &layer.bo});
}

model::AttnVars put_attn(ad::Tape& t, const model::AttnLayer& layer,
                         bool as_leaves) {
  const auto put = [&](const Mat& m) {
    return as_leaves ? t.leaf(m) : ad::constant(t, m);
  };
  return {put(layer.wq), put(layer.wk), put(layer.wv), put(layer.wo),
          put(layer.bq), put(layer.bk), put(layer.bv), put(layer.bo)};
}

// Identity start: prompt/token affinities then reduce to dot products in the
// shared positional basis, so spatial selection works before any training.
model::AttnLayer identity_attn(int d) {
  model::AttnLayer layer;
  layer.wq = Mat::Identity(d, d);
  layer.wk = Mat::Identity(d, d);
  layer.wv = Mat::Identity(d, d);
  layer.wo = Mat::Identity(d, d);
  layer.bq = Mat::Zero(d, 1);
  layer.bk = Mat::Zero(d, 1);
  layer.bv = Mat::Zero(d, 1);
  layer.bo = Mat::Zero(d, 1);
  return layer;
}

}  // namespace

std::vector<Mat*> seg_tensors(SegmenterParams& params) {
  std::vector<Mat*> out{&params.prompt_proj_w, &params.prompt_proj_b,
                        &params.pos_grid};
  append_attn(out, params.prompt_attn);
  append_attn(out, params.token_attn);
  out.insert(out.end(), {&params.mask_w, &params.mask_b, &params.logit_w,
                         &params.logit_b, &params.conf_w, &params.conf_b});
  return out;
}

std::uint64_t seg_checksum(const SegmenterParams& params) {
  ChecksumAccum acc;
  for (const Mat* m : seg_tensors(const_cast<SegmenterParams&>(params)))
    acc.add(*m);
  return acc.value();
}

SegmenterParams init_segmenter(const model::ModelConfig& config,
                               int prompt_count, int prompt_dim,
                               std::uint64_t seed) {
  model::validate(config);
  if (prompt_count < 1 || prompt_dim < 1) {
    throw ValidationError("init_segmenter: prompt shape must be positive");
  }
  Rng rng(mix_seed(seed, 0xca5));
  SegmenterParams p;
  p.config = config;
  p.prompt_count = prompt_count;
  p.prompt_dim = prompt_dim;
  const int d = config.d;
  p.prompt_proj_w = prompt_dim == d
                        ? Mat(Mat::Identity(d, d))
                        : gaussian_matrix(d, prompt_dim,
                                          1.0 / std::sqrt(prompt_dim), rng);
  p.prompt_proj_b = Mat::Zero(d, 1);
  // The fixed sinusoidal grid carries location; this learned term starts as
  // a zero refinement on top of it.
  p.pos_grid = Mat::Zero(config.num_tokens(), d);
  p.prompt_attn = identity_attn(d);
  p.token_attn = identity_attn(d);
  p.mask_w = Mat::Identity(d, d);
  p.mask_b = Mat::Zero(d, 1);
  const int f2 = config.patch * config.patch;
  p.logit_w = gaussian_matrix(f2, d, 0.3, rng);
  p.logit_b = Mat::Zero(f2, 1);
  p.conf_w = gaussian_matrix(1, d, 0.3, rng);
  p.conf_b = Mat::Zero(1, 1);
  return p;
}

SegVars make_seg_vars(ad::Tape& t, const SegmenterParams& params,
                      bool as_leaves) {
  if (as_leaves && params.frozen) {
    throw StateError("segmenter is frozen; its parameters cannot be trained");
  }
  const auto put = [&](const Mat& m) {
    return as_leaves ? t.leaf(m) : ad::constant(t, m);
  };
  SegVars v;
  v.prompt_proj_w = put(params.prompt_proj_w);
  v.prompt_proj_b = put(params.prompt_proj_b);
  v.pos_grid = put(params.pos_grid);
  v.prompt_attn = put_attn(t, params.prompt_attn, as_leaves);
  v.token_attn = put_attn(t, params.token_attn, as_leaves);
  v.mask_w = put(params.mask_w);
  v.mask_b = put(params.mask_b);
  v.logit_w = put(params.logit_w);
  v.logit_b = put(params.logit_b);
  v.conf_w = put(params.conf_w);
  v.conf_b = put(params.conf_b);
  return v;
}

std::vector<ad::Var> var_list(const SegVars& v) {
  const auto attn = [](const model::AttnVars& a) {
    return std::vector<ad::Var>{a.wq, a.wk, a.wv, a.wo,
                                a.bq, a.bk, a.bv, a.bo};
  };
  std::vector<ad::Var> out{v.prompt_proj_w, v.prompt_proj_b, v.pos_grid};
  for (ad::Var x : attn(v.prompt_attn)) out.push_back(x);
  for (ad::Var x : attn(v.token_attn)) out.push_back(x);
  out.insert(out.end(), {v.mask_w, v.mask_b, v.logit_w, v.logit_b, v.conf_w,
                         v.conf_b});
  return out;
}

SegOutput segment_t(ad::Tape& t, const SegmenterParams& shape,
                    const SegVars& vars, ad::Var tokens, ad::Var prompts) {
  const auto n = t.value(tokens).rows();
  const auto d = t.value(tokens).cols();
  if (n != shape.config.num_tokens() || d != shape.config.d) {
    throw ValidationError("segment: token grid does not match the decoder");
  }
  if (t.value(prompts).rows() != shape.prompt_count ||
      t.value(prompts).cols() != shape.prompt_dim) {
    throw ValidationError("segment: prompt shape does not match the decoder");
  }
  ad::Var p0 = ad::linear(prompts, vars.prompt_proj_w, vars.prompt_proj_b);
  ad::Var xp = ad::add(ad::add(tokens, vars.pos_grid),
                       ad::constant(t, fourier_positions(shape.config)));

  const auto& pa = vars.prompt_attn;
  ad::Var a1 = ad::attention(model::project(t, p0, pa.wq, pa.bq, nullptr),
                             model::project(t, xp, pa.wk, pa.bk, nullptr),
                             model::project(t, xp, pa.wv, pa.bv, nullptr));
  ad::Var p1 = ad::add(p0, model::project(t, a1, pa.wo, pa.bo, nullptr));

  const auto& ta = vars.token_attn;
  ad::Var a2 = ad::attention(model::project(t, xp, ta.wq, ta.bq, nullptr),
                             model::project(t, p1, ta.wk, ta.bk, nullptr),
                             model::project(t, p1, ta.wv, ta.bv, nullptr));
  ad::Var x1 = ad::add(xp, model::project(t, a2, ta.wo, ta.bo, nullptr));

  // Each token scores its membership by a dot product against a mask
  // embedding built from the lead prompt row; attention alone cannot express
  // membership because its weights over the prompts always sum to one. The
  // linear head then shapes the pixels inside the patch.
  ad::Var mask_embed =
      ad::linear(ad::rows_gather(p1, {0}), vars.mask_w, vars.mask_b);
  ad::Var member = ad::scale(ad::matmul(x1, ad::transpose(mask_embed)),
                             1.0 / std::sqrt(static_cast<double>(d)));
  const int f2 = shape.config.patch * shape.config.patch;
  ad::Var patch_logits =
      ad::add(ad::linear(x1, vars.logit_w, vars.logit_b),
              ad::matmul(member, ad::constant(t, Mat::Ones(1, f2))));
  ad::Var logits =
      ad::assemble_patches(patch_logits, shape.config.grid_h(),
                           shape.config.grid_w(), shape.config.patch);
  SegOutput out;
  out.mask = ad::sigmoid(logits);
  out.confidence =
      ad::sigmoid(ad::linear(ad::mean_rows(p1), vars.conf_w, vars.conf_b));
  return out;
}

MaskPrediction segment(const SegmenterParams& params, const Mat& tokens,
                       const Mat& prompts) {
  if (!params.frozen) {
    throw StateError("segmenter must be frozen before inference");
  }
  ad::Tape t;
  const SegVars vars = make_seg_vars(t, params, false);
  const SegOutput out = segment_t(t, params, vars, ad::constant(t, tokens),
                                  ad::constant(t, prompts));
  return {t.value(out.mask), t.value(out.confidence)(0, 0)};
}

SegPretrainResult pretrain_segmenter(const SegmenterParams& init,
                                     const std::vector<SegTrainPair>& data,
                                     const SegPretrainConfig& config) {
  if (init.frozen) {
    throw StateError("segmenter is frozen; it cannot be pretrained again");
  }
  if (data.size() < 100) {
    throw ValidationError("pretrain_segmenter: need at least 100 pairs, got " +
                          std::to_string(data.size()));
  }
  if (config.holdout_every < 2) {
    throw ValidationError("pretrain_segmenter: holdout_every must be >= 2");
  }
  std::vector<int> train_idx, hold_idx;
  for (int i = 0; i < static_cast<int>(data.size()); ++i) {
    if ((i + 1) % config.holdout_every == 0)
      hold_idx.push_back(i);
    else
      train_idx.push_back(i);
  }

  SegPretrainResult result;
  result.params = init;
  SegmenterParams& params = result.params;
  opt::AdamW optimizer(config.weight_decay);
  const int batches_per_epoch =
      (static_cast<int>(train_idx.size()) + config.batch - 1) / config.batch;
  const int total_steps = config.epochs * batches_per_epoch;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, 0xe0 + epoch));
    for (int i = static_cast<int>(train_idx.size()) - 1; i > 0; --i)
      std::swap(train_idx[i], train_idx[shuffle_rng.uniform_int(0, i)]);

    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * config.batch;
      const int hi = std::min<int>(lo + config.batch,
                                   static_cast<int>(train_idx.size()));
      std::vector<Mat> grads;
      for (int s = lo; s < hi; ++s) {
        const SegTrainPair& pair = data[static_cast<std::size_t>(train_idx[s])];
        ad::Tape t;
        const SegVars vars = make_seg_vars(t, params, true);
        const SegOutput out =
            segment_t(t, params, vars, ad::constant(t, pair.tokens),
                      ad::constant(t, pair.prompt));
        // Confidence learns to predict the quality of the current mask, so
        // the target is this step's own binarized IoU.
        const double iou =
            mask_iou(binarize(t.value(out.mask), 0.5), pair.mask);
        ad::Var conf_err =
            ad::add_scalar(out.confidence, -iou);
        ad::Var total =
            ad::add(loss::seg_loss_t(t, out.mask, pair.mask),
                    ad::scale(ad::cmul(conf_err, conf_err), config.conf_weight));
        epoch_loss += t.value(total)(0, 0);
        t.backward(total);
        const auto vl = var_list(vars);
        if (grads.empty()) grads.assign(vl.size(), Mat());
        const double w = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t k = 0; k < vl.size(); ++k) {
          const Mat g = t.grad(vl[k]) * w;
          grads[k] = grads[k].size() == 0 ? g : Mat(grads[k] + g);
        }
      }
      const double lr =
          opt::poly_lr(config.lr, optimizer.steps_taken(), total_steps);
      optimizer.step(seg_tensors(params), grads, lr);
    }
    result.final_loss = epoch_loss / static_cast<double>(train_idx.size());
  }

  params.frozen = true;
  double iou_sum = 0.0;
  for (const int i : hold_idx) {
    const SegTrainPair& pair = data[static_cast<std::size_t>(i)];
    const MaskPrediction pred = segment(params, pair.tokens, pair.prompt);
    iou_sum += mask_iou(binarize(pred.mask, 0.5), pair.mask);
  }
  result.holdout_iou = iou_sum / static_cast<double>(hold_idx.size());
  return result;
}

Vec fourier_point(double y, double x, int H, int W, int dim) {
  if (dim < 4 || dim % 4 != 0) {
    throw ValidationError("fourier_point: dimension must be a multiple of 4");
  }
  constexpr double pi = 3.14159265358979323846;
  const double xn = (x + 0.5) / W, yn = (y + 0.5) / H;
  Vec out(dim);
  const int bands = dim / 4;
  // Frequencies cap at 8*pi: the implied matching kernel then spans a few
  // pixels, so a prompt point still resonates with the nearest patch center.
  for (int i = 0; i < bands; ++i) {
    const double omega = pi * static_cast<double>(1 << (i % 4));
    out(4 * i + 0) = f32(std::sin(omega * xn));
    out(4 * i + 1) = f32(std::cos(omega * xn));
    out(4 * i + 2) = f32(std::sin(omega * yn));
    out(4 * i + 3) = f32(std::cos(omega * yn));
  }
  return out;
}

Mat fourier_positions(const model::ModelConfig& config) {
  Mat grid(config.num_tokens(), config.d);
  for (int gy = 0; gy < config.grid_h(); ++gy)
    for (int gx = 0; gx < config.grid_w(); ++gx) {
      const double cy = gy * config.patch + (config.patch - 1) * 0.5;
      const double cx = gx * config.patch + (config.patch - 1) * 0.5;
      grid.row(gy * config.grid_w() + gx) =
          fourier_point(cy, cx, config.H, config.W, config.d).transpose();
    }
  return grid;
}

Mat centroid_prompt(const Mat& mask, int prompt_count, int prompt_dim) {
  if (prompt_count < 1 || prompt_dim < 4 || prompt_dim % 4 != 0) {
    throw ValidationError(
        "centroid_prompt: need at least one prompt row and a dimension "
        "divisible by 4");
  }
  const auto h = mask.rows(), w = mask.cols();
  double count = 0, sx = 0, sy = 0;
  Eigen::Index x0 = w, x1 = -1, y0 = h, y1 = -1;
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      if (mask(y, x) < 0.5) continue;
      count += 1;
      sx += static_cast<double>(x);
      sy += static_cast<double>(y);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (count == 0) {
    throw DegenerateInputError("centroid_prompt: empty mask has no centroid");
  }
  const int H = static_cast<int>(h), W = static_cast<int>(w);
  const double cy = sy / count, cx = sx / count;
  const double by = 0.5 * static_cast<double>(y0 + y1);
  const double bx = 0.5 * static_cast<double>(x0 + x1);
  const auto at = [&](double py, double px) {
    return fourier_point(py, px, H, W, prompt_dim);
  };
  // Size row: bbox extent and area, tiled across the dimension.
  Vec size_row(prompt_dim);
  const double sv[3] = {static_cast<double>(x1 - x0 + 1) / W,
                        static_cast<double>(y1 - y0 + 1) / H,
                        count / static_cast<double>(h * w)};
  for (int j = 0; j < prompt_dim; ++j) size_row(j) = f32(sv[j % 3]);

  Mat prompt(prompt_count, prompt_dim);
  for (int r = 0; r < prompt_count; ++r) {
    switch (r % 6) {
      case 0: prompt.row(r) = at(cy, cx).transpose(); break;
      case 1:
        prompt.row(r) = at(static_cast<double>(y0), static_cast<double>(x0))
                            .transpose();
        break;
      case 2:
        prompt.row(r) = at(static_cast<double>(y1), static_cast<double>(x1))
                            .transpose();
        break;
      case 3: prompt.row(r) = at(by, bx).transpose(); break;
      case 4: prompt.row(r) = size_row.transpose(); break;
      default:
        prompt.row(r) = 0.5 * (at(static_cast<double>(y0),
                                  static_cast<double>(x1)) +
                               at(static_cast<double>(y1),
                                  static_cast<double>(x0)))
                                  .transpose();
        break;
    }
  }
  for (Eigen::Index i = 0; i < prompt.rows(); ++i)
    for (Eigen::Index j = 0; j < prompt.cols(); ++j)
      prompt(i, j) = f32(prompt(i, j));
  return prompt;
}

Mat binarize(const Mat& mask, double threshold) {
  return (mask.array() >= threshold).cast<double>().matrix();
}

double mask_iou(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("mask_iou: shape mismatch");
  }
  double inter = 0, uni = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const bool fa = a(i, j) != 0.0, fb = b(i, j) != 0.0;
      inter += fa && fb ? 1 : 0;
      uni += fa || fb ? 1 : 0;
    }
  return uni == 0 ? 1.0 : inter / uni;
}

LabelMap aggregate_masks(
    const std::vector<std::pair<int, MaskPrediction>>& preds,
    double binarize_threshold, int rows, int cols) {
  const Eigen::Index h = rows, w = cols;
  for (const auto& [cls, pred] : preds) {
    if (cls < 1) {
      throw ValidationError("aggregate_masks: class ids must be >= 1");
    }
    if (pred.mask.rows() != h || pred.mask.cols() != w) {
      throw ValidationError("aggregate_masks: masks disagree on shape");
    }
  }
  LabelMap out = LabelMap::Zero(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      int best = 0;
      double best_conf = -1.0;
      for (const auto& [cls, pred] : preds) {
        if (pred.mask(i, j) < binarize_threshold) continue;
        if (pred.confidence > best_conf ||
            (pred.confidence == best_conf && cls < best)) {
          best = cls;
          best_conf = pred.confidence;
        }
      }
      out(i, j) = best;
    }
  return out;
}

void save_segmenter(const std::filesystem::path& path,
                    const SegmenterParams& params) {
  io::Writer w(path);
  w.magic("CASM");
  const auto& c = params.config;
  for (const int v : {c.H, c.W, c.C, c.patch, c.d, c.heads, params.prompt_count,
                      params.prompt_dim, params.frozen ? 1 : 0})
    w.u32(static_cast<std::uint32_t>(v));
  for (const Mat* m : seg_tensors(const_cast<SegmenterParams&>(params)))
    w.mat_f32(*m);
}

SegmenterParams load_segmenter(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic("CASM");
  SegmenterParams p;
  p.config.H = static_cast<int>(r.u32());
  p.config.W = static_cast<int>(r.u32());
  p.config.C = static_cast<int>(r.u32());
  p.config.patch = static_cast<int>(r.u32());
  p.config.d = static_cast<int>(r.u32());
  p.config.heads = static_cast<int>(r.u32());
  p.prompt_count = static_cast<int>(r.u32());
  p.prompt_dim = static_cast<int>(r.u32());
  p.frozen = r.u32() != 0;
  for (Mat* m : seg_tensors(p)) *m = r.mat_f32();
  return p;
}

void save_label_map(const std::filesystem::path& path, const LabelMap& map) {
  io::Writer w(path);
  w.magic("DCSS");
  w.u32(static_cast<std::uint32_t>(map.rows()));
  w.u32(static_cast<std::uint32_t>(map.cols()));
  w.u32(0);
  for (Eigen::Index y = 0; y < map.rows(); ++y)
    for (Eigen::Index x = 0; x < map.cols(); ++x)
      w.u16(static_cast<std::uint16_t>(map(y, x)));
}

LabelMap load_label_map(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic("DCSS");
  const auto rows = r.u32();
  const auto cols = r.u32();
  if (r.u32() != 0) {
    throw ValidationError("label map file carries image channels: " +
                          path.string());
  }
  LabelMap map(rows, cols);
  for (std::uint32_t y = 0; y < rows; ++y)
    for (std::uint32_t x = 0; x < cols; ++x)
      map(y, x) = static_cast<int>(r.u16());
  return map;
}

void label_map_csv(const std::filesystem::path& path, const LabelMap& map) {
  std::ofstream out(path);
  if (!out) throw StateError("cannot open for writing: " + path.string());
  for (Eigen::Index y = 0; y < map.rows(); ++y) {
    for (Eigen::Index x = 0; x < map.cols(); ++x) {
      if (x) out << ',';
      out << map(y, x);
    }
    out << '\n';
  }
}

}  // namespace dcss::cas
