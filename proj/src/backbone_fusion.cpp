#include "dcss/backbone_fusion.hpp"

#include "dcss/binio.hpp"
#include "dcss/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dcss::model {

using ad::Tape;
using ad::Var;

void validate(const ModelConfig& c) {
  if (c.H < 16 || c.W < 16) throw ValidationError("H and W must be >= 16");
  if (c.C < 1) throw ValidationError("C must be >= 1");
  if (c.patch < 1 || c.H % c.patch != 0 || c.W % c.patch != 0)
    throw ValidationError("patch must divide H and W");
  if (c.d < 2) throw ValidationError("d must be >= 2");
  if (c.heads < 1 || c.d % c.heads != 0)
    throw ValidationError("heads must divide d");
}

std::vector<Mat*> backbone_tensors(BackboneParams& p) {
  return {&p.patch_embed_w, &p.patch_embed_b, &p.pos_embed,
          &p.sa1.wq, &p.sa1.wk, &p.sa1.wv, &p.sa1.wo,
          &p.sa1.bq, &p.sa1.bk, &p.sa1.bv, &p.sa1.bo,
          &p.sa2.wq, &p.sa2.wk, &p.sa2.wv, &p.sa2.wo,
          &p.sa2.bq, &p.sa2.bk, &p.sa2.bv, &p.sa2.bo,
          &p.cls_query, &p.fg_head_w, &p.fg_head_b,
          &p.cls_head_w, &p.cls_head_b};
}

std::vector<Mat*> fusion_tensors(FusionParams& p) {
  return {&p.text_to_image.wq, &p.text_to_image.wk, &p.text_to_image.wv,
          &p.text_to_image.wo, &p.text_to_image.bq, &p.text_to_image.bk,
          &p.text_to_image.bv, &p.text_to_image.bo,
          &p.image_to_text.wq, &p.image_to_text.wk, &p.image_to_text.wv,
          &p.image_to_text.wo, &p.image_to_text.bq, &p.image_to_text.bk,
          &p.image_to_text.bv, &p.image_to_text.bo};
}

namespace {

std::vector<Var> enter(Tape& t, const std::vector<Mat*>& tensors,
                       bool as_leaves) {
  std::vector<Var> vars;
  vars.reserve(tensors.size());
  for (const Mat* m : tensors)
    vars.push_back(as_leaves ? t.leaf(*m) : ad::constant(t, *m));
  return vars;
}

}  // namespace

BackboneVars make_backbone_vars(Tape& t, const BackboneParams& params,
                                bool as_leaves) {
  auto tensors = backbone_tensors(const_cast<BackboneParams&>(params));
  auto v = enter(t, tensors, as_leaves);
  BackboneVars out;
  out.patch_embed_w = v[0];
  out.patch_embed_b = v[1];
  out.pos_embed = v[2];
  out.sa1 = {v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]};
  out.sa2 = {v[11], v[12], v[13], v[14], v[15], v[16], v[17], v[18]};
  out.cls_query = v[19];
  out.fg_head_w = v[20];
  out.fg_head_b = v[21];
  out.cls_head_w = v[22];
  out.cls_head_b = v[23];
  return out;
}

FusionVars make_fusion_vars(Tape& t, const FusionParams& params,
                            bool as_leaves) {
  auto tensors = fusion_tensors(const_cast<FusionParams&>(params));
  auto v = enter(t, tensors, as_leaves);
  FusionVars out;
  out.text_to_image = {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  out.image_to_text = {v[8], v[9], v[10], v[11], v[12], v[13], v[14], v[15]};
  return out;
}

std::vector<Var> var_list(const BackboneVars& v) {
  return {v.patch_embed_w, v.patch_embed_b, v.pos_embed,
          v.sa1.wq, v.sa1.wk, v.sa1.wv, v.sa1.wo,
          v.sa1.bq, v.sa1.bk, v.sa1.bv, v.sa1.bo,
          v.sa2.wq, v.sa2.wk, v.sa2.wv, v.sa2.wo,
          v.sa2.bq, v.sa2.bk, v.sa2.bv, v.sa2.bo,
          v.cls_query, v.fg_head_w, v.fg_head_b,
          v.cls_head_w, v.cls_head_b};
}

std::vector<Var> var_list(const FusionVars& v) {
  return {v.text_to_image.wq, v.text_to_image.wk, v.text_to_image.wv,
          v.text_to_image.wo, v.text_to_image.bq, v.text_to_image.bk,
          v.text_to_image.bv, v.text_to_image.bo,
          v.image_to_text.wq, v.image_to_text.wk, v.image_to_text.wv,
          v.image_to_text.wo, v.image_to_text.bq, v.image_to_text.bk,
          v.image_to_text.bv, v.image_to_text.bo};
}

SiteVars constant_sites(Tape& t, const lora::AdapterView& view) {
  SiteVars out;
  for (const auto& [layer, proj] : lora::adapter_sites()) {
    const lora::AdapterParams* p = view.find(layer, proj);
    if (!p) continue;
    out.sites.emplace(std::make_pair(layer, proj),
                      AdapterVars{ad::constant(t, p->A),
                                  ad::constant(t, p->B), p->scaling});
  }
  return out;
}

Mat patchify(const ModelConfig& config, const std::vector<Mat>& image) {
  validate(config);
  if (static_cast<int>(image.size()) != config.C)
    throw ValidationError("image has " + std::to_string(image.size()) +
                          " channels, config says " +
                          std::to_string(config.C));
  for (const Mat& plane : image)
    if (plane.rows() != config.H || plane.cols() != config.W)
      throw ValidationError("image plane dims do not match config");

  Mat patches(config.num_tokens(), config.patch_dim());
  const int gw = config.grid_w(), ps = config.patch;
  for (int n = 0; n < config.num_tokens(); ++n) {
    const int py = n / gw, px = n % gw;
    int col = 0;
    for (int iy = 0; iy < ps; ++iy)
      for (int ix = 0; ix < ps; ++ix)
        for (int c = 0; c < config.C; ++c)
          patches(n, col++) =
              image[static_cast<std::size_t>(c)](py * ps + iy, px * ps + ix);
  }
  return patches;
}

Var project(Tape& t, Var x, Var w, Var b, const AdapterVars* adapter) {
  Var y = ad::linear(x, w, b);
  if (adapter) {
    Var delta = ad::matmul(ad::matmul(x, ad::transpose(adapter->A)),
                           ad::transpose(adapter->B));
    y = ad::add(y, ad::scale(delta, adapter->scaling));
  }
  return y;
}

Var multihead(Tape& t, Var q, Var k, Var v, int heads) {
  const int d = static_cast<int>(t.value(q).cols());
  if (d % heads != 0) throw ValidationError("heads must divide d");
  const int dh = d / heads;
  Var out = ad::attention(ad::cols_slice(q, 0, dh), ad::cols_slice(k, 0, dh),
                          ad::cols_slice(v, 0, dh));
  for (int h = 1; h < heads; ++h)
    out = ad::hcat(out, ad::attention(ad::cols_slice(q, h * dh, dh),
                                      ad::cols_slice(k, h * dh, dh),
                                      ad::cols_slice(v, h * dh, dh)));
  return out;
}

namespace {

Var self_attn(Tape& t, Var x, const AttnVars& layer, int layer_id, int heads,
              const SiteVars& adapters) {
  Var q = project(t, x, layer.wq, layer.bq, adapters.find(layer_id, lora::kQ));
  Var k = project(t, x, layer.wk, layer.bk, nullptr);
  Var v = project(t, x, layer.wv, layer.bv, adapters.find(layer_id, lora::kV));
  Var att = multihead(t, q, k, v, heads);
  return ad::add(x, ad::linear(att, layer.wo, layer.bo));
}

}  // namespace

TokensVar encode_image_t(Tape& t, const ModelConfig& config,
                         const BackboneVars& params, const Mat& patches,
                         const SiteVars& adapters) {
  if (patches.rows() != config.num_tokens() ||
      patches.cols() != config.patch_dim())
    throw ValidationError("patch matrix dims do not match config");

  Var x = ad::linear(ad::constant(t, patches), params.patch_embed_w,
                     params.patch_embed_b);
  x = ad::add(x, params.pos_embed);
  x = self_attn(t, x, params.sa1, lora::kSelfAttn1, config.heads, adapters);
  x = self_attn(t, x, params.sa2, lora::kSelfAttn2, config.heads, adapters);

  Var scores = ad::scale(ad::matmul(params.cls_query, ad::transpose(x)),
                         1.0 / std::sqrt(static_cast<double>(config.d)));
  Var cls = ad::matmul(ad::softmax_rows(scores), x);
  return {x, cls};
}

FusedVar cross_attend_t(Tape& t, const FusionVars& params, Var tokens,
                        Var class_embeds, const SiteVars& adapters,
                        int heads) {
  if (t.value(tokens).cols() != t.value(class_embeds).cols())
    throw ValidationError("token and class embedding dims differ");
  if (t.value(class_embeds).rows() < 1)
    throw ValidationError("need at least one class embedding");

  // Both directions read the original tokens/embeddings (parallel update).
  const AttnVars& t2i = params.text_to_image;
  Var qe = project(t, class_embeds, t2i.wq, t2i.bq, nullptr);
  Var ki = project(t, tokens, t2i.wk, t2i.bk,
                   adapters.find(lora::kFusion, lora::kTextToImageK));
  Var vi = project(t, tokens, t2i.wv, t2i.bv,
                   adapters.find(lora::kFusion, lora::kTextToImageV));
  Var e_att = multihead(t, qe, ki, vi, heads);
  Var e_out = ad::add(class_embeds, ad::linear(e_att, t2i.wo, t2i.bo));

  const AttnVars& i2t = params.image_to_text;
  Var qv = project(t, tokens, i2t.wq, i2t.bq, nullptr);
  Var kt = project(t, class_embeds, i2t.wk, i2t.bk,
                   adapters.find(lora::kFusion, lora::kImageToTextK));
  Var vt = project(t, class_embeds, i2t.wv, i2t.bv,
                   adapters.find(lora::kFusion, lora::kImageToTextV));
  Var v_att = multihead(t, qv, kt, vt, heads);
  Var v_out = ad::add(tokens, ad::linear(v_att, i2t.wo, i2t.bo));

  return {v_out, e_out};
}

VisualTokens encode_image(const BackboneParams& params,
                          const std::vector<Mat>& image,
                          const lora::AdapterView& view) {
  Tape t;
  BackboneVars vars = make_backbone_vars(t, params, false);
  SiteVars sites = constant_sites(t, view);
  TokensVar enc =
      encode_image_t(t, params.config, vars, patchify(params.config, image),
                     sites);
  VisualTokens out;
  out.tokens = t.value(enc.tokens);
  out.cls = t.value(enc.cls).transpose();
  return out;
}

std::pair<Mat, Mat> cross_attend(const ModelConfig& config,
                                 const FusionParams& params,
                                 const VisualTokens& tokens,
                                 const Mat& class_embeds,
                                 const lora::AdapterView& view) {
  Tape t;
  FusionVars vars = make_fusion_vars(t, params, false);
  SiteVars sites = constant_sites(t, view);
  FusedVar fused =
      cross_attend_t(t, vars, ad::constant(t, tokens.tokens),
                     ad::constant(t, class_embeds), sites, config.heads);
  return {t.value(fused.v), t.value(fused.e)};
}

BackboneParams init_backbone(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  BackboneParams p;
  p.config = config;
  Rng rng(mix_seed(seed, 0xbb));
  const int d = config.d;

  p.patch_embed_w = gaussian_matrix(d, config.patch_dim(), 0.15, rng);
  p.patch_embed_b = Mat::Zero(d, 1);
  p.pos_embed = gaussian_matrix(config.num_tokens(), d, 0.25, rng);

  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (AttnLayer* layer : {&p.sa1, &p.sa2}) {
    layer->wq = gaussian_matrix(d, d, attn_std, rng);
    layer->wk = gaussian_matrix(d, d, attn_std, rng);
    layer->wv = gaussian_matrix(d, d, 0.15, rng);
    layer->wo = gaussian_matrix(d, d, 0.15, rng);
    layer->bq = Mat::Zero(d, 1);
    layer->bk = Mat::Zero(d, 1);
    layer->bv = Mat::Zero(d, 1);
    layer->bo = Mat::Zero(d, 1);
  }
  p.cls_query = gaussian_matrix(1, d, 1.0, rng);
  p.fg_head_w = gaussian_matrix(1, d, 0.3, rng);
  p.fg_head_b = Mat::Zero(1, 1);
  p.cls_head_w = gaussian_matrix(1, d, 0.3, rng);
  p.cls_head_b = Mat::Zero(1, 1);
  return p;
}

FusionParams init_fusion(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  FusionParams p;
  Rng rng(mix_seed(seed, 0xf5));
  const int d = config.d;
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (AttnLayer* layer : {&p.text_to_image, &p.image_to_text}) {
    layer->wq = gaussian_matrix(d, d, attn_std, rng);
    layer->wk = gaussian_matrix(d, d, attn_std, rng);
    // Identity value/output paths let zero-adapter affinities carry real
    // token/class content from the first step.
    layer->wv = Mat::Identity(d, d);
    layer->wo = Mat::Identity(d, d);
    layer->bq = Mat::Zero(d, 1);
    layer->bk = Mat::Zero(d, 1);
    layer->bv = Mat::Zero(d, 1);
    layer->bo = Mat::Zero(d, 1);
  }
  return p;
}

double pretrain_backbone(BackboneParams& params,
                         const std::vector<synth::SegSample>& data,
                         const PretrainConfig& config) {
  if (data.empty()) throw ValidationError("pretraining needs data");
  const ModelConfig& mc = params.config;
  const int N = mc.num_tokens();

  // per-patch foreground fractions and whole-image fraction per sample
  std::vector<Mat> patch_targets;
  std::vector<double> image_targets;
  std::vector<Mat> patch_mats;
  for (const auto& s : data) {
    Mat target(N, 1);
    const int gw = mc.grid_w(), ps = mc.patch;
    int fg_total = 0;
    for (int n = 0; n < N; ++n) {
      const int py = n / gw, px = n % gw;
      int fg = 0;
      for (int iy = 0; iy < ps; ++iy)
        for (int ix = 0; ix < ps; ++ix)
          if (s.label(py * ps + iy, px * ps + ix) != 0) ++fg;
      target(n, 0) = static_cast<double>(fg) / (ps * ps);
      fg_total += fg;
    }
    patch_targets.push_back(std::move(target));
    image_targets.push_back(static_cast<double>(fg_total) / (mc.H * mc.W));
    patch_mats.push_back(patchify(mc, s.image));
  }

  opt::AdamW optimizer(config.weight_decay);
  const int batches_per_epoch =
      (static_cast<int>(data.size()) + config.batch - 1) / config.batch;
  const int total_steps = config.epochs * batches_per_epoch;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(config.seed, 0x5f));

  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(
                    shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);

    epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      auto tensors = backbone_tensors(params);
      std::vector<Mat> grad_sum(tensors.size());
      for (std::size_t g = 0; g < tensors.size(); ++g)
        grad_sum[g] = Mat::Zero(tensors[g]->rows(), tensors[g]->cols());

      const int begin = b * config.batch;
      const int end = std::min<int>(begin + config.batch,
                                    static_cast<int>(data.size()));
      for (int s = begin; s < end; ++s) {
        const std::size_t idx = order[static_cast<std::size_t>(s)];
        Tape t;
        BackboneVars vars = make_backbone_vars(t, params, true);
        TokensVar enc =
            encode_image_t(t, mc, vars, patch_mats[idx], SiteVars{});

        Var logits = ad::linear(enc.tokens, vars.fg_head_w, vars.fg_head_b);
        Var prob = ad::clampv(ad::sigmoid(logits), 1e-7, 1.0 - 1e-7);
        const Mat& tgt = patch_targets[idx];
        Var bce = ad::scale(
            ad::add(ad::sum(ad::cmul_const(ad::logv(prob), -tgt)),
                    ad::sum(ad::cmul_const(
                        ad::logv(ad::add_scalar(ad::scale(prob, -1.0), 1.0)),
                        (tgt.array() - 1.0).matrix()))),
            1.0 / N);

        Var pred = ad::linear(enc.cls, vars.cls_head_w, vars.cls_head_b);
        Var err = ad::add_scalar(pred, -image_targets[idx]);
        Var mse = ad::sum(ad::cmul(err, err));

        Var loss = ad::add(bce, mse);
        t.backward(loss);
        epoch_loss += t.value(loss)(0, 0);

        auto vlist = var_list(vars);
        for (std::size_t g = 0; g < vlist.size(); ++g)
          grad_sum[g] += t.grad(vlist[g]);
      }

      for (Mat& g : grad_sum) g /= static_cast<double>(end - begin);
      const int step = epoch * batches_per_epoch + b;
      optimizer.step(tensors, grad_sum,
                     opt::poly_lr(config.lr, step, total_steps));
    }
    epoch_loss /= static_cast<double>(data.size());
  }
  return epoch_loss;
}

std::uint64_t frozen_checksum(const BackboneParams& backbone,
                              const FusionParams& fusion) {
  ChecksumAccum accum;
  for (const Mat* m :
       backbone_tensors(const_cast<BackboneParams&>(backbone)))
    accum.add(*m);
  for (const Mat* m : fusion_tensors(const_cast<FusionParams&>(fusion)))
    accum.add(*m);
  return accum.value();
}

void save_frozen(const std::filesystem::path& path,
                 const BackboneParams& backbone, const FusionParams& fusion) {
  io::Writer w(path);
  w.magic("FRZB");
  const ModelConfig& c = backbone.config;
  w.u32(static_cast<std::uint32_t>(c.H));
  w.u32(static_cast<std::uint32_t>(c.W));
  w.u32(static_cast<std::uint32_t>(c.C));
  w.u32(static_cast<std::uint32_t>(c.patch));
  w.u32(static_cast<std::uint32_t>(c.d));
  w.u32(static_cast<std::uint32_t>(c.heads));
  for (const Mat* m :
       backbone_tensors(const_cast<BackboneParams&>(backbone)))
    w.mat_f32(*m);
  for (const Mat* m : fusion_tensors(const_cast<FusionParams&>(fusion)))
    w.mat_f32(*m);
}

void load_frozen(const std::filesystem::path& path, BackboneParams& backbone,
                 FusionParams& fusion) {
  io::Reader r(path);
  r.expect_magic("FRZB");
  ModelConfig c;
  c.H = static_cast<int>(r.u32());
  c.W = static_cast<int>(r.u32());
  c.C = static_cast<int>(r.u32());
  c.patch = static_cast<int>(r.u32());
  c.d = static_cast<int>(r.u32());
  c.heads = static_cast<int>(r.u32());
  validate(c);
  backbone.config = c;
  for (Mat* m : backbone_tensors(backbone)) *m = r.mat_f32();
  for (Mat* m : fusion_tensors(fusion)) *m = r.mat_f32();
}

}  // namespace dcss::model
