#include "dcss/spg.hpp"

#include "dcss/binio.hpp"

#include <string>

namespace dcss::spg {

std::vector<ClassTokenSet> channel_select(const detect::TokenSelection& sel,
                                          int c_t) {
  if (c_t < 1) throw ValidationError("channel_select: need at least one class");
  const auto d = sel.selected.cols();
  std::vector<int> counts(static_cast<std::size_t>(c_t), 0);
  for (const auto& [token, cls] : sel.assoc) {
    if (cls < 0 || cls >= c_t) {
      throw ValidationError("channel_select: association references class " +
                            std::to_string(cls) + " outside 0.." +
                            std::to_string(c_t - 1));
    }
    ++counts[static_cast<std::size_t>(cls)];
  }
  std::vector<ClassTokenSet> sets(static_cast<std::size_t>(c_t));
  for (int k = 0; k < c_t; ++k) {
    auto& set = sets[static_cast<std::size_t>(k)];
    set.class_id = k;
    set.tokens = Mat(counts[static_cast<std::size_t>(k)], d);
    set.token_indices.reserve(
        static_cast<std::size_t>(counts[static_cast<std::size_t>(k)]));
  }
  for (std::size_t i = 0; i < sel.assoc.size(); ++i) {
    auto& set = sets[static_cast<std::size_t>(sel.assoc[i].second)];
    const auto row = static_cast<Eigen::Index>(set.token_indices.size());
    set.token_indices.push_back(sel.assoc[i].first);
    set.tokens.row(row) = sel.selected.row(static_cast<Eigen::Index>(i));
  }
  return sets;
}

Vec pgen_input(const Mat& tokens, const Mat& embed) {
  if (embed.cols() != 1) {
    throw ValidationError("pgen_input: embedding must be a column");
  }
  const auto q = embed.rows();
  Vec z = Vec::Zero(q);
  Eigen::Index w = 0;
  for (Eigen::Index i = 0; i < tokens.rows() && w < q; ++i)
    for (Eigen::Index j = 0; j < tokens.cols() && w < q; ++j)
      z(w++) = tokens(i, j);
  return z + embed.col(0);
}

Mat pgen_forward(const Vec& z, const PGenParams& params) {
  if (params.w1.cols() != z.size()) {
    throw ValidationError("pgen_forward: input length " +
                          std::to_string(z.size()) + " does not match Q_m " +
                          std::to_string(params.w1.cols()));
  }
  const auto out_len =
      static_cast<Eigen::Index>(params.prompt_count) * params.prompt_dim;
  if (params.w2.rows() != out_len || params.w1.rows() != params.w2.cols()) {
    throw ValidationError("pgen_forward: MLP weight shapes are inconsistent");
  }
  const Vec h1 = (params.w1 * z + params.b1.col(0)).cwiseMax(0.0);
  const Vec out = params.w2 * h1 + params.b2.col(0);
  Mat prompts(params.prompt_count, params.prompt_dim);
  for (Eigen::Index i = 0; i < prompts.rows(); ++i)
    for (Eigen::Index j = 0; j < prompts.cols(); ++j)
      prompts(i, j) = out(i * prompts.cols() + j);
  return prompts;
}

PGenParams init_pgen(int class_id, int input_len, int hidden, int prompt_count,
                     int prompt_dim, std::uint64_t seed) {
  if (input_len < 1 || hidden < 1 || prompt_count < 1 || prompt_dim < 1) {
    throw ValidationError("init_pgen: all dimensions must be positive");
  }
  Rng rng(mix_seed(seed, 0x9600 + static_cast<std::uint64_t>(class_id)));
  PGenParams p;
  p.class_id = class_id;
  p.input_len = input_len;
  p.hidden = hidden;
  p.prompt_count = prompt_count;
  p.prompt_dim = prompt_dim;
  p.embed = gaussian_matrix(input_len, 1, 0.02, rng);
  p.w1 = gaussian_matrix(hidden, input_len, 1.0 / std::sqrt(input_len), rng);
  p.b1 = Mat::Zero(hidden, 1);
  p.w2 = gaussian_matrix(prompt_count * prompt_dim, hidden,
                         1.0 / std::sqrt(hidden), rng);
  p.b2 = Mat::Zero(prompt_count * prompt_dim, 1);
  return p;
}

std::vector<Mat*> pgen_tensors(PGenParams& params) {
  return {&params.embed, &params.w1, &params.b1, &params.w2, &params.b2};
}

std::uint64_t pgen_checksum(const PGenParams& params) {
  ChecksumAccum acc;
  acc.add_scalar(params.class_id);
  for (const Mat* m : pgen_tensors(const_cast<PGenParams&>(params)))
    acc.add(*m);
  return acc.value();
}

PGenVars make_pgen_vars(ad::Tape& t, const PGenParams& params, bool as_leaves) {
  const auto put = [&](const Mat& m) {
    return as_leaves ? t.leaf(m) : ad::constant(t, m);
  };
  return {put(params.embed), put(params.w1), put(params.b1), put(params.w2),
          put(params.b2)};
}

std::vector<ad::Var> var_list(const PGenVars& vars) {
  return {vars.embed, vars.w1, vars.b1, vars.w2, vars.b2};
}

ad::Var pgen_input_t(ad::Tape& t, std::optional<ad::Var> tokens, ad::Var embed,
                     int input_len) {
  if (t.value(embed).rows() != input_len || t.value(embed).cols() != 1) {
    throw ValidationError("pgen_input: embedding must be a Q_m column");
  }
  if (!tokens.has_value()) return embed;
  return ad::add(ad::flatten_pad(*tokens, input_len), embed);
}

ad::Var pgen_forward_t(ad::Tape& t, ad::Var z, const PGenVars& vars,
                       int prompt_count, int prompt_dim) {
  ad::Var h1 = ad::relu(ad::linear(ad::transpose(z), vars.w1, vars.b1));
  ad::Var out = ad::linear(h1, vars.w2, vars.b2);
  return ad::reshape(out, prompt_count, prompt_dim);
}

void save_pgens(const std::filesystem::path& path,
                const std::vector<PGenParams>& pgens) {
  io::Writer w(path);
  w.magic("PGEN");
  w.u32(static_cast<std::uint32_t>(pgens.size()));
  for (const PGenParams& p : pgens) {
    w.u32(static_cast<std::uint32_t>(p.class_id));
    w.u32(static_cast<std::uint32_t>(p.input_len));
    w.u32(static_cast<std::uint32_t>(p.hidden));
    w.u32(static_cast<std::uint32_t>(p.prompt_count));
    w.u32(static_cast<std::uint32_t>(p.prompt_dim));
    w.mat_f32(p.embed);
    w.mat_f32(p.w1);
    w.mat_f32(p.b1);
    w.mat_f32(p.w2);
    w.mat_f32(p.b2);
  }
}

std::vector<PGenParams> load_pgens(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic("PGEN");
  const auto count = r.u32();
  std::vector<PGenParams> pgens(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    PGenParams& p = pgens[i];
    p.class_id = static_cast<int>(r.u32());
    p.input_len = static_cast<int>(r.u32());
    p.hidden = static_cast<int>(r.u32());
    p.prompt_count = static_cast<int>(r.u32());
    p.prompt_dim = static_cast<int>(r.u32());
    p.embed = r.mat_f32();
    p.w1 = r.mat_f32();
    p.b1 = r.mat_f32();
    p.w2 = r.mat_f32();
    p.b2 = r.mat_f32();
  }
  return pgens;
}

}  // namespace dcss::spg
