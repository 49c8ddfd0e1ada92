#include "doctest.h"

#include "dcss/spg.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dcss/losses.hpp"
#include "dcss/optim.hpp"

using namespace dcss;
using namespace dcss::spg;

namespace {

Mat random_mat(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = scale * rng.gaussian();
  return m;
}

detect::TokenSelection selection_from(const Mat& tokens, const Mat& embeds,
                                      double tau) {
  return detect::select_tokens(detect::sparsify(detect::affinity(tokens, embeds), tau),
                               tokens);
}

}  // namespace

TEST_CASE("channel_select: partitions by argmax class") {
  const int d = 4;
  detect::TokenSelection sel;
  sel.rows = {0, 2, 5};
  sel.assoc = {{0, 1}, {2, 1}, {5, 3}};
  sel.selected = random_mat(3, d, 17);

  const auto sets = channel_select(sel, 5);
  REQUIRE(sets.size() == 5);
  for (int k = 0; k < 5; ++k) CHECK(sets[k].class_id == k);
  CHECK(sets[0].tokens.rows() == 0);
  CHECK(sets[1].tokens.rows() == 2);
  CHECK(sets[2].tokens.rows() == 0);
  CHECK(sets[3].tokens.rows() == 1);
  CHECK(sets[4].tokens.rows() == 0);
  CHECK(sets[1].token_indices == std::vector<int>{0, 2});
  CHECK(sets[1].tokens.row(0) == sel.selected.row(0));
  CHECK(sets[1].tokens.row(1) == sel.selected.row(1));
  CHECK(sets[3].token_indices == std::vector<int>{5});
  CHECK(sets[3].tokens.row(0) == sel.selected.row(2));
}

TEST_CASE("channel_select: empty selection and bad class references") {
  detect::TokenSelection sel;
  sel.selected = Mat(0, 4);
  for (const auto& set : channel_select(sel, 3)) {
    CHECK(set.tokens.rows() == 0);
    CHECK(set.token_indices.empty());
  }
  sel.assoc = {{0, 3}};
  sel.selected = random_mat(1, 4, 1);
  CHECK_THROWS_AS(channel_select(sel, 3), ValidationError);
  CHECK_THROWS_AS(channel_select(sel, 0), ValidationError);
}

TEST_CASE("channel_select: token sets partition the selected rows") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Mat tokens = random_mat(12, 6, 900 + s);
    const Mat embeds = random_mat(4, 6, 950 + s);
    const auto sel = selection_from(tokens, embeds, 0.3);
    const auto sets = channel_select(sel, 4);
    std::size_t total = 0;
    for (const auto& set : sets) {
      total += set.token_indices.size();
      for (std::size_t i = 0; i + 1 < set.token_indices.size(); ++i)
        CHECK(set.token_indices[i] < set.token_indices[i + 1]);
    }
    CHECK(total == sel.rows.size());
  }
}

TEST_CASE("pgen_input: flatten, pad, then add the embedding") {
  const int d = 32, q = 256;
  const Mat tokens = random_mat(2, d, 21);
  const Mat embed = random_mat(q, 1, 22, 0.02);
  const Vec z = pgen_input(tokens, embed);
  REQUIRE(z.size() == q);
  for (int i = 0; i < 2 * d; ++i)
    CHECK(z(i) == tokens(i / d, i % d) + embed(i, 0));
  for (int i = 2 * d; i < q; ++i) CHECK(z(i) == embed(i, 0));
}

TEST_CASE("pgen_input: empty token set reduces to the embedding") {
  const Mat embed = random_mat(16, 1, 23);
  const Vec z = pgen_input(Mat(0, 8), embed);
  CHECK(z == embed.col(0));
}

TEST_CASE("pgen_input: exact fit and truncation") {
  const int d = 8;
  const Mat tokens = random_mat(4, d, 24);
  const Mat fit = random_mat(4 * d, 1, 25);
  const Vec z = pgen_input(tokens, fit);
  for (int i = 0; i < 4 * d; ++i)
    CHECK(z(i) == tokens(i / d, i % d) + fit(i, 0));

  const Mat shorter = random_mat(10, 1, 26);
  const Vec zt = pgen_input(tokens, shorter);
  REQUIRE(zt.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(zt(i) == tokens(i / d, i % d) + shorter(i, 0));

  CHECK(pgen_input(tokens, fit) == z);
}

TEST_CASE("pgen_forward: zero parameters and shape contract") {
  PGenParams p = init_pgen(1, 64, 16, 6, 32, 3);
  const Vec z = random_mat(64, 1, 27).col(0);
  const Mat prompts = pgen_forward(z, p);
  CHECK(prompts.rows() == 6);
  CHECK(prompts.cols() == 32);

  for (Mat* m : pgen_tensors(p)) m->setZero();
  CHECK(pgen_forward(z, p).isZero(0.0));

  CHECK_THROWS_AS(pgen_forward(random_mat(65, 1, 28).col(0), p),
                  ValidationError);
}

TEST_CASE("pgen init is seeded and per-class independent") {
  const PGenParams a = init_pgen(1, 32, 8, 6, 16, 7);
  const PGenParams b = init_pgen(1, 32, 8, 6, 16, 7);
  CHECK(pgen_checksum(a) == pgen_checksum(b));
  const PGenParams c = init_pgen(2, 32, 8, 6, 16, 7);
  CHECK(pgen_checksum(a) != pgen_checksum(c));
  CHECK_THROWS_AS(init_pgen(0, 0, 8, 6, 16, 7), ValidationError);
}

TEST_CASE("tape pgen matches the plain forward") {
  const PGenParams p = init_pgen(3, 48, 12, 4, 8, 9);
  const Mat tokens = random_mat(2, 8, 30);
  const Vec z = pgen_input(tokens, p.embed);
  const Mat plain = pgen_forward(z, p);

  ad::Tape t;
  const PGenVars vars = make_pgen_vars(t, p, false);
  ad::Var zt = pgen_input_t(t, t.leaf(tokens), vars.embed, p.input_len);
  ad::Var out = pgen_forward_t(t, zt, vars, p.prompt_count, p.prompt_dim);
  CHECK(t.value(zt).col(0) == z);
  // The two paths order the multiply-adds differently; agreement is up to
  // rounding, not bitwise.
  CHECK((t.value(out) - plain).cwiseAbs().maxCoeff() < 1e-12);

  ad::Var ze = pgen_input_t(t, std::nullopt, vars.embed, p.input_len);
  CHECK(t.value(ze) == p.embed);
}

TEST_CASE("pgen gradients match finite differences") {
  const PGenParams p = init_pgen(0, 24, 10, 3, 5, 13);
  const Mat tokens = random_mat(2, 6, 31, 0.5);
  const Mat readout = random_mat(3, 5, 32);

  const auto build = [&](const std::vector<Mat>& ps, ad::Tape& t) {
    PGenParams q = p;
    std::vector<Mat*> slots = pgen_tensors(q);
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = ps[i];
    const PGenVars vars = make_pgen_vars(t, q, true);
    ad::Var z = pgen_input_t(t, ad::constant(t, tokens), vars.embed, q.input_len);
    ad::Var prompts = pgen_forward_t(t, z, vars, q.prompt_count, q.prompt_dim);
    return std::pair{vars, ad::sum(ad::cmul_const(prompts, readout))};
  };

  PGenParams base = p;
  std::vector<Mat> values;
  for (Mat* m : pgen_tensors(base)) values.push_back(*m);

  ad::Tape t;
  const auto [vars, out] = build(values, t);
  t.backward(out);
  std::vector<Mat> analytic;
  for (ad::Var v : var_list(vars)) analytic.push_back(t.grad(v));

  const auto fn = [&](const std::vector<Mat>& ps) {
    ad::Tape tt;
    return tt.value(build(ps, tt).second)(0, 0);
  };
  CHECK(loss::grad_check(fn, values, analytic) < 1e-3);
}

TEST_CASE("training one class leaves the others bitwise untouched") {
  PGenParams mine = init_pgen(0, 24, 10, 3, 5, 40);
  PGenParams other = init_pgen(1, 24, 10, 3, 5, 40);
  const std::uint64_t other_before = pgen_checksum(other);

  const Mat tokens = random_mat(2, 6, 41, 0.5);
  const Mat target = random_mat(3, 5, 42);
  opt::AdamW optimizer(0.05);
  for (int step = 0; step < 5; ++step) {
    ad::Tape t;
    const PGenVars vars = make_pgen_vars(t, mine, true);
    ad::Var z = pgen_input_t(t, ad::constant(t, tokens), vars.embed, 24);
    ad::Var prompts = pgen_forward_t(t, z, vars, 3, 5);
    ad::Var diff = ad::sub(prompts, ad::constant(t, target));
    ad::Var out = ad::mean(ad::cmul(diff, diff));
    t.backward(out);
    std::vector<Mat> grads;
    for (ad::Var v : var_list(vars)) grads.push_back(t.grad(v));
    optimizer.step(pgen_tensors(mine), grads, 1e-2);
  }
  CHECK(pgen_checksum(other) == other_before);
  CHECK(pgen_checksum(mine) != pgen_checksum(init_pgen(0, 24, 10, 3, 5, 40)));
}

TEST_CASE("pgen checkpoints round-trip bitwise") {
  const auto dir = std::filesystem::temp_directory_path() / "dcss_spg_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "pgens.bin";

  std::vector<PGenParams> pgens;
  pgens.push_back(init_pgen(1, 32, 8, 6, 16, 50));
  pgens.push_back(init_pgen(2, 32, 8, 6, 16, 50));
  save_pgens(path, pgens);
  const auto loaded = load_pgens(path);
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(loaded[i].class_id == pgens[i].class_id);
    CHECK(loaded[i].input_len == pgens[i].input_len);
    CHECK(pgen_checksum(loaded[i]) == pgen_checksum(pgens[i]));
  }
  std::filesystem::remove_all(dir);
}
