#include "doctest.h"

#include "dcss/text_bank.hpp"

#include <cmath>
#include <filesystem>
#include <set>

using namespace dcss;
using namespace dcss::text;

TEST_CASE("phrase lists hold M templates plus the bare name, all distinct") {
  auto p30 = phrases_for_class("disk", 30);
  CHECK(p30.size() == 31);
  CHECK(p30.back() == "disk");
  std::set<std::string> uniq(p30.begin(), p30.end());
  CHECK(uniq.size() == 31);

  auto p1 = phrases_for_class("disk", 1);
  CHECK(p1.size() == 2);
  CHECK(p1[1] == "disk");

  auto p50 = phrases_for_class("ring", 50);
  CHECK(p50.size() == 51);
  CHECK(std::set<std::string>(p50.begin(), p50.end()).size() == 51);

  CHECK(phrases_for_class("disk", 30) == p30);  // deterministic
  CHECK_THROWS_AS(phrases_for_class("", 5), ValidationError);
  CHECK_THROWS_AS(phrases_for_class("disk", 0), ValidationError);
}

TEST_CASE("encoded phrases are unit-norm and deterministic") {
  StubEncoder enc(32);
  Vec a = enc.encode("small disk");
  CHECK(std::abs(a.norm() - 1.0) < 1e-6);
  CHECK(a == enc.encode("small disk"));
  CHECK_THROWS_AS(enc.encode(""), ValidationError);
}

TEST_CASE("phrases of one class stay close, anchors of distinct classes apart") {
  StubEncoder enc(32);
  const char* names[] = {"disk", "square", "triangle", "ring", "cross", "bar"};

  for (const char* name : names) {
    auto bank = build_bank(name, 1, 30, enc);
    for (Eigen::Index r = 0; r < bank.embeddings.rows(); ++r)
      for (Eigen::Index s = r + 1; s < bank.embeddings.rows(); ++s)
        CHECK(bank.embeddings.row(r).dot(bank.embeddings.row(s)) >= 0.7);
  }

  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j)
      CHECK(enc.anchor(names[i]).dot(enc.anchor(names[j])) <= 0.3);
}

TEST_CASE("bank rows are unit-norm") {
  StubEncoder enc(32);
  auto bank = build_bank("cross", 5, 30, enc);
  REQUIRE(bank.embeddings.rows() == 31);
  for (Eigen::Index r = 0; r < 31; ++r)
    CHECK(std::abs(bank.embeddings.row(r).norm() - 1.0) < 1e-6);
}

TEST_CASE("identical bank rows give uniform weights") {
  StubEncoder enc(16);
  PhraseEmbeddingBank bank;
  bank.class_id = 1;
  bank.phrases = {"a", "b", "c"};
  Vec g = enc.encode("disk");
  bank.embeddings.resize(3, 16);
  for (int r = 0; r < 3; ++r) bank.embeddings.row(r) = g.transpose();

  auto res = aggregate(bank, enc.encode("small disk"));
  for (int m = 0; m < 3; ++m) CHECK(std::abs(res.weights(m) - 1.0 / 3) < 1e-12);
  CHECK((res.aggregated - g).norm() < 1e-9);
}

TEST_CASE("softmax of (ln 3, 0) is (0.75, 0.25)") {
  Vec s(2);
  s << std::log(3.0), 0.0;
  Vec w = softmax_stable(s);
  CHECK(std::abs(w(0) - 0.75) < 1e-12);
  CHECK(std::abs(w(1) - 0.25) < 1e-12);
}

TEST_CASE("aggregation matches a straight-line oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = rng.uniform_int(2, 31), d = 32;
    PhraseEmbeddingBank bank;
    bank.class_id = 1;
    bank.embeddings.resize(rows, d);
    for (int r = 0; r < rows; ++r) {
      bank.phrases.push_back("p" + std::to_string(r));
      Vec v(d);
      for (int i = 0; i < d; ++i) v(i) = rng.gaussian();
      bank.embeddings.row(r) = v.normalized().transpose();
    }
    Vec cls(d);
    for (int i = 0; i < d; ++i) cls(i) = rng.gaussian();

    auto res = aggregate(bank, cls);

    // independent re-computation, no shared helpers
    std::vector<double> s(static_cast<std::size_t>(rows));
    for (int m = 0; m < rows; ++m) {
      double dot = 0, ng = 0, nc = 0;
      for (int i = 0; i < d; ++i) {
        dot += bank.embeddings(m, i) * cls(i);
        ng += bank.embeddings(m, i) * bank.embeddings(m, i);
        nc += cls(i) * cls(i);
      }
      s[static_cast<std::size_t>(m)] = dot / (std::sqrt(ng) * std::sqrt(nc));
    }
    double mx = s[0];
    for (double v : s) mx = std::max(mx, v);
    double z = 0;
    for (double v : s) z += std::exp(v - mx);
    double wsum = 0;
    for (int m = 0; m < rows; ++m) {
      const double alpha = std::exp(s[static_cast<std::size_t>(m)] - mx) / z;
      wsum += alpha;
      CHECK(std::abs(res.weights(m) - alpha) < 1e-9);
      CHECK(res.weights(m) > 0.0);
    }
    CHECK(std::abs(wsum - 1.0) < 1e-9);
    for (int i = 0; i < d; ++i) {
      double e = 0;
      for (int m = 0; m < rows; ++m)
        e += std::exp(s[static_cast<std::size_t>(m)] - mx) / z *
             bank.embeddings(m, i);
      CHECK(std::abs(res.aggregated(i) - e) < 1e-9);
    }
  }
}

TEST_CASE("weights are shift-invariant in the scores") {
  Vec s(4);
  s << 0.2, -0.4, 0.9, 0.1;
  Vec w1 = softmax_stable(s);
  Vec w2 = softmax_stable((s.array() + 123.456).matrix());
  CHECK((w1 - w2).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("different cls tokens can give different aggregates") {
  StubEncoder enc(32);
  auto bank = build_bank("disk", 1, 30, enc);
  Vec cls1 = enc.encode("small disk");
  Vec cls2 = enc.encode("cross");
  auto r1 = aggregate(bank, cls1);
  auto r2 = aggregate(bank, cls2);
  CHECK((r1.aggregated - r2.aggregated).norm() > 1e-9);
}

TEST_CASE("aggregate lies in the per-coordinate hull of the bank") {
  StubEncoder enc(32);
  auto bank = build_bank("bar", 2, 12, enc);
  auto res = aggregate(bank, enc.encode("tiny bar"));
  for (int i = 0; i < 32; ++i) {
    CHECK(res.aggregated(i) >= bank.embeddings.col(i).minCoeff() - 1e-12);
    CHECK(res.aggregated(i) <= bank.embeddings.col(i).maxCoeff() + 1e-12);
  }
}

TEST_CASE("zero cls token is rejected") {
  StubEncoder enc(8);
  auto bank = build_bank("disk", 1, 2, enc);
  CHECK_THROWS_AS(aggregate(bank, Vec::Zero(8)), DegenerateInputError);
}

TEST_CASE("banks round-trip through disk") {
  const auto base = std::filesystem::temp_directory_path() / "dcss_bank";
  StubEncoder enc(32);
  auto bank = build_bank("triangle", 3, 30, enc);
  save_bank(base, bank);
  auto loaded = load_bank(base);
  CHECK(loaded.class_id == 3);
  CHECK(loaded.phrases == bank.phrases);
  CHECK(loaded.embeddings == bank.embeddings);
  std::filesystem::remove(base.string() + ".json");
  std::filesystem::remove(base.string() + ".bin");
}
