#include "dcss/text_bank.hpp"

#include "dcss/binio.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace dcss::text {

using nlohmann::json;

namespace {

const char* kAdjectives[] = {
    "small",  "large",   "red",     "blue",   "green",  "yellow",
    "bright", "dark",    "tiny",    "huge",   "round",  "angular",
    "smooth", "rough",   "thin",    "thick",  "pale",   "vivid",
    "striped", "plain",  "tilted",  "upright", "narrow", "wide",
    "shaded", "glossy",  "matte",   "faint",  "bold",   "compact"};
constexpr int kNumAdjectives = 30;

std::string last_token(const std::string& phrase) {
  const auto pos = phrase.find_last_of(' ');
  return pos == std::string::npos ? phrase : phrase.substr(pos + 1);
}

}  // namespace

std::vector<std::string> phrases_for_class(const std::string& class_name,
                                           int M) {
  if (class_name.empty()) throw ValidationError("class name must be non-empty");
  if (M < 1) throw ValidationError("M must be >= 1");
  const int max_m = kNumAdjectives + kNumAdjectives * (kNumAdjectives - 1);
  if (M > max_m)
    throw ValidationError("M exceeds the template capacity of " +
                          std::to_string(max_m));

  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(M) + 1);
  for (int i = 0; i < M && i < kNumAdjectives; ++i)
    out.push_back(std::string(kAdjectives[i]) + " " + class_name);
  // Beyond the single adjectives, compose ordered distinct pairs.
  for (int i = 0; static_cast<int>(out.size()) < M; ++i) {
    const int a = i / (kNumAdjectives - 1);
    int b = i % (kNumAdjectives - 1);
    if (b >= a) ++b;
    out.push_back(std::string(kAdjectives[a]) + " " + kAdjectives[b] + " " +
                  class_name);
  }
  out.push_back(class_name);
  return out;
}

StubEncoder::StubEncoder(int d, std::uint64_t seed) : d_(d), seed_(seed) {
  if (d < 2) throw ValidationError("encoder dim must be >= 2");
}

Vec StubEncoder::anchor(const std::string& class_token) const {
  Rng rng(mix_seed(seed_, hash_string(class_token)));
  Vec a(d_);
  for (int i = 0; i < d_; ++i) a(i) = rng.gaussian();
  a.normalize();
  return a;
}

Vec StubEncoder::encode(const std::string& phrase) const {
  if (phrase.empty()) throw ValidationError("phrase must be non-empty");
  Vec a = anchor(last_token(phrase));
  // Per-phrase perturbation of norm 0.3 keeps intra-class cosine >= 0.7.
  Rng rng(mix_seed(mix_seed(seed_, 0x70657274ULL), hash_string(phrase)));
  Vec p(d_);
  for (int i = 0; i < d_; ++i) p(i) = rng.gaussian();
  p.normalize();
  Vec e = a + 0.3 * p;
  e.normalize();
  quantize_f32(e);
  e /= e.norm();
  quantize_f32(e);
  return e;
}

PhraseEmbeddingBank build_bank(const std::string& class_name, int class_id,
                               int M, const TextEncoder& encoder) {
  PhraseEmbeddingBank bank;
  bank.class_id = class_id;
  bank.phrases = phrases_for_class(class_name, M);
  bank.embeddings.resize(static_cast<Eigen::Index>(bank.phrases.size()),
                         encoder.dim());
  for (std::size_t i = 0; i < bank.phrases.size(); ++i)
    bank.embeddings.row(static_cast<Eigen::Index>(i)) =
        encoder.encode(bank.phrases[i]).transpose();
  return bank;
}

Vec softmax_stable(const Vec& scores) {
  if (scores.size() == 0) throw ValidationError("softmax of empty vector");
  const double m = scores.maxCoeff();
  Vec e = (scores.array() - m).exp();
  return e / e.sum();
}

AggregationResult aggregate(const PhraseEmbeddingBank& bank,
                            const Vec& cls_token) {
  if (cls_token.size() != bank.embeddings.cols())
    throw ValidationError("cls token dim does not match the bank");
  const double cn = cls_token.norm();
  if (cn == 0.0) throw DegenerateInputError("cls token has zero norm");

  AggregationResult res;
  const Eigen::Index rows = bank.embeddings.rows();
  res.scores.resize(rows);
  for (Eigen::Index m = 0; m < rows; ++m) {
    const double gn = bank.embeddings.row(m).norm();
    if (gn == 0.0)
      throw DegenerateInputError("bank row " + std::to_string(m) +
                                 " has zero norm");
    res.scores(m) = bank.embeddings.row(m).dot(cls_token) / (gn * cn);
  }
  res.weights = softmax_stable(res.scores);
  res.aggregated = bank.embeddings.transpose() * res.weights;
  return res;
}

void save_bank(const std::filesystem::path& base,
               const PhraseEmbeddingBank& bank) {
  json manifest;
  manifest["class_id"] = bank.class_id;
  manifest["phrases"] = bank.phrases;
  std::ofstream out(base.string() + ".json");
  if (!out) throw StateError("cannot write bank manifest: " + base.string());
  out << manifest.dump(2) << "\n";

  io::Writer w(base.string() + ".bin");
  w.magic("TBNK");
  w.mat_f32(bank.embeddings);
}

PhraseEmbeddingBank load_bank(const std::filesystem::path& base) {
  std::ifstream in(base.string() + ".json");
  if (!in) throw StateError("missing bank manifest: " + base.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ValidationError("malformed bank manifest: " + std::string(e.what()));
  }

  PhraseEmbeddingBank bank;
  try {
    bank.class_id = manifest.at("class_id").get<int>();
    bank.phrases = manifest.at("phrases").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError("bank manifest missing keys: " +
                          std::string(e.what()));
  }

  io::Reader r(base.string() + ".bin");
  r.expect_magic("TBNK");
  bank.embeddings = r.mat_f32();
  if (bank.embeddings.rows() != static_cast<Eigen::Index>(bank.phrases.size()))
    throw ValidationError("bank rows do not match the phrase count");
  return bank;
}

}  // namespace dcss::text
