#pragma once

#include "dcss/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dcss::text {

struct PhraseEmbeddingBank {
  int class_id = 0;
  std::vector<std::string> phrases;  // M phrases plus the bare class name
  Mat embeddings;                    // (M+1) x d, unit-norm rows
};

struct AggregationResult {
  Vec scores;      // cosine of cls token against each bank row
  Vec weights;     // softmax of scores, strictly positive, sums to 1
  Vec aggregated;  // convex combination of the bank rows
};

/// M adjective-template phrases plus the bare class name, all distinct.
std::vector<std::string> phrases_for_class(const std::string& class_name,
                                           int M);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Vec encode(const std::string& phrase) const = 0;
  virtual int dim() const = 0;
};

/// Deterministic hash-seeded encoder. Phrases of one class share an anchor
/// direction (pairwise cosine >= 0.7 by construction); anchors of the default
/// class names are mutually separated (cosine <= 0.3, checked in tests).
class StubEncoder : public TextEncoder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 1;

  explicit StubEncoder(int d, std::uint64_t seed = kDefaultSeed);
  Vec encode(const std::string& phrase) const override;
  int dim() const override { return d_; }

  /// Anchor direction for a class-name token.
  Vec anchor(const std::string& class_token) const;

 private:
  int d_;
  std::uint64_t seed_;
};

PhraseEmbeddingBank build_bank(const std::string& class_name, int class_id,
                               int M, const TextEncoder& encoder);

/// Max-subtracted softmax.
Vec softmax_stable(const Vec& scores);

AggregationResult aggregate(const PhraseEmbeddingBank& bank,
                            const Vec& cls_token);

/// Writes base.json (class, phrases) and base.bin (embedding matrix).
void save_bank(const std::filesystem::path& base,
               const PhraseEmbeddingBank& bank);
PhraseEmbeddingBank load_bank(const std::filesystem::path& base);

}  // namespace dcss::text
