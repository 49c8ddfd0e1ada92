#include "dcss/common.hpp"

namespace dcss {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t hash_string(const std::string& s) {
  return fnv1a(s.data(), s.size());
}

void quantize_f32(Mat& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = f32(m(i, j));
}

void quantize_f32(Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = f32(v(i));
}

Mat gaussian_matrix(int rows, int cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = f32(stddev * rng.gaussian());
  return m;
}

Vec gaussian_vector(int n, double stddev, Rng& rng) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = f32(stddev * rng.gaussian());
  return v;
}

void ChecksumAccum::add(const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const float x = static_cast<float>(m(i, j));
      h_ = fnv1a(&x, sizeof(x), h_);
    }
}

void ChecksumAccum::add(const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const float x = static_cast<float>(v(i));
    h_ = fnv1a(&x, sizeof(x), h_);
  }
}

void ChecksumAccum::add_scalar(double x) {
  const float f = static_cast<float>(x);
  h_ = fnv1a(&f, sizeof(f), h_);
}

std::uint64_t checksum_f32(const Mat& m) {
  ChecksumAccum acc;
  acc.add(m);
  return acc.value();
}

}  // namespace dcss
