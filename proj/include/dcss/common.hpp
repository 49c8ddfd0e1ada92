#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dcss {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using LabelMap = Eigen::MatrixXi;

/// Bad input values or malformed configuration. CLI exit code 2.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Task schedule that cannot be formed from the requested pattern.
struct ScheduleError : ValidationError {
  explicit ScheduleError(const std::string& msg) : ValidationError(msg) {}
};

/// Operation invoked in a state that does not permit it. CLI exit code 3.
struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Unknown key (task, class) in a registry lookup. CLI exit code 3.
struct LookupError : std::runtime_error {
  explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerically degenerate input (zero vector where a direction is needed,
/// 0/0 in a ratio). CLI exit code 2.
struct DegenerateInputError : std::runtime_error {
  explicit DegenerateInputError(const std::string& msg)
      : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// mt19937_64 is pinned by the standard; the std:: distributions are not, so
// the value mappings are done by hand to keep fixture bytes reproducible.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  /// Standard normal via Box-Muller, one fresh pair per call.
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586477 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

/// Derives an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt);

std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t h = 14695981039346656037ULL);

std::uint64_t hash_string(const std::string& s);

// ---------------------------------------------------------------------------
// Parameters are kept exactly float32-representable so the float32 checkpoint
// formats round-trip bit-exactly; forward/backward math runs in double.
// ---------------------------------------------------------------------------

inline double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

void quantize_f32(Mat& m);
void quantize_f32(Vec& v);

/// Matrix of N(0, std) entries, quantized to float32 values.
Mat gaussian_matrix(int rows, int cols, double stddev, Rng& rng);
Vec gaussian_vector(int n, double stddev, Rng& rng);

/// FNV-1a over the row-major float32 image of a matrix.
class ChecksumAccum {
 public:
  void add(const Mat& m);
  void add(const Vec& v);
  void add_scalar(double x);
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ULL;
};

std::uint64_t checksum_f32(const Mat& m);

}  // namespace dcss
