#pragma once

// Shared numerics for the mcpo library: error type, log-space helpers,
// seeded random streams and the parameter-shaped gradient container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcpo {

using PromptId = std::size_t;
using CompletionId = std::size_t;

enum class ErrorCode {
  CapExceeded,
  NonFinite,
  IndexOutOfRange,
  UnsupportedPoint,
  EmptyNegatives,
  InsufficientTrials,
  NotEnoughCandidates,
  UnknownLoss,
  MissingHyperparameter,
  InsufficientSupport,
  DegenerateNoise,
  DivergenceDetected,
  ShapeMismatch,
  EmptyMatch,
  ConfigInvalid,
  IoError,
  InvalidArgument,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::CapExceeded: return "CapExceeded";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::UnsupportedPoint: return "UnsupportedPoint";
    case ErrorCode::EmptyNegatives: return "EmptyNegatives";
    case ErrorCode::InsufficientTrials: return "InsufficientTrials";
    case ErrorCode::NotEnoughCandidates: return "NotEnoughCandidates";
    case ErrorCode::UnknownLoss: return "UnknownLoss";
    case ErrorCode::MissingHyperparameter: return "MissingHyperparameter";
    case ErrorCode::InsufficientSupport: return "InsufficientSupport";
    case ErrorCode::DegenerateNoise: return "DegenerateNoise";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyMatch: return "EmptyMatch";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Enumeration limits: vocab_size^max_length must not exceed kDefaultEnumerationCap;
// the completion table it implies is then at most kDefaultCompletionCap entries.
inline constexpr std::size_t kDefaultEnumerationCap = 4096;
inline constexpr std::size_t kDefaultCompletionCap = 2 * kDefaultEnumerationCap;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum(exp(v))); returns -inf for an empty or all -inf input.
inline double log_sum_exp(std::span<const double> v) {
  double hi = kNegInf;
  for (double a : v) hi = std::max(hi, a);
  if (hi == kNegInf) return kNegInf;
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double a : v) acc += std::exp(a - hi);
  return hi + std::log(acc);
}

// In-place softmax of log-weights; entries at -inf map to exactly 0.
inline void softmax_inplace(std::span<double> v) {
  const double lse = log_sum_exp(v);
  for (double& a : v) a = std::exp(a - lse);
}

inline std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(sigmoid(z)) = -log1p(exp(-z)), split on sign so neither branch overflows.
inline double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

// SplitMix64 finalizer; used to derive independent stream seeds from (seed, counter).
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
  return mix64(mix64(seed) ^ mix64(a + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}

// Seeded stream. Draws are built directly from mt19937_64 output bits so that
// sequences are identical on every standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer on [0, n) by rejection, free of modulo bias.
  std::size_t below(std::size_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "Rng::below(0)");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return static_cast<std::size_t>(draw % bound);
  }

  // Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Inverse-CDF draw from a normalized probability vector.
  std::size_t categorical(std::span<const double> probs) {
    return categorical_at(probs, uniform());
  }

  // Inverse-CDF lookup for a caller-supplied uniform; shared draws give
  // common random numbers across distributions.
  static std::size_t categorical_at(std::span<const double> probs, double u) {
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      acc += probs[i];
      last_positive = i;
      if (u < acc) return i;
    }
    return last_positive;
  }

  template <class Range>
  void shuffle(Range& r) {
    for (std::size_t i = r.size(); i > 1; --i) {
      std::swap(r[i - 1], r[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Parameter-shaped vector (rows = prompts, cols = completions, row-major).
// Exact computations carry std_error = 0; sampled ones carry per-component
// standard errors and the number of samples they average.
struct GradEstimate {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  std::vector<double> std_error;
  std::size_t n_samples = 1;

  GradEstimate() = default;
  GradEstimate(std::size_t r, std::size_t c)
      : rows(r), cols(c), values(r * c, 0.0), std_error(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  std::size_t size() const { return values.size(); }

  bool same_shape(const GradEstimate& o) const { return rows == o.rows && cols == o.cols; }

  // this += scale * other
  void axpy(double scale, const GradEstimate& other) {
    if (!same_shape(other)) throw Error(ErrorCode::ShapeMismatch, "GradEstimate::axpy");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += scale * other.values[i];
  }

  void scale(double s) {
    for (double& v : values) v *= s;
  }

  double norm() const {
    double acc = 0.0;
    for (double v : values) acc += v * v;
    return std::sqrt(acc);
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
  }
};

// max_i |a_i - b_i| / max(max|a|, max|b|, floor)
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-12) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "max_relative_error");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

}  // namespace mcpo
