#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace shmfm {

using Index = Eigen::Index;

/// Token-major dense matrix: one row per token / sample, one column per feature.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Spectrogram image as stored on disk and fed to the model (time frames x frequency bins).
using Image = Matrix<float>;

inline constexpr Index kImageSide = 100;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violating a precondition (labels out of range, wrong tags, empty input).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or tampered file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Operation not available in the model's current mode (e.g. regression without a head).
class ModeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Metric whose denominator vanished; reported as a flag rather than raised by metric code.
class UndefinedValue : public Error {
 public:
  using Error::Error;
};

// Seed mixing. splitmix64 finalizer; stable across platforms.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

/// FNV-1a 64-bit; used for config hashes and name-derived seeds.
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Module seed derived from the global seed and a module name.
inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view module_name) {
  return mix_seed(global_seed, fnv1a(module_name));
}

}  // namespace shmfm
