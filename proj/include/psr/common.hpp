#pragma once

// Shared plumbing for the steering lab: error taxonomy, seed derivation, and
// a few helpers used across the numeric stack.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psr {

// ----------------------------- errors -----------------------------
//
// Each class maps to one CLI exit code (see tools/psr_main.cpp):
//   ValidationError -> 2   bad config / malformed or missing files / bad shapes of inputs
//   UnderTrainedError -> 3 world failed its behavioral gates
//   NumericError -> 4      NaN/Inf or other numeric breakdown
// ShapeError is a ValidationError so malformed artifacts and misuse share an exit class.

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnderTrainedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// ----------------------------- seeds -----------------------------
//
// Every random consumer derives its own stream from the single root seed via a
// splitmix-style mix, so components stay reproducible independently of the
// order (or parallelism) in which they run.

inline uint64_t mix_bits(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t root, std::initializer_list<uint64_t> path) {
  uint64_t s = mix_bits(root ^ 0x5deece66dULL);
  for (uint64_t p : path) s = mix_bits(s ^ mix_bits(p));
  return s;
}

// Stable tag for labelling seed streams by purpose ("dataset", "eval", ...).
inline uint64_t seed_tag(const char* name) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (const char* p = name; *p; ++p) h = (h ^ uint64_t(uint8_t(*p))) * 1099511628211ULL;
  return h;
}

using Rng = std::mt19937_64;

// ----------------------------- misc -----------------------------

inline std::string join_ints(const std::vector<int>& v, char sep = 'x') {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) os << sep;
    os << v[i];
  }
  return os.str();
}

}  // namespace psr
