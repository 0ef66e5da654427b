#pragma once

#include <cstdint>
#include <random>

#include "ebmlab/tensor.hpp"

namespace ebmlab {

using Rng = std::mt19937_64;

// Named random streams split from one 64-bit master seed. Stream k is seeded
// with splitmix64(master + (k + 1) * 0x9E3779B97F4A7C15), so the numbering
// below is part of the reproducibility contract: append, never renumber.
enum class Stream : std::uint64_t {
  kInit = 0,
  kData = 1,
  kSgld = 2,
  kProjection = 3,
  kNoise = 4,
  kGenerator = 5,
  kEval = 6,
  kBatch = 7,
};

std::uint64_t splitmix64(std::uint64_t x);
Rng make_stream(std::uint64_t master_seed, Stream stream);
// Sub-stream for repeated components (e.g. the i-th run of a sweep).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0);
Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi);
// Entries drawn uniformly from {-1, +1}.
Tensor rademacher_tensor(Rng& rng, std::size_t rows, std::size_t cols);

}  // namespace ebmlab
