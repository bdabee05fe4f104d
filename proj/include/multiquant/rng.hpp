#pragma once

#include <cstdint>
#include <vector>

namespace mq {

// xoshiro256++ with splitmix64 seeding. The standard-library distributions
// are implementation-defined, so every sampled value in this project goes
// through this generator to keep runs reproducible across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // uniform in [0, 1)
  double uniform();
  // uniform in [lo, hi)
  double uniform(double lo, double hi);
  // integer in [0, n)
  uint64_t uniform_index(uint64_t n);
  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double stddev);

  std::vector<double> normal_vector(size_t n, double mean = 0.0, double stddev = 1.0);

  // Fisher-Yates shuffle of an index permutation 0..n-1
  std::vector<size_t> permutation(size_t n);

  // derive an independent stream (e.g. one per worker or purpose)
  Rng fork(uint64_t stream_id) const;

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
  uint64_t seed_;
};

}  // namespace mq
