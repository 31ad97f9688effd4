#pragma once
#include <cstdint>

// Counter-based random streams. A draw is a pure function of
// (seed, role, replication, particle, step, component), so parallel
// simulations are reproducible independent of scheduling and a particle's
// stream can be replayed in isolation (needed for synchronous coupling and
// common-random-number Picard iterations).

namespace mvlab::rng {

// Stream roles. Values are packed into the counter, keep them < 16.
enum class Role : std::uint64_t {
  Init = 1,         // initial-condition draws of a particle system
  Increment = 2,    // Brownian increments of a particle system
  RefInit = 3,      // initial draws of the mean-field reference cloud
  RefIncrement = 4, // Brownian increments of the reference cloud
  Scatter = 5,      // generic sampling (test-point scatter, projections)
};

struct U64Pair {
  std::uint64_t a, b;
};

// Philox-style 2x64 bijection, 10 rounds.
U64Pair philox2x64(std::uint64_t key, std::uint64_t c0, std::uint64_t c1) noexcept;

// Uniform on (0,1), open at both ends.
double uniform01(std::uint64_t seed, Role role, std::uint64_t replication,
                 std::uint64_t particle, std::uint64_t step,
                 std::uint32_t component) noexcept;

// Standard normal via Box-Muller on one counter block.
double standard_normal(std::uint64_t seed, Role role, std::uint64_t replication,
                       std::uint64_t particle, std::uint64_t step,
                       std::uint32_t component) noexcept;

// Two independent standard normals from one counter block.
void standard_normal2(std::uint64_t seed, Role role, std::uint64_t replication,
                      std::uint64_t particle, std::uint64_t step,
                      std::uint32_t component, double* z0, double* z1) noexcept;

}  // namespace mvlab::rng
