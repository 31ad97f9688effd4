#include "mvlab/rng.hpp"

#include <cmath>

namespace mvlab::rng {
namespace {

constexpr std::uint64_t kMul = 0xD2B74407B1CE6E93ull;
constexpr std::uint64_t kWeyl = 0x9E3779B97F4A7C15ull;

inline void round_once(std::uint64_t& x0, std::uint64_t& x1,
                       std::uint64_t& key) noexcept {
  const unsigned __int128 prod = static_cast<unsigned __int128>(kMul) * x0;
  const std::uint64_t hi = static_cast<std::uint64_t>(prod >> 64);
  const std::uint64_t lo = static_cast<std::uint64_t>(prod);
  x0 = hi ^ key ^ x1;
  x1 = lo;
  key += kWeyl;
}

// Counter packing: c0 = role(4) | replication(24) | particle(36),
// c1 = step(60) | component(4). Distinct draw identities map to distinct
// counters as long as the fields stay inside those widths, which the
// experiment sizes respect by orders of magnitude.
inline U64Pair block(std::uint64_t seed, Role role, std::uint64_t replication,
                     std::uint64_t particle, std::uint64_t step,
                     std::uint32_t component) noexcept {
  const std::uint64_t c0 = (static_cast<std::uint64_t>(role) << 60) |
                           ((replication & 0xFFFFFFull) << 36) |
                           (particle & 0xFFFFFFFFFull);
  const std::uint64_t c1 = (step << 4) | (component & 0xFull);
  return philox2x64(seed, c0, c1);
}

inline double to_unit(std::uint64_t u) noexcept {
  // 53-bit mantissa, shifted into (0,1).
  return (static_cast<double>(u >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

U64Pair philox2x64(std::uint64_t key, std::uint64_t c0,
                   std::uint64_t c1) noexcept {
  for (int r = 0; r < 10; ++r) round_once(c0, c1, key);
  return {c0, c1};
}

double uniform01(std::uint64_t seed, Role role, std::uint64_t replication,
                 std::uint64_t particle, std::uint64_t step,
                 std::uint32_t component) noexcept {
  return to_unit(block(seed, role, replication, particle, step, component).a);
}

void standard_normal2(std::uint64_t seed, Role role, std::uint64_t replication,
                      std::uint64_t particle, std::uint64_t step,
                      std::uint32_t component, double* z0, double* z1) noexcept {
  const U64Pair u = block(seed, role, replication, particle, step, component);
  const double u1 = to_unit(u.a);
  const double u2 = to_unit(u.b);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 6.283185307179586476925286766559 * u2;
  *z0 = r * std::cos(th);
  *z1 = r * std::sin(th);
}

double standard_normal(std::uint64_t seed, Role role, std::uint64_t replication,
                       std::uint64_t particle, std::uint64_t step,
                       std::uint32_t component) noexcept {
  double z0, z1;
  standard_normal2(seed, role, replication, particle, step, component, &z0, &z1);
  return z0;
}

}  // namespace mvlab::rng
