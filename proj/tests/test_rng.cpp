#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "mvlab/rng.hpp"

using namespace mvlab;

TEST_SUITE("rng") {

TEST_CASE("philox output is frozen") {
  // Regression anchors: any change to the round function or constants is a
  // silent break of every stored seed, so pin raw outputs.
  auto p = rng::philox2x64(0x123456789abcdef0ull, 42, 7);
  CHECK(p.a == 6757003452622560945ull);
  CHECK(p.b == 15468838835910894077ull);
  auto q = rng::philox2x64(1, 0, 0);
  CHECK(q.a == 16992735019459087260ull);
  CHECK(q.b == 2172160424751443349ull);
}

TEST_CASE("derived draws are frozen") {
  CHECK(rng::uniform01(1, rng::Role::Init, 0, 0, 0, 0) ==
        doctest::Approx(0.4525746679361487).epsilon(1e-15));
  CHECK(rng::uniform01(1, rng::Role::Init, 0, 3, 5, 1) ==
        doctest::Approx(0.13252188559510553).epsilon(1e-15));
  CHECK(rng::standard_normal(7, rng::Role::Increment, 2, 11, 4, 0) ==
        doctest::Approx(1.2539014318495028).epsilon(1e-15));
}

TEST_CASE("draws are pure functions of the counter") {
  for (int rep = 0; rep < 3; ++rep)
    CHECK(rng::uniform01(9, rng::Role::Scatter, 1, 2, 3, 4) ==
          rng::uniform01(9, rng::Role::Scatter, 1, 2, 3, 4));
}

TEST_CASE("distinct counters give distinct draws") {
  std::set<double> seen;
  for (std::uint64_t p = 0; p < 50; ++p)
    for (std::uint64_t s = 0; s < 50; ++s)
      seen.insert(rng::uniform01(3, rng::Role::Init, 0, p, s, 0));
  CHECK(seen.size() == 2500);
}

TEST_CASE("roles, replications and seeds separate streams") {
  const double base = rng::uniform01(5, rng::Role::Init, 0, 7, 9, 0);
  CHECK(base != rng::uniform01(5, rng::Role::Increment, 0, 7, 9, 0));
  CHECK(base != rng::uniform01(5, rng::Role::RefInit, 0, 7, 9, 0));
  CHECK(base != rng::uniform01(5, rng::Role::Init, 1, 7, 9, 0));
  CHECK(base != rng::uniform01(6, rng::Role::Init, 0, 7, 9, 0));
}

TEST_CASE("uniform draws stay inside the open unit interval") {
  double mn = 1.0, mx = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng::uniform01(11, rng::Role::Scatter, 0, i, 0, 0);
    mn = std::min(mn, u);
    mx = std::max(mx, u);
  }
  CHECK(mn > 0.0);
  CHECK(mx < 1.0);
  CHECK(mn < 1e-4);
  CHECK(mx > 1.0 - 1e-4);
}

TEST_CASE("normal moments match within Monte Carlo error") {
  const int n = 1000000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng::standard_normal(13, rng::Role::Scatter, 0, i, 0, 0);
    sum += z;
    sumsq += z * z;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("paired normals agree with the single-draw path") {
  double z0 = 0, z1 = 0;
  rng::standard_normal2(17, rng::Role::Init, 0, 5, 6, 2, &z0, &z1);
  CHECK(z0 == rng::standard_normal(17, rng::Role::Init, 0, 5, 6, 2));
  CHECK(z0 != z1);
  // The pair is one Box-Muller block, so both are standard normal; spot-check
  // the second coordinate is not degenerate.
  CHECK(std::isfinite(z1));
}

}  // TEST_SUITE
