#include <cmath>
#include <functional>

#include "doctest.h"
#include "mvlab/quadrature.hpp"

using namespace mvlab;

namespace {

double lbeta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

double apply(const QuadratureRule& q, const std::function<double(double)>& f) {
  double s = 0.0;
  for (int i = 0; i < q.size(); ++i) s += q.weights[i] * f(q.nodes[i]);
  return s;
}

}  // namespace

TEST_SUITE("quadrature") {

TEST_CASE("gauss-hermite integrates monomials against exp(-x^2)") {
  const QuadratureRule q = gauss_hermite_rule(5);
  // int x^k exp(-x^2) dx = Gamma((k+1)/2) for even k, 0 for odd k; a 5-point
  // rule is exact through degree 9.
  for (int k = 0; k <= 9; ++k) {
    const double got = apply(q, [&](double x) { return std::pow(x, k); });
    const double want = k % 2 ? 0.0 : std::tgamma(0.5 * (k + 1));
    CHECK(got == doctest::Approx(want).epsilon(1e-13).scale(1.0));
  }
}

TEST_CASE("gauss-hermite nodes are symmetric with positive weights") {
  const QuadratureRule q = gauss_hermite_rule(12);
  for (int i = 0; i < 12; ++i) {
    CHECK(q.weights[i] > 0.0);
    CHECK(q.nodes[i] == doctest::Approx(-q.nodes[11 - i]).epsilon(1e-13).scale(1.0));
  }
}

TEST_CASE("normal atoms reproduce gaussian moments") {
  const QuadratureRule q = normal_quadrature_atoms(8, 1.0, 4.0);
  CHECK(apply(q, [](double) { return 1.0; }) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(apply(q, [](double x) { return x; }) == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(apply(q, [](double x) { return (x - 1) * (x - 1); }) ==
        doctest::Approx(4.0).epsilon(1e-13));
  CHECK(apply(q, [](double x) { return std::pow(x - 1, 4); }) ==
        doctest::Approx(48.0).epsilon(1e-13));
  CHECK(apply(q, [](double x) { return std::pow(x - 1, 3); }) ==
        doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("gauss-jacobi integrates shifted monomials in closed form") {
  // int_{-1}^{1} (1-x)^a (1+x)^b (1+x)^k dx = 2^{a+b+1+k} B(b+k+1, a+1).
  for (const double a : {0.3, 1.7}) {
    for (const double b : {0.0, 0.5}) {
      const QuadratureRule q = gauss_jacobi_rule(8, a, b);
      for (int k = 0; k <= 6; ++k) {
        const double got = apply(q, [&](double x) { return std::pow(1 + x, k); });
        const double want =
            std::exp((a + b + 1 + k) * std::log(2.0) + lbeta(b + k + 1, a + 1));
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("gauss-jacobi rejects invalid exponents") {
  CHECK_THROWS(gauss_jacobi_rule(4, -1.0, 0.0));
  CHECK_THROWS(gauss_jacobi_rule(0, 0.5, 0.0));
}

TEST_CASE("singular time rule handles endpoint singularities exactly") {
  // int_r^t (t-v)^alpha v^k dv expanded through w = t - v:
  // sum_j C(k,j) t^{k-j} (-1)^j (t-r)^{alpha+j+1} / (alpha+j+1).
  const double r = 0.2, t = 1.2;
  for (const double alpha : {-0.5, -0.75, 0.0}) {
    const QuadratureRule q = singular_time_rule(10, r, t, alpha);
    for (int k = 0; k <= 3; ++k) {
      double want = 0.0;
      double binom = 1.0;
      for (int j = 0; j <= k; ++j) {
        want += binom * std::pow(t, k - j) * (j % 2 ? -1.0 : 1.0) *
                std::pow(t - r, alpha + j + 1) / (alpha + j + 1);
        binom = binom * (k - j) / (j + 1.0);
      }
      const double got = apply(q, [&](double v) { return std::pow(v, k); });
      CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
    for (int i = 0; i < q.size(); ++i) {
      CHECK(q.nodes[i] > r);
      CHECK(q.nodes[i] < t);
    }
  }
}

TEST_CASE("doubling nodes is a self-consistency fixed point on smooth data") {
  const auto f = [](double x) { return std::cos(1.3 * x); };
  const QuadratureRule q16 = gauss_jacobi_rule(16, -0.6, 0.0);
  const QuadratureRule q48 = gauss_jacobi_rule(48, -0.6, 0.0);
  CHECK(apply(q16, f) == doctest::Approx(apply(q48, f)).epsilon(1e-12));

  const QuadratureRule h16 = gauss_hermite_rule(16);
  const QuadratureRule h40 = gauss_hermite_rule(40);
  CHECK(apply(h16, f) == doctest::Approx(apply(h40, f)).epsilon(1e-12));
}

}  // TEST_SUITE
