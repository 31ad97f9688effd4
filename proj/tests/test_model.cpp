#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mvlab/model.hpp"
#include "mvlab/rng.hpp"

using namespace mvlab;

namespace {

ParticleCloud seeded_cloud(int n, int d, std::uint64_t seed) {
  ParticleCloud c;
  c.d = d;
  c.xs.resize(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k)
      c.xs[static_cast<std::size_t>(i) * d + k] =
          rng::standard_normal(seed, rng::Role::Scatter, 0, i, 0, k);
  return c;
}

// Fourth-order central stencil for d/dc of f along flat coordinate c.
double fd1(const std::function<double(const std::vector<double>&)>& f,
           std::vector<double> xs, std::size_t c, double h) {
  const auto at = [&](double delta) {
    std::vector<double> y = xs;
    y[c] += delta;
    return f(y);
  };
  return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
}

double fd2(const std::function<double(const std::vector<double>&)>& f,
           const std::vector<double>& xs, std::size_t c1, std::size_t c2,
           double h) {
  const auto inner = [&](const std::vector<double>& y) {
    return fd1(f, y, c2, h);
  };
  return fd1(inner, xs, c1, h);
}

std::vector<std::string> builtin_names() {
  return {"mean", "mean-squared", "second-moment", "variance"};
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("scalar tests expose consistent derivatives") {
  const double x[3] = {0.3, -1.2, 0.7};
  for (const auto kind :
       {ScalarTest::Kind::Coordinate, ScalarTest::Kind::SquaredNorm,
        ScalarTest::Kind::Sin, ScalarTest::Kind::Cos}) {
    ScalarTest t{kind, 1};
    const auto f = [&](const std::vector<double>& y) {
      return t.eval(y.data(), 3);
    };
    const std::vector<double> base(x, x + 3);
    double grad[3], hess[9];
    t.grad(x, 3, grad);
    t.hess(x, 3, hess);
    for (int k = 0; k < 3; ++k) {
      CHECK(grad[k] == doctest::Approx(fd1(f, base, k, 1e-3)).epsilon(1e-9).scale(1.0));
      for (int l = 0; l < 3; ++l)
        CHECK(hess[3 * k + l] ==
              doctest::Approx(fd2(f, base, k, l, 1e-2)).epsilon(1e-7).scale(1.0));
    }
  }
}

TEST_CASE("built-in functionals evaluate to their textbook values") {
  ParticleCloud c;
  c.d = 1;
  c.xs = {1.0, 2.0, 3.0, 6.0};
  CHECK(make_cylinder("mean", 1).eval(c) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(make_cylinder("mean-squared", 1).eval(c) == doctest::Approx(9.0).epsilon(1e-14));
  CHECK(make_cylinder("second-moment", 1).eval(c) ==
        doctest::Approx((1 + 4 + 9 + 36) / 4.0).epsilon(1e-14));
  CHECK(make_cylinder("variance", 1).eval(c) ==
        doctest::Approx(12.5 - 9.0).epsilon(1e-14));
  CHECK_THROWS(make_cylinder("median", 1));

  // d = 3 variance subtracts every mean coordinate.
  ParticleCloud p = seeded_cloud(12, 3, 5);
  const Eigen::VectorXd m = cloud_mean(p);
  const double second = make_cylinder("second-moment", 3).eval(p);
  CHECK(make_cylinder("variance", 3).eval(p) ==
        doctest::Approx(second - m.squaredNorm()).epsilon(1e-13));
}

TEST_CASE("empirical projection: analytic derivatives match coordinate fd") {
  // The flat derivative of phi composed with the empirical measure map:
  // d/dx_i phi(m^n) = (1/n) d_mu phi(x_i),
  // d^2/dx_i dx_j = (1/n^2) d^2_mu phi(x_i, x_j) for i != j, plus the
  // (1/n) d_v d_mu phi(x_i) block on the diagonal.
  for (const auto& name : builtin_names()) {
    for (const int n : {2, 8, 32}) {
      const int d = 2;
      const CylinderFunctional phi = make_cylinder(name, d);
      const ParticleCloud mu = seeded_cloud(n, d, 300 + n);
      const auto f = [&](const std::vector<double>& flat) {
        ParticleCloud c;
        c.d = d;
        c.xs = flat;
        return phi.eval(c);
      };
      for (const int i : {0, n - 1}) {
        const Eigen::Map<const Eigen::VectorXd> xi(mu.at(i), d);
        const Eigen::VectorXd g = lions_gradient(phi, mu, xi);
        for (int r = 0; r < d; ++r) {
          const double fd = fd1(f, mu.xs, static_cast<std::size_t>(i) * d + r, 1e-2);
          CHECK(g(r) / n == doctest::Approx(fd).epsilon(1e-8).scale(1.0));
        }
        const int j = i == 0 ? n - 1 : 0;
        if (j != i) {
          const Eigen::Map<const Eigen::VectorXd> xj(mu.at(j), d);
          const Eigen::MatrixXd s = lions_second(phi, mu, xi, xj);
          for (int r = 0; r < d; ++r)
            for (int q = 0; q < d; ++q) {
              const double fd =
                  fd2(f, mu.xs, static_cast<std::size_t>(i) * d + r,
                      static_cast<std::size_t>(j) * d + q, 1e-2);
              CHECK(s(r, q) / double(n) / double(n) ==
                    doctest::Approx(fd).epsilon(1e-7).scale(1.0));
            }
        }
        const Eigen::MatrixXd vg = lions_v_gradient(phi, mu, xi);
        const Eigen::MatrixXd ss = lions_second(phi, mu, xi, xi);
        for (int r = 0; r < d; ++r)
          for (int q = 0; q < d; ++q) {
            const double fd =
                fd2(f, mu.xs, static_cast<std::size_t>(i) * d + r,
                    static_cast<std::size_t>(i) * d + q, 1e-2);
            const double analytic =
                vg(r, q) / n + ss(r, q) / double(n) / double(n);
            CHECK(analytic == doctest::Approx(fd).epsilon(1e-7).scale(1.0));
          }
      }
    }
  }
}

TEST_CASE("first functional derivative is centered and matches mixtures") {
  for (const auto& name : builtin_names()) {
    const CylinderFunctional phi = make_cylinder(name, 1);
    const ParticleCloud mu = seeded_cloud(16, 1, 77);
    double total = 0.0;
    for (int i = 0; i < 16; ++i) {
      const Eigen::Map<const Eigen::VectorXd> y(mu.at(i), 1);
      total += mu.weight(i) * cylinder_lfd1(phi, mu, y);
    }
    CHECK(total == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));

    // The quadratic outer layer makes the mixture difference affine in eps,
    // so one Richardson step recovers the derivative exactly.
    Eigen::VectorXd y(1);
    y << 0.8;
    const double d1 = mixture_directional_derivative(phi, mu, y, 1e-3);
    const double d2 = mixture_directional_derivative(phi, mu, y, 2e-3);
    CHECK(2 * d1 - d2 == doctest::Approx(cylinder_lfd1(phi, mu, y)).epsilon(1e-8).scale(1.0));
  }
}

TEST_CASE("second functional derivative is symmetric and doubly centered") {
  const CylinderFunctional phi = make_cylinder("variance", 1);
  const ParticleCloud mu = seeded_cloud(12, 1, 88);
  Eigen::VectorXd y(1), y2(1);
  y << 0.4;
  y2 << -1.1;
  CHECK(cylinder_lfd2(phi, mu, y, y2) ==
        doctest::Approx(cylinder_lfd2(phi, mu, y2, y)).epsilon(1e-13).scale(1.0));
  double total = 0.0;
  for (int i = 0; i < 12; ++i) {
    const Eigen::Map<const Eigen::VectorXd> yi(mu.at(i), 1);
    total += mu.weight(i) * cylinder_lfd2(phi, mu, yi, y2);
  }
  CHECK(total == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("model registry construction and validation") {
  CHECK_THROWS_WITH_AS(make_model("nonexistent"),
                       doctest::Contains("linear-mean-field"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(make_model("constant", {{"sigm", 1.0}}),
                       doctest::Contains("sigm"), std::invalid_argument);
  CHECK(registered_models().size() == 6);
  for (const auto& name : registered_models()) CHECK_NOTHROW(make_model(name));
}

TEST_CASE("linear mean-field coefficients assemble correctly") {
  const CoefficientSet m = make_model("linear-mean-field", {{"alpha", 2.0}});
  ParticleCloud mu;
  mu.d = 1;
  mu.xs = {0.0, 1.0, 2.0};  // mean 1
  Eigen::VectorXd x(1);
  x << 0.25;
  const CoefficientValues v = evaluate_coefficients(m, 0.0, x, mu);
  CHECK(v.b(0) == doctest::Approx(2.0 * (1.0 - 0.25)).epsilon(1e-14));
  CHECK(v.sigma(0, 0) == doctest::Approx(1.0));
  CHECK(v.a(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("kuramoto drift equals the empirical sine average") {
  const CoefficientSet m = make_model("kuramoto", {{"kappa", 1.5}});
  const ParticleCloud mu = seeded_cloud(20, 1, 99);
  Eigen::VectorXd x(1);
  x << 0.6;
  const CoefficientValues v = evaluate_coefficients(m, 0.0, x, mu);
  double want = 0.0;
  for (int i = 0; i < 20; ++i) want += std::sin(mu.at(i)[0] - 0.6) / 20;
  CHECK(v.b(0) == doctest::Approx(1.5 * want).epsilon(1e-13));
}

TEST_CASE("time-ramp diffusion is time dependent") {
  const CoefficientSet m = make_model("time-ramp", {{"ramp", 1.0}});
  CHECK_FALSE(m.time_homogeneous);
  ParticleCloud mu;
  mu.d = 1;
  mu.xs = {0.0, 1.0};
  Eigen::VectorXd x(1);
  x << 0.0;
  CHECK(evaluate_coefficients(m, 0.0, x, mu).a(0, 0) == doctest::Approx(1.0));
  CHECK(evaluate_coefficients(m, 1.0, x, mu).a(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("ellipticity scan accepts valid models and rejects a broken bound") {
  const ParticleCloud mu = seeded_cloud(16, 1, 13);
  Eigen::VectorXd lo(1), hi(1);
  lo << -3.0;
  hi << 3.0;
  for (const char* name : {"constant", "linear-mean-field", "sin-diffusion"}) {
    const CoefficientSet m = make_model(name);
    const EllipticityReport rep = check_ellipticity(m, mu, 1.0, lo, hi, 64, 3);
    CHECK(rep.pass);
    CHECK(rep.min_eig > 0.0);
  }

  CoefficientSet broken = make_model("constant", {{"sigma", 2.0}});
  broken.lambda = 1.0;  // claims a = 4 fits in [1, 1]
  const EllipticityReport rep = check_ellipticity(broken, mu, 1.0, lo, hi, 16, 3);
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_eig == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("sin-diffusion stays inside its declared eigenvalue band") {
  const CoefficientSet m = make_model("sin-diffusion", {{"amplitude", 0.5}});
  const std::vector<double> s;
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    double a = 0.0;
    m.a_at(0.0, &x, s.data(), &a);
    CHECK(a >= 1.0 / m.lambda - 1e-12);
    CHECK(a <= m.lambda + 1e-12);
  }
}

}  // TEST_SUITE
