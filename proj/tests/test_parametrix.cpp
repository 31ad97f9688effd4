#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "mvlab/parametrix.hpp"
#include "mvlab/sim.hpp"

using namespace mvlab;

namespace {

Eigen::VectorXd vec1(double v) {
  Eigen::VectorXd x(1);
  x[0] = v;
  return x;
}

ParticleCloud gh_cloud(int n, double mean, double var) {
  const QuadratureRule r = normal_quadrature_atoms(n, mean, var);
  ParticleCloud c;
  c.d = 1;
  c.xs = r.nodes;
  c.weights = r.weights;
  return c;
}

FrozenProxyContext measure_free_context(const CoefficientSet& coeffs,
                                        double horizon, double dt) {
  SimConfig cfg;
  cfg.n = 64;
  cfg.dt = dt;
  cfg.horizon = horizon;
  cfg.seed = 7;
  cfg.keep_paths = false;
  auto pr = picard_mean_field_flow(coeffs, make_init("point", {{"x", 0.0}}),
                                   cfg, 1e-3, 4);
  return make_context(coeffs, std::move(pr.flow));
}

// Mean-reversion model dX = alpha(E[X] - X)dt + dW from a symmetric
// Gauss-Hermite atom cloud. Antithetic mirroring keeps the mean statistic at
// zero, so each decoupled density is an exact Ornstein-Uhlenbeck law and the
// flow is reusable as a fixture across the heavier cases below.
struct MeanFieldLab {
  ParticleCloud atoms;
  FrozenProxyContext ctx;
};

const MeanFieldLab& mean_field_lab() {
  static const MeanFieldLab lab = [] {
    MeanFieldLab l;
    l.atoms = gh_cloud(20, 0.0, 1.0);
    const CoefficientSet coeffs =
        make_model("linear-mean-field", {{"alpha", 2.0}});
    InitSampler init;
    init.kind = InitSampler::Kind::Atoms;
    init.atoms = l.atoms;
    init.antithetic = true;
    SimConfig cfg;
    cfg.n = 2048;
    cfg.dt = 1.0 / 256;
    cfg.horizon = 0.25;
    cfg.seed = 11;
    cfg.keep_paths = false;
    cfg.antithetic = true;
    auto pr = picard_mean_field_flow(coeffs, init, cfg, 1e-4, 6);
    l.ctx = make_context(coeffs, std::move(pr.flow));
    return l;
  }();
  return lab;
}

const FrozenProxyContext& drift_context() {
  static const FrozenProxyContext ctx = measure_free_context(
      make_model("constant-drift", {{"beta", 1.0}, {"sigma", 1.0}}), 1.0,
      1.0 / 64);
  return ctx;
}

double heat(double t1, double t2, double x, double y) {
  return gaussian1(t2 - t1, y - x);
}

// Envelope of the product g(v-s, .-x) g(t-v, y-.) at inner time v: a
// Brownian-bridge slice between (s, x) and (t, y).
std::function<std::pair<double, double>(double)> bridge_envelope(double s,
                                                                 double t,
                                                                 double x,
                                                                 double y) {
  return [=](double v) {
    const double mean = x + (v - s) / (t - s) * (y - x);
    const double sd = std::sqrt(std::max((v - s) * (t - v) / (t - s), 1e-12));
    return std::make_pair(mean, sd);
  };
}

}  // namespace

TEST_SUITE("parametrix") {

TEST_CASE("context validation") {
  const FrozenProxyContext& good = drift_context();
  CHECK_NOTHROW(good.validate());
  CHECK(good.envelope_rate() == doctest::Approx(2.0));

  FrozenProxyContext bad = good;
  bad.s += 0.1;  // s must be the first grid time
  CHECK_THROWS(bad.validate());

  bad = good;
  bad.z_nodes = 4;
  CHECK_THROWS(bad.validate());

  bad = good;
  bad.coeffs.eta = 0.0;
  CHECK_THROWS(bad.validate());

  bad = good;
  bad.envelope_c = -1.0;
  CHECK_THROWS(bad.validate());

  CHECK_THROWS(DensityField(good, 0.0, 1.0, -1));
  CHECK_THROWS(DensityField(good, 0.0, 2.0, 1));  // beyond the flow grid
  CHECK_THROWS(DensityField(good, 0.0, good.s, 1));
}

TEST_CASE("accumulated variance closed forms") {
  const FrozenProxyContext flat =
      measure_free_context(make_model("constant", {{"sigma", 1.5}}), 1.0,
                           1.0 / 64);
  // Autonomous diffusion: int a dr = sigma^2 (t2 - t1).
  CHECK(accumulated_variance(flat, 0.1, 0.8, 0.4) ==
        doctest::Approx(2.25 * 0.7).epsilon(1e-13));
  const Eigen::MatrixXd cov =
      accumulated_covariance(flat, 0.1, 0.8, vec1(0.4));
  CHECK(cov.rows() == 1);
  CHECK(cov(0, 0) == doctest::Approx(2.25 * 0.7).epsilon(1e-13));
  CHECK_THROWS(accumulated_variance(flat, 0.8, 0.8, 0.0));

  // a(r) = 1 + r: the grid trapezoid is exact for a linear integrand, so
  // int_0^1 = 3/2 and the proxy peak is (2 pi 3/2)^{-1/2}.
  const FrozenProxyContext ramp = measure_free_context(
      make_model("time-ramp", {{"ramp", 1.0}, {"horizon", 1.0}}), 1.0,
      1.0 / 64);
  CHECK(accumulated_variance(ramp, 0.0, 1.0, 0.0) ==
        doctest::Approx(1.5).epsilon(1e-13));
  CHECK(frozen_gaussian_proxy(ramp, 0.0, 1.0, vec1(0.2), vec1(0.2),
                              vec1(0.2)) ==
        doctest::Approx(0.32573500793528).epsilon(1e-10));
}

TEST_CASE("frozen proxy is the heat kernel for unit diffusion") {
  const FrozenProxyContext ctx =
      measure_free_context(make_model("constant", {}), 1.0, 1.0 / 64);
  CHECK(frozen_gaussian_proxy(ctx, 0.0, 1.0, vec1(0.0), vec1(0.0),
                              vec1(0.0)) ==
        doctest::Approx(0.3989422804014327).epsilon(1e-13));
  CHECK(frozen_gaussian_proxy(ctx, 0.0, 1.0, vec1(0.0), vec1(1.0),
                              vec1(1.0)) ==
        doctest::Approx(0.24197072451914337).epsilon(1e-13));
  // State-free diffusion: the freeze point cannot matter.
  CHECK(frozen_gaussian_proxy(ctx, 0.0, 1.0, vec1(0.0), vec1(-3.0),
                              vec1(1.0)) ==
        frozen_gaussian_proxy(ctx, 0.0, 1.0, vec1(0.0), vec1(3.0), vec1(1.0)));
}

TEST_CASE("kernel vanishes without drift or state-dependent diffusion") {
  const FrozenProxyContext flat =
      measure_free_context(make_model("constant", {}), 1.0, 1.0 / 64);
  CHECK(parametrix_kernel(flat, 0.3, 0.9, vec1(0.2), vec1(1.1)) == 0.0);

  const FrozenProxyContext sin_ctx = measure_free_context(
      make_model("sin-diffusion", {{"amplitude", 0.5}}), 1.0, 1.0 / 64);
  CHECK(parametrix_kernel(sin_ctx, 0.2, 0.7, vec1(0.4), vec1(0.4)) == 0.0);
}

TEST_CASE("kernel one-step value and singularity guard") {
  const FrozenProxyContext& ctx = drift_context();
  // Unit drift, unit diffusion: the kernel reduces to the first Hermite
  // factor times the heat kernel, (1/1) g(1, 1).
  CHECK(parametrix_kernel(ctx, 0.0, 1.0, vec1(0.0), vec1(1.0)) ==
        doctest::Approx(0.24197072451914337).epsilon(1e-12));
  CHECK_THROWS(parametrix_kernel(ctx, 1.0 - 1e-13, 1.0, vec1(0.0), vec1(1.0)));
  CHECK_THROWS(parametrix_kernel(ctx, 1.0, 1.0, vec1(0.0), vec1(1.0)));
}

TEST_CASE("space-time convolution reproduces Chapman-Kolmogorov") {
  CHECK(gaussian_space_integral([](double z) { return gaussian1(1.0, z); },
                                0.0, 1.0, 32) ==
        doctest::Approx(1.0).epsilon(1e-12));

  const auto env = bridge_envelope(0.0, 1.0, 0.0, 1.0);
  const double ck =
      spacetime_convolve(heat, heat, 0.0, 1.0, 0.0, 1.0, 16, 32, env, 0.0);
  CHECK(std::abs(ck - gaussian1(1.0, 1.0)) < 1e-10);

  // Self-convergence under node doubling.
  const double ck2 =
      spacetime_convolve(heat, heat, 0.0, 1.0, 0.0, 1.0, 32, 64, env, 0.0);
  CHECK(std::abs(ck2 - ck) < 1e-6);

  const auto zero = [](double, double, double, double) { return 0.0; };
  CHECK(spacetime_convolve(heat, zero, 0.0, 1.0, 0.0, 1.0, 16, 32, env, 0.0) ==
        0.0);
}

TEST_CASE("time quadrature absorbs the declared endpoint singularity") {
  // int_0^1 dv int g(v, z) g(1-v, y-z)/sqrt(1-v) dz = 2 g(1, y) by the
  // Gaussian semigroup identity and int_0^1 (1-v)^{-1/2} dv = 2.
  const auto singular = [](double t1, double t2, double x, double y) {
    return gaussian1(t2 - t1, y - x) / std::sqrt(t2 - t1);
  };
  const double v =
      spacetime_convolve(heat, singular, 0.0, 1.0, 0.0, 1.0, 16, 32,
                         bridge_envelope(0.0, 1.0, 0.0, 1.0), -0.5);
  CHECK(std::abs(v - 2.0 * gaussian1(1.0, 1.0)) < 1e-10);
}

TEST_CASE("series collapses onto the proxy when the kernel vanishes") {
  const FrozenProxyContext flat =
      measure_free_context(make_model("constant", {}), 1.0, 1.0 / 64);
  const DensityField f(flat, 0.3, 1.0, 3);
  for (int i = 0; i <= 20; ++i) {
    const double z = -2.7 + 6.0 * i / 20.0;
    CHECK(f.value(z) == doctest::Approx(gaussian1(1.0, z - 0.3)).epsilon(1e-14));
    for (int k = 1; k <= 3; ++k) CHECK(f.term(k, z) == 0.0);
    CHECK(f.tail_bound(z) == 0.0);
  }
  CHECK_THROWS(f.term(4, 0.0));

  // Nearly degenerate state dependence exercises the full table pipeline;
  // the corrections must stay at the perturbation scale.
  const FrozenProxyContext tiny = measure_free_context(
      make_model("sin-diffusion", {{"amplitude", 1e-6}}), 1.0, 1.0 / 64);
  const DensityField g(tiny, 0.3, 1.0, 2, std::make_pair(-3.0, 3.6));
  for (int i = 0; i <= 20; ++i) {
    const double z = -2.7 + 6.0 * i / 20.0;
    CHECK(std::abs(g.value(z) - gaussian1(1.0, z - 0.3)) < 1e-5);
  }
}

TEST_CASE("constant drift matches the shifted gaussian") {
  const DensityField f(drift_context(), 0.0, 1.0, 4, std::make_pair(-3.0, 5.0));
  double err1 = 0.0, err4 = 0.0;
  const DensityField f1(drift_context(), 0.0, 1.0, 1, std::make_pair(-3.0, 5.0));
  for (int i = 0; i <= 40; ++i) {
    const double z = -3.0 + 8.0 * i / 40.0;
    const double exact = gaussian1(1.0, z - 1.0);
    const double err = std::abs(f.value(z) - exact);
    const double allowance = std::max(1e-3, f.tail_bound(z));
    CHECK(err <= allowance);
    CHECK(err < 0.5 * allowance);  // frozen margin, worst observed 0.11
    err4 = std::max(err4, err);
    err1 = std::max(err1, std::abs(f1.value(z) - exact));
  }
  CHECK(err4 < 0.5 * err1);
  CHECK(f.tail_bound(1.0) < f1.tail_bound(1.0));
  // Positivity inside the bulk of the shifted Gaussian.
  for (int i = 0; i <= 20; ++i) CHECK(f.value(-1.5 + 5.0 * i / 20.0) > 0.0);
}

TEST_CASE("series terms respect the level envelope") {
  const DensityField f(drift_context(), 0.0, 1.0, 4, std::make_pair(-3.0, 5.0));
  const double lambda = drift_context().coeffs.lambda;
  const double eta = drift_context().coeffs.eta;
  CHECK(f.series_constant() > 0.0);
  for (const double z : {-0.9, 0.3, 1.6, 2.8, 4.1}) {
    for (int k = 1; k <= 4; ++k) {
      const double bound =
          beta_product_bound(k, eta, 1.0, f.series_constant()) *
          gaussian1(2.0 * lambda, z);
      CHECK(std::abs(f.term(k, z)) <= bound);
    }
  }
}

TEST_CASE("series telescopes across truncation orders") {
  const DensityField f3(drift_context(), 0.0, 1.0, 3, std::make_pair(-3.0, 5.0));
  const DensityField f4(drift_context(), 0.0, 1.0, 4, std::make_pair(-3.0, 5.0));
  for (const double z : {-0.9, 0.3, 1.6, 2.8, 4.1}) {
    CHECK(std::abs(f4.value(z) - f3.value(z) - f4.term(4, z)) < 1e-12);
  }
}

TEST_CASE("measure density averages the atom fields") {
  const FrozenProxyContext flat =
      measure_free_context(make_model("constant", {}), 1.0, 1.0 / 64);
  ParticleCloud two;
  two.d = 1;
  two.xs = {0.0, 1.0};
  const double exact = 0.5 * (gaussian1(1.0, 0.0) + gaussian1(1.0, -1.0));
  CHECK(mckean_density(flat, two, 1.0, 0.0, 2) ==
        doctest::Approx(exact).epsilon(1e-13));
  CHECK(exact == doctest::Approx(0.3204565).epsilon(1e-6));

  ParticleCloud point;
  point.d = 1;
  point.xs = {0.4};
  CHECK(mckean_density(flat, point, 1.0, 0.2, 2) ==
        doctest::Approx(parametrix_series(flat, 2, 0.4, 0.2, 1.0).value)
            .epsilon(1e-14));

  // Linearity in the start measure holds exactly: the mixture density is the
  // same weighted sum of per-atom fields.
  const FrozenProxyContext& ctx = drift_context();
  ParticleCloud a, b, mix;
  a.d = b.d = mix.d = 1;
  a.xs = {-0.4, 0.1};
  b.xs = {0.6};
  mix.xs = {-0.4, 0.1, 0.6};
  mix.weights = {0.25, 0.25, 0.5};
  const double za = 0.9;
  const double lhs = mckean_density(ctx, mix, 1.0, za, 3);
  const double rhs = 0.5 * mckean_density(ctx, a, 1.0, za, 3) +
                     0.5 * mckean_density(ctx, b, 1.0, za, 3);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-13));
}

TEST_CASE("mean reversion density matches the ornstein-uhlenbeck law") {
  const MeanFieldLab& lab = mean_field_lab();
  // Antithetic symmetric atoms pin the mean statistic of the flow to zero.
  CHECK(std::abs(lab.ctx.stats_at(0.25)[0]) < 1e-12);

  const double x = 0.8, t = 0.25, alpha = 2.0;
  const double m = x * std::exp(-alpha * t);
  const double v = (1.0 - std::exp(-2.0 * alpha * t)) / (2.0 * alpha);
  const DensityField f(lab.ctx, x, t, 12, std::make_pair(-1.5, 2.5));
  for (const double z : {-0.2, 0.2, 0.485, 0.8, 1.3}) {
    CHECK(std::abs(f.value(z) - gaussian1(v, z - m)) < 1e-3);
    CHECK(f.value(z) > 0.0);
    CHECK(f.tail_bound(z) < 0.05);
  }
}

TEST_CASE("truncated mixture density integrates to one") {
  const MeanFieldLab& lab = mean_field_lab();
  double xmax = 0.0;
  for (int i = 0; i < lab.atoms.size(); ++i)
    xmax = std::max(xmax, std::abs(lab.atoms.at(i)[0]));
  const double zhi = xmax + 3.5;
  const int nz = 421;
  std::vector<double> zs(nz);
  for (int i = 0; i < nz; ++i) zs[i] = -zhi + 2.0 * zhi * i / (nz - 1.0);
  const auto prof = mckean_density_profile(lab.ctx, lab.atoms, 0.25, zs, 3);
  double mass = 0.0;
  for (int i = 0; i + 1 < nz; ++i)
    mass += 0.5 * (prof[i].value + prof[i + 1].value) * (zs[1] - zs[0]);
  CHECK(std::abs(mass - 1.0) < 1e-4);
}

TEST_CASE("gaussian bound certified on fresh samples") {
  const MeanFieldLab& lab = mean_field_lab();
  const GaussianBoundReport rep =
      certify_gaussian_bound(lab.ctx, lab.atoms, 2, 4, 4, 9);
  CHECK(rep.rate == doctest::Approx(2.0));
  CHECK(rep.constant > 0.1);
  CHECK(rep.constant < 100.0);
  CHECK(rep.samples >= 60);
  CHECK(rep.violations == 0);
  CHECK(rep.worst_ratio < 1.0);
  CHECK_THROWS(certify_gaussian_bound(lab.ctx, lab.atoms, 2, 1, 4, 9));
}

TEST_CASE("backward equation residual vanishes at second order") {
  const CoefficientSet coeffs = make_model("constant", {});
  ParticleCloud mu0;
  mu0.d = 1;
  mu0.xs = {-0.4, 0.1, 0.7};
  InitSampler init;
  init.kind = InitSampler::Kind::Atoms;
  init.atoms = mu0;
  SimConfig cfg;
  cfg.n = 64;
  cfg.dt = 1.0 / 32;
  cfg.horizon = 0.5;
  cfg.seed = 3;
  cfg.keep_paths = false;
  const FrozenProxyContext ctx = make_context(
      coeffs, picard_mean_field_flow(coeffs, init, cfg, 1e-3, 4).flow);

  const ResidualReport r1 = kolmogorov_residual(ctx, mu0, 0.5, 0.3, 2, 1e-3, 1e-3);
  CHECK(std::abs(r1.residual) < 1e-5);
  // The cancellation is between O(1) pieces, not between zeros.
  CHECK(std::abs(r1.time_term) > 0.1);
  CHECK(std::abs(r1.generator_term) > 0.1);

  const ResidualReport r2 = kolmogorov_residual(ctx, mu0, 0.5, 0.3, 2, 5e-4, 5e-4);
  const double ratio = r1.residual / r2.residual;
  CHECK(ratio > 3.2);  // second-order differences: halving shrinks ~4x
  CHECK(ratio < 4.8);

  // A common shift of the window start changes nothing for homogeneous
  // coefficients.
  FrozenProxyContext shifted = ctx;
  shifted.s += 0.3;
  for (double& tt : shifted.flow.times) tt += 0.3;
  const ResidualReport rs = kolmogorov_residual(shifted, mu0, 0.8, 0.3, 2, 1e-3, 1e-3);
  CHECK(std::abs(rs.residual - r1.residual) < 1e-14);

  CHECK_THROWS(kolmogorov_residual(ctx, mu0, 0.5, 0.3, 2, 0.0, 1e-3));
  CHECK_THROWS(kolmogorov_residual(ctx, mu0, 0.5, 0.3, 2, 1e-3, -1.0));
  CHECK_THROWS(kolmogorov_residual(ctx, mu0, 0.002, 0.3, 2, 1e-3, 1e-3));
  ParticleCloud big;
  big.d = 1;
  big.xs.assign(65, 0.0);
  for (int i = 0; i < 65; ++i) big.xs[i] = -1.0 + 2.0 * i / 64.0;
  CHECK_THROWS(kolmogorov_residual(ctx, big, 0.5, 0.3, 2, 1e-3, 1e-3));
}

}  // TEST_SUITE
