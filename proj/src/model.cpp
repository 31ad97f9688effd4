#include "mvlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "mvlab/rng.hpp"

namespace mvlab {

double ScalarTest::eval(const double* x, int d) const {
  switch (kind) {
    case Kind::Coordinate:
      return x[axis];
    case Kind::SquaredNorm: {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += x[k] * x[k];
      return s;
    }
    case Kind::Sin:
      return std::sin(x[axis]);
    case Kind::Cos:
      return std::cos(x[axis]);
  }
  return 0.0;
}

void ScalarTest::grad(const double* x, int d, double* out) const {
  std::memset(out, 0, sizeof(double) * d);
  switch (kind) {
    case Kind::Coordinate:
      out[axis] = 1.0;
      break;
    case Kind::SquaredNorm:
      for (int k = 0; k < d; ++k) out[k] = 2.0 * x[k];
      break;
    case Kind::Sin:
      out[axis] = std::cos(x[axis]);
      break;
    case Kind::Cos:
      out[axis] = -std::sin(x[axis]);
      break;
  }
}

void ScalarTest::hess(const double* x, int d, double* out) const {
  std::memset(out, 0, sizeof(double) * d * d);
  switch (kind) {
    case Kind::Coordinate:
      break;
    case Kind::SquaredNorm:
      for (int k = 0; k < d; ++k) out[k * d + k] = 2.0;
      break;
    case Kind::Sin:
      out[axis * d + axis] = -std::sin(x[axis]);
      break;
    case Kind::Cos:
      out[axis * d + axis] = -std::cos(x[axis]);
      break;
  }
}

Eigen::VectorXd ScalarTest::gradv(const Eigen::VectorXd& x) const {
  Eigen::VectorXd g(x.size());
  grad(x.data(), static_cast<int>(x.size()), g.data());
  return g;
}

Eigen::MatrixXd ScalarTest::hessm(const Eigen::VectorXd& x) const {
  const int d = static_cast<int>(x.size());
  std::vector<double> buf(static_cast<std::size_t>(d) * d);
  hess(x.data(), d, buf.data());
  Eigen::MatrixXd h(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) h(i, j) = buf[static_cast<std::size_t>(i) * d + j];
  return h;
}

double OuterQuadratic::eval(const Eigen::VectorXd& m) const {
  double v = c0 + c.dot(m);
  if (q.size() > 0) v += 0.5 * m.dot(q * m);
  return v;
}

Eigen::VectorXd OuterQuadratic::grad(const Eigen::VectorXd& m) const {
  Eigen::VectorXd g = c;
  if (q.size() > 0) g += q * m;
  return g;
}

Eigen::VectorXd CylinderFunctional::stats(const ParticleCloud& mu) const {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<int>(tests.size()));
  const int n = mu.size();
  for (int i = 0; i < n; ++i) {
    const double w = mu.weight(i);
    for (std::size_t j = 0; j < tests.size(); ++j)
      s(static_cast<int>(j)) += w * tests[j].eval(mu.at(i), mu.d);
  }
  return s;
}

double CylinderFunctional::eval(const ParticleCloud& mu) const {
  return outer.eval(stats(mu));
}

CylinderFunctional make_cylinder(const std::string& name, int d) {
  CylinderFunctional phi;
  phi.name = name;
  if (name == "mean") {
    phi.tests = {ScalarTest{ScalarTest::Kind::Coordinate, 0}};
    phi.outer.c = Eigen::VectorXd::Ones(1);
    phi.outer.q = Eigen::MatrixXd::Zero(1, 1);
  } else if (name == "mean-squared") {
    phi.tests = {ScalarTest{ScalarTest::Kind::Coordinate, 0}};
    phi.outer.c = Eigen::VectorXd::Zero(1);
    phi.outer.q = 2.0 * Eigen::MatrixXd::Identity(1, 1);
  } else if (name == "second-moment") {
    phi.tests = {ScalarTest{ScalarTest::Kind::SquaredNorm, 0}};
    phi.outer.c = Eigen::VectorXd::Ones(1);
    phi.outer.q = Eigen::MatrixXd::Zero(1, 1);
  } else if (name == "variance") {
    phi.tests.push_back(ScalarTest{ScalarTest::Kind::SquaredNorm, 0});
    for (int k = 0; k < d; ++k)
      phi.tests.push_back(ScalarTest{ScalarTest::Kind::Coordinate, k});
    const int arity = 1 + d;
    phi.outer.c = Eigen::VectorXd::Zero(arity);
    phi.outer.c(0) = 1.0;
    phi.outer.q = Eigen::MatrixXd::Zero(arity, arity);
    for (int k = 0; k < d; ++k) phi.outer.q(k + 1, k + 1) = -2.0;
  } else {
    throw std::invalid_argument("make_cylinder: unknown functional " + name);
  }
  return phi;
}

double cylinder_lfd1(const CylinderFunctional& phi, const ParticleCloud& mu,
                     const Eigen::VectorXd& y) {
  const Eigen::VectorXd s = phi.stats(mu);
  const Eigen::VectorXd g = phi.outer.grad(s);
  double v = 0.0;
  for (std::size_t j = 0; j < phi.tests.size(); ++j)
    v += g(static_cast<int>(j)) * (phi.tests[j].eval(y) - s(static_cast<int>(j)));
  return v;
}

double cylinder_lfd2(const CylinderFunctional& phi, const ParticleCloud& mu,
                     const Eigen::VectorXd& y, const Eigen::VectorXd& y2) {
  const Eigen::VectorXd s = phi.stats(mu);
  const Eigen::MatrixXd& h = phi.outer.hess();
  double v = 0.0;
  for (std::size_t j = 0; j < phi.tests.size(); ++j)
    for (std::size_t l = 0; l < phi.tests.size(); ++l)
      v += h(static_cast<int>(j), static_cast<int>(l)) *
           (phi.tests[j].eval(y) - s(static_cast<int>(j))) *
           (phi.tests[l].eval(y2) - s(static_cast<int>(l)));
  return v;
}

double mixture_directional_derivative(const CylinderFunctional& phi,
                                      const ParticleCloud& mu,
                                      const Eigen::VectorXd& y, double eps) {
  if (!(eps > 0 && eps < 1))
    throw std::invalid_argument("mixture_directional_derivative: eps outside (0,1)");
  ParticleCloud mixed = mu;
  const int n = mu.size();
  if (mixed.weights.empty()) mixed.weights.assign(n, 1.0 / n);
  for (double& w : mixed.weights) w *= (1.0 - eps);
  for (int k = 0; k < mu.d; ++k) mixed.xs.push_back(y(k));
  mixed.weights.push_back(eps);
  return (phi.eval(mixed) - phi.eval(mu)) / eps;
}

Eigen::VectorXd lions_gradient(const CylinderFunctional& phi,
                               const ParticleCloud& mu,
                               const Eigen::VectorXd& v) {
  const Eigen::VectorXd g = phi.outer.grad(phi.stats(mu));
  Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
  for (std::size_t j = 0; j < phi.tests.size(); ++j)
    out += g(static_cast<int>(j)) * phi.tests[j].gradv(v);
  return out;
}

Eigen::MatrixXd lions_v_gradient(const CylinderFunctional& phi,
                                 const ParticleCloud& mu,
                                 const Eigen::VectorXd& v) {
  const Eigen::VectorXd g = phi.outer.grad(phi.stats(mu));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(v.size(), v.size());
  for (std::size_t j = 0; j < phi.tests.size(); ++j)
    out += g(static_cast<int>(j)) * phi.tests[j].hessm(v);
  return out;
}

Eigen::MatrixXd lions_second(const CylinderFunctional& phi,
                             const ParticleCloud&, const Eigen::VectorXd& v,
                             const Eigen::VectorXd& v2) {
  const Eigen::MatrixXd& h = phi.outer.hess();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(v.size(), v2.size());
  for (std::size_t j = 0; j < phi.tests.size(); ++j)
    for (std::size_t l = 0; l < phi.tests.size(); ++l)
      out += h(static_cast<int>(j), static_cast<int>(l)) *
             phi.tests[j].gradv(v) * phi.tests[l].gradv(v2).transpose();
  return out;
}

std::vector<double> CoefficientSet::compute_stats(const ParticleCloud& mu) const {
  std::vector<double> s(stats.size(), 0.0);
  const int n = mu.size();
  for (int i = 0; i < n; ++i) {
    const double w = mu.weight(i);
    for (std::size_t j = 0; j < stats.size(); ++j)
      s[j] += w * stats[j].eval(mu.at(i), mu.d);
  }
  return s;
}

void CoefficientSet::a_at(double t, const double* x, const double* s,
                          double* out) const {
  const int d = dim, m = noise_dim;
  double sig[64];
  if (d * m > 64) throw std::length_error("CoefficientSet::a_at: dim*noise_dim > 64");
  sigma(t, x, s, sig);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < m; ++k) acc += sig[i * m + k] * sig[j * m + k];
      out[i * d + j] = acc;
    }
}

CoefficientValues evaluate_coefficients(const CoefficientSet& coeffs, double t,
                                        const Eigen::VectorXd& x,
                                        const ParticleCloud& mu) {
  if (static_cast<int>(x.size()) != coeffs.dim)
    throw std::invalid_argument("evaluate_coefficients: state dimension mismatch");
  if (mu.d != coeffs.dim)
    throw std::invalid_argument("evaluate_coefficients: cloud dimension mismatch");
  const std::vector<double> s = coeffs.compute_stats(mu);
  CoefficientValues out;
  out.b.resize(coeffs.dim);
  out.sigma.resize(coeffs.dim, coeffs.noise_dim);
  std::vector<double> buf(static_cast<std::size_t>(coeffs.dim) *
                          std::max(coeffs.dim, coeffs.noise_dim));
  coeffs.drift_at(t, x.data(), s.data(), buf.data());
  for (int i = 0; i < coeffs.dim; ++i) out.b(i) = buf[i];
  coeffs.sigma_at(t, x.data(), s.data(), buf.data());
  for (int i = 0; i < coeffs.dim; ++i)
    for (int j = 0; j < coeffs.noise_dim; ++j)
      out.sigma(i, j) = buf[static_cast<std::size_t>(i) * coeffs.noise_dim + j];
  out.a = out.sigma * out.sigma.transpose();
  return out;
}

EllipticityReport check_ellipticity(const CoefficientSet& coeffs,
                                    const ParticleCloud& mu, double horizon,
                                    const Eigen::VectorXd& box_lo,
                                    const Eigen::VectorXd& box_hi,
                                    int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("check_ellipticity: n_samples < 1");
  const int d = coeffs.dim;
  const std::vector<double> s = coeffs.compute_stats(mu);
  EllipticityReport rep;
  rep.min_eig = std::numeric_limits<double>::infinity();
  rep.max_eig = 0.0;
  std::vector<double> a(static_cast<std::size_t>(d) * d);
  Eigen::MatrixXd am(d, d);
  Eigen::VectorXd x(d);
  for (int i = 0; i < n_samples; ++i) {
    for (int k = 0; k < d; ++k) {
      const double u = rng::uniform01(seed, rng::Role::Scatter, 0, i, 0,
                                      static_cast<std::uint32_t>(k));
      x(k) = box_lo(k) + u * (box_hi(k) - box_lo(k));
    }
    const double t = horizon * rng::uniform01(seed, rng::Role::Scatter, 0, i, 1, 0);
    coeffs.a_at(t, x.data(), s.data(), a.data());
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) am(r, c) = a[static_cast<std::size_t>(r) * d + c];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(am);
    rep.min_eig = std::min(rep.min_eig, es.eigenvalues().minCoeff());
    rep.max_eig = std::max(rep.max_eig, es.eigenvalues().maxCoeff());
  }
  rep.pass = rep.min_eig >= 1.0 / coeffs.lambda - 1e-12 &&
             rep.max_eig <= coeffs.lambda + 1e-12;
  return rep;
}

namespace {

double take_param(std::map<std::string, double>& p, const std::string& key,
                  double fallback) {
  const auto it = p.find(key);
  if (it == p.end()) return fallback;
  const double v = it->second;
  p.erase(it);
  return v;
}

void reject_leftover(const std::map<std::string, double>& p,
                     const std::string& model) {
  if (p.empty()) return;
  std::string keys;
  for (const auto& [k, _] : p) keys += (keys.empty() ? "" : ", ") + k;
  throw std::invalid_argument("model " + model + ": unknown parameters: " + keys);
}

}  // namespace

std::vector<std::string> registered_models() {
  return {"constant", "constant-drift", "linear-mean-field",
          "sin-diffusion", "kuramoto", "time-ramp"};
}

CoefficientSet make_model(const std::string& name,
                          const std::map<std::string, double>& params) {
  std::map<std::string, double> p = params;
  CoefficientSet m;
  m.name = name;
  if (name == "constant") {
    const int d = static_cast<int>(take_param(p, "dim", 1));
    const double s0 = take_param(p, "sigma", 1.0);
    reject_leftover(p, name);
    m.dim = m.noise_dim = d;
    m.lambda = std::max(s0 * s0, 1.0 / (s0 * s0));
    m.drift_free = true;
    m.diffusion_state_free = true;
    m.diffusion_autonomous = true;
    m.drift = [d](double, const double*, const double*, double* out) {
      std::memset(out, 0, sizeof(double) * d);
    };
    m.sigma = [d, s0](double, const double*, const double*, double* out) {
      std::memset(out, 0, sizeof(double) * d * d);
      for (int k = 0; k < d; ++k) out[k * d + k] = s0;
    };
  } else if (name == "constant-drift") {
    const int d = static_cast<int>(take_param(p, "dim", 1));
    const double beta = take_param(p, "beta", 1.0);
    const double s0 = take_param(p, "sigma", 1.0);
    reject_leftover(p, name);
    m.dim = m.noise_dim = d;
    m.lambda = std::max(s0 * s0, 1.0 / (s0 * s0));
    m.diffusion_state_free = true;
    m.diffusion_autonomous = true;
    m.drift = [d, beta](double, const double*, const double*, double* out) {
      for (int k = 0; k < d; ++k) out[k] = beta;
    };
    m.sigma = [d, s0](double, const double*, const double*, double* out) {
      std::memset(out, 0, sizeof(double) * d * d);
      for (int k = 0; k < d; ++k) out[k * d + k] = s0;
    };
  } else if (name == "linear-mean-field") {
    const int d = static_cast<int>(take_param(p, "dim", 1));
    const double alpha = take_param(p, "alpha", 1.0);
    const double s0 = take_param(p, "sigma", 1.0);
    reject_leftover(p, name);
    m.dim = m.noise_dim = d;
    m.lambda = std::max(s0 * s0, 1.0 / (s0 * s0));
    m.diffusion_state_free = true;
    m.diffusion_autonomous = true;
    for (int k = 0; k < d; ++k)
      m.stats.push_back(ScalarTest{ScalarTest::Kind::Coordinate, k});
    m.drift = [d, alpha](double, const double* x, const double* s, double* out) {
      for (int k = 0; k < d; ++k) out[k] = alpha * (s[k] - x[k]);
    };
    m.sigma = [d, s0](double, const double*, const double*, double* out) {
      std::memset(out, 0, sizeof(double) * d * d);
      for (int k = 0; k < d; ++k) out[k * d + k] = s0;
    };
  } else if (name == "sin-diffusion") {
    const double amp = take_param(p, "amplitude", 0.5);
    reject_leftover(p, name);
    if (!(amp > 0 && amp < 1))
      throw std::invalid_argument("sin-diffusion: amplitude must be in (0,1)");
    m.dim = m.noise_dim = 1;
    m.lambda = 1.0 / (1.0 - amp);
    m.drift_free = true;
    m.diffusion_autonomous = true;
    m.drift = [](double, const double*, const double*, double* out) { out[0] = 0.0; };
    m.sigma = [amp](double, const double* x, const double*, double* out) {
      out[0] = std::sqrt(1.0 + amp * std::sin(x[0]));
    };
  } else if (name == "kuramoto") {
    const double kappa = take_param(p, "kappa", 1.0);
    const double s0 = take_param(p, "sigma", 1.0);
    reject_leftover(p, name);
    m.dim = m.noise_dim = 1;
    m.lambda = std::max(s0 * s0, 1.0 / (s0 * s0));
    m.diffusion_state_free = true;
    m.diffusion_autonomous = true;
    m.stats = {ScalarTest{ScalarTest::Kind::Sin, 0},
               ScalarTest{ScalarTest::Kind::Cos, 0}};
    // b(x, mu) = kappa * E_mu[sin(y - x)] = kappa*(S cos x - C sin x).
    m.drift = [kappa](double, const double* x, const double* s, double* out) {
      out[0] = kappa * (s[0] * std::cos(x[0]) - s[1] * std::sin(x[0]));
    };
    m.sigma = [s0](double, const double*, const double*, double* out) { out[0] = s0; };
  } else if (name == "time-ramp") {
    const double ramp = take_param(p, "ramp", 1.0);
    const double horizon = take_param(p, "horizon", 1.0);
    reject_leftover(p, name);
    if (!(ramp >= 0)) throw std::invalid_argument("time-ramp: ramp must be >= 0");
    m.dim = m.noise_dim = 1;
    m.lambda = 1.0 + ramp * horizon;
    m.time_homogeneous = false;
    m.drift_free = true;
    m.diffusion_state_free = true;
    m.drift = [](double, const double*, const double*, double* out) { out[0] = 0.0; };
    m.sigma = [ramp](double t, const double*, const double*, double* out) {
      out[0] = std::sqrt(1.0 + ramp * t);
    };
  } else {
    std::string known;
    for (const auto& k : registered_models())
      known += (known.empty() ? "" : ", ") + k;
    throw std::invalid_argument("unknown model '" + name +
                                "'; registered models: " + known);
  }
  return m;
}

}  // namespace mvlab
