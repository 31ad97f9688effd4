#include "mvlab/gauss.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

namespace mvlab {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}

Covariance::Covariance(Eigen::MatrixXd sigma) : a_(std::move(sigma)) {
  const int d = static_cast<int>(a_.rows());
  if (d == 0 || a_.cols() != d)
    throw std::invalid_argument("covariance: matrix must be square and nonempty");
  const double scale = std::max(1.0, a_.cwiseAbs().maxCoeff());
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      if (std::abs(a_(i, j) - a_(j, i)) > 1e-10 * scale)
        throw std::invalid_argument("covariance: matrix not symmetric");

  const double pivot_floor = 1e-12 * a_.trace();
  lower_ = Eigen::MatrixXd::Zero(d, d);
  logdet_ = 0.0;
  for (int j = 0; j < d; ++j) {
    double diag = a_(j, j);
    for (int k = 0; k < j; ++k) diag -= lower_(j, k) * lower_(j, k);
    if (!(diag > pivot_floor))
      throw std::invalid_argument("covariance: matrix not positive definite");
    lower_(j, j) = std::sqrt(diag);
    logdet_ += 2.0 * std::log(lower_(j, j));
    for (int i = j + 1; i < d; ++i) {
      double s = a_(i, j);
      for (int k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / lower_(j, j);
    }
  }
  inv_ = lower_.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd::Identity(d, d));
  inv_ = lower_.transpose().triangularView<Eigen::Upper>().solve(inv_);
}

Covariance Covariance::isotropic(int d, double var) {
  return Covariance(var * Eigen::MatrixXd::Identity(d, d));
}

Eigen::VectorXd Covariance::solve(const Eigen::VectorXd& rhs) const {
  Eigen::VectorXd y = lower_.triangularView<Eigen::Lower>().solve(rhs);
  return lower_.transpose().triangularView<Eigen::Upper>().solve(y);
}

double Covariance::quad_form(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd y = lower_.triangularView<Eigen::Lower>().solve(x);
  return y.squaredNorm();
}

double log_gaussian_density(const Covariance& sigma, const Eigen::VectorXd& x) {
  if (x.size() != sigma.dim())
    throw std::invalid_argument("gaussian_density: dimension mismatch");
  return -0.5 * (sigma.dim() * kLog2Pi + sigma.logdet() + sigma.quad_form(x));
}

double gaussian_density(const Covariance& sigma, const Eigen::VectorXd& x) {
  return std::exp(log_gaussian_density(sigma, x));
}

Eigen::VectorXd hermite_h1(const Covariance& sigma, const Eigen::VectorXd& x) {
  return -sigma.solve(x);
}

Eigen::MatrixXd hermite_h2(const Covariance& sigma, const Eigen::VectorXd& x) {
  const Eigen::VectorXd u = sigma.solve(x);
  return u * u.transpose() - sigma.inverse();
}

Tensor4 hermite_h4(const Covariance& sigma, const Eigen::VectorXd& x) {
  const int d = sigma.dim();
  const Eigen::VectorXd u = sigma.solve(x);
  const Eigen::MatrixXd& q = sigma.inverse();
  Tensor4 t;
  t.d = d;
  t.v.assign(static_cast<std::size_t>(d) * d * d * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) {
          const double quartic = u(i) * u(j) * u(k) * u(l);
          const double cross =
              q(i, j) * u(k) * u(l) + q(i, k) * u(j) * u(l) +
              q(i, l) * u(j) * u(k) + q(j, k) * u(i) * u(l) +
              q(j, l) * u(i) * u(k) + q(k, l) * u(i) * u(j);
          const double pure =
              q(i, j) * q(k, l) + q(i, k) * q(j, l) + q(i, l) * q(j, k);
          t.at(i, j, k, l) = quartic - cross + pure;
        }
  return t;
}

namespace {

// Fourth-order central first-derivative stencil, composed recursively for
// mixed partials of the density.
double directional_fd(const std::function<double(const Eigen::VectorXd&)>& f,
                      const Eigen::VectorXd& x, const std::vector<int>& dirs,
                      std::size_t level, double h) {
  if (level == dirs.size()) return f(x);
  const int i = dirs[level];
  const auto shift = [&](double delta) {
    Eigen::VectorXd y = x;
    y(i) += delta;
    return directional_fd(f, y, dirs, level + 1, h);
  };
  return (-shift(2 * h) + 8 * shift(h) - 8 * shift(-h) + shift(-2 * h)) /
         (12 * h);
}

}  // namespace

HermiteCheckReport verify_hermite_identities(const Covariance& sigma,
                                             const Eigen::VectorXd& x,
                                             double fd_step) {
  if (!(fd_step > 0)) throw std::invalid_argument("verify_hermite_identities: fd_step <= 0");
  const int d = sigma.dim();
  const auto f = [&](const Eigen::VectorXd& y) {
    return gaussian_density(sigma, y);
  };
  const double g = gaussian_density(sigma, x);
  HermiteCheckReport rep;

  const Eigen::VectorXd h1 = hermite_h1(sigma, x);
  for (int i = 0; i < d; ++i) {
    const double fd = directional_fd(f, x, {i}, 0, fd_step);
    rep.err_h1 = std::max(rep.err_h1, std::abs(fd - h1(i) * g));
  }
  const Eigen::MatrixXd h2 = hermite_h2(sigma, x);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const double fd = directional_fd(f, x, {i, j}, 0, fd_step);
      rep.err_h2 = std::max(rep.err_h2, std::abs(fd - h2(i, j) * g));
    }
  const Tensor4 h4 = hermite_h4(sigma, x);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) {
          const double fd = directional_fd(f, x, {i, j, k, l}, 0, fd_step);
          rep.err_h4 = std::max(rep.err_h4, std::abs(fd - h4.at(i, j, k, l) * g));
        }
  // Normalize by the density scale so the report reads as a relative error.
  const double scale = std::max(g, 1e-300);
  rep.err_h1 /= scale;
  rep.err_h2 /= scale;
  rep.err_h4 /= scale;
  return rep;
}

double mittag_leffler(double alpha, double beta, double z) {
  if (!(alpha >= 0.2)) throw std::invalid_argument("mittag_leffler: alpha < 0.2");
  if (!(beta > 0)) throw std::invalid_argument("mittag_leffler: beta <= 0");
  if (!(std::abs(z) <= 20.0))
    throw std::invalid_argument("mittag_leffler: |z| > 20 outside direct-series domain");
  double sum = 0.0;
  double log_abs_z = z == 0.0 ? 0.0 : std::log(std::abs(z));
  for (int n = 0; n < 4000000; ++n) {
    double term;
    if (z == 0.0 && n > 0) break;
    const double log_mag = n * log_abs_z - std::lgamma(alpha * n + beta);
    term = std::exp(log_mag);
    if (z < 0 && (n & 1)) term = -term;
    sum += term;
    if (n > 2 && std::abs(term) < 1e-17 * (1.0 + std::abs(sum)) &&
        alpha * n + beta > std::abs(z) + 2)
      break;
  }
  return sum;
}

double beta_product_bound(int k, double eta, double dt, double C) {
  if (k < 0) throw std::invalid_argument("beta_product_bound: k < 0");
  if (!(eta > 0.0 && eta <= 1.0))
    throw std::invalid_argument("beta_product_bound: eta outside (0,1]");
  if (!(dt > 0) || !(C > 0))
    throw std::invalid_argument("beta_product_bound: dt and C must be positive");
  if (k == 0) return 1.0;
  const double half_eta = 0.5 * eta;
  const double log_bound =
      k * (std::log(C) + half_eta * std::log(dt) + std::lgamma(half_eta)) -
      std::lgamma(1.0 + k * half_eta);
  return std::exp(log_bound);
}

double space_time_constant(double p, int d) {
  return std::pow(2.0 * p / std::exp(1.0), 0.5 * p) * std::pow(2.0, 0.5 * d);
}

}  // namespace mvlab
