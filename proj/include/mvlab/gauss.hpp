#pragma once
#include <Eigen/Dense>
#include <vector>

// Gaussian kernels and the polynomial factors of their derivatives, plus the
// special functions used by the kernel-series tail bounds. Conventions:
// g(S, x) = (2*pi)^{-d/2} det(S)^{-1/2} exp(-x^T S^{-1} x / 2), and the
// derivative factors are defined through
//   d_i g = H1_i g,   d_i d_j g = H2_ij g,   d^4 g = H4 g.

namespace mvlab {

// SPD matrix with cached Cholesky factor and inverse. Construction validates
// symmetry and positive-definiteness (pivot threshold 1e-12 * trace).
class Covariance {
 public:
  explicit Covariance(Eigen::MatrixXd sigma);
  static Covariance isotropic(int d, double var);

  int dim() const { return static_cast<int>(a_.rows()); }
  const Eigen::MatrixXd& matrix() const { return a_; }
  const Eigen::MatrixXd& inverse() const { return inv_; }
  double logdet() const { return logdet_; }
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
  // x^T S^{-1} x
  double quad_form(const Eigen::VectorXd& x) const;

 private:
  Eigen::MatrixXd a_, lower_, inv_;
  double logdet_ = 0.0;
};

double log_gaussian_density(const Covariance& sigma, const Eigen::VectorXd& x);
double gaussian_density(const Covariance& sigma, const Eigen::VectorXd& x);

// One-dimensional fast paths used in kernel-evaluation hot loops.
inline double gaussian1(double var, double u) {
  return 0.39894228040143267793994605993438 / std::sqrt(var) *
         std::exp(-0.5 * u * u / var);
}
inline double hermite1_1(double var, double u) { return -u / var; }
inline double hermite2_1(double var, double u) {
  return (u * u / var - 1.0) / var;
}

Eigen::VectorXd hermite_h1(const Covariance& sigma, const Eigen::VectorXd& x);
Eigen::MatrixXd hermite_h2(const Covariance& sigma, const Eigen::VectorXd& x);

// Dense symmetric 4-tensor, d^4 entries, row-major in (i,j,k,l).
struct Tensor4 {
  int d = 0;
  std::vector<double> v;
  double& at(int i, int j, int k, int l) {
    return v[((static_cast<std::size_t>(i) * d + j) * d + k) * d + l];
  }
  double at(int i, int j, int k, int l) const {
    return v[((static_cast<std::size_t>(i) * d + j) * d + k) * d + l];
  }
};

// Pairing-sum formula: with u = S^{-1} x and Q = S^{-1},
// H4_{ijkl} = u_i u_j u_k u_l - sum_{6 pairings} Q_{..} u_. u_. +
//             Q_ij Q_kl + Q_ik Q_jl + Q_il Q_jk.
Tensor4 hermite_h4(const Covariance& sigma, const Eigen::VectorXd& x);

struct HermiteCheckReport {
  double err_h1 = 0.0;  // max |analytic - fd| / scale per order
  double err_h2 = 0.0;
  double err_h4 = 0.0;
};

// Compares the analytic derivative factors against high-order central
// finite differences of the density itself.
HermiteCheckReport verify_hermite_identities(const Covariance& sigma,
                                             const Eigen::VectorXd& x,
                                             double fd_step);

// E_{alpha,beta}(z) by direct series. Domain: alpha >= 0.2, beta > 0,
// |z| <= 20; outside that the series length or cancellation is unmanaged
// and the call is rejected.
double mittag_leffler(double alpha, double beta, double z);

// C^k dt^{k*eta/2} prod_{i=1..k} B(1 + (i-1)eta/2, eta/2), evaluated in log
// space through the telescoped closed form Gamma(eta/2)^k / Gamma(1+k*eta/2).
double beta_product_bound(int k, double eta, double dt, double C);

// Sharp constant in |x|^p g(t,x) <= C t^{p/2} g(2t,x): C = (2p/e)^{p/2} 2^{d/2}.
double space_time_constant(double p, int d);

}  // namespace mvlab
