#include "mvlab/quadrature.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace mvlab {

namespace {

// Nodes are eigenvalues of the symmetric tridiagonal recurrence matrix,
// weights are mu0 times the squared first eigenvector components.
QuadratureRule golub_welsch(const std::vector<double>& diag,
                            const std::vector<double>& offdiag, double mu0) {
  const int n = static_cast<int>(diag.size());
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) jac(i, i) = diag[i];
  for (int i = 0; i + 1 < n; ++i) {
    jac(i, i + 1) = offdiag[i];
    jac(i + 1, i) = offdiag[i];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("quadrature: eigen decomposition failed");
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = mu0 * v0 * v0;
  }
  return rule;
}

}  // namespace

QuadratureRule gauss_hermite_rule(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite_rule: n < 1");
  std::vector<double> diag(n, 0.0), off(n - 1);
  for (int k = 1; k < n; ++k) off[k - 1] = std::sqrt(0.5 * k);
  return golub_welsch(diag, off, std::sqrt(M_PI));
}

QuadratureRule gauss_jacobi_rule(int n, double alpha, double beta) {
  if (n < 1) throw std::invalid_argument("gauss_jacobi_rule: n < 1");
  if (!(alpha > -1.0) || !(beta > -1.0))
    throw std::invalid_argument("gauss_jacobi_rule: alpha, beta must exceed -1");
  std::vector<double> diag(n), off(n > 1 ? n - 1 : 0);
  const double ab = alpha + beta;
  diag[0] = (beta - alpha) / (ab + 2.0);
  for (int k = 1; k < n; ++k) {
    const double den = (2.0 * k + ab) * (2.0 * k + ab + 2.0);
    diag[k] = (beta * beta - alpha * alpha) / den;
  }
  if (n > 1) {
    off[0] = std::sqrt(4.0 * (alpha + 1.0) * (beta + 1.0) /
                       ((ab + 2.0) * (ab + 2.0) * (ab + 3.0)));
    for (int k = 2; k < n; ++k) {
      const double num = 4.0 * k * (k + alpha) * (k + beta) * (k + ab);
      const double den = (2.0 * k + ab) * (2.0 * k + ab) *
                         (2.0 * k + ab + 1.0) * (2.0 * k + ab - 1.0);
      off[k - 1] = std::sqrt(num / den);
    }
  }
  const double mu0 = std::exp((ab + 1.0) * std::log(2.0) +
                              std::lgamma(alpha + 1.0) +
                              std::lgamma(beta + 1.0) - std::lgamma(ab + 2.0));
  return golub_welsch(diag, off, mu0);
}

QuadratureRule normal_quadrature_atoms(int n, double mean, double var) {
  if (!(var > 0)) throw std::invalid_argument("normal_quadrature_atoms: var <= 0");
  QuadratureRule gh = gauss_hermite_rule(n);
  const double scale = std::sqrt(2.0 * var);
  const double wnorm = 1.0 / std::sqrt(M_PI);
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = mean + scale * gh.nodes[i];
    rule.weights[i] = gh.weights[i] * wnorm;
  }
  return rule;
}

QuadratureRule singular_time_rule(int n, double r, double t, double alpha) {
  if (!(t > r)) throw std::invalid_argument("singular_time_rule: t <= r");
  QuadratureRule gj = gauss_jacobi_rule(n, alpha, 0.0);
  const double half = 0.5 * (t - r);
  // v = r + half*(u+1); (t-v)^alpha = (half*(1-u))^alpha absorbed in weights.
  const double wscale = std::pow(half, alpha) * half;
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = r + half * (gj.nodes[i] + 1.0);
    rule.weights[i] = wscale * gj.weights[i];
  }
  return rule;
}

}  // namespace mvlab
