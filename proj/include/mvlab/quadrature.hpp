#pragma once
#include <vector>

// Fixed Gaussian quadrature rules built with the Golub-Welsch eigenvalue
// method. Two families are needed: Gauss-Hermite for spatial integrals
// against Gaussian envelopes, and Gauss-Jacobi for time integrals whose
// integrand carries an integrable (t - v)^(eta/2 - 1) endpoint singularity.

namespace mvlab {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
  int size() const { return static_cast<int>(nodes.size()); }
};

// Weight exp(-x^2) on the real line.
QuadratureRule gauss_hermite_rule(int n);

// Weight (1-x)^alpha (1+x)^beta on [-1, 1]; requires alpha, beta > -1.
QuadratureRule gauss_jacobi_rule(int n, double alpha, double beta);

// Nodes/weights for integrating f against N(mean, var):
// sum_i w_i f(x_i) ~ E[f(X)].
QuadratureRule normal_quadrature_atoms(int n, double mean, double var);

// Rule for int_r^t (t-v)^alpha f(v) dv with f smooth: returns nodes v_i in
// (r, t) and weights including the singular factor, i.e. the integral is
// approximated by sum_i w_i f(v_i).
QuadratureRule singular_time_rule(int n, double r, double t, double alpha);

}  // namespace mvlab
