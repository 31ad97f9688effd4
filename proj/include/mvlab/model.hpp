#pragma once
#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mvlab/measure.hpp"

// Measure interaction is restricted to cylinder functionals
// phi(mu) = F(int phi_1 dmu, ..., int phi_k dmu) with analytic derivatives
// of both layers. That keeps every measure derivative computable in closed
// form and is the only form of mu-dependence the coefficients may use.

namespace mvlab {

// Scalar test function R^d -> R with analytic gradient and Hessian.
struct ScalarTest {
  enum class Kind { Coordinate, SquaredNorm, Sin, Cos };
  Kind kind = Kind::Coordinate;
  int axis = 0;

  double eval(const double* x, int d) const;
  void grad(const double* x, int d, double* out) const;           // size d
  void hess(const double* x, int d, double* out) const;           // d*d row-major

  double eval(const Eigen::VectorXd& x) const { return eval(x.data(), static_cast<int>(x.size())); }
  Eigen::VectorXd gradv(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd hessm(const Eigen::VectorXd& x) const;
};

// Outer map F(m) = c0 + c.m + m^T Q m / 2 (exact derivatives; quadratic
// covers the mean, squared-mean and variance statistics exercised here).
struct OuterQuadratic {
  double c0 = 0.0;
  Eigen::VectorXd c;
  Eigen::MatrixXd q;

  int arity() const { return static_cast<int>(c.size()); }
  double eval(const Eigen::VectorXd& m) const;
  Eigen::VectorXd grad(const Eigen::VectorXd& m) const;
  const Eigen::MatrixXd& hess() const { return q; }
};

struct CylinderFunctional {
  std::string name;
  std::vector<ScalarTest> tests;
  OuterQuadratic outer;

  Eigen::VectorXd stats(const ParticleCloud& mu) const;  // (int phi_j dmu)_j
  double eval(const ParticleCloud& mu) const;
};

// Named examples used across tests and experiments:
//   "mean"           int x1 dmu
//   "mean-squared"   (int x1 dmu)^2
//   "second-moment"  int |x|^2 dmu
//   "variance"       int |x|^2 dmu - sum_k (int x_k dmu)^2
CylinderFunctional make_cylinder(const std::string& name, int d);

// First linear functional derivative, normalized to int (dphi/dm) dmu = 0.
double cylinder_lfd1(const CylinderFunctional& phi, const ParticleCloud& mu,
                     const Eigen::VectorXd& y);

// Second derivative in the doubly-centered symmetric convention
// (integrates to zero in each slot; symmetric in (y, y2)).
double cylinder_lfd2(const CylinderFunctional& phi, const ParticleCloud& mu,
                     const Eigen::VectorXd& y, const Eigen::VectorXd& y2);

// Mixture directional difference (phi((1-eps)mu + eps delta_y) - phi(mu))/eps,
// the defining limit of the first derivative up to the normalizing constant.
double mixture_directional_derivative(const CylinderFunctional& phi,
                                      const ParticleCloud& mu,
                                      const Eigen::VectorXd& y, double eps);

// Intrinsic (Lions) derivative d_mu phi(mu)(v) = grad_y [dphi/dm](v) and its
// two second-order blocks.
Eigen::VectorXd lions_gradient(const CylinderFunctional& phi,
                               const ParticleCloud& mu, const Eigen::VectorXd& v);
Eigen::MatrixXd lions_v_gradient(const CylinderFunctional& phi,
                                 const ParticleCloud& mu, const Eigen::VectorXd& v);
Eigen::MatrixXd lions_second(const CylinderFunctional& phi,
                             const ParticleCloud& mu, const Eigen::VectorXd& v,
                             const Eigen::VectorXd& v2);

// Drift/diffusion pair with declared regularity metadata. The mu-dependence
// enters only through the values of `stats` on the interaction measure.
struct CoefficientSet {
  std::string name;
  int dim = 1;        // state dimension d
  int noise_dim = 1;  // Brownian dimension m
  double eta = 1.0;   // Hoelder exponent of a in x, declared
  double lambda = 1.0;  // two-sided ellipticity bound: 1/lambda <= a <= lambda
  std::vector<ScalarTest> stats;

  // b(t, x, s) into out[d]; sigma(t, x, s) into out[d*m] row-major.
  std::function<void(double, const double*, const double*, double*)> drift;
  std::function<void(double, const double*, const double*, double*)> sigma;

  bool time_homogeneous = true;
  bool drift_free = false;            // b is identically zero
  bool diffusion_state_free = false;  // a does not depend on x
  bool diffusion_autonomous = false;  // a depends on x only: closed-form time integrals

  std::vector<double> compute_stats(const ParticleCloud& mu) const;

  void drift_at(double t, const double* x, const double* s, double* out) const {
    drift(t, x, s, out);
  }
  void sigma_at(double t, const double* x, const double* s, double* out) const {
    sigma(t, x, s, out);
  }
  // a = sigma sigma^T, row-major d*d.
  void a_at(double t, const double* x, const double* s, double* out) const;
};

struct CoefficientValues {
  Eigen::VectorXd b;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd a;
};

CoefficientValues evaluate_coefficients(const CoefficientSet& coeffs, double t,
                                        const Eigen::VectorXd& x,
                                        const ParticleCloud& mu);

struct EllipticityReport {
  bool pass = false;
  double min_eig = 0.0;
  double max_eig = 0.0;
};

// Samples (t, x) over [0,T] x box and checks 1/lambda <= eig(a) <= lambda.
EllipticityReport check_ellipticity(const CoefficientSet& coeffs,
                                    const ParticleCloud& mu, double horizon,
                                    const Eigen::VectorXd& box_lo,
                                    const Eigen::VectorXd& box_hi,
                                    int n_samples, std::uint64_t seed);

// Registered models: "constant", "constant-drift", "linear-mean-field",
// "sin-diffusion", "kuramoto", "time-ramp". Unknown names raise an error
// listing the registry; unknown parameter keys are rejected.
CoefficientSet make_model(const std::string& name,
                          const std::map<std::string, double>& params = {});
std::vector<std::string> registered_models();

}  // namespace mvlab
