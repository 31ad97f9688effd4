#pragma once
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "mvlab/gauss.hpp"
#include "mvlab/model.hpp"
#include "mvlab/quadrature.hpp"
#include "mvlab/sim.hpp"

// Transition densities of the decoupled flow by the frozen-proxy series:
// the zeroth approximation is a Gaussian whose covariance accumulates the
// diffusion along the flow with the space argument frozen at the terminal
// point, and corrections are iterated space-time convolutions with the
// one-step kernel. Truncations carry certified tail bounds.

namespace mvlab {

struct FrozenProxyContext {
  CoefficientSet coeffs;
  MeasureFlow flow;  // law of the flow along the grid, starting at s
  double s = 0.0;

  // Discretization of the correction-term tables.
  int space_nodes = 32;   // Gauss-Hermite nodes per spatial integral
  int time_nodes = 16;    // Gauss-Jacobi nodes per time layer
  int time_levels = 12;   // sqrt-graded time rows per table
  int z_nodes = 161;      // spatial resolution of a term table
  double envelope_c = 0.0;    // Gaussian-bound rate; 0 means 2 * lambda
  double kernel_const = 0.0;  // series constant for tails; 0 = calibrate

  void validate() const;
  double end() const;
  double envelope_rate() const;
  // Coefficient statistics of the flow at an arbitrary time (linear
  // interpolation between grid rows).
  std::vector<double> stats_at(double r) const;
};

FrozenProxyContext make_context(const CoefficientSet& coeffs, MeasureFlow flow);

// int_{t1}^{t2} a(r, y, mu_r) dr as a matrix; closed form when a ignores
// time and measure, cumulative grid integral otherwise.
Eigen::MatrixXd accumulated_covariance(const FrozenProxyContext& ctx,
                                       double t1, double t2,
                                       const Eigen::VectorXd& y);
// d = 1 fast path.
double accumulated_variance(const FrozenProxyContext& ctx, double t1,
                            double t2, double y);

// g(accumulated covariance frozen at y_freeze, z - x). The caller passes
// y_freeze = z to evaluate the proxy p-hat(mu, s, t1, t2, x, z).
double frozen_gaussian_proxy(const FrozenProxyContext& ctx, double t1,
                             double t2, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& y_freeze,
                             const Eigen::VectorXd& z);

// One-step correction kernel
//   H(r, t, x, y) = [ -b(r,x,mu_r).H1 + (a(r,x,mu_r)-a(r,y,mu_r)).H2/2 ] p-hat
// with the Hermite factors taken at (accumulated covariance, y - x).
// Rejects r within 1e-12 of t (integrable singularity).
double parametrix_kernel(const FrozenProxyContext& ctx, double r, double t,
                         const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// Space-time convolution over the middle slice, d = 1:
//   (f (*) g)(s, t, x, y) = int_s^t dv int dz f(s, v, x, z) g(v, t, z, y).
// Kernels are maps (t1, t2, from, to). The spatial integral recenters
// Gauss-Hermite nodes on the caller's envelope (mean, sd) of the product at
// time v; the time integral absorbs a (t - v)^{time_exponent} endpoint
// singularity of g.
double spacetime_convolve(
    const std::function<double(double, double, double, double)>& f,
    const std::function<double(double, double, double, double)>& g, double s,
    double t, double x, double y, int time_nodes, int space_nodes,
    const std::function<std::pair<double, double>(double)>& envelope,
    double time_exponent);

// Plain recentered Gauss-Hermite integral of a density-weighted integrand,
// shared by the convolution and its tests: int f(z) dz for f concentrated
// near N(env_mean, env_sd^2).
double gaussian_space_integral(const std::function<double(double)>& f,
                               double env_mean, double env_sd, int nodes);

// Truncated series from one start atom x over [ctx.s, t], d = 1. Level-k
// correction terms are tabulated on a sqrt-graded time axis times a uniform
// z-grid; evaluation interpolates bicubically. The certified tail sums the
// analytic level bounds beyond K.
class DensityField {
 public:
  DensityField(const FrozenProxyContext& ctx, double x, double t, int K,
               std::optional<std::pair<double, double>> z_range = {});

  double value(double z) const;
  double tail_bound(double z) const;
  double term(int k, double z) const;  // 0 <= k <= order
  int order() const { return order_; }
  double start_atom() const { return x_; }
  double horizon() const { return t_; }
  // Constant used in the tail majorant (calibrated from the tables unless
  // the context pinned one).
  double series_constant() const { return series_const_; }
  double grid_lo() const { return z_lo_; }
  double grid_hi() const { return z_hi_; }

 private:
  double table_at(int k, double v, double z) const;
  double interp_final(int k, double z) const;

  const FrozenProxyContext* ctx_;
  double x_ = 0.0, t_ = 0.0;
  int order_ = 0;
  bool proxy_exact_ = false;  // kernel identically zero; series = proxy
  double z_lo_ = 0.0, hz_ = 0.0, z_hi_ = 0.0;
  double series_const_ = 0.0;
  double eta_ = 1.0, env_c_ = 2.0;
  std::function<double(double, double, double)> accum_;
  std::vector<double> taus_;                     // graded time axis
  std::vector<std::vector<double>> tables_;      // per level, row-major (J+1) x Z
};

struct SeriesValue {
  double value = 0.0;
  double tail_bound = 0.0;
};

// One-off evaluation (builds a field internally; prefer DensityField when
// sweeping z).
SeriesValue parametrix_series(const FrozenProxyContext& ctx, int K, double x,
                              double z, double t);

// Key relation: density from a measure = weighted average of the decoupled
// densities from its atoms.
double mckean_density(const FrozenProxyContext& ctx, const ParticleCloud& mu0,
                      double t, double z, int K);
// Batched variant sharing the per-atom fields across the z sweep; also
// returns the summed tail bound.
std::vector<SeriesValue> mckean_density_profile(const FrozenProxyContext& ctx,
                                                const ParticleCloud& mu0,
                                                double t,
                                                const std::vector<double>& zs,
                                                int K);

struct GaussianBoundReport {
  double constant = 0.0;    // calibrated C
  double rate = 0.0;        // envelope rate c
  int samples = 0;          // checked (x, z, t) triples
  int violations = 0;
  double worst_ratio = 0.0;  // max density / (C * envelope) over the check set
};

// Calibrates C = 1.15 * max density/envelope on a pre-scan of the (t, x, z)
// product grid, then certifies the fresh cell-midpoint samples against
// C * g(c (t-s), z - x); the 1.15 headroom covers ratio variation between
// grid nodes. The start range is the central weighted-quantile span of the
// atoms, so the envelope stays resolvable in double precision.
GaussianBoundReport certify_gaussian_bound(const FrozenProxyContext& ctx,
                                           const ParticleCloud& mu0, int K,
                                           int nt, int nx, int nz);

struct ResidualReport {
  double residual = 0.0;        // time_term + generator_term
  double time_term = 0.0;       // central difference in the start time
  double generator_term = 0.0;  // drift and diffusion parts via projection
  double fd_time = 0.0;
  double fd_space = 0.0;
};

// Backward-equation check at (mu0, s=0, t, z): the start-time derivative by
// re-running the flow from shifted starts, the generator by coordinate
// finite differences of the atom-projected density (first and second
// derivatives of atom i estimate the measure-derivative integrands; the
// diagonal keeps an O(1/n) second-derivative remainder that vanishes for
// measure-linear densities).
ResidualReport kolmogorov_residual(const FrozenProxyContext& ctx,
                                   const ParticleCloud& mu0, double t,
                                   double z, int K, double fd_time,
                                   double fd_space, double picard_tol = 1e-3,
                                   int picard_iters = 6);

}  // namespace mvlab
