#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvlab/measure.hpp"
#include "mvlab/model.hpp"
#include "mvlab/parametrix.hpp"
#include "mvlab/sim.hpp"

// Convergence experiments for the particle approximation: pathwise coupling
// and W2 error, weak error of cylinder functionals, and L1 distance between
// the one-particle marginal density and its mean-field limit, each swept
// over N and reduced to a RateTable. Also the three first-order correction
// terms of the marginal-density expansion in 1/N, and a least-squares rate
// fit. Replications use disjoint seeded streams and are reduced in index
// order, so results do not depend on the thread count.

namespace mvlab {

struct ExperimentPlan {
  std::string model = "linear-mean-field";
  std::map<std::string, double> model_params;
  std::string statistic = "path";  // "path" | "weak" | "density"
  std::vector<std::int64_t> n_list;
  // Replications per row; density rows rescale to R * n_list[0] / N so the
  // pooled draw count per row stays constant.
  std::int64_t replications = 50;
  std::int64_t reference_m = 8192;  // reference flow size M
  double dt = 1e-2;
  double horizon = 1.0;
  std::uint64_t seed = 1;
  std::string init = "normal";
  std::map<std::string, double> init_params;
  // Mirror the reference flow's noise (and its initial atoms when the atom
  // set is symmetric under negation), pinning odd empirical moments.
  bool antithetic_reference = true;

  // weak statistic only:
  std::string functional = "mean";

  // density statistic only:
  int truncation = 6;        // series order of the density reference
  int reference_atoms = 20;  // quadrature atoms representing the initial law
  int grid_points = 161;     // z-grid resolution of the L1 error
  double picard_tol = 1e-4;
  int picard_iters = 8;

  // Structural checks: statistic name, strictly increasing n_list with
  // max(n_list) <= reference_m / 8, replications >= 30, positive steps.
  void validate() const;
};

// For each N: R replications of the synchronously coupled system against one
// M-particle reference flow; row error is the mean over replications of
// max(sup_t mean_i |X^i - Xbar^i|^2, sup_t W2^2(mu^N_t, mu_t)). Rows whose
// error sits below 10x the reference's own sampling rate eps_M are flagged
// as floor-dominated.
RateTable path_chaos_experiment(const ExperimentPlan& plan);

// Row error |mean_r phi(mu^N_T) - phi(reference flow at T)| with stderr from
// the replication spread; rows with error < 2 stderr are flagged as
// CI-dominated.
RateTable weak_chaos_experiment(const ExperimentPlan& plan);

struct DensityChaosReport {
  RateTable table;  // row error: grid-L1 distance at the Silverman bandwidth
  std::vector<double> zs;
  std::vector<std::int64_t> row_replications;
  std::vector<double> bandwidth;       // Silverman h per row
  std::vector<double> sensitivity;     // max L1 shift over {h/2, 2h}
  std::vector<double> weighted_error;  // |z|^2-weighted grid-L1 variant
  // Pointwise Gaussian-envelope audit of the N^{-1} bound: the constant is
  // calibrated on the first row, later rows count grid points where
  // |phat - p| exceeds (K/N) envelope plus a 3-sigma KDE noise allowance.
  double envelope_constant = 0.0;
  std::vector<std::int64_t> envelope_violations;
};

// One-particle marginal density vs the series reference: terminal values of
// all N particles over R_row replications are pooled into a Gaussian KDE and
// compared with the series density of the mean-field law on a fixed z-grid.
// Bandwidth sensitivity at {h/2, 2h} is reported per row; rows where it
// exceeds half the measured error are flagged inconclusive. Requires d = 1
// and a normal or point initial law (the series reference represents it by
// quadrature atoms).
DensityChaosReport density_chaos_experiment(const ExperimentPlan& plan);

// Pooled-sample Gaussian KDE pieces, shared with tests.
double silverman_bandwidth(const std::vector<double>& sample);
std::vector<double> gaussian_kde(const std::vector<double>& sample, double h,
                                 const std::vector<double>& zs);

struct FirstOrderConfig {
  double dt = 1.0 / 32;
  std::uint64_t seed = 1;
  int truncation = 4;             // series order of the density evaluations
  int flow_particles = 1024;      // carrier cloud for perturbed flows
  int satellite_particles = 256;  // cloud of the reweighted atom
  // Fixed Picard iteration count (no early stop), so perturbed flows depend
  // smoothly on the reweighting size and differences stay clean.
  int picard_iters = 6;
  int quantize_atoms = 12;    // atoms representing mu_s inside the trace term
  double hessian_step = 0.2;  // split-atom spatial step at the initial time;
                              // it shrinks like sqrt(T - s) along the grid
  // Discretization of the density fields (coarser than the engine defaults;
  // the terms are finite differences of smooth profiles).
  int space_nodes = 24;
  int time_nodes = 12;
  int time_levels = 10;
  int z_nodes = 121;
};

// The three correction terms, each reported as the coefficient of 1/N on the
// z-grid: the first linear-functional-derivative difference between a
// particle's own atom and an independent draw, half the matched-diagonal
// second-derivative difference (the independent-pair part vanishes for an
// atomic base measure because the perturbation directions sum to zero), and
// the time integral of the diffusion-weighted second intrinsic derivative
// trace along the flow.
struct FirstOrderTerms {
  std::vector<double> zs;
  std::vector<double> term1, term2, term3;
  double fd = 1e-2;          // base reweighting step (Richardson pair fd, fd/10)
  double term1_noise = 0.0;  // max-norm gap between the two single-step reads
  double term2_noise = 0.0;
  bool noise_flagged = false;  // finite-difference noise dominates a term

  // Trace integrand on the flow grid nodes (excluding the horizon), after
  // near-horizon extrapolation; trace_extrapolated counts replaced nodes.
  std::vector<double> trace_times;
  std::vector<std::vector<double>> trace_integrand;
  int trace_extrapolated = 0;

  std::vector<double> total() const;
};

// Measure derivatives by atom reweighting: density profiles are recomputed
// under mixtures (1-eps) mu + eps delta_y with the satellite cloud carrying
// exact mixture weights in the frozen statistics, Richardson-extrapolated
// over eps in {fd, fd/10}. The trace term quantizes mu_s to uniform quantile
// atoms, takes split-atom cross differences for the second intrinsic
// derivative diagonal, and integrates by the trapezoid rule on the flow grid
// (the final sub-step, where the integrand may be singular, is excluded).
// Nodes too close to the horizon for the forward kernel to resolve the
// quantized atom spacing are filled by linear-in-(T - s) extrapolation from
// the last resolved node: the integrand vanishes at the horizon, where the
// density degenerates to the measure itself and the second derivative of a
// linear functional is zero, but a cross difference taken there only returns
// quantization noise.
FirstOrderTerms first_order_terms(const CoefficientSet& coeffs,
                                  const ParticleCloud& mu0, double horizon,
                                  const std::vector<double>& z_grid, double fd,
                                  const FirstOrderConfig& cfg = {});

enum class RatePredictor { LogN, LogEpsN };

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::vector<double> residuals;   // log-error residual per used row
  std::vector<std::int64_t> used;  // row indices that entered the fit
};

// Ordinary least squares of log(error) on log(N) or log(eps_N); flagged and
// non-positive rows are excluded, and fewer than 3 usable rows is an error.
// The dimension feeds eps_N.
RateFit fit_rate(const RateTable& table, RatePredictor predictor, int d = 1);

}  // namespace mvlab
