#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvlab/measure.hpp"
#include "mvlab/model.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/rng.hpp"

// Euler-Maruyama simulation of the interacting particle system, the
// Picard-iterated mean-field flow, and the synchronous coupling that drives
// independent mean-field copies with the particle system's own noise.

namespace mvlab {

// Initial-condition sampler. Draw i is a pure function of
// (seed, role, replication, i); with `antithetic` the upper half mirrors the
// lower half around the distribution center, which pins symmetric empirical
// statistics of reference clouds at their exact values.
struct InitSampler {
  enum class Kind { Normal, Uniform, Point, ParetoSym, Atoms };
  Kind kind = Kind::Normal;
  double mean = 0.0, sd = 1.0;               // Normal
  double lo = -1.0, hi = 1.0;                // Uniform
  std::vector<double> point;                 // Point (size d)
  double pareto_nu = 4.5, pareto_scale = 1.0;  // ParetoSym: density ~ |x|^{-nu-1}
  // Atoms: a fixed weighted cloud, spread over the particles by deterministic
  // largest-remainder allocation (no sampling noise in the initial law), or
  // drawn iid from the weights when `resample` is set. Chaos comparisons need
  // the iid mode: allocation pins the initial empirical measure, which erases
  // the initial-fluctuation part of the finite-N effect being measured.
  // With `antithetic`, mirroring negates coordinates, which is only a valid
  // resampling when the atom set itself is symmetric under negation.
  ParticleCloud atoms;
  bool resample = false;
  bool antithetic = false;

  // Writes d coordinates of particle i out of n into out.
  void sample(int d, std::uint64_t seed, rng::Role role,
              std::uint64_t replication, std::int64_t i, std::int64_t n,
              double* out) const;
};

// Largest-remainder allocation of n slots to the atoms of a weighted cloud:
// entry j is the first slot of atom j, entry size() the total n. Slots of one
// atom are contiguous.
std::vector<std::int64_t> atom_allocation(const ParticleCloud& atoms,
                                          std::int64_t n);

// Named samplers: "normal" (mean, sd), "uniform" (lo, hi), "point" (x),
// "pareto" (nu, scale). Unknown names or parameter keys are rejected.
InitSampler make_init(const std::string& name,
                      const std::map<std::string, double>& params = {});

struct SimConfig {
  int n = 2;              // particle count
  double dt = 1e-2;       // step size
  double horizon = 1.0;   // T
  std::uint64_t seed = 1;
  std::uint64_t replication = 0;
  rng::Role init_role = rng::Role::Init;
  rng::Role increment_role = rng::Role::Increment;
  bool antithetic = false;     // mirror noise of the upper half of the cloud
  bool keep_paths = true;      // false drops TrajectoryBundle storage
  bool waive_ellipticity = false;
  Exec exec = Exec::Serial;

  int steps() const;
  void validate() const;  // dt > 0, T > 0, n >= 2, steps*dt == T within 1e-12
};

// The law along a uniform time grid, stored as one cloud per grid time plus
// the coefficient statistics evaluated on it (the only part the coefficients
// ever read).
struct MeasureFlow {
  std::vector<double> times;
  std::vector<ParticleCloud> clouds;
  std::vector<std::vector<double>> stats;

  int dim() const { return clouds.empty() ? 0 : clouds.front().d; }
  int grid_size() const { return static_cast<int>(times.size()); }
  double dt() const;
  // Grid index of time t; rejects off-grid t (tolerance 1e-9*dt).
  int index_of(double t) const;
  void validate() const;
};

// Per-time sorted first coordinates, for repeated 1d W2 against the flow.
std::vector<std::vector<double>> sorted_flow_cache(const MeasureFlow& flow);

struct TrajectoryBundle {
  int d = 1;
  int n = 0;
  int steps = 0;
  std::uint64_t noise_seed = 0;
  std::vector<double> particle_paths;  // n*(steps+1)*d, path-major
  std::vector<double> coupled_paths;   // same shape, empty if not coupled

  double* state(std::vector<double>& buf, int i, int k) {
    return buf.data() + (static_cast<std::size_t>(i) * (steps + 1) + k) * d;
  }
  const double* particle_at(int i, int k) const {
    return particle_paths.data() +
           (static_cast<std::size_t>(i) * (steps + 1) + k) * d;
  }
  const double* coupled_at(int i, int k) const {
    return coupled_paths.data() +
           (static_cast<std::size_t>(i) * (steps + 1) + k) * d;
  }
};

struct SimResult {
  TrajectoryBundle bundle;  // particle paths only (coupled_paths empty)
  MeasureFlow flow;         // empirical flow mu^N_t along the grid
};

// Euler-Maruyama for the N-particle system interacting through its own
// empirical statistics, one snapshot per step. Blow-up (non-finite state)
// aborts with the offending step index.
SimResult simulate_particle_system(const CoefficientSet& coeffs,
                                   const InitSampler& init,
                                   const SimConfig& cfg);

// Same scheme with the coefficient statistics frozen to an external
// per-time table instead of the evolving empirical cloud.
SimResult simulate_frozen_stats(const CoefficientSet& coeffs,
                                const InitSampler& init, const SimConfig& cfg,
                                const std::vector<std::vector<double>>& stat_table);

struct PicardResult {
  MeasureFlow flow;
  int iterations = 0;      // count of flow simulations after the initial one
  double final_gap = 0.0;  // last compared sup_t W2 gap
  bool converged = false;
  std::vector<double> gaps;  // gap sequence actually compared against tol
};

// Fixed-point iteration for the mean-field law: iterate m simulates with
// statistics frozen on iterate m-1 (common random numbers across iterates);
// iterate 0 freezes them at the initial cloud. Stops when
// sup_t W2(flow_m(t), flow_{m-1}(t)) < tol.
PicardResult picard_mean_field_flow(const CoefficientSet& coeffs,
                                    const InitSampler& init,
                                    const SimConfig& cfg, double tol,
                                    int max_iter);

// Runs the particle system and, under the same (xi^i, W^i), independent
// copies whose coefficients read the mean-field flow. Grid mismatch between
// cfg and the flow is an error.
TrajectoryBundle simulate_coupled_system(const CoefficientSet& coeffs,
                                         const InitSampler& init,
                                         const SimConfig& cfg,
                                         const MeasureFlow& flow);

struct PathChaosStats {
  double sup_coupling = 0.0;  // sup_t mean_i |X^i_t - Xbar^i_t|^2
  double sup_w2sq = 0.0;      // sup_t W2^2(mu^N_t, mu_t)
  std::vector<double> times;
  std::vector<double> coupling_profile;
  std::vector<double> w2sq_profile;
};

// The two path-level discrepancy statistics with their time profiles.
// `sorted_flow` is an optional cache from sorted_flow_cache (d = 1);
// for d > 1 the flow cloud is subsampled to at most 512 atoms and compared
// by the assignment solver.
PathChaosStats path_chaos_statistics(
    const TrajectoryBundle& bundle, const MeasureFlow& flow,
    const std::vector<std::vector<double>>* sorted_flow = nullptr);

}  // namespace mvlab
