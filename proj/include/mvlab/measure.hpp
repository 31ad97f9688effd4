#pragma once
#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

// Empirical measures (particle clouds), exact and sliced 2-Wasserstein
// distances between them, the dimension-dependent empirical convergence
// rate, and the rate tables the experiments emit.

namespace mvlab {

// N points in R^d, optionally weighted. Storage is row-major N x d.
struct ParticleCloud {
  int d = 1;
  std::vector<double> xs;      // size N*d
  std::vector<double> weights; // empty => uniform 1/N

  int size() const { return d == 0 ? 0 : static_cast<int>(xs.size()) / d; }
  double* at(int i) { return xs.data() + static_cast<std::size_t>(i) * d; }
  const double* at(int i) const {
    return xs.data() + static_cast<std::size_t>(i) * d;
  }
  double weight(int i) const {
    return weights.empty() ? 1.0 / size() : weights[i];
  }
  bool uniform() const { return weights.empty(); }
  void validate() const;  // finite coordinates, weights positive & normalized
};

ParticleCloud cloud_from_vector(const std::vector<double>& xs1d);

// Weighted mean, covariance, and raw q-th absolute moment int |x|^q dmu.
Eigen::VectorXd cloud_mean(const ParticleCloud& c);
Eigen::MatrixXd cloud_covariance(const ParticleCloud& c);
double cloud_moment(const ParticleCloud& c, double q);

// CSV with header x1,...,xd[,w]; one row per particle.
void write_cloud_csv(const ParticleCloud& c, const std::string& path);
ParticleCloud read_cloud_csv(const std::string& path);

// Exact W2 in d=1 for arbitrary weights via quantile coupling.
double wasserstein2_exact1d(const ParticleCloud& a, const ParticleCloud& b);

// Same for two pre-sorted uniformly weighted raw samples (hot-loop variant).
double wasserstein2_sorted1d(const double* a, int na, const double* b, int nb);

// Exact W2 for equal-size uniformly weighted clouds in any dimension by
// solving the squared-cost assignment problem (shortest augmenting paths,
// O(N^3)); rejected above N = 512.
double wasserstein2_assignment(const ParticleCloud& a, const ParticleCloud& b);

// Dispatch: exact1d when d == 1, assignment otherwise.
double wasserstein2(const ParticleCloud& a, const ParticleCloud& b);

// Monte Carlo sliced W2: RMS of 1d distances over random unit projections.
double sliced_wasserstein2(const ParticleCloud& a, const ParticleCloud& b,
                           int n_projections, std::uint64_t seed);

// Empirical measure convergence rate eps_N:
// N^{-1/2} (d < 4), N^{-1/2} log(1+N) (d = 4), N^{-2/d} (d > 4).
double fournier_guillin_rate(std::int64_t n, int d);

struct RateRow {
  double n = 0;        // abscissa (particle count)
  double error = 0;    // measured error statistic
  double stderr_ = 0;  // standard error of the estimate
  bool flagged = false;
  std::string flag_reason;
};

struct RateTable {
  std::string model;
  std::string statistic;
  std::uint64_t seed = 0;
  std::int64_t replications = 0;
  std::vector<RateRow> rows;
};

// CSV with meta and flags as '#' comment lines, then header N,error,stderr.
void write_rate_table_csv(const RateTable& t, const std::string& path);
RateTable read_rate_table_csv(const std::string& path);

}  // namespace mvlab
