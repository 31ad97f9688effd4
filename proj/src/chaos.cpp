#include "mvlab/chaos.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "mvlab/gauss.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/quadrature.hpp"
#include "mvlab/rng.hpp"

namespace mvlab {

namespace {

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd out;
  if (v.empty()) return out;
  double s = 0.0;
  for (double x : v) s += x;
  out.mean = s / static_cast<double>(v.size());
  if (v.size() > 1) {
    double q = 0.0;
    for (double x : v) q += (x - out.mean) * (x - out.mean);
    out.sd = std::sqrt(q / static_cast<double>(v.size() - 1));
  }
  return out;
}

double quantile_sorted(const std::vector<double>& s, double p) {
  const double idx = p * static_cast<double>(s.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(idx));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double w = idx - static_cast<double>(lo);
  return (1.0 - w) * s[lo] + w * s[hi];
}

bool negation_symmetric(const ParticleCloud& c) {
  if (c.d != 1) return false;
  const int n = c.size();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return c.xs[a] < c.xs[b]; });
  double scale = 1.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, std::fabs(c.xs[i]));
  for (int i = 0; i < n; ++i) {
    const int j = idx[n - 1 - i];
    if (std::fabs(c.xs[idx[i]] + c.xs[j]) > 1e-12 * scale) return false;
    if (std::fabs(c.weight(idx[i]) - c.weight(j)) > 1e-12) return false;
  }
  return true;
}

SimConfig reference_config(const ExperimentPlan& plan) {
  SimConfig cfg;
  cfg.n = static_cast<int>(plan.reference_m);
  cfg.dt = plan.dt;
  cfg.horizon = plan.horizon;
  cfg.seed = plan.seed;
  cfg.replication = 0;
  cfg.init_role = rng::Role::RefInit;
  cfg.increment_role = rng::Role::RefIncrement;
  cfg.antithetic = plan.antithetic_reference;
  cfg.keep_paths = false;
  cfg.exec = default_exec();
  return cfg;
}

SimConfig row_config(const ExperimentPlan& plan, std::int64_t n,
                     std::uint64_t replication, bool keep_paths) {
  SimConfig cfg;
  cfg.n = static_cast<int>(n);
  cfg.dt = plan.dt;
  cfg.horizon = plan.horizon;
  cfg.seed = plan.seed;
  cfg.replication = replication;
  cfg.keep_paths = keep_paths;
  cfg.exec = Exec::Serial;  // replications are the parallel axis
  return cfg;
}

RateTable table_shell(const ExperimentPlan& plan, const std::string& statistic) {
  RateTable t;
  t.model = plan.model;
  t.statistic = statistic;
  t.seed = plan.seed;
  t.replications = plan.replications;
  return t;
}

}  // namespace

void ExperimentPlan::validate() const {
  if (statistic != "path" && statistic != "weak" && statistic != "density")
    throw std::invalid_argument("experiment plan: unknown statistic '" +
                                statistic + "' (path, weak, density)");
  if (n_list.empty())
    throw std::invalid_argument("experiment plan: n_list must not be empty");
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    if (n_list[i] < 2)
      throw std::invalid_argument("experiment plan: every N must be >= 2");
    if (i > 0 && n_list[i] <= n_list[i - 1])
      throw std::invalid_argument(
          "experiment plan: n_list must be strictly increasing");
  }
  if (n_list.back() * 8 > reference_m)
    throw std::invalid_argument(
        "experiment plan: reference flow must dominate (max N <= M/8)");
  if (reference_m > (std::int64_t{1} << 30))
    throw std::invalid_argument("experiment plan: reference size too large");
  if (replications < 30)
    throw std::invalid_argument(
        "experiment plan: need at least 30 replications for the confidence "
        "intervals");
  if (!(dt > 0.0) || !(horizon > 0.0))
    throw std::invalid_argument("experiment plan: dt and horizon must be > 0");
  if (grid_points < 9)
    throw std::invalid_argument(
        "experiment plan: density grid needs at least 9 points");
  if (truncation < 0)
    throw std::invalid_argument("experiment plan: truncation must be >= 0");
  if (reference_atoms < 1)
    throw std::invalid_argument(
        "experiment plan: need at least one reference atom");
  if (picard_iters < 1 || !(picard_tol > 0.0))
    throw std::invalid_argument(
        "experiment plan: picard settings must be positive");
}

RateTable path_chaos_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const CoefficientSet coeffs = make_model(plan.model, plan.model_params);
  const InitSampler init = make_init(plan.init, plan.init_params);
  row_config(plan, plan.n_list.front(), 0, true).validate();

  const PicardResult ref = picard_mean_field_flow(
      coeffs, init, reference_config(plan), plan.picard_tol, plan.picard_iters);
  std::vector<std::vector<double>> sorted;
  if (coeffs.dim == 1) sorted = sorted_flow_cache(ref.flow);
  const auto* sorted_ptr = coeffs.dim == 1 ? &sorted : nullptr;
  const double eps_m = fournier_guillin_rate(plan.reference_m, coeffs.dim);

  RateTable table = table_shell(plan, "path");
  const std::int64_t reps = plan.replications;
  std::uint64_t row_base = 0;
  for (std::int64_t n : plan.n_list) {
    std::vector<double> vals(reps);
    for_each_index(reps, [&](std::int64_t r) {
      const SimConfig cfg =
          row_config(plan, n, row_base + static_cast<std::uint64_t>(r), true);
      const TrajectoryBundle bundle =
          simulate_coupled_system(coeffs, init, cfg, ref.flow);
      const PathChaosStats st =
          path_chaos_statistics(bundle, ref.flow, sorted_ptr);
      vals[r] = std::max(st.sup_coupling, st.sup_w2sq);
    });
    const MeanSd ms = mean_sd(vals);
    RateRow row;
    row.n = static_cast<double>(n);
    row.error = ms.mean;
    row.stderr_ = ms.sd / std::sqrt(static_cast<double>(reps));
    if (row.error < 10.0 * eps_m) {
      row.flagged = true;
      row.flag_reason = "reference floor";
    }
    table.rows.push_back(row);
    row_base += static_cast<std::uint64_t>(reps);
  }
  return table;
}

RateTable weak_chaos_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const CoefficientSet coeffs = make_model(plan.model, plan.model_params);
  const InitSampler init = make_init(plan.init, plan.init_params);
  const CylinderFunctional phi = make_cylinder(plan.functional, coeffs.dim);
  row_config(plan, plan.n_list.front(), 0, false).validate();

  const PicardResult ref = picard_mean_field_flow(
      coeffs, init, reference_config(plan), plan.picard_tol, plan.picard_iters);
  const double phi_ref = phi.eval(ref.flow.clouds.back());

  RateTable table = table_shell(plan, "weak");
  const std::int64_t reps = plan.replications;
  std::uint64_t row_base = 0;
  for (std::int64_t n : plan.n_list) {
    std::vector<double> vals(reps);
    for_each_index(reps, [&](std::int64_t r) {
      const SimConfig cfg =
          row_config(plan, n, row_base + static_cast<std::uint64_t>(r), false);
      const SimResult sim = simulate_particle_system(coeffs, init, cfg);
      vals[r] = phi.eval(sim.flow.clouds.back());
    });
    const MeanSd ms = mean_sd(vals);
    RateRow row;
    row.n = static_cast<double>(n);
    row.error = std::fabs(ms.mean - phi_ref);
    row.stderr_ = ms.sd / std::sqrt(static_cast<double>(reps));
    if (row.error < 2.0 * row.stderr_) {
      row.flagged = true;
      row.flag_reason = "ci-dominated";
    }
    table.rows.push_back(row);
    row_base += static_cast<std::uint64_t>(reps);
  }
  return table;
}

double silverman_bandwidth(const std::vector<double>& sample) {
  if (sample.size() < 2)
    throw std::invalid_argument("silverman bandwidth: need at least 2 points");
  const MeanSd ms = mean_sd(sample);
  std::vector<double> s(sample);
  std::sort(s.begin(), s.end());
  const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
  double spread = std::min(ms.sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = std::max(ms.sd, 1e-12);
  return 0.9 * spread *
         std::pow(static_cast<double>(sample.size()), -0.2);
}

std::vector<double> gaussian_kde(const std::vector<double>& sample, double h,
                                 const std::vector<double>& zs) {
  if (sample.empty())
    throw std::invalid_argument("kde: sample must not be empty");
  if (!(h > 0.0)) throw std::invalid_argument("kde: bandwidth must be > 0");
  const double var = h * h;
  const double inv = 1.0 / static_cast<double>(sample.size());
  std::vector<double> out(zs.size());
  for_each_index(static_cast<std::int64_t>(zs.size()), [&](std::int64_t j) {
    double acc = 0.0;
    for (double x : sample) acc += gaussian1(var, zs[j] - x);
    out[j] = acc * inv;
  });
  return out;
}

DensityChaosReport density_chaos_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const CoefficientSet coeffs = make_model(plan.model, plan.model_params);
  if (coeffs.dim != 1)
    throw std::invalid_argument("density experiment: d = 1 only");
  const InitSampler init = make_init(plan.init, plan.init_params);
  row_config(plan, plan.n_list.front(), 0, false).validate();

  // The series reference needs the initial law as a small atom cloud; the
  // Gauss quadrature atoms of a normal law match its moments exactly.
  ParticleCloud atoms;
  atoms.d = 1;
  if (init.kind == InitSampler::Kind::Point) {
    atoms.xs = {init.point.at(0)};
    atoms.weights = {1.0};
  } else if (init.kind == InitSampler::Kind::Normal) {
    const QuadratureRule rule = normal_quadrature_atoms(
        plan.reference_atoms, init.mean, init.sd * init.sd);
    atoms.xs = rule.nodes;
    atoms.weights = rule.weights;
  } else {
    throw std::invalid_argument(
        "density experiment: series reference needs a normal or point "
        "initial law");
  }

  InitSampler ref_init;
  ref_init.kind = InitSampler::Kind::Atoms;
  ref_init.atoms = atoms;
  ref_init.antithetic =
      plan.antithetic_reference && negation_symmetric(atoms);

  SimConfig ref_cfg = reference_config(plan);
  const PicardResult ref = picard_mean_field_flow(
      coeffs, ref_init, ref_cfg, plan.picard_tol, plan.picard_iters);

  const ParticleCloud& terminal = ref.flow.clouds.back();
  const double center = cloud_mean(terminal)(0);
  const double sd = std::sqrt(cloud_covariance(terminal)(0, 0));
  const double half = 4.0 * sd;
  std::vector<double> zs(plan.grid_points);
  for (int j = 0; j < plan.grid_points; ++j)
    zs[j] = center - half +
            2.0 * half * static_cast<double>(j) /
                static_cast<double>(plan.grid_points - 1);
  const double dz = 2.0 * half / static_cast<double>(plan.grid_points - 1);

  FrozenProxyContext ctx = make_context(coeffs, ref.flow);
  const std::vector<SeriesValue> profile = mckean_density_profile(
      ctx, atoms, plan.horizon, zs, plan.truncation);
  // Truncation allowance for the envelope audit: the pointwise delta between
  // consecutive series orders estimates the remainder, like the bandwidth
  // delta does for KDE bias. The a-priori tail bound is far too loose at
  // horizons this long.
  const std::vector<SeriesValue> profile_lo = mckean_density_profile(
      ctx, atoms, plan.horizon, zs, std::max(0, plan.truncation - 2));
  std::vector<double> pref(zs.size()), series_delta(zs.size());
  for (std::size_t j = 0; j < zs.size(); ++j) {
    pref[j] = profile[j].value;
    series_delta[j] = std::fabs(profile[j].value - profile_lo[j].value);
  }

  // Right side of the N^{-1} bound without its constant: the initial-law
  // Gaussian smoothing at the envelope rate, in both moment weights.
  const double c_env = ctx.envelope_rate();
  const double eta = coeffs.eta;
  const double t_pow1 = std::pow(plan.horizon, 0.5 * (eta - 1.0));
  const double t_pow0 = std::pow(plan.horizon, 0.5 * eta - 1.0);
  std::vector<double> env(zs.size());
  double env_peak = 0.0;
  for (std::size_t j = 0; j < zs.size(); ++j) {
    double s0 = 0.0, s1 = 0.0;
    for (int k = 0; k < atoms.size(); ++k) {
      const double g = gaussian1(c_env * plan.horizon, zs[j] - atoms.xs[k]);
      s0 += atoms.weight(k) * g;
      s1 += atoms.weight(k) * g * std::fabs(atoms.xs[k]);
    }
    env[j] = t_pow1 * s1 + t_pow0 * s0;
    env_peak = std::max(env_peak, env[j]);
  }

  DensityChaosReport rep;
  rep.table = table_shell(plan, "density");
  rep.zs = zs;

  const double rk = 1.0 / (2.0 * std::sqrt(M_PI));  // Gaussian kernel roughness
  const double n0 = static_cast<double>(plan.n_list.front());
  std::uint64_t row_base = 0;
  for (std::size_t i = 0; i < plan.n_list.size(); ++i) {
    const std::int64_t n = plan.n_list[i];
    const std::int64_t reps = std::max<std::int64_t>(
        1, std::llround(static_cast<double>(plan.replications) * n0 /
                        static_cast<double>(n)));
    std::vector<double> pool(static_cast<std::size_t>(reps * n));
    for_each_index(reps, [&](std::int64_t r) {
      const SimConfig cfg =
          row_config(plan, n, row_base + static_cast<std::uint64_t>(r), false);
      const SimResult sim = simulate_particle_system(coeffs, init, cfg);
      const ParticleCloud& last = sim.flow.clouds.back();
      std::copy(last.xs.begin(), last.xs.end(),
                pool.begin() + static_cast<std::size_t>(r) * n);
    });

    const double h = silverman_bandwidth(pool);
    const std::vector<double> phat = gaussian_kde(pool, h, zs);
    const std::vector<double> p_lo = gaussian_kde(pool, 0.5 * h, zs);
    const std::vector<double> p_hi = gaussian_kde(pool, 2.0 * h, zs);
    const auto l1 = [&](const std::vector<double>& est) {
      double acc = 0.0;
      for (std::size_t j = 0; j < zs.size(); ++j)
        acc += std::fabs(est[j] - pref[j]) * dz;
      return acc;
    };
    const double err = l1(phat);
    const double sens =
        std::max(std::fabs(l1(p_lo) - err), std::fabs(l1(p_hi) - err));
    double weighted = 0.0, noise = 0.0;
    const double m_pool = static_cast<double>(pool.size());
    std::vector<double> kde_sd(zs.size());
    for (std::size_t j = 0; j < zs.size(); ++j) {
      weighted += std::fabs(phat[j] - pref[j]) * zs[j] * zs[j] * dz;
      kde_sd[j] = std::sqrt(std::max(phat[j], 0.0) * rk / (m_pool * h));
      noise += kde_sd[j] * dz;
    }

    RateRow row;
    row.n = static_cast<double>(n);
    row.error = err;
    row.stderr_ = noise;  // integrated pointwise KDE standard error
    if (sens > 0.5 * err) {
      row.flagged = true;
      row.flag_reason = "bandwidth sensitive";
    } else if (err < 1.8 * noise) {
      row.flagged = true;
      row.flag_reason = "kde noise floor";
    }
    rep.table.rows.push_back(row);
    rep.row_replications.push_back(reps);
    rep.bandwidth.push_back(h);
    rep.sensitivity.push_back(sens);
    rep.weighted_error.push_back(weighted);

    // Envelope audit away from the far tails, where the bound degenerates
    // against pure estimator noise.
    std::int64_t violations = 0;
    if (i == 0) {
      double cal = 0.0;
      for (std::size_t j = 0; j < zs.size(); ++j)
        if (env[j] >= 1e-3 * env_peak)
          cal = std::max(cal, std::fabs(phat[j] - pref[j]) *
                                  static_cast<double>(n) / env[j]);
      rep.envelope_constant = cal;
    } else {
      // Estimator allowances on top of the N-scaled envelope: three pointwise
      // standard errors for KDE noise plus a bandwidth-doubling delta for KDE
      // bias (the h^2 bias is about a third of that difference).
      for (std::size_t j = 0; j < zs.size(); ++j) {
        if (env[j] < 1e-3 * env_peak) continue;
        const double allowed =
            rep.envelope_constant * env[j] / static_cast<double>(n) +
            3.0 * kde_sd[j] + 0.5 * std::fabs(p_hi[j] - phat[j]) +
            1.5 * series_delta[j];
        if (std::fabs(phat[j] - pref[j]) > allowed) ++violations;
      }
    }
    rep.envelope_violations.push_back(violations);
    row_base += static_cast<std::uint64_t>(reps);
  }
  return rep;
}

namespace {

// One component of a mixture law: its own sampler, carrier size, stream, and
// mixture weight. All components are simulated against the same frozen
// statistics table; the mixture's statistics are the weight-exact convex
// combination of the component tables, so a flow perturbed by reweighting
// depends smoothly on the weights (common noise per component stream).
struct MixtureComponent {
  InitSampler init;
  int n = 0;
  std::uint64_t replication = 0;
  double weight = 1.0;
};

ParticleCloud initial_cloud(const InitSampler& init, const SimConfig& cfg,
                            int d) {
  ParticleCloud c;
  c.d = d;
  c.xs.resize(static_cast<std::size_t>(cfg.n) * d);
  for (std::int64_t i = 0; i < cfg.n; ++i)
    init.sample(d, cfg.seed, cfg.init_role, cfg.replication, i, cfg.n,
                &c.xs[static_cast<std::size_t>(i) * d]);
  return c;
}

// Fixed-iteration mean-field fixed point for a mixture of component laws.
// No early stop: the iterate count is part of the definition of the map
// weights -> flow, which keeps reweighting differences smooth.
MeasureFlow mixture_flow(const CoefficientSet& coeffs,
                         const std::vector<MixtureComponent>& comps, double dt,
                         double horizon, std::uint64_t seed, int iters) {
  const int d = coeffs.dim;
  const std::size_t p = coeffs.stats.size();
  std::vector<SimConfig> cfgs(comps.size());
  for (std::size_t c = 0; c < comps.size(); ++c) {
    SimConfig& cfg = cfgs[c];
    cfg.n = comps[c].n;
    cfg.dt = dt;
    cfg.horizon = horizon;
    cfg.seed = seed;
    cfg.replication = comps[c].replication;
    cfg.init_role = rng::Role::RefInit;
    cfg.increment_role = rng::Role::RefIncrement;
    cfg.antithetic = true;
    cfg.keep_paths = false;
    cfg.exec = default_exec();
    cfg.validate();
  }
  const int steps = cfgs[0].steps();

  std::vector<double> stats0(p, 0.0);
  for (std::size_t c = 0; c < comps.size(); ++c) {
    const std::vector<double> sc =
        coeffs.compute_stats(initial_cloud(comps[c].init, cfgs[c], d));
    for (std::size_t k = 0; k < p; ++k) stats0[k] += comps[c].weight * sc[k];
  }
  std::vector<std::vector<double>> table(steps, stats0);

  std::vector<SimResult> sims(comps.size());
  for (int round = 0; round < iters; ++round) {
    if (round > 0)
      for (int k = 0; k < steps; ++k) {
        std::vector<double>& row = table[k];
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t c = 0; c < comps.size(); ++c)
          for (std::size_t s = 0; s < p; ++s)
            row[s] += comps[c].weight * sims[c].flow.stats[k][s];
      }
    for (std::size_t c = 0; c < comps.size(); ++c)
      sims[c] = simulate_frozen_stats(coeffs, comps[c].init, cfgs[c], table);
  }

  MeasureFlow flow;
  flow.times = sims[0].flow.times;
  flow.clouds = std::move(sims[0].flow.clouds);  // carrier for validation
  flow.stats.resize(steps + 1);
  for (int k = 0; k <= steps; ++k) {
    flow.stats[k].assign(p, 0.0);
    for (std::size_t c = 0; c < comps.size(); ++c)
      for (std::size_t s = 0; s < p; ++s)
        flow.stats[k][s] += comps[c].weight * sims[c].flow.stats[k][s];
  }
  return flow;
}

FrozenProxyContext light_context(const CoefficientSet& coeffs,
                                 MeasureFlow flow,
                                 const FirstOrderConfig& cfg) {
  FrozenProxyContext ctx = make_context(coeffs, std::move(flow));
  ctx.space_nodes = cfg.space_nodes;
  ctx.time_nodes = cfg.time_nodes;
  ctx.time_levels = cfg.time_levels;
  ctx.z_nodes = cfg.z_nodes;
  ctx.validate();
  return ctx;
}

// Density profile on zs from each start atom separately.
std::vector<std::vector<double>> start_profiles(
    const FrozenProxyContext& ctx, const ParticleCloud& starts, double t,
    const std::vector<double>& zs, int order) {
  const std::pair<double, double> zr{zs.front(), zs.back()};
  std::vector<std::vector<double>> out(starts.size());
  for (int i = 0; i < starts.size(); ++i) {
    const DensityField field(ctx, starts.at(i)[0], t, order, zr);
    out[i].resize(zs.size());
    for (std::size_t j = 0; j < zs.size(); ++j) out[i][j] = field.value(zs[j]);
  }
  return out;
}

CoefficientSet shift_time(const CoefficientSet& coeffs, double off) {
  if (coeffs.time_homogeneous || off == 0.0) return coeffs;
  CoefficientSet s = coeffs;
  const auto b = coeffs.drift;
  const auto sg = coeffs.sigma;
  s.drift = [b, off](double t, const double* x, const double* st,
                     double* out) { b(t + off, x, st, out); };
  s.sigma = [sg, off](double t, const double* x, const double* st,
                      double* out) { sg(t + off, x, st, out); };
  return s;
}

// Uniform atoms at the mid-quantiles of a simulated cloud.
ParticleCloud quantize_cloud(const ParticleCloud& c, int q) {
  std::vector<double> s(c.xs);
  std::sort(s.begin(), s.end());
  ParticleCloud out;
  out.d = 1;
  out.xs.resize(q);
  for (int l = 0; l < q; ++l)
    out.xs[l] = quantile_sorted(s, (static_cast<double>(l) + 0.5) /
                                       static_cast<double>(q));
  return out;
}

InitSampler explicit_init(std::vector<double> coords) {
  InitSampler init;
  init.kind = InitSampler::Kind::Atoms;
  init.atoms.d = 1;
  init.atoms.xs = std::move(coords);
  return init;
}

}  // namespace

std::vector<double> FirstOrderTerms::total() const {
  std::vector<double> t(term1.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = term1[i] + term2[i] + term3[i];
  return t;
}

FirstOrderTerms first_order_terms(const CoefficientSet& coeffs,
                                  const ParticleCloud& mu0, double horizon,
                                  const std::vector<double>& z_grid, double fd,
                                  const FirstOrderConfig& cfg) {
  if (coeffs.dim != 1)
    throw std::invalid_argument("first-order terms: d = 1 only");
  mu0.validate();
  if (mu0.d != 1)
    throw std::invalid_argument("first-order terms: d = 1 only");
  if (mu0.size() > 64)
    throw std::invalid_argument(
        "first-order terms: measure derivatives by perturbation need a small "
        "initial cloud (<= 64 atoms)");
  if (z_grid.size() < 2)
    throw std::invalid_argument("first-order terms: need a z-grid");
  for (std::size_t j = 1; j < z_grid.size(); ++j)
    if (!(z_grid[j] > z_grid[j - 1]))
      throw std::invalid_argument(
          "first-order terms: z-grid must be strictly increasing");
  if (!(fd > 0.0) || !(fd < 0.5))
    throw std::invalid_argument(
        "first-order terms: reweighting step must lie in (0, 0.5)");
  if (!(horizon > 0.0))
    throw std::invalid_argument("first-order terms: horizon must be > 0");
  if (cfg.flow_particles < 2 * mu0.size() || cfg.satellite_particles < 2 ||
      cfg.quantize_atoms < 2 || !(cfg.hessian_step > 0.0) ||
      cfg.picard_iters < 1 || cfg.truncation < 0)
    throw std::invalid_argument("first-order terms: bad configuration");

  const int n = mu0.size();
  const double T = horizon;
  const std::size_t nz = z_grid.size();
  const int order = cfg.truncation;

  FirstOrderTerms out;
  out.zs = z_grid;
  out.fd = fd;
  out.term1.assign(nz, 0.0);
  out.term2.assign(nz, 0.0);
  out.term3.assign(nz, 0.0);

  MixtureComponent base;
  base.init.kind = InitSampler::Kind::Atoms;
  base.init.atoms = mu0;
  base.n = cfg.flow_particles;
  base.replication = 0;
  base.weight = 1.0;

  MeasureFlow flow0 =
      mixture_flow(coeffs, {base}, cfg.dt, T, cfg.seed, cfg.picard_iters);
  // The trace term walks the quantiles of a larger antithetic flow: the
  // Hessian functional amplifies quantile jitter through third derivatives,
  // and simulation is cheap next to the kernel evaluations it feeds.
  MeasureFlow trace_flow;
  {
    InitSampler tinit;
    tinit.kind = InitSampler::Kind::Atoms;
    tinit.atoms = mu0;
    tinit.antithetic = false;
    SimConfig tcfg;
    tcfg.n = 4 * cfg.flow_particles;
    tcfg.dt = cfg.dt;
    tcfg.horizon = T;
    tcfg.seed = cfg.seed;
    tcfg.init_role = rng::Role::RefInit;
    tcfg.increment_role = rng::Role::RefIncrement;
    tcfg.antithetic = true;
    tcfg.keep_paths = false;
    trace_flow =
        picard_mean_field_flow(coeffs, tinit, tcfg, 1e-6, cfg.picard_iters)
            .flow;
  }
  const MeasureFlow& flow0_copy = trace_flow;
  const FrozenProxyContext ctx0 = light_context(coeffs, std::move(flow0), cfg);
  const std::vector<std::vector<double>> p_base =
      start_profiles(ctx0, mu0, T, z_grid, order);

  // Reweighting derivatives: per direction (atom j) and step s, the density
  // profile of every start atom under the mixture (1 - s) mu0 + s delta_j.
  const double eps[2] = {fd, fd / 10.0};
  // p_dir[j][level][step - 1][start][z]
  std::vector<std::vector<std::vector<std::vector<std::vector<double>>>>>
      p_dir(n);
  for (int j = 0; j < n; ++j) {
    p_dir[j].resize(2);
    MixtureComponent sat;
    sat.init.kind = InitSampler::Kind::Point;
    sat.init.point = {mu0.xs[j]};
    sat.n = cfg.satellite_particles;
    sat.replication = 1 + static_cast<std::uint64_t>(j);
    for (int lev = 0; lev < 2; ++lev) {
      p_dir[j][lev].resize(2);
      for (int stp = 1; stp <= 2; ++stp) {
        const double s = eps[lev] * stp;
        MixtureComponent carrier = base;
        carrier.weight = 1.0 - s;
        sat.weight = s;
        MeasureFlow flow = mixture_flow(coeffs, {carrier, sat}, cfg.dt, T,
                                        cfg.seed, cfg.picard_iters);
        const FrozenProxyContext ctx =
            light_context(coeffs, std::move(flow), cfg);
        p_dir[j][lev][stp - 1] = start_profiles(ctx, mu0, T, z_grid, order);
      }
    }
  }

  // Term 1: E[d1(xi, xi)] - E[d1(xi, xi~)], directional derivative of the
  // start-x profile in the reweighting direction of atom j, Richardson over
  // the two step sizes. Term 2: half the matched-diagonal second difference;
  // the independent-pair expectation vanishes because the perturbation
  // directions of an atomic base measure sum to zero.
  std::vector<double> t1_lev[2], t2_lev[2];
  for (int lev = 0; lev < 2; ++lev) {
    t1_lev[lev].assign(nz, 0.0);
    t2_lev[lev].assign(nz, 0.0);
    const double e = eps[lev];
    for (int i = 0; i < n; ++i) {
      const double wi = mu0.weight(i);
      for (int j = 0; j < n; ++j) {
        const double wj = mu0.weight(j);
        const std::vector<double>& p1 = p_dir[j][lev][0][i];
        const std::vector<double>& p2 = p_dir[j][lev][1][i];
        const std::vector<double>& p0 = p_base[i];
        for (std::size_t z = 0; z < nz; ++z) {
          const double d1 = (p1[z] - p0[z]) / e;
          const double d2 = (p2[z] - 2.0 * p1[z] + p0[z]) / (e * e);
          t1_lev[lev][z] += (i == j ? wi : 0.0) * d1 - wi * wj * d1;
          t2_lev[lev][z] += 0.5 * wi * wj * d2;
        }
      }
    }
  }
  out.term1_noise = 0.0;
  out.term2_noise = 0.0;
  double t1_scale = 0.0, t2_scale = 0.0;
  const double w0 = eps[0] / (eps[0] - eps[1]);
  const double w1 = -eps[1] / (eps[0] - eps[1]);
  for (std::size_t z = 0; z < nz; ++z) {
    out.term1[z] = w0 * t1_lev[1][z] + w1 * t1_lev[0][z];
    out.term2[z] = w0 * t2_lev[1][z] + w1 * t2_lev[0][z];
    out.term1_noise =
        std::max(out.term1_noise, std::fabs(t1_lev[0][z] - t1_lev[1][z]));
    out.term2_noise =
        std::max(out.term2_noise, std::fabs(t2_lev[0][z] - t2_lev[1][z]));
    t1_scale = std::max(t1_scale, std::fabs(out.term1[z]));
    t2_scale = std::max(t2_scale, std::fabs(out.term2[z]));
  }
  out.noise_flagged =
      out.term1_noise > std::max(0.5 * t1_scale, 1e-6) ||
      out.term2_noise > std::max(0.5 * t2_scale, 1e-6);

  // Term 3: trapezoid over the flow grid of
  //   (1/2) sum_l w_l a(s, v_l, mu_s) d2_mu p(mu_s, s, T, z)(v_l, v_l),
  // with mu_s quantized to uniform atoms and the second intrinsic derivative
  // diagonal taken as a split-atom cross difference: moving the whole atom
  // by +/- h against splitting it into two half-weight copies at +/- h. The
  // final sub-step [T - dt, T] is excluded (integrable singularity).
  const int q = cfg.quantize_atoms;
  const int m_carrier =
      ((cfg.flow_particles + 2 * q - 1) / (2 * q)) * (2 * q);
  const int steps = flow0_copy.grid_size() - 1;
  const double wq = 1.0 / static_cast<double>(q);
  std::vector<std::vector<double>> integrand(
      steps, std::vector<double>(nz, 0.0));
  std::vector<std::uint8_t> resolved(steps, 1);
  for (int k = 0; k < steps; ++k) {
    const double s_k = flow0_copy.times[k];
    const double span = T - s_k;
    // The forward kernel narrows like sqrt(span), so the displacement must
    // shrink with it or the second difference oversteps the kernel width.
    const double h = cfg.hessian_step * std::sqrt(span / T);
    const CoefficientSet local = shift_time(coeffs, s_k);
    const ParticleCloud qc = quantize_cloud(flow0_copy.clouds[k], q);
    const std::vector<double> st = coeffs.compute_stats(qc);
    std::vector<double> a_atom(q);
    double abar = 0.0;
    for (int l = 0; l < q; ++l) {
      local.a_at(0.0, &qc.xs[l], st.data(), &a_atom[l]);
      abar += wq * a_atom[l];
    }
    const auto [lo_it, hi_it] = std::minmax_element(qc.xs.begin(), qc.xs.end());
    const double spacing = (*hi_it - *lo_it) / static_cast<double>(q);
    if (abar * span < spacing * spacing) {
      resolved[k] = 0;
      continue;  // filled by extrapolation below; the evals would be noise
    }
    const auto starts = atom_allocation(qc, m_carrier);
    std::vector<double> base_coords(m_carrier);
    for (int l = 0; l < q; ++l)
      std::fill(base_coords.begin() + starts[l],
                base_coords.begin() + starts[l + 1], qc.xs[l]);

    const auto eval = [&](std::vector<double> coords,
                          const ParticleCloud& eval_starts) {
      MixtureComponent comp;
      comp.init = explicit_init(std::move(coords));
      comp.n = m_carrier;
      comp.replication = (std::uint64_t{1} << 20) + static_cast<std::uint64_t>(k);
      MeasureFlow flow = mixture_flow(local, {comp}, cfg.dt, span, cfg.seed,
                                      cfg.picard_iters);
      const FrozenProxyContext ctx =
          light_context(local, std::move(flow), cfg);
      const std::vector<std::vector<double>> prof =
          start_profiles(ctx, eval_starts, span, z_grid, order);
      std::vector<double> mix(nz, 0.0);
      for (int a = 0; a < eval_starts.size(); ++a)
        for (std::size_t z = 0; z < nz; ++z)
          mix[z] += eval_starts.weight(a) * prof[a][z];
      return mix;
    };

    for (int l = 0; l < q; ++l) {
      std::vector<double> plus_coords = base_coords;
      std::vector<double> minus_coords = base_coords;
      std::vector<double> split_coords = base_coords;
      const std::int64_t lo = starts[l], hi = starts[l + 1];
      const std::int64_t mid = lo + (hi - lo) / 2;
      for (std::int64_t i = lo; i < hi; ++i) {
        plus_coords[i] = qc.xs[l] + h;
        minus_coords[i] = qc.xs[l] - h;
        split_coords[i] = i < mid ? qc.xs[l] + h : qc.xs[l] - h;
      }
      ParticleCloud moved = qc;
      moved.xs[l] = qc.xs[l] + h;
      const std::vector<double> u_plus = eval(std::move(plus_coords), moved);
      moved.xs[l] = qc.xs[l] - h;
      const std::vector<double> u_minus = eval(std::move(minus_coords), moved);
      ParticleCloud split;
      split.d = 1;
      split.xs = qc.xs;
      split.xs[l] = qc.xs[l] + h;
      split.xs.push_back(qc.xs[l] - h);
      split.weights.assign(q + 1, wq);
      split.weights[l] = 0.5 * wq;
      split.weights[q] = 0.5 * wq;
      const std::vector<double> u_split = eval(std::move(split_coords), split);

      const double scale = 0.5 * wq * a_atom[l] / (h * h * wq * wq);
      for (std::size_t z = 0; z < nz; ++z)
        integrand[k][z] +=
            scale * (u_plus[z] - 2.0 * u_split[z] + u_minus[z]);
    }
  }
  int kr = -1;
  for (int k = 0; k < steps; ++k)
    if (resolved[k]) kr = k;
  if (kr >= 0) {
    const double span_r = T - flow0_copy.times[kr];
    for (int k = 0; k < steps; ++k) {
      if (resolved[k]) continue;
      const double ratio = (T - flow0_copy.times[k]) / span_r;
      for (std::size_t z = 0; z < nz; ++z)
        integrand[k][z] = integrand[kr][z] * ratio;
      ++out.trace_extrapolated;
    }
  }
  // Trapezoid closed at the horizon with the known zero limit: no evaluation
  // happens inside the final sub-step, but dropping its area entirely would
  // make the integral depend on the grid through the width of the omitted
  // tail.
  const double dt = flow0_copy.dt();
  for (std::size_t z = 0; z < nz; ++z) {
    double acc = 0.0;
    for (int k = 0; k < steps; ++k) acc += integrand[k][z];
    acc -= 0.5 * integrand[0][z];
    out.term3[z] = dt * acc;
  }
  out.trace_times.assign(flow0_copy.times.begin(),
                         flow0_copy.times.begin() + steps);
  out.trace_integrand = std::move(integrand);
  return out;
}

RateFit fit_rate(const RateTable& table, RatePredictor predictor, int d) {
  if (d < 1) throw std::invalid_argument("rate fit: dimension must be >= 1");
  std::vector<double> xs, ys;
  std::vector<std::int64_t> used;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const RateRow& row = table.rows[i];
    if (row.flagged || !(row.error > 0.0) || !(row.n > 0.0)) continue;
    const double pred =
        predictor == RatePredictor::LogN
            ? row.n
            : fournier_guillin_rate(std::llround(row.n), d);
    xs.push_back(std::log(pred));
    ys.push_back(std::log(row.error));
    used.push_back(static_cast<std::int64_t>(i));
  }
  if (xs.size() < 3)
    throw std::invalid_argument(
        "rate fit: need at least 3 unflagged rows with positive error");
  const double m = static_cast<double>(xs.size());
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (!(sxx > 0.0))
    throw std::invalid_argument("rate fit: predictor values are degenerate");
  RateFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.used = used;
  double ss_res = 0.0;
  fit.residuals.resize(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    fit.residuals[i] = ys[i] - (fit.intercept + fit.slope * xs[i]);
    ss_res += fit.residuals[i] * fit.residuals[i];
  }
  fit.r2 = syy > 0.0 ? 1.0 - ss_res / syy : (ss_res > 0.0 ? 0.0 : 1.0);
  return fit;
}

}  // namespace mvlab
