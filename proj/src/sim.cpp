#include "mvlab/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace mvlab {

namespace {

double take_param(std::map<std::string, double>& p, const std::string& key,
                  double fallback) {
  const auto it = p.find(key);
  if (it == p.end()) return fallback;
  const double v = it->second;
  p.erase(it);
  return v;
}

void reject_leftover(const std::map<std::string, double>& p,
                     const std::string& what) {
  if (p.empty()) return;
  std::string keys;
  for (const auto& [k, _] : p) keys += (keys.empty() ? "" : ", ") + k;
  throw std::invalid_argument(what + ": unknown parameters: " + keys);
}

}  // namespace

void InitSampler::sample(int d, std::uint64_t seed, rng::Role role,
                         std::uint64_t replication, std::int64_t i,
                         std::int64_t n, double* out) const {
  if (d < 1 || d > 8)
    throw std::invalid_argument("init sampler: d must be in [1, 8]");
  std::int64_t src = i;
  bool mirror = false;
  if (antithetic) {
    const std::int64_t plain = n - n / 2;  // lower half, plus middle when odd
    if (i >= plain) {
      src = i - plain;
      mirror = true;
    }
  }
  switch (kind) {
    case Kind::Normal:
      for (int k = 0; k < d; ++k) {
        const double z = rng::standard_normal(seed, role, replication, src, 0,
                                              static_cast<std::uint32_t>(k));
        out[k] = mean + (mirror ? -sd : sd) * z;
      }
      break;
    case Kind::Uniform:
      for (int k = 0; k < d; ++k) {
        const double u = rng::uniform01(seed, role, replication, src, 0,
                                        static_cast<std::uint32_t>(k));
        const double x = lo + u * (hi - lo);
        out[k] = mirror ? lo + hi - x : x;
      }
      break;
    case Kind::Point:
      if (!point.empty() && static_cast<int>(point.size()) != 1 &&
          static_cast<int>(point.size()) != d)
        throw std::invalid_argument("init sampler: point size must be 1 or d");
      for (int k = 0; k < d; ++k)
        out[k] = point.empty() ? 0.0 : point[point.size() == 1 ? 0 : k];
      break;
    case Kind::ParetoSym:
      // |X| = scale * U^{-1/nu} (survival (scale/x)^nu), sign from a fair coin.
      for (int k = 0; k < d; ++k) {
        const double u = rng::uniform01(seed, role, replication, src, 0,
                                        static_cast<std::uint32_t>(2 * k));
        const double coin = rng::uniform01(seed, role, replication, src, 0,
                                           static_cast<std::uint32_t>(2 * k + 1));
        const double mag = pareto_scale * std::pow(u, -1.0 / pareto_nu);
        const double v = coin < 0.5 ? -mag : mag;
        out[k] = mirror ? -v : v;
      }
      break;
    case Kind::Atoms: {
      if (atoms.d != d)
        throw std::invalid_argument("init atoms: cloud dimension mismatch");
      int j;
      if (resample) {
        double total = 0.0;
        for (int a = 0; a < atoms.size(); ++a) total += atoms.weight(a);
        const double u =
            total * rng::uniform01(seed, role, replication, src, 0, 0);
        double acc = 0.0;
        j = atoms.size() - 1;
        for (int a = 0; a < atoms.size(); ++a) {
          acc += atoms.weight(a);
          if (u < acc) {
            j = a;
            break;
          }
        }
      } else {
        const auto starts = atom_allocation(atoms, n);
        const auto it = std::upper_bound(starts.begin(), starts.end(), src);
        j = static_cast<int>(it - starts.begin()) - 1;
      }
      const double* a = atoms.at(j);
      for (int k = 0; k < d; ++k) out[k] = mirror ? -a[k] : a[k];
      break;
    }
  }
}

std::vector<std::int64_t> atom_allocation(const ParticleCloud& atoms,
                                          std::int64_t n) {
  atoms.validate();
  const int m = atoms.size();
  if (n < m)
    throw std::invalid_argument("atom allocation: need at least one slot per atom");
  std::vector<std::int64_t> counts(m);
  std::vector<std::pair<double, int>> rem(m);
  std::int64_t used = 0;
  for (int j = 0; j < m; ++j) {
    const double want = atoms.weight(j) * static_cast<double>(n);
    counts[j] = static_cast<std::int64_t>(std::floor(want));
    used += counts[j];
    rem[j] = {-(want - static_cast<double>(counts[j])), j};
  }
  std::sort(rem.begin(), rem.end());  // largest fractional part first, ties by index
  for (std::int64_t r = 0; r < n - used; ++r) ++counts[rem[r % m].second];
  std::vector<std::int64_t> starts(m + 1, 0);
  for (int j = 0; j < m; ++j) starts[j + 1] = starts[j] + counts[j];
  return starts;
}

InitSampler make_init(const std::string& name,
                      const std::map<std::string, double>& params) {
  std::map<std::string, double> p = params;
  InitSampler s;
  if (name == "normal") {
    s.kind = InitSampler::Kind::Normal;
    s.mean = take_param(p, "mean", 0.0);
    s.sd = take_param(p, "sd", 1.0);
    if (!(s.sd > 0)) throw std::invalid_argument("init normal: sd must be > 0");
  } else if (name == "uniform") {
    s.kind = InitSampler::Kind::Uniform;
    s.lo = take_param(p, "lo", -1.0);
    s.hi = take_param(p, "hi", 1.0);
    if (!(s.lo < s.hi)) throw std::invalid_argument("init uniform: need lo < hi");
  } else if (name == "point") {
    s.kind = InitSampler::Kind::Point;
    s.point = {take_param(p, "x", 0.0)};
  } else if (name == "pareto") {
    s.kind = InitSampler::Kind::ParetoSym;
    s.pareto_nu = take_param(p, "nu", 4.5);
    s.pareto_scale = take_param(p, "scale", 1.0);
    if (!(s.pareto_nu > 2))
      throw std::invalid_argument("init pareto: nu must be > 2 for finite variance");
    if (!(s.pareto_scale > 0))
      throw std::invalid_argument("init pareto: scale must be > 0");
  } else {
    throw std::invalid_argument(
        "unknown init sampler '" + name +
        "'; known samplers: normal, uniform, point, pareto");
  }
  reject_leftover(p, "init " + name);
  return s;
}

int SimConfig::steps() const {
  return static_cast<int>(std::llround(horizon / dt));
}

void SimConfig::validate() const {
  if (!(dt > 0)) throw std::invalid_argument("sim config: dt must be > 0");
  if (!(horizon > 0)) throw std::invalid_argument("sim config: T must be > 0");
  if (n < 2) throw std::invalid_argument("sim config: N must be >= 2");
  const int k = steps();
  if (k < 1 || std::abs(k * dt - horizon) > 1e-12)
    throw std::invalid_argument(
        "sim config: steps*dt does not reproduce T within 1e-12");
}

double MeasureFlow::dt() const {
  if (times.size() < 2)
    throw std::logic_error("flow: grid has fewer than 2 times");
  return times[1] - times[0];
}

int MeasureFlow::index_of(double t) const {
  const double h = dt();
  const int idx = static_cast<int>(std::llround((t - times.front()) / h));
  if (idx < 0 || idx >= grid_size() || std::abs(times[idx] - t) > 1e-9)
    throw std::invalid_argument("flow: time off the stored grid");
  return idx;
}

void MeasureFlow::validate() const {
  if (times.empty()) throw std::invalid_argument("flow: empty grid");
  if (clouds.size() != times.size() || stats.size() != times.size())
    throw std::invalid_argument("flow: per-time array sizes disagree");
  const int d = clouds.front().d;
  for (const auto& c : clouds)
    if (c.d != d) throw std::invalid_argument("flow: cloud dimensions disagree");
  if (times.size() >= 2) {
    const double h = dt();
    if (!(h > 0)) throw std::invalid_argument("flow: grid not increasing");
    for (std::size_t k = 1; k < times.size(); ++k)
      if (std::abs(times[k] - times[k - 1] - h) > 1e-9)
        throw std::invalid_argument("flow: grid spacing not uniform");
  }
}

std::vector<std::vector<double>> sorted_flow_cache(const MeasureFlow& flow) {
  if (flow.dim() != 1)
    throw std::invalid_argument("sorted_flow_cache: requires d = 1");
  std::vector<std::vector<double>> cache(flow.clouds.size());
  for_each_index(static_cast<std::int64_t>(flow.clouds.size()),
                 [&](std::int64_t k) {
                   cache[k] = flow.clouds[k].xs;
                   std::sort(cache[k].begin(), cache[k].end());
                 });
  return cache;
}

namespace {

void check_coeffs(const CoefficientSet& coeffs) {
  if (coeffs.dim < 1 || coeffs.dim > 8 || coeffs.noise_dim < 1 ||
      coeffs.noise_dim > 8)
    throw std::invalid_argument("simulate: state and noise dimensions limited to [1, 8]");
  if (!coeffs.drift || !coeffs.sigma)
    throw std::invalid_argument("simulate: coefficient callbacks not set");
}

std::vector<double> raw_uniform_stats(const CoefficientSet& coeffs,
                                      const double* xs, int n, int d) {
  std::vector<double> s(coeffs.stats.size(), 0.0);
  if (s.empty()) return s;
  const double w = 1.0 / n;
  for (int i = 0; i < n; ++i)
    for (std::size_t j = 0; j < coeffs.stats.size(); ++j)
      s[j] += w * coeffs.stats[j].eval(xs + static_cast<std::size_t>(i) * d, d);
  return s;
}

double draw_increment(const SimConfig& cfg, std::int64_t i, std::uint64_t step,
                      std::uint32_t comp) {
  std::int64_t src = i;
  double sign = 1.0;
  if (cfg.antithetic) {
    const std::int64_t plain = cfg.n - cfg.n / 2;
    if (i >= plain) {
      src = i - plain;
      sign = -1.0;
    }
  }
  return sign * rng::standard_normal(cfg.seed, cfg.increment_role,
                                     cfg.replication, src, step, comp);
}

void precheck_ellipticity(const CoefficientSet& coeffs, const SimConfig& cfg,
                          const std::vector<double>& state0, int d) {
  if (cfg.waive_ellipticity) return;
  ParticleCloud c0;
  c0.d = d;
  c0.xs = state0;
  Eigen::VectorXd lo(d), hi(d);
  for (int k = 0; k < d; ++k) {
    double mn = state0[k], mx = state0[k];
    for (int i = 1; i < cfg.n; ++i) {
      mn = std::min(mn, state0[static_cast<std::size_t>(i) * d + k]);
      mx = std::max(mx, state0[static_cast<std::size_t>(i) * d + k]);
    }
    lo(k) = mn - 1.0;
    hi(k) = mx + 1.0;
  }
  const EllipticityReport rep =
      check_ellipticity(coeffs, c0, cfg.horizon, lo, hi, 32, cfg.seed);
  if (!rep.pass)
    throw std::invalid_argument(
        "coefficients violate the declared ellipticity bounds (eigenvalues in [" +
        std::to_string(rep.min_eig) + ", " + std::to_string(rep.max_eig) +
        "], lambda = " + std::to_string(coeffs.lambda) +
        "); set waive_ellipticity to bypass");
}

// Euler-Maruyama driver. When `frozen` is null the coefficient statistics
// are recomputed from the evolving cloud each step (interacting system);
// otherwise row k of the table is used for the step starting at t_k.
SimResult run_euler(const CoefficientSet& coeffs, const InitSampler& init,
                    const SimConfig& cfg,
                    const std::vector<std::vector<double>>* frozen) {
  cfg.validate();
  check_coeffs(coeffs);
  const int d = coeffs.dim, mdim = coeffs.noise_dim, n = cfg.n;
  const int steps = cfg.steps();
  const double dt = cfg.dt, sqdt = std::sqrt(dt);
  if (frozen) {
    if (static_cast<int>(frozen->size()) < steps)
      throw std::invalid_argument("frozen stats table shorter than the time grid");
    for (int k = 0; k < steps; ++k)
      if ((*frozen)[k].size() != coeffs.stats.size())
        throw std::invalid_argument("frozen stats row arity mismatch at step " +
                                    std::to_string(k));
  }

  SimResult res;
  res.bundle.d = d;
  res.bundle.n = n;
  res.bundle.steps = steps;
  res.bundle.noise_seed = cfg.seed;
  if (cfg.keep_paths)
    res.bundle.particle_paths.resize(static_cast<std::size_t>(n) * (steps + 1) * d);
  res.flow.times.resize(steps + 1);
  res.flow.clouds.resize(steps + 1);
  res.flow.stats.resize(steps + 1);

  std::vector<double> cur(static_cast<std::size_t>(n) * d);
  std::vector<double> nxt(cur.size());
  for_each_index(n, cfg.exec, [&](std::int64_t i) {
    init.sample(d, cfg.seed, cfg.init_role, cfg.replication, i, n,
                &cur[static_cast<std::size_t>(i) * d]);
  });
  precheck_ellipticity(coeffs, cfg, cur, d);

  const auto record = [&](int k, const std::vector<double>& state) {
    res.flow.times[k] = k * dt;
    ParticleCloud& cl = res.flow.clouds[k];
    cl.d = d;
    cl.xs = state;
    res.flow.stats[k] = raw_uniform_stats(coeffs, state.data(), n, d);
    if (cfg.keep_paths)
      for (int i = 0; i < n; ++i)
        std::memcpy(res.bundle.state(res.bundle.particle_paths, i, k),
                    &state[static_cast<std::size_t>(i) * d],
                    sizeof(double) * d);
  };
  record(0, cur);

  std::vector<std::uint8_t> bad(n);
  for (int k = 0; k < steps; ++k) {
    const double t = k * dt;
    const std::vector<double>& srow = frozen ? (*frozen)[k] : res.flow.stats[k];
    const double* s = srow.data();
    std::fill(bad.begin(), bad.end(), 0);
    for_each_index(n, cfg.exec, [&](std::int64_t i) {
      double b[8], sig[64], z[8];
      const double* x = &cur[static_cast<std::size_t>(i) * d];
      coeffs.drift(t, x, s, b);
      coeffs.sigma(t, x, s, sig);
      for (int c = 0; c < mdim; ++c)
        z[c] = draw_increment(cfg, i, static_cast<std::uint64_t>(k),
                              static_cast<std::uint32_t>(c));
      double* y = &nxt[static_cast<std::size_t>(i) * d];
      for (int r = 0; r < d; ++r) {
        double diff = 0.0;
        for (int c = 0; c < mdim; ++c) diff += sig[r * mdim + c] * z[c];
        y[r] = x[r] + b[r] * dt + sqdt * diff;
        if (!std::isfinite(y[r])) bad[i] = 1;
      }
    });
    for (int i = 0; i < n; ++i)
      if (bad[i])
        throw std::runtime_error("blow-up: non-finite state at step " +
                                 std::to_string(k + 1) + " (particle " +
                                 std::to_string(i) + ")");
    cur.swap(nxt);
    record(k + 1, cur);
  }
  return res;
}

}  // namespace

SimResult simulate_particle_system(const CoefficientSet& coeffs,
                                   const InitSampler& init,
                                   const SimConfig& cfg) {
  return run_euler(coeffs, init, cfg, nullptr);
}

SimResult simulate_frozen_stats(const CoefficientSet& coeffs,
                                const InitSampler& init, const SimConfig& cfg,
                                const std::vector<std::vector<double>>& stat_table) {
  return run_euler(coeffs, init, cfg, &stat_table);
}

namespace {

// sup over grid times of W2 between two equally sized flows; exact in d=1,
// sliced (32 projections) otherwise.
double flow_gap(const MeasureFlow& a, const MeasureFlow& b,
                const std::vector<std::vector<double>>& sorted_a,
                const std::vector<std::vector<double>>& sorted_b,
                std::uint64_t seed) {
  double gap = 0.0;
  if (a.dim() == 1) {
    for (std::size_t k = 0; k < sorted_a.size(); ++k)
      gap = std::max(gap, wasserstein2_sorted1d(
                              sorted_a[k].data(),
                              static_cast<int>(sorted_a[k].size()),
                              sorted_b[k].data(),
                              static_cast<int>(sorted_b[k].size())));
  } else {
    for (std::size_t k = 0; k < a.clouds.size(); ++k)
      gap = std::max(gap, sliced_wasserstein2(a.clouds[k], b.clouds[k], 32,
                                              seed + k));
  }
  return gap;
}

}  // namespace

PicardResult picard_mean_field_flow(const CoefficientSet& coeffs,
                                    const InitSampler& init,
                                    const SimConfig& cfg0, double tol,
                                    int max_iter) {
  if (!(tol > 0)) throw std::invalid_argument("picard: tol must be > 0");
  if (max_iter < 1) throw std::invalid_argument("picard: max_iter must be >= 1");
  SimConfig cfg = cfg0;
  cfg.keep_paths = false;
  cfg.validate();
  check_coeffs(coeffs);
  const int d = coeffs.dim, n = cfg.n;
  const int steps = cfg.steps();

  // Iterate 0 freezes the statistics at the initial cloud for all times.
  std::vector<double> state0(static_cast<std::size_t>(n) * d);
  for_each_index(n, cfg.exec, [&](std::int64_t i) {
    init.sample(d, cfg.seed, cfg.init_role, cfg.replication, i, n,
                &state0[static_cast<std::size_t>(i) * d]);
  });
  std::vector<std::vector<double>> table(
      steps, raw_uniform_stats(coeffs, state0.data(), n, d));
  SimResult cur = simulate_frozen_stats(coeffs, init, cfg, table);

  PicardResult pr;
  const bool one_d = d == 1;
  std::vector<std::vector<double>> sorted_cur;
  if (one_d) sorted_cur = sorted_flow_cache(cur.flow);
  for (int m = 1; m <= max_iter; ++m) {
    for (int k = 0; k < steps; ++k) table[k] = cur.flow.stats[k];
    SimResult nxt = simulate_frozen_stats(coeffs, init, cfg, table);
    std::vector<std::vector<double>> sorted_nxt;
    if (one_d) sorted_nxt = sorted_flow_cache(nxt.flow);
    const double gap =
        flow_gap(nxt.flow, cur.flow, sorted_nxt, sorted_cur, cfg.seed);
    pr.gaps.push_back(gap);
    pr.iterations = m;
    pr.final_gap = gap;
    cur = std::move(nxt);
    sorted_cur = std::move(sorted_nxt);
    if (gap < tol) {
      pr.converged = true;
      break;
    }
  }
  pr.flow = std::move(cur.flow);
  return pr;
}

TrajectoryBundle simulate_coupled_system(const CoefficientSet& coeffs,
                                         const InitSampler& init,
                                         const SimConfig& cfg,
                                         const MeasureFlow& flow) {
  cfg.validate();
  check_coeffs(coeffs);
  const int d = coeffs.dim, mdim = coeffs.noise_dim, n = cfg.n;
  const int steps = cfg.steps();
  const double dt = cfg.dt, sqdt = std::sqrt(dt);
  if (flow.grid_size() != steps + 1)
    throw std::invalid_argument("coupled simulate: flow grid size mismatch");
  for (int k = 0; k <= steps; ++k)
    if (std::abs(flow.times[k] - k * dt) > 1e-9)
      throw std::invalid_argument("coupled simulate: flow time grid mismatch");
  if (flow.dim() != d)
    throw std::invalid_argument("coupled simulate: flow dimension mismatch");
  for (int k = 0; k < steps; ++k)
    if (flow.stats[k].size() != coeffs.stats.size())
      throw std::invalid_argument("coupled simulate: flow stats arity mismatch");

  TrajectoryBundle bundle;
  bundle.d = d;
  bundle.n = n;
  bundle.steps = steps;
  bundle.noise_seed = cfg.seed;
  bundle.particle_paths.resize(static_cast<std::size_t>(n) * (steps + 1) * d);
  bundle.coupled_paths.resize(bundle.particle_paths.size());

  std::vector<double> curx(static_cast<std::size_t>(n) * d), nxtx(curx.size());
  std::vector<double> cury(curx.size()), nxty(curx.size());
  for_each_index(n, cfg.exec, [&](std::int64_t i) {
    init.sample(d, cfg.seed, cfg.init_role, cfg.replication, i, n,
                &curx[static_cast<std::size_t>(i) * d]);
  });
  cury = curx;  // shared xi^i
  precheck_ellipticity(coeffs, cfg, curx, d);

  const auto record = [&](int k) {
    for (int i = 0; i < n; ++i) {
      std::memcpy(bundle.state(bundle.particle_paths, i, k),
                  &curx[static_cast<std::size_t>(i) * d], sizeof(double) * d);
      std::memcpy(bundle.state(bundle.coupled_paths, i, k),
                  &cury[static_cast<std::size_t>(i) * d], sizeof(double) * d);
    }
  };
  record(0);

  std::vector<std::uint8_t> bad(n);
  for (int k = 0; k < steps; ++k) {
    const double t = k * dt;
    const std::vector<double> sx = raw_uniform_stats(coeffs, curx.data(), n, d);
    const std::vector<double>& sy = flow.stats[k];
    std::fill(bad.begin(), bad.end(), 0);
    for_each_index(n, cfg.exec, [&](std::int64_t i) {
      double b[8], sig[64], z[8];
      for (int c = 0; c < mdim; ++c)
        z[c] = draw_increment(cfg, i, static_cast<std::uint64_t>(k),
                              static_cast<std::uint32_t>(c));
      const double* x = &curx[static_cast<std::size_t>(i) * d];
      double* xn = &nxtx[static_cast<std::size_t>(i) * d];
      coeffs.drift(t, x, sx.data(), b);
      coeffs.sigma(t, x, sx.data(), sig);
      for (int r = 0; r < d; ++r) {
        double diff = 0.0;
        for (int c = 0; c < mdim; ++c) diff += sig[r * mdim + c] * z[c];
        xn[r] = x[r] + b[r] * dt + sqdt * diff;
        if (!std::isfinite(xn[r])) bad[i] = 1;
      }
      const double* y = &cury[static_cast<std::size_t>(i) * d];
      double* yn = &nxty[static_cast<std::size_t>(i) * d];
      coeffs.drift(t, y, sy.data(), b);
      coeffs.sigma(t, y, sy.data(), sig);
      for (int r = 0; r < d; ++r) {
        double diff = 0.0;
        for (int c = 0; c < mdim; ++c) diff += sig[r * mdim + c] * z[c];
        yn[r] = y[r] + b[r] * dt + sqdt * diff;
        if (!std::isfinite(yn[r])) bad[i] = 1;
      }
    });
    for (int i = 0; i < n; ++i)
      if (bad[i])
        throw std::runtime_error("blow-up: non-finite state at step " +
                                 std::to_string(k + 1) + " (particle " +
                                 std::to_string(i) + ")");
    curx.swap(nxtx);
    cury.swap(nxty);
    record(k + 1);
  }
  return bundle;
}

PathChaosStats path_chaos_statistics(
    const TrajectoryBundle& bundle, const MeasureFlow& flow,
    const std::vector<std::vector<double>>* sorted_flow) {
  if (bundle.coupled_paths.empty())
    throw std::invalid_argument("path_chaos_statistics: bundle has no coupled paths");
  const int n = bundle.n, d = bundle.d, steps = bundle.steps;
  if (flow.grid_size() != steps + 1)
    throw std::invalid_argument("path_chaos_statistics: flow grid size mismatch");
  if (flow.dim() != d)
    throw std::invalid_argument("path_chaos_statistics: dimension mismatch");
  if (sorted_flow && static_cast<int>(sorted_flow->size()) != steps + 1)
    throw std::invalid_argument("path_chaos_statistics: sorted cache size mismatch");
  if (d > 1 && n > 512)
    throw std::invalid_argument(
        "path_chaos_statistics: assignment W2 limited to N <= 512 for d > 1");

  PathChaosStats st;
  st.times = flow.times;
  st.coupling_profile.resize(steps + 1);
  st.w2sq_profile.resize(steps + 1);
  for_each_index(steps + 1, [&](std::int64_t k) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* x = bundle.particle_at(i, static_cast<int>(k));
      const double* y = bundle.coupled_at(i, static_cast<int>(k));
      for (int r = 0; r < d; ++r) {
        const double diff = x[r] - y[r];
        acc += diff * diff;
      }
    }
    st.coupling_profile[k] = acc / n;

    double w = 0.0;
    if (d == 1) {
      std::vector<double> xs(n);
      for (int i = 0; i < n; ++i) xs[i] = bundle.particle_at(i, static_cast<int>(k))[0];
      std::sort(xs.begin(), xs.end());
      if (sorted_flow) {
        const auto& ref = (*sorted_flow)[k];
        w = wasserstein2_sorted1d(xs.data(), n, ref.data(),
                                  static_cast<int>(ref.size()));
      } else {
        std::vector<double> ref = flow.clouds[k].xs;
        std::sort(ref.begin(), ref.end());
        w = wasserstein2_sorted1d(xs.data(), n, ref.data(),
                                  static_cast<int>(ref.size()));
      }
    } else {
      ParticleCloud pa, pb;
      pa.d = pb.d = d;
      pa.xs.resize(static_cast<std::size_t>(n) * d);
      for (int i = 0; i < n; ++i)
        std::memcpy(&pa.xs[static_cast<std::size_t>(i) * d],
                    bundle.particle_at(i, static_cast<int>(k)),
                    sizeof(double) * d);
      const int nf = flow.clouds[k].size();
      const int stride = std::max(1, nf / n);
      pb.xs.resize(static_cast<std::size_t>(n) * d);
      for (int i = 0; i < n; ++i)
        std::memcpy(&pb.xs[static_cast<std::size_t>(i) * d],
                    flow.clouds[k].at(std::min(nf - 1, i * stride)),
                    sizeof(double) * d);
      w = wasserstein2_assignment(pa, pb);
    }
    st.w2sq_profile[k] = w * w;
  });
  for (int k = 0; k <= steps; ++k) {
    st.sup_coupling = std::max(st.sup_coupling, st.coupling_profile[k]);
    st.sup_w2sq = std::max(st.sup_w2sq, st.w2sq_profile[k]);
  }
  return st;
}

}  // namespace mvlab
