#include "mvlab/measure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mvlab/rng.hpp"

namespace mvlab {

void ParticleCloud::validate() const {
  if (d < 1) throw std::invalid_argument("cloud: dimension must be >= 1");
  if (xs.size() % d != 0)
    throw std::invalid_argument("cloud: coordinate buffer not a multiple of d");
  const int n = size();
  if (n == 0) throw std::invalid_argument("cloud: empty");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]))
      throw std::invalid_argument("cloud: non-finite coordinate at row " +
                                  std::to_string(i / d));
  if (!weights.empty()) {
    if (static_cast<int>(weights.size()) != n)
      throw std::invalid_argument("cloud: weight count mismatch");
    double tot = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!(weights[i] > 0) || !std::isfinite(weights[i]))
        throw std::invalid_argument("cloud: weight must be positive at row " +
                                    std::to_string(i));
      tot += weights[i];
    }
    if (std::abs(tot - 1.0) > 1e-9)
      throw std::invalid_argument("cloud: weights must sum to 1");
  }
}

ParticleCloud cloud_from_vector(const std::vector<double>& xs1d) {
  ParticleCloud c;
  c.d = 1;
  c.xs = xs1d;
  return c;
}

Eigen::VectorXd cloud_mean(const ParticleCloud& c) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(c.d);
  const int n = c.size();
  for (int i = 0; i < n; ++i) {
    const double w = c.weight(i);
    for (int k = 0; k < c.d; ++k) m(k) += w * c.at(i)[k];
  }
  return m;
}

Eigen::MatrixXd cloud_covariance(const ParticleCloud& c) {
  const Eigen::VectorXd m = cloud_mean(c);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(c.d, c.d);
  const int n = c.size();
  for (int i = 0; i < n; ++i) {
    const double w = c.weight(i);
    for (int a = 0; a < c.d; ++a)
      for (int b = 0; b < c.d; ++b)
        cov(a, b) += w * (c.at(i)[a] - m(a)) * (c.at(i)[b] - m(b));
  }
  return cov;
}

double cloud_moment(const ParticleCloud& c, double q) {
  if (!(q > 0)) throw std::invalid_argument("cloud_moment: q <= 0");
  double tot = 0.0;
  const int n = c.size();
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < c.d; ++k) s += c.at(i)[k] * c.at(i)[k];
    tot += c.weight(i) * std::pow(s, 0.5 * q);
  }
  return tot;
}

void write_cloud_csv(const ParticleCloud& c, const std::string& path) {
  c.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (int k = 0; k < c.d; ++k) out << (k ? ",x" : "x") << (k + 1);
  if (!c.weights.empty()) out << ",w";
  out << "\n";
  char buf[32];
  const int n = c.size();
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < c.d; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", c.at(i)[k]);
      out << (k ? "," : "") << buf;
    }
    if (!c.weights.empty()) {
      std::snprintf(buf, sizeof buf, "%.17g", c.weights[i]);
      out << "," << buf;
    }
    out << "\n";
  }
}

ParticleCloud read_cloud_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty cloud csv: " + path);
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  bool weighted = !cols.empty() && cols.back() == "w";
  const int d = static_cast<int>(cols.size()) - (weighted ? 1 : 0);
  if (d < 1) throw std::runtime_error("cloud csv header malformed: " + path);
  ParticleCloud c;
  c.d = d;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    int k = 0;
    while (std::getline(ss, tok, ',')) {
      double v = 0;
      try {
        v = std::stod(tok);
      } catch (const std::exception&) {
        throw std::runtime_error("cloud csv parse error at data row " +
                                 std::to_string(row));
      }
      if (k < d)
        c.xs.push_back(v);
      else
        c.weights.push_back(v);
      ++k;
    }
    if (k != d + (weighted ? 1 : 0))
      throw std::runtime_error("cloud csv column count mismatch at data row " +
                               std::to_string(row));
    ++row;
  }
  c.validate();
  return c;
}

namespace {

struct WeightedValue {
  double x, w;
};

std::vector<WeightedValue> sorted_1d(const ParticleCloud& c) {
  const int n = c.size();
  std::vector<WeightedValue> v(n);
  for (int i = 0; i < n; ++i) v[i] = {c.at(i)[0], c.weight(i)};
  std::sort(v.begin(), v.end(),
            [](const WeightedValue& a, const WeightedValue& b) { return a.x < b.x; });
  return v;
}

}  // namespace

double wasserstein2_sorted1d(const double* a, int na, const double* b, int nb) {
  if (na < 1 || nb < 1)
    throw std::invalid_argument("wasserstein2_sorted1d: empty sample");
  const double wa = 1.0 / na, wb = 1.0 / nb;
  int ia = 0, ib = 0;
  double ra = wa, rb = wb;
  double total = 0.0;
  while (ia < na && ib < nb) {
    const double m = std::min(ra, rb);
    const double diff = a[ia] - b[ib];
    total += m * diff * diff;
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      ++ia;
      ra = wa;
    }
    if (rb <= 1e-15) {
      ++ib;
      rb = wb;
    }
  }
  return std::sqrt(std::max(0.0, total));
}

double wasserstein2_exact1d(const ParticleCloud& a, const ParticleCloud& b) {
  if (a.d != 1 || b.d != 1)
    throw std::invalid_argument("wasserstein2_exact1d: requires d = 1");
  auto va = sorted_1d(a);
  auto vb = sorted_1d(b);
  std::size_t ia = 0, ib = 0;
  double ra = va[0].w, rb = vb[0].w;
  double total = 0.0;
  // Quantile coupling: consume mass from both sorted supports in step.
  while (true) {
    const double m = std::min(ra, rb);
    const double diff = va[ia].x - vb[ib].x;
    total += m * diff * diff;
    ra -= m;
    rb -= m;
    const bool adv_a = ra <= 1e-15;
    const bool adv_b = rb <= 1e-15;
    if (adv_a) {
      if (++ia == va.size()) break;
      ra = va[ia].w;
    }
    if (adv_b) {
      if (++ib == vb.size()) break;
      rb = vb[ib].w;
    }
    if (!adv_a && !adv_b) break;  // numerical stalemate; masses were equal
  }
  return std::sqrt(std::max(0.0, total));
}

double wasserstein2_assignment(const ParticleCloud& a, const ParticleCloud& b) {
  const int n = a.size();
  if (b.size() != n)
    throw std::invalid_argument("wasserstein2_assignment: clouds must have equal size");
  if (!a.uniform() || !b.uniform())
    throw std::invalid_argument("wasserstein2_assignment: requires uniform weights");
  if (a.d != b.d)
    throw std::invalid_argument("wasserstein2_assignment: dimension mismatch");
  if (n > 512)
    throw std::invalid_argument("wasserstein2_assignment: N > 512; use sliced_wasserstein2");

  // Squared-distance cost matrix.
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < a.d; ++k) {
        const double diff = a.at(i)[k] - b.at(j)[k];
        s += diff * diff;
      }
      cost[static_cast<std::size_t>(i) * n + j] = s;
    }

  // Shortest augmenting path with potentials (rows added one at a time).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0);    // column -> row (1-based rows)
  std::vector<int> way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur =
            cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j)
    total += cost[static_cast<std::size_t>(match[j] - 1) * n + (j - 1)];
  return std::sqrt(std::max(0.0, total / n));
}

double wasserstein2(const ParticleCloud& a, const ParticleCloud& b) {
  if (a.d != b.d) throw std::invalid_argument("wasserstein2: dimension mismatch");
  if (a.d == 1) return wasserstein2_exact1d(a, b);
  return wasserstein2_assignment(a, b);
}

double sliced_wasserstein2(const ParticleCloud& a, const ParticleCloud& b,
                           int n_projections, std::uint64_t seed) {
  if (a.d != b.d) throw std::invalid_argument("sliced_wasserstein2: dimension mismatch");
  if (n_projections < 1)
    throw std::invalid_argument("sliced_wasserstein2: n_projections < 1");
  double acc = 0.0;
  for (int p = 0; p < n_projections; ++p) {
    // Random unit direction from normalized Gaussian draws; in the
    // measure-zero event of a near-null vector, advance the step counter.
    std::vector<double> dir(a.d);
    double norm2 = 0.0;
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
      norm2 = 0.0;
      for (int k = 0; k < a.d; ++k) {
        dir[k] = rng::standard_normal(seed, rng::Role::Scatter, 0, p, attempt,
                                      static_cast<std::uint32_t>(k));
        norm2 += dir[k] * dir[k];
      }
      if (norm2 >= 1e-12) break;
    }
    const double inv = 1.0 / std::sqrt(norm2);

    ParticleCloud pa, pb;
    pa.d = pb.d = 1;
    pa.weights = a.weights;
    pb.weights = b.weights;
    pa.xs.resize(a.size());
    pb.xs.resize(b.size());
    for (int i = 0; i < a.size(); ++i) {
      double s = 0.0;
      for (int k = 0; k < a.d; ++k) s += dir[k] * a.at(i)[k];
      pa.xs[i] = s * inv;
    }
    for (int i = 0; i < b.size(); ++i) {
      double s = 0.0;
      for (int k = 0; k < b.d; ++k) s += dir[k] * b.at(i)[k];
      pb.xs[i] = s * inv;
    }
    const double w = wasserstein2_exact1d(pa, pb);
    acc += w * w;
  }
  return std::sqrt(acc / n_projections);
}

double fournier_guillin_rate(std::int64_t n, int d) {
  if (n < 1) throw std::invalid_argument("fournier_guillin_rate: N < 1");
  if (d < 1) throw std::invalid_argument("fournier_guillin_rate: d < 1");
  const double nn = static_cast<double>(n);
  if (d < 4) return 1.0 / std::sqrt(nn);
  if (d == 4) return std::log1p(nn) / std::sqrt(nn);
  return std::pow(nn, -2.0 / d);
}

void write_rate_table_csv(const RateTable& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "# model: " << t.model << "\n";
  out << "# statistic: " << t.statistic << "\n";
  out << "# seed: " << t.seed << "\n";
  out << "# replications: " << t.replications << "\n";
  char buf[96];
  for (const RateRow& r : t.rows) {
    if (!r.flagged) continue;
    std::snprintf(buf, sizeof buf, "%.17g", r.n);
    out << "# flag: N=" << buf << " reason=" << r.flag_reason << "\n";
  }
  out << "N,error,stderr\n";
  for (const RateRow& r : t.rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g", r.n, r.error, r.stderr_);
    out << buf << "\n";
  }
}

RateTable read_rate_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  RateTable t;
  std::vector<std::pair<double, std::string>> flags;
  std::string line;
  bool header_seen = false;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto grab = [&](const std::string& key) -> std::string {
        const std::string tag = "# " + key + ": ";
        if (line.rfind(tag, 0) == 0) return line.substr(tag.size());
        return {};
      };
      if (auto s = grab("model"); !s.empty()) t.model = s;
      if (auto s = grab("statistic"); !s.empty()) t.statistic = s;
      if (auto s = grab("seed"); !s.empty()) t.seed = std::stoull(s);
      if (auto s = grab("replications"); !s.empty()) t.replications = std::stoll(s);
      if (auto s = grab("flag"); !s.empty()) {
        const auto npos = s.find("N=");
        const auto rpos = s.find(" reason=");
        if (npos != std::string::npos && rpos != std::string::npos)
          flags.emplace_back(std::stod(s.substr(npos + 2, rpos - npos - 2)),
                             s.substr(rpos + 8));
      }
      continue;
    }
    if (!header_seen) {
      if (line != "N,error,stderr")
        throw std::runtime_error("rate table header mismatch in " + path);
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string tok;
    RateRow r;
    int k = 0;
    while (std::getline(ss, tok, ',')) {
      const double v = std::stod(tok);
      if (k == 0) r.n = v;
      else if (k == 1) r.error = v;
      else if (k == 2) r.stderr_ = v;
      ++k;
    }
    if (k != 3)
      throw std::runtime_error("rate table row " + std::to_string(row) +
                               " malformed in " + path);
    t.rows.push_back(r);
    ++row;
  }
  for (auto& [n, reason] : flags)
    for (RateRow& r : t.rows)
      if (r.n == n) {
        r.flagged = true;
        r.flag_reason = reason;
      }
  return t;
}

}  // namespace mvlab
