#include "semiq/harness.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "semiq/errors.h"

namespace semiq {

std::vector<std::int64_t> geometric_grid(std::int64_t total, int per_decade) {
  if (total < 1) throw std::invalid_argument("geometric_grid: total must be >= 1");
  if (per_decade < 1) throw std::invalid_argument("geometric_grid: per_decade must be >= 1");
  std::vector<std::int64_t> grid;
  for (int k = 0;; ++k) {
    const auto t = static_cast<std::int64_t>(std::llround(std::pow(10.0, static_cast<double>(k) / per_decade)));
    if (t >= total) break;
    if (grid.empty() || t > grid.back()) grid.push_back(t);
  }
  grid.push_back(total);
  return grid;
}

RateFit fit_power_law(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("fit_power_law: x and y differ in length");
  if (x.size() < 6) {
    throw InvalidWindow("fit window holds " + std::to_string(x.size()) + " points, need at least 6");
  }
  RateFit fit;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw InvalidWindow("fit window contains a non-positive value");
    }
    fit.points.emplace_back(std::log(x[i]), std::log(y[i]));
    mx += fit.points.back().first;
    my += fit.points.back().second;
  }
  const double n = static_cast<double>(x.size());
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& [lx, ly] : fit.points) {
    sxx += (lx - mx) * (lx - mx);
    sxy += (lx - mx) * (ly - my);
    syy += (ly - my) * (ly - my);
  }
  if (!(sxx > 0.0)) throw InvalidWindow("fit window spans a single abscissa");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = syy > 0.0 ? std::clamp(sxy * sxy / (sxx * syy), 0.0, 1.0) : 1.0;
  return fit;
}

RateFit fit_rate(const AggregateTrace& trace, ErrorKind which, std::int64_t t_min, std::int64_t t_max) {
  if (t_min > t_max) throw InvalidWindow("fit window has t_min > t_max");
  std::vector<double> x, y;
  for (const AggregatePoint& p : trace.points) {
    if (p.t < t_min || p.t > t_max) continue;
    x.push_back(static_cast<double>(p.t));
    y.push_back(which == ErrorKind::Raw ? p.mean_raw : p.mean_pr);
  }
  RateFit fit = fit_power_law(x, y);
  fit.t_min = t_min;
  fit.t_max = t_max;
  return fit;
}

nlohmann::json to_json(const RateFit& fit) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& [lx, ly] : fit.points) points.push_back({lx, ly});
  return {{"slope", fit.slope},
          {"intercept", fit.intercept},
          {"r_squared", fit.r_squared},
          {"window", {fit.t_min, fit.t_max}},
          {"points", points}};
}

RunSetup prepare(const ExperimentSpec& spec) {
  spec.variant.validate();
  RunSetup setup;
  setup.fleet = derive_fleet(spec.base, spec.n_agents, spec.eps_p, spec.eps_r, spec.fleet_seed);
  setup.variant = spec.variant;
  setup.schedule = spec.schedule;
  setup.norm_kind = spec.variant.natural_seminorm();
  setup.q0 = Vector::Zero(spec.base.dim());
  setup.total_iters = spec.total_iters;
  setup.checkpoints = geometric_grid(spec.total_iters, spec.checkpoints_per_decade);
  setup.behavior = spec.behavior;
  setup.master_seed = spec.master_seed;
  SolveOptions options;
  options.tol = spec.oracle_tol;
  setup.oracle = solve_fixed_point(setup.fleet, spec.variant, SemiNorm(setup.norm_kind, spec.base.dim()), options);
  return setup;
}

double fitted_exponent(std::span<const double> n, std::span<const double> error) {
  if (n.size() != error.size() || n.size() < 2) {
    throw std::invalid_argument("fitted_exponent: need at least two matching points");
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!(n[i] > 0.0) || !(error[i] > 0.0)) throw std::invalid_argument("fitted_exponent: values must be positive");
    mx += std::log(n[i]);
    my += std::log(error[i]);
  }
  mx /= static_cast<double>(n.size());
  my /= static_cast<double>(n.size());
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    sxx += (std::log(n[i]) - mx) * (std::log(n[i]) - mx);
    sxy += (std::log(n[i]) - mx) * (std::log(error[i]) - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("fitted_exponent: all N equal");
  return sxy / sxx;
}

SpeedupResult speedup_sweep(const ExperimentSpec& base, std::span<const int> n_values, int threads) {
  if (n_values.empty()) throw std::invalid_argument("speedup_sweep: no N values");
  SpeedupResult out;
  std::vector<double> ns, errors;
  for (int n : n_values) {
    ExperimentSpec spec = base;
    spec.n_agents = n;
    const AggregateTrace agg = run_replicated(prepare(spec), spec.replicas, threads);
    const AggregatePoint& last = agg.points.back();
    out.rows.push_back({n, last.mean_pr, last.se_pr});
    ns.push_back(n);
    errors.push_back(last.mean_pr);
  }
  for (std::size_t i = 1; i < out.rows.size(); ++i) {
    if (out.rows[i].n_agents > out.rows[i - 1].n_agents && out.rows[i].mean_pr > out.rows[i - 1].mean_pr) {
      out.monotone = false;
    }
  }
  out.exponent = out.rows.size() >= 2 ? fitted_exponent(ns, errors) : 0.0;
  return out;
}

std::vector<GapRow> heterogeneity_gap(const Mdp& base, const Variant& variant, int n_agents,
                                      std::span<const std::pair<double, double>> grid,
                                      std::uint64_t fleet_seed) {
  const SemiNorm norm(variant.natural_seminorm(), base.dim());
  std::vector<GapRow> rows;
  for (const auto& [eps_p, eps_r] : grid) {
    const Fleet fleet = derive_fleet(base, n_agents, eps_p, eps_r, fleet_seed);
    const Vector q_star = solve_fixed_point(fleet, variant, norm).q_star;
    double gap = 0.0;
    for (const Mdp& agent : fleet) {
      const Vector q_i = solve_fixed_point(std::span<const Mdp>(&agent, 1), variant, norm).q_star;
      gap = std::max(gap, norm(q_star - q_i));
    }
    rows.push_back({eps_p, eps_r, gap});
  }
  return rows;
}

std::vector<ScheduleRow> schedule_comparison(const ExperimentSpec& spec, std::span<const double> c_grid,
                                             int threads) {
  std::vector<ScheduleRow> rows;
  {
    const AggregateTrace agg = run_replicated(prepare(spec), spec.replicas, threads);
    rows.push_back({spec.schedule.describe(), true, agg.points.back().mean_pr, agg.points.back().se_pr});
  }
  for (double c : c_grid) {
    ExperimentSpec classic = spec;
    classic.schedule = StepSchedule::classic(c, std::max(c, 1.0));
    const AggregateTrace agg = run_replicated(prepare(classic), classic.replicas, threads);
    rows.push_back({classic.schedule.describe(), false, agg.points.back().mean_raw, agg.points.back().se_raw});
  }
  return rows;
}

}  // namespace semiq
