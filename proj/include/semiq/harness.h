#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "semiq/engine.h"
#include "semiq/mdp.h"

namespace semiq {

// Roughly `per_decade` log-spaced integer times in [1, total], always
// including total. Strictly increasing.
std::vector<std::int64_t> geometric_grid(std::int64_t total, int per_decade = 20);

enum class ErrorKind { Raw, PR };

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::int64_t t_min = 0;
  std::int64_t t_max = 0;
  std::vector<std::pair<double, double>> points;  // (log t, log mean error)
};

// OLS of log(y) on log(x). Needs >= 6 points, all positive, else InvalidWindow.
RateFit fit_power_law(std::span<const double> x, std::span<const double> y);

// Fits mean error against t over checkpoints with t_min <= t <= t_max.
RateFit fit_rate(const AggregateTrace& trace, ErrorKind which, std::int64_t t_min, std::int64_t t_max);

nlohmann::json to_json(const RateFit& fit);

// Everything needed to build a RunSetup for a fleet derived from `base`.
struct ExperimentSpec {
  Mdp base;
  Variant variant;
  StepSchedule schedule = StepSchedule::polynomial(0.7);
  int n_agents = 1;
  double eps_p = 0.0;
  double eps_r = 0.0;
  std::uint64_t fleet_seed = 0;
  std::int64_t total_iters = 100000;
  int replicas = 32;
  std::uint64_t master_seed = 0;
  int checkpoints_per_decade = 20;
  BehaviorPolicy behavior;
  double oracle_tol = 1e-12;
};

// Derives the fleet, solves the oracle under the variant's natural
// semi-norm and starts from Q_0 = 0.
RunSetup prepare(const ExperimentSpec& spec);

struct SpeedupRow {
  int n_agents;
  double mean_pr;
  double se_pr;
};

struct SpeedupResult {
  std::vector<SpeedupRow> rows;
  double exponent = 0.0;  // fitted d log(error) / d log(N)
  bool monotone = true;   // mean PR error nonincreasing in N
};

double fitted_exponent(std::span<const double> n, std::span<const double> error);

SpeedupResult speedup_sweep(const ExperimentSpec& base, std::span<const int> n_values, int threads = 1);

struct GapRow {
  double eps_p;
  double eps_r;
  double gap;  // max_i p(Q* - Q*_i)
};

// Oracle-only; no sampling.
std::vector<GapRow> heterogeneity_gap(const Mdp& base, const Variant& variant, int n_agents,
                                      std::span<const std::pair<double, double>> grid,
                                      std::uint64_t fleet_seed);

struct ScheduleRow {
  std::string schedule;
  bool averaged;  // PR iterate reported instead of the raw one
  double final_error;
  double final_se;
};

// The parameter-free schedule with averaging, then raw iterates under
// c / (t + max(c, 1)) for each c.
std::vector<ScheduleRow> schedule_comparison(const ExperimentSpec& spec, std::span<const double> c_grid,
                                             int threads = 1);

}  // namespace semiq
