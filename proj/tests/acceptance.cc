// Acceptance suite: one PASS/FAIL line per criterion. Run with --criterion N
// for a single one (that is how ctest registers them) or with no flag for all.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "oracles.h"
#include "semiq/cli.h"
#include "semiq/errors.h"
#include "semiq/harness.h"
#include "semiq/parallel.h"
#include "semiq/verify.h"

namespace semiq {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int threads() { return default_thread_count(); }

// ---------------------------------------------------------------- 1
Outcome semi_norm_algebra() {
  Outcome o;
  const int n = 100000;
  long failures = 0;
  for (SemiNormKind kind : {SemiNormKind::Span, SemiNormKind::Sup}) {
    const SemiNorm p(kind, 8);
    std::mt19937_64 gen(kind == SemiNormKind::Span ? 1 : 2);
    std::uniform_real_distribution<double> lam(-100.0, 100.0);
    for (int k = 0; k < n; ++k) {
      const Vector x = testing::random_vector(gen, 8, -50, 50);
      const Vector y = testing::random_vector(gen, 8, -50, 50);
      const double l = lam(gen);
      const double scale = 1.0 + p.induced_norm(x) + p.induced_norm(y);
      bool ok = p(x + y) <= p(x) + p(y) + 1e-12 * scale;
      ok = ok && std::abs(p(l * x) - std::abs(l) * p(x)) <= 1e-12 * (1.0 + std::abs(l) * p(x));
      ok = ok && p(x) <= p.induced_norm(x) * (1.0 + 1e-12);
      ok = ok && std::abs(p(x) - p.induced_norm(x - p.minimizing_shift(x))) <= 1e-12 * scale;
      const Vector lo = x.cwiseAbs();
      const Vector hi = lo + testing::random_vector(gen, 8, 0, 10);
      ok = ok && p.induced_norm(lo) <= p.induced_norm(hi);
      if (!ok) ++failures;
    }
  }
  o.pass = failures == 0;
  o.detail = std::to_string(failures) + " violations over 2 x 10^5 vectors";
  return o;
}

// ---------------------------------------------------------------- 2
Outcome contraction_oracles() {
  Outcome o;
  double worst_disc = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Mdp m = generate_mdp(6, 2, 0.2, 1.0, seed);
    const double gamma = 0.9;
    const double b = estimate_contraction([&](const Vector& q) { return bellman_discounted(m, gamma, q); },
                                          SemiNorm(SemiNormKind::Sup, m.dim()), 10000, 10.0, seed);
    worst_disc = std::max(worst_disc, b - gamma);
  }
  int ok_seeds = 0, regenerated = 0;
  double worst_beta = 0.0;
  bool persistent = false;
  for (std::uint64_t slot = 0; slot < 20; ++slot) {
    bool found = false;
    for (std::uint64_t attempt = 0; attempt < 5 && !found; ++attempt) {
      const std::uint64_t seed = 1000 * attempt + slot + 1;
      const Mdp m = generate_mdp(4, 2, 0.2, 1.0, seed);
      const double beta =
          estimate_contraction([&](const Vector& q) { return bellman_jstep_differential(m, 4, q); },
                               SemiNorm(SemiNormKind::Span, m.dim()), 10000, 10.0, seed);
      if (beta < 1.0) {
        found = true;
        worst_beta = std::max(worst_beta, beta);
      } else {
        ++regenerated;
      }
    }
    if (found) ++ok_seeds; else persistent = true;
  }
  o.pass = worst_disc <= 1e-9 && ok_seeds >= 20 && !persistent;
  o.detail = "discounted max(beta - gamma) " + fmt("%.2e", worst_disc) + "; J-step beta < 1 on " +
             std::to_string(ok_seeds) + "/20 seeds, worst " + fmt("%.4f", worst_beta) + ", " +
             std::to_string(regenerated) + " regenerated";
  return o;
}

// ---------------------------------------------------------------- 3
Outcome fixed_point_oracles() {
  Outcome o;
  double worst_residual = 0.0, worst_gap = 0.0;
  int cases = 0;
  const std::vector<std::pair<int, int>> shapes{{3, 2}, {4, 2}, {5, 2}, {8, 2}, {3, 3}, {4, 4}};
  for (const auto& [S, A] : shapes) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const Mdp m = generate_mdp(S, A, 0.2, 1.0, seed);
      for (const Variant& v : {Variant::discounted(0.9), Variant::jstep(S)}) {
        const SemiNorm p(v.natural_seminorm(), m.dim());
        const FixedPointOracle f = solve_fixed_point(Fleet{m}, v, p);
        worst_residual = std::max(worst_residual, p(bellman(m, v, f.q_star) - f.q_star - f.e_star));
        if (v.is_avg()) {
          worst_gap = std::max(worst_gap, p(f.q_star - testing::average_reward_by_enumeration(m).q));
          ++cases;
        }
      }
    }
  }
  o.pass = worst_residual <= 1e-8 && worst_gap <= 1e-6;
  o.detail = "max residual " + fmt("%.2e", worst_residual) + ", max span gap to enumeration " +
             fmt("%.2e", worst_gap) + " over " + std::to_string(cases) + " average-reward instances";
  return o;
}

// ---------------------------------------------------------------- 4
Outcome decomposition_identities() {
  Outcome o;
  double step = 0.0, pr = 0.0;
  int runs = 0, regenerated = 0;
  std::string failure;
  for (int states : {2, 3, 4}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      for (const Variant& v : {Variant::jstep(states), Variant::discounted(0.7)}) {
        ExperimentSpec spec;
        spec.variant = v;
        spec.total_iters = 500;
        spec.master_seed = seed;
        spec.n_agents = states == 3 ? 2 : 1;
        // Instances whose J-step operator does not contract are regenerated.
        std::optional<RunSetup> setup;
        for (std::uint64_t attempt = 0; attempt < 5 && !setup; ++attempt) {
          spec.base = generate_mdp(states, 2, 0.2, 1.0, seed + 1000 * attempt);
          try {
            setup = prepare(spec);
          } catch (const NotAContraction&) {
            ++regenerated;
          }
        }
        if (!setup) {
          failure = "no contracting instance for " + std::to_string(states) + " states seed " + std::to_string(seed);
          continue;
        }
        try {
          const DecompositionTrace tr = trace_decomposition(*setup, 0, 25);
          step = std::max(step, tr.max_step_residual);
          pr = std::max(pr, tr.pr_residual);
        } catch (const IdentityViolation& e) {
          failure = e.what();
          step = std::max(step, e.max_residual());
        }
        ++runs;
      }
    }
  }
  o.pass = failure.empty() && step <= 1e-10 && pr <= 1e-8;
  o.detail = std::to_string(runs) + " runs, max step residual " + fmt("%.2e", step) + ", max PR residual " +
             fmt("%.2e", pr) + ", " + std::to_string(regenerated) + " regenerated" + (failure.empty() ? "" : "; " + failure);
  return o;
}

// ---------------------------------------------------------------- 5
Outcome assumption_suite() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "semiq_acceptance_5";
  fs::create_directories(dir);
  int passed = 0, total = 0;
  std::string failures;
  for (const bool avg : {true, false}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      json cfg = {{"variant", avg ? json{{"kind", "avg_jstep"}, {"j", 4}} : json{{"kind", "discounted"}, {"gamma", 0.7}}},
                  {"mdp", {{"num_states", 4}, {"num_actions", 2}, {"smoothing", 0.2}, {"seed", seed}}},
                  {"total_iters", 100000},
                  {"replicas", 16},
                  {"master_seed", seed},
                  {"output_dir", (dir / ((avg ? "avg_" : "disc_") + std::to_string(seed))).string()}};
      const fs::path path = dir / "config.json";
      std::ofstream(path) << cfg.dump();
      std::ostringstream out, err;
      const int code = cli::run_cli({"verify", "--config", path.string(), "--threads", std::to_string(threads())},
                                    out, err);
      ++total;
      if (code == 0) {
        ++passed;
      } else {
        failures += std::string(" ") + (avg ? "avg" : "disc") + "#" + std::to_string(seed);
      }
    }
  }
  fs::remove_all(dir);
  o.pass = passed == total;
  o.detail = std::to_string(passed) + "/" + std::to_string(total) + " instances pass A1(a-d), A2, A4" +
             (failures.empty() ? "" : "; failed:" + failures);
  return o;
}

// ---------------------------------------------------------------- 6
Outcome xi_bound() {
  Outcome o;
  int runs = 0;
  std::int64_t inside = 0;
  double worst = 0.0;
  std::string failure;
  for (const Variant& v : {Variant::jstep(3), Variant::discounted(0.7)}) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      ExperimentSpec spec;
      spec.base = generate_mdp(3, 2, 0.2, 1.0, seed);
      spec.variant = v;
      spec.total_iters = 2000;
      spec.master_seed = seed;
      const RunSetup setup = prepare(spec);
      const SemiNorm norm(setup.norm_kind, 6);
      const LinearDecomposition dec(setup.fleet.front(), v);
      LedgerInputs in;
      in.beta_hat = estimate_contraction(mean_operator(setup.fleet, v, setup.behavior), norm, 2000, 10.0, seed);
      in.c_a = dec.c_a();
      in.c_b = dec.c_b();
      in.c_star_hat = estimate_c_star(3, 2, setup.oracle, norm, 64, seed).value;
      if (!v.is_avg()) {
        const MixingEstimate mix = estimate_mixing(setup.fleet.front(), setup.behavior);
        in.rho_hat = mix.rho_hat;
        in.c_e_hat = mix.c_e_hat;
      }
      in.p_q_star = norm(setup.oracle.q_star);
      const ConstantsLedger ledger = build_ledger(in);
      try {
        const DecompositionTrace tr = trace_decomposition(setup, 0, ledger.t_star);
        const XiBoundResult r = check_xi_bound(tr, ledger, norm);
        worst = std::max(worst, r.max_ratio / r.factor);
        inside += r.inside_steps;
      } catch (const BoundViolation& e) {
        failure = v.name() + " seed " + std::to_string(seed) + ": " + e.what();
      }
      ++runs;
    }
  }
  o.pass = failure.empty();
  o.detail = std::to_string(runs) + " traced runs, max p(xi)/p(err)^2 at " + fmt("%.3f", worst) +
             " of the bound, " + std::to_string(inside) + " steps inside the C* ball all with xi = 0" +
             (failure.empty() ? "" : "; " + failure);
  return o;
}

// ---------------------------------------------------------------- 7
struct RateRun {
  double pr_slope, raw_slope, final_pr, final_raw;
  json ledger;
};

RateRun rate_experiment(const ExperimentSpec& spec) {
  const RunSetup setup = prepare(spec);
  const AggregateTrace agg = run_replicated(setup, spec.replicas, threads());
  RateRun r;
  r.pr_slope = fit_rate(agg, ErrorKind::PR, 1000, 100000).slope;
  r.raw_slope = fit_rate(agg, ErrorKind::Raw, 1000, 100000).slope;
  r.final_pr = agg.points.back().mean_pr;
  r.final_raw = agg.points.back().mean_raw;

  // Bound constants are reported only.
  const SemiNorm norm(setup.norm_kind, spec.base.dim());
  const LinearDecomposition dec(setup.fleet.front(), spec.variant);
  LedgerInputs in;
  in.beta_hat = estimate_contraction(mean_operator(setup.fleet, spec.variant, setup.behavior), norm, 2000, 10.0, 1);
  in.c_a = dec.c_a();
  in.c_b = dec.c_b();
  in.c_star_hat = estimate_c_star(spec.base.num_states, spec.base.num_actions, setup.oracle, norm, 64, 1).value;
  if (!spec.variant.is_avg()) {
    const MixingEstimate mix = estimate_mixing(setup.fleet.front(), setup.behavior);
    in.rho_hat = mix.rho_hat;
    in.c_e_hat = mix.c_e_hat;
  }
  in.p_q_star = norm(setup.oracle.q_star);
  in.p_delta0 = norm(setup.q0 - setup.oracle.q_star - setup.oracle.e_star);
  ConstantsLedger ledger = build_ledger(in);
  in.c_q_hat = check_a4(agg, ledger).c_q_hat;
  r.ledger = to_json(build_ledger(in))["derived"];
  return r;
}

Outcome rate_reproduction() {
  Outcome o;
  std::string detail;
  auto judge = [&](const std::string& name, const RateRun& r) {
    const bool pr_ok = r.pr_slope >= -0.65 && r.pr_slope <= -0.40;
    const bool raw_ok = r.raw_slope >= -0.50 && r.raw_slope <= -0.20;
    const bool order_ok = r.final_pr < r.final_raw;
    o.pass = o.pass && pr_ok && raw_ok && order_ok;
    detail += name + ": PR slope " + fmt("%.3f", r.pr_slope) + (pr_ok ? "" : " (out of band)") + ", raw slope " +
              fmt("%.3f", r.raw_slope) + (raw_ok ? "" : " (out of band)") + ", PR " + fmt("%.4g", r.final_pr) +
              (order_ok ? " < " : " >= ") + "raw " + fmt("%.4g", r.final_raw) + ", reported C1 " +
              r.ledger["C1"].dump() + " C2 " + r.ledger["C2"].dump() + "; ";
  };

  ExperimentSpec disc;
  disc.base = generate_mdp(6, 2, 0.2, 1.0, 1);
  disc.variant = Variant::discounted(0.6);
  disc.total_iters = 100000;
  disc.replicas = 32;
  disc.master_seed = 1;
  judge("discounted", rate_experiment(disc));

  ExperimentSpec avg = disc;
  avg.base = generate_mdp(4, 2, 0.2, 1.0, 1);
  avg.variant = Variant::jstep(4);
  judge("average-reward", rate_experiment(avg));
  detail.resize(detail.size() - 2);
  o.detail = detail;
  return o;
}

// ---------------------------------------------------------------- 8
Outcome linear_speedup() {
  Outcome o;
  ExperimentSpec spec;
  spec.base = generate_mdp(4, 2, 0.2, 1.0, 1);
  spec.variant = Variant::jstep(4);
  spec.total_iters = 100000;
  spec.replicas = 32;
  spec.master_seed = 1;
  const std::vector<int> ns{1, 2, 4, 8};
  const SpeedupResult r = speedup_sweep(spec, ns, threads());
  const double ratio8 = r.rows[3].mean_pr / r.rows[0].mean_pr;
  const double ratio4 = r.rows[2].mean_pr / r.rows[0].mean_pr;
  o.pass = r.monotone && ratio8 <= 0.55;
  o.detail = "average-reward J=4, PR error";
  for (const SpeedupRow& row : r.rows) o.detail += " N=" + std::to_string(row.n_agents) + ":" + fmt("%.4g", row.mean_pr);
  o.detail += std::string(r.monotone ? ", monotone" : ", NOT monotone") + ", e(8)/e(1) " + fmt("%.3f", ratio8) +
              ", e(4)/e(1) " + fmt("%.3f", ratio4) + ", exponent " + fmt("%.3f", r.exponent);
  return o;
}

// ---------------------------------------------------------------- 9
Outcome heterogeneity_gap_trend() {
  Outcome o;
  const std::vector<double> eps{0.2, 0.1, 0.05, 0.025, 0.0125};
  std::vector<std::pair<double, double>> grid{{0.0, 0.0}};
  for (double e : eps) grid.emplace_back(e, e);
  int series = 0, monotone = 0;
  double worst_shrink = 0.0;
  bool zero_ok = true;
  for (const Variant& v : {Variant::jstep(4), Variant::discounted(0.8)}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto rows = heterogeneity_gap(generate_mdp(4, 2, 0.2, 1.0, seed), v, 4, grid, seed);
      zero_ok = zero_ok && rows[0].gap == 0.0;
      bool dec = true;
      for (std::size_t i = 2; i < rows.size(); ++i) dec = dec && rows[i].gap < rows[i - 1].gap;
      monotone += dec ? 1 : 0;
      worst_shrink = std::max(worst_shrink, rows.back().gap / rows[1].gap);
      ++series;
    }
  }
  // Over a 16x range of eps the gap should fall by well over 4x.
  o.pass = zero_ok && monotone == series && worst_shrink <= 0.25;
  o.detail = std::string("gap at eps=0 ") + (zero_ok ? "exactly 0" : "NONZERO") + ", strictly decreasing on " +
             std::to_string(monotone) + "/" + std::to_string(series) +
             " series, worst gap(0.0125)/gap(0.2) " + fmt("%.3f", worst_shrink);
  return o;
}

// ---------------------------------------------------------------- 10
Outcome determinism() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "semiq_acceptance_10";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  int compared = 0, differing = 0;
  for (const bool avg : {true, false}) {
    const json cfg = {
        {"variant", avg ? json{{"kind", "avg_jstep"}, {"j", 4}} : json{{"kind", "discounted"}, {"gamma", 0.7}}},
        {"mdp", {{"num_states", 4}, {"num_actions", 2}, {"seed", 2}}},
        {"n_agents", 3},
        {"eps_p", 0.05},
        {"eps_r", 0.05},
        {"total_iters", 20000},
        {"replicas", 12},
        {"master_seed", 77}};
    const fs::path path = dir / "config.json";
    std::ofstream(path) << cfg.dump();
    std::vector<fs::path> outs;
    for (const char* t : {"1", "8", "8"}) {
      const fs::path out = dir / ((avg ? "avg_t" : "disc_t") + std::string(t) + "_" + std::to_string(outs.size()));
      std::ostringstream so, se;
      if (cli::run_cli({"run", "--config", path.string(), "--threads", t, "--out", out.string()}, so, se) != 0) {
        o.pass = false;
        o.detail = "run failed: " + se.str();
        return o;
      }
      outs.push_back(out);
    }
    for (const auto& entry : fs::directory_iterator(outs[0])) {
      if (entry.path().extension() != ".csv") continue;
      const std::string ref = slurp(entry.path());
      for (std::size_t i = 1; i < outs.size(); ++i) {
        ++compared;
        if (slurp(outs[i] / entry.path().filename()) != ref) ++differing;
      }
    }
  }
  fs::remove_all(dir);
  o.pass = differing == 0 && compared > 0;
  o.detail = std::to_string(compared) + " CSV comparisons across thread counts 1/8 and reruns, " +
             std::to_string(differing) + " differ";
  return o;
}

struct Criterion {
  const char* name;
  double time_limit;  // seconds; <= 0 when the criterion states none
  std::function<Outcome()> fn;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"semi-norm algebra", 5.0, semi_norm_algebra},
      {"contraction oracles", 30.0, contraction_oracles},
      {"fixed-point oracles", 60.0, fixed_point_oracles},
      {"decomposition identities", 60.0, decomposition_identities},
      {"assumption suite", 300.0, assumption_suite},
      {"nonlinear residual bound", 120.0, xi_bound},
      {"rate reproduction", 0.0, rate_reproduction},
      {"linear speedup", 0.0, linear_speedup},
      {"heterogeneity gap", 120.0, heterogeneity_gap_trend},
      {"determinism", 0.0, determinism},
  };
  return all;
}

bool run_one(int index) {
  const Criterion& c = criteria()[static_cast<std::size_t>(index - 1)];
  const auto start = Clock::now();
  Outcome o;
  try {
    o = c.fn();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double elapsed = seconds_since(start);
  if (c.time_limit > 0.0 && elapsed > c.time_limit) {
    o.pass = false;
    o.detail += "; over time limit " + fmt("%.0f s", c.time_limit);
  }
  std::cout << "criterion " << index << " " << (o.pass ? "PASS" : "FAIL") << " " << c.name << " (" << fmt("%.1f s", elapsed)
            << "): " << o.detail << std::endl;
  return o.pass;
}

}  // namespace
}  // namespace semiq

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  bool all_pass = true;
  for (int i = 1; i <= 10; ++i) {
    if (only != 0 && i != only) continue;
    all_pass = semiq::run_one(i) && all_pass;
  }
  return all_pass ? 0 : 1;
}
