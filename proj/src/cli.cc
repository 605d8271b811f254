#include "semiq/cli.h"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "semiq/config.h"
#include "semiq/errors.h"
#include "semiq/harness.h"
#include "semiq/mdp_io.h"
#include "semiq/parallel.h"
#include "semiq/rng.h"
#include "semiq/verify.h"

namespace semiq::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kPrBand[2] = {-0.65, -0.40};
constexpr double kRawBand[2] = {-0.50, -0.20};

struct Common {
  std::string config;
  std::string out_dir;
  int threads = default_thread_count();
  std::uint64_t seed = 0;
  bool seed_set = false;
};

std::string write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << bytes;
  if (!f) throw std::runtime_error("write failed for " + path.string());
  return git_blob_id(bytes);
}

RunConfig load_with_overrides(const Common& c) {
  RunConfig cfg = load_config(c.config);
  if (c.seed_set) cfg.master_seed = c.seed;
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (c.threads < 1) throw ConfigError("--threads", "must be >= 1");
  return cfg;
}

json oracle_json(const FixedPointOracle& o) {
  return {{"gain", o.gain},
          {"beta_hat", o.beta_hat},
          {"residual_seminorm", o.residual_seminorm},
          {"iterations", o.iterations}};
}

int cmd_run(const Common& c, std::ostream& out) {
  const RunConfig cfg = load_with_overrides(c);
  const RunSetup setup = prepare(to_experiment(cfg));
  const AggregateTrace agg = run_replicated(setup, cfg.replicas, c.threads);

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  json files = json::array();
  for (std::size_t r = 0; r < agg.replicas.size(); ++r) {
    char name[32];
    std::snprintf(name, sizeof name, "replica_%03zu.csv", r);
    std::ostringstream csv;
    write_trace_csv(csv, agg.replicas[r]);
    files.push_back({{"name", name}, {"git_blob", write_file(dir / name, csv.str())}});
  }
  std::ostringstream csv;
  write_aggregate_csv(csv, agg);
  files.push_back({{"name", "aggregate.csv"}, {"git_blob", write_file(dir / "aggregate.csv", csv.str())}});

  const json manifest = {{"config", to_json(cfg)},
                         {"config_digest", agg.config_digest},
                         {"oracle", oracle_json(setup.oracle)},
                         {"files", files}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");

  const AggregatePoint& last = agg.points.back();
  out << "T=" << last.t << " mean_raw=" << format_real(last.mean_raw) << " mean_pr=" << format_real(last.mean_pr)
      << "\nwrote " << agg.replicas.size() << " replica traces, aggregate.csv and manifest.json to " << dir.string()
      << "\n";
  return kOk;
}

void add_check(json& checks, bool& ok, const CheckResult& r) {
  checks.push_back(to_json(r));
  if (!r.pass && !r.skipped) ok = false;
}

int cmd_verify(const Common& c, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_with_overrides(c);
  const ExperimentSpec spec = to_experiment(cfg);
  const RunSetup setup = prepare(spec);
  const Mdp& shape = setup.fleet.front();
  const SemiNorm norm(setup.norm_kind, shape.dim());
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  const fs::path report_path = dir / "verification.json";

  json report = {{"config", to_json(cfg)}, {"oracle", oracle_json(setup.oracle)}};
  json checks = json::array();
  bool ok = true;
  auto finish = [&]() {
    report["checks"] = checks;
    report["pass"] = ok;
    write_file(report_path, report.dump(2) + "\n");
    if (ok) {
      out << "verification passed; report at " << report_path.string() << "\n";
      return static_cast<int>(kOk);
    }
    err << "verification failed; report at " << report_path.string() << "\n";
    return static_cast<int>(kVerificationFailure);
  };

  CStarEstimate c_star{};
  try {
    c_star = estimate_c_star(shape.num_states, shape.num_actions, setup.oracle, norm, 64, cfg.master_seed);
    report["c_star"] = to_json(c_star);
  } catch (const DegenerateInstance& e) {
    CheckResult r{"C*", false, false, {}, json::object(), std::string("degenerate-instance: ") + e.what()};
    add_check(checks, ok, r);
    err << "degenerate-instance: " << e.what() << "\n";
    return finish();
  }

  const double beta_hat =
      estimate_contraction(mean_operator(setup.fleet, setup.variant, setup.behavior), norm, 2000, 10.0, cfg.master_seed);
  {
    CheckResult r;
    r.name = "contraction";
    r.pass = beta_hat < 1.0;
    r.measured = {{"beta_hat", beta_hat}};
    add_check(checks, ok, r);
  }

  std::vector<LinearDecomposition> decomps;
  for (std::size_t i = 0; i < setup.fleet.size(); ++i) {
    const bool repeat = std::any_of(setup.fleet.begin(), setup.fleet.begin() + static_cast<std::ptrdiff_t>(i),
                                    [&](const Mdp& m) { return m == setup.fleet[i]; });
    decomps.emplace_back(setup.fleet[i], setup.variant);
    if (repeat) continue;
    A1Options opts;
    opts.seed = stream_key({cfg.master_seed, i});
    try {
      for (CheckResult r : check_a1(decomps.back(), norm, setup.oracle, c_star.value, opts)) {
        r.name += " agent " + std::to_string(i);
        add_check(checks, ok, r);
      }
    } catch (const AssumptionViolation& e) {
      for (json item : json::parse(e.report())) {
        item["name"] = item["name"].get<std::string>() + " agent " + std::to_string(i);
        checks.push_back(item);
      }
      ok = false;
    }
  }

  MixingEstimate mixing = MixingEstimate::iid();
  {
    CheckResult r;
    r.name = "A2";
    if (setup.variant.is_avg()) {
      r.note = "generative sampling: i.i.d. across iterations";
    } else {
      try {
        for (const Mdp& m : setup.fleet) {
          const MixingEstimate e = estimate_mixing(m, setup.behavior);
          if (e.rho_hat >= mixing.rho_hat) mixing.stationary = e.stationary;
          mixing.rho_hat = std::max(mixing.rho_hat, e.rho_hat);
          mixing.c_e_hat = std::max(mixing.c_e_hat, e.c_e_hat);
          mixing.horizon = e.horizon;
          mixing.max_envelope_ratio = std::max(mixing.max_envelope_ratio, e.max_envelope_ratio);
        }
        r.pass = mixing.rho_hat < 1.0 && std::isfinite(mixing.c_e_hat) && mixing.max_envelope_ratio <= 1.0 + 1e-9;
      } catch (const InvalidInstance& e) {
        r.pass = false;
        r.note = e.what();
      }
    }
    r.measured = to_json(mixing);
    add_check(checks, ok, r);
    report["mixing"] = to_json(mixing);
  }
  if (!ok) return finish();

  LedgerInputs inputs;
  inputs.beta_hat = beta_hat;
  inputs.c_a = decomps.front().c_a();
  inputs.c_b = 0.0;
  for (const LinearDecomposition& d : decomps) inputs.c_b = std::max(inputs.c_b, d.c_b());
  inputs.c_star_hat = c_star.value;
  inputs.rho_hat = mixing.rho_hat;
  inputs.c_e_hat = mixing.c_e_hat;
  inputs.schedule = setup.schedule;
  inputs.n_agents = static_cast<int>(setup.fleet.size());
  inputs.p_q_star = norm(setup.oracle.q_star);
  inputs.p_delta0 = norm(setup.q0 - setup.oracle.q_star - setup.oracle.e_star);
  ConstantsLedger ledger = build_ledger(inputs);

  const AggregateTrace agg = run_replicated(setup, cfg.replicas, c.threads);
  {
    const A4Result a4 = check_a4(agg, ledger);
    CheckResult r;
    r.name = "A4";
    r.pass = a4.pass;
    r.note = a4.note;
    r.measured = {{"c_q_hat", finite_or_null(a4.c_q_hat)}, {"tail_slope", a4.tail_slope},
                  {"slope_tolerance", kA4SlopeTolerance}, {"points_after_t_star", a4.ratios.size()}};
    add_check(checks, ok, r);
    inputs.c_q_hat = a4.c_q_hat;
    ledger = build_ledger(inputs);
  }
  report["ledger"] = to_json(ledger);

  CheckResult decomposition;
  decomposition.name = "decomposition";
  CheckResult xi;
  xi.name = "xi_bound";
  if (shape.dim() > kMaxTraceDim) {
    decomposition.skipped = xi.skipped = true;
    decomposition.note = xi.note = "instance too large: |S||A| > 64";
  } else {
    RunSetup small = setup;
    small.total_iters = std::min<std::int64_t>(setup.total_iters, 2000);
    small.checkpoints = geometric_grid(small.total_iters, 10);
    try {
      const DecompositionTrace trace = trace_decomposition(small, 0, ledger.t_star);
      decomposition.measured = summary_json(trace);
      try {
        const XiBoundResult xr = check_xi_bound(trace, ledger, norm);
        xi.measured = {{"factor", xr.factor}, {"max_ratio", xr.max_ratio}, {"inside_steps", xr.inside_steps}};
      } catch (const BoundViolation& e) {
        xi.pass = false;
        xi.witnesses.push_back({{"k", e.witness_k()}, {"what", e.what()}});
      }
    } catch (const IdentityViolation& e) {
      decomposition.pass = false;
      decomposition.witnesses.push_back({{"max_residual", e.max_residual()}, {"what", e.what()}});
      xi.skipped = true;
      xi.note = "no trace";
    } catch (const InvalidInstance& e) {
      decomposition.skipped = xi.skipped = true;
      decomposition.note = xi.note = e.what();
    }
  }
  add_check(checks, ok, decomposition);
  add_check(checks, ok, xi);
  return finish();
}

int cmd_fit(const std::string& trace_path, const std::string& which, std::int64_t t_min, std::int64_t t_max,
            std::vector<double> band, const std::string& summary_path, std::ostream& out) {
  std::ifstream in(trace_path);
  if (!in) throw std::invalid_argument("cannot read " + trace_path);
  const AggregateTrace trace = read_aggregate_csv(in);
  const ErrorKind kind = which == "raw" ? ErrorKind::Raw : ErrorKind::PR;
  if (band.empty()) band = kind == ErrorKind::Raw ? std::vector<double>(kRawBand, kRawBand + 2)
                                                  : std::vector<double>(kPrBand, kPrBand + 2);
  const RateFit fit = fit_rate(trace, kind, t_min, t_max);
  const bool pass = fit.slope >= band[0] && fit.slope <= band[1];
  char line[256];
  std::snprintf(line, sizeof line, "slope %.3f (r^2 %.3f, %zu points, window [%lld, %lld]) band [%.2f, %.2f] %s\n",
                fit.slope, fit.r_squared, fit.points.size(), static_cast<long long>(t_min),
                static_cast<long long>(t_max), band[0], band[1], pass ? "PASS" : "FAIL");
  out << line;
  if (!summary_path.empty()) {
    json summary = to_json(fit);
    summary["which"] = which;
    summary["band"] = band;
    summary["pass"] = pass;
    write_file(summary_path, summary.dump(2) + "\n");
  }
  return pass ? kOk : kVerificationFailure;
}

std::vector<double> parse_list(const std::string& text, const std::string& flag) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError(flag, "not a number: \"" + item + "\"");
    values.push_back(v);
  }
  if (values.empty()) throw ConfigError(flag, "empty list");
  return values;
}

int cmd_sweep(const Common& c, const std::string& n_list, const std::string& c_list, const std::string& eps_list,
              std::ostream& out) {
  if (n_list.empty() && c_list.empty() && eps_list.empty()) {
    throw ConfigError("sweep", "give at least one of --n, --classic-c, --eps");
  }
  const RunConfig cfg = load_with_overrides(c);
  const ExperimentSpec spec = to_experiment(cfg);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  json summary = {{"config", to_json(cfg)}};

  if (!n_list.empty()) {
    std::vector<int> ns;
    for (double v : parse_list(n_list, "--n")) {
      if (v < 1 || v != static_cast<int>(v)) throw ConfigError("--n", "agent counts must be positive integers");
      ns.push_back(static_cast<int>(v));
    }
    const SpeedupResult res = speedup_sweep(spec, ns, c.threads);
    std::ostringstream csv;
    csv << "n_agents,mean_pr,se_pr\n";
    out << "n_agents mean_pr se_pr\n";
    for (const SpeedupRow& r : res.rows) {
      csv << r.n_agents << ',' << format_real(r.mean_pr) << ',' << format_real(r.se_pr) << '\n';
      out << r.n_agents << ' ' << format_real(r.mean_pr) << ' ' << format_real(r.se_pr) << '\n';
    }
    write_file(dir / "sweep.csv", csv.str());
    out << "fitted exponent " << res.exponent << (res.monotone ? " (monotone)" : " (not monotone)") << "\n";
    summary["speedup"] = {{"exponent", res.exponent},
                          {"monotone", res.monotone},
                          {"ratio_last_first", res.rows.back().mean_pr / res.rows.front().mean_pr}};
  }
  if (!c_list.empty()) {
    const std::vector<double> cs = parse_list(c_list, "--classic-c");
    for (double v : cs) {
      if (!(v > 0.0)) throw ConfigError("--classic-c", "constants must be positive");
    }
    std::ostringstream csv;
    csv << "schedule,averaged,final_error,final_se\n";
    for (const ScheduleRow& r : schedule_comparison(spec, cs, c.threads)) {
      csv << '"' << r.schedule << "\"," << (r.averaged ? 1 : 0) << ',' << format_real(r.final_error) << ','
          << format_real(r.final_se) << '\n';
      out << (r.averaged ? "PR  " : "raw ") << r.schedule << ' ' << format_real(r.final_error) << '\n';
    }
    write_file(dir / "schedule.csv", csv.str());
  }
  if (!eps_list.empty()) {
    std::vector<std::pair<double, double>> grid;
    for (double e : parse_list(eps_list, "--eps")) {
      if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("--eps", "values must lie in [0, 1]");
      grid.emplace_back(e, e);
    }
    std::ostringstream csv;
    csv << "eps_p,eps_r,gap\n";
    for (const GapRow& r : heterogeneity_gap(spec.base, spec.variant, std::max(2, spec.n_agents), grid,
                                             spec.fleet_seed)) {
      csv << format_real(r.eps_p) << ',' << format_real(r.eps_r) << ',' << format_real(r.gap) << '\n';
      out << "eps " << r.eps_p << " gap " << format_real(r.gap) << '\n';
    }
    write_file(dir / "gap.csv", csv.str());
  }
  write_file(dir / "sweep.json", summary.dump(2) + "\n");
  return kOk;
}

int cmd_gen_mdp(int states, int actions, double smoothing, double r_max, std::uint64_t seed,
                const std::string& path, std::ostream& out) {
  const Mdp mdp = generate_mdp(states, actions, smoothing, r_max, seed);
  save_mdp(mdp, path);
  out << "wrote " << states << "x" << actions << " MDP to " << path << "\n";
  return kOk;
}

}  // namespace

std::string git_blob_id(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distributed semi-norm stochastic approximation experiments"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", common.config, "JSON run configuration");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", common.out_dir, "output directory (overrides output_dir)");
    sub->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s; common.seed_set = true; },
        "master seed (overrides master_seed)");
  };

  auto* run_cmd = app.add_subcommand("run", "run replicated iterations and write traces");
  add_common(run_cmd, true);
  auto* verify_cmd = app.add_subcommand("verify", "check the assumptions on the configured instance");
  add_common(verify_cmd, true);

  std::string trace_path, which = "pr", summary_path;
  std::int64_t t_min = 1000, t_max = 100000;
  std::vector<double> band;
  auto* fit_cmd = app.add_subcommand("fit", "fit a log-log rate to an aggregate trace");
  fit_cmd->add_option("--trace", trace_path, "aggregate CSV")->required();
  fit_cmd->add_option("--which", which, "pr or raw")->check(CLI::IsMember({"pr", "raw"}));
  fit_cmd->add_option("--t-min", t_min, "window start");
  fit_cmd->add_option("--t-max", t_max, "window end");
  fit_cmd->add_option("--band", band, "acceptance band LO HI")->expected(2);
  fit_cmd->add_option("--summary", summary_path, "write a JSON summary here");

  std::string n_list, c_list, eps_list;
  auto* sweep_cmd = app.add_subcommand("sweep", "speedup, schedule or heterogeneity sweeps");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--n", n_list, "comma-separated agent counts");
  sweep_cmd->add_option("--classic-c", c_list, "comma-separated constants c for c/(t+offset)");
  sweep_cmd->add_option("--eps", eps_list, "comma-separated heterogeneity levels (eps_p = eps_r)");

  int states = 6, actions = 2;
  double smoothing = 0.2, r_max = 1.0;
  std::uint64_t mdp_seed = 0;
  std::string mdp_out;
  auto* gen_cmd = app.add_subcommand("gen-mdp", "generate and save a random MDP");
  gen_cmd->add_option("--states", states, "number of states");
  gen_cmd->add_option("--actions", actions, "number of actions");
  gen_cmd->add_option("--smoothing", smoothing, "uniform mixing weight in (0, 1)");
  gen_cmd->add_option("--r-max", r_max, "reward bound");
  gen_cmd->add_option("--seed", mdp_seed, "generator seed");
  gen_cmd->add_option("--out", mdp_out, "output JSON path")->required();

  std::vector<const char*> argv{"semiq"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUserError;
  }

  try {
    if (*run_cmd) return cmd_run(common, out);
    if (*verify_cmd) return cmd_verify(common, out, err);
    if (*fit_cmd) return cmd_fit(trace_path, which, t_min, t_max, band, summary_path, out);
    if (*sweep_cmd) return cmd_sweep(common, n_list, c_list, eps_list, out);
    if (*gen_cmd) return cmd_gen_mdp(states, actions, smoothing, r_max, mdp_seed, mdp_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUserError;
  } catch (const NumericalDivergence& e) {
    err << "numerical divergence: " << e.what();
    if (e.replica_id() >= 0) err << " (replica " << e.replica_id() << ")";
    err << "\n";
    return kNumericalFailure;
  } catch (const ConvergenceFailure& e) {
    err << "oracle did not converge: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const NotAContraction& e) {
    err << "not a contraction: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const DegenerateInstance& e) {
    err << "degenerate-instance: " << e.what() << "\n";
    return kVerificationFailure;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUserError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUserError;
  }
  return kUserError;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace semiq::cli
