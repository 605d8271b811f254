#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "semiq/engine.h"
#include "semiq/mdp.h"
#include "semiq/seminorm.h"

namespace semiq {

// h_i(Q, y) = b_i(Q, y) + A_i(Q, y) Q for one agent.
//   J-step:     row (s,a) of A is the indicator of (s_J, pi_Q(s_J)) along the
//               sampled path, b(s,a) = R(s,a) + sum_{k=1}^{J-1} R(s_k, pi_Q(s_k)).
//   Discounted: A = I - 1_{sa} (1_{sa} - gamma 1_{(s', pi_Q(s'))})^T,
//               b = R(s,a) 1_{sa}.
class LinearDecomposition {
 public:
  LinearDecomposition(const Mdp& mdp, const Variant& variant);

  Vector b(const Vector& q, const Sample& y) const;
  Matrix a(const Vector& q, const Sample& y) const;

  // Expected b^Q and A^Q. J-step: paths follow `sampling` (default pi_Q),
  // giving sum_{k<J} (P^pi)^k R and (P^pi)^J when sampling == pi_Q; weights
  // are ignored. Discounted: D R and I - D (I - gamma P^pi), D = diag(weights),
  // with weights the stationary (s,a) distribution (all ones for the
  // synchronous operator).
  Vector mean_b(const Vector& q, const Vector& weights, const GreedyPolicy* sampling = nullptr) const;
  Matrix mean_a(const Vector& q, const Vector& weights, const GreedyPolicy* sampling = nullptr) const;

  const Mdp& mdp() const { return *mdp_; }
  const Variant& variant() const { return variant_; }

  // Analytic bounds: J-step C_A = 1, C_b = 2 J R_max; discounted C_A = 2 + gamma, C_b = R_max.
  double c_a() const;
  double c_b() const;

 private:
  const Mdp* mdp_;
  Variant variant_;
};

// Mean-field operator Q -> (1/N) sum_i E[h_i(Q, y)]. For J-step sampling
// this is the averaged operator; for asynchronous sampling each agent
// contributes Q + D_i (T_i Q - Q) with D_i its stationary (s,a) weights.
Operator mean_operator(const Fleet& fleet, const Variant& variant, const BehaviorPolicy& behavior);

struct CheckResult {
  std::string name;
  bool pass = true;
  bool skipped = false;
  std::vector<nlohmann::json> witnesses;
  nlohmann::json measured = nlohmann::json::object();
  std::string note;
};

nlohmann::json to_json(const CheckResult& r);

struct A1Options {
  int trials = 1000;
  int monotone_trials = 10000;  // item (b)
  int forward_trials = 100000;  // item (d)
  std::uint64_t seed = 0;
};

// Items (a)-(d) of the local-update assumption, plus a report (never a
// failure) of samples where the decomposition is unchanged outside the
// C* ball. Throws AssumptionViolation carrying the JSON report when an
// item fails.
std::vector<CheckResult> check_a1(const LinearDecomposition& decomp, const SemiNorm& norm,
                                  const FixedPointOracle& oracle, double c_star,
                                  const A1Options& options = {});

struct CStarEstimate {
  double directional;  // min over bisected rays
  double exact;        // from the argmax margin of Q*
  double value;        // min of the two
};

// Radius (in the semi-norm) of the largest ball around Q* on which the
// greedy policy stays pi_{Q*}. Throws DegenerateInstance on a zero margin.
CStarEstimate estimate_c_star(int num_states, int num_actions, const FixedPointOracle& oracle,
                              const SemiNorm& norm, int directions, std::uint64_t seed);

struct MixingEstimate {
  double rho_hat = 0.0;
  double c_e_hat = 1.0;
  Vector stationary;  // over (s,a); empty for i.i.d. sampling
  int horizon = 0;
  double max_envelope_ratio = 0.0;  // max TV / (c_e rho^tau), <= 1 by construction

  // Generative sampling draws fresh independent samples every step.
  static MixingEstimate iid();
};

// Chain M((s,a) -> (s',a')) = P(s'|s,a) mu(a'|s'). rho_hat is its second
// largest eigenvalue modulus, c_e_hat the smallest prefactor with
// max_start TV(tau) <= c_e_hat rho_hat^tau for tau <= horizon.
// Throws InvalidInstance for a reducible chain.
MixingEstimate estimate_mixing(const Mdp& mdp, const BehaviorPolicy& behavior, int horizon = 60);

Matrix state_action_chain(const Mdp& mdp, const BehaviorPolicy& behavior);
Vector stationary_distribution(const Matrix& chain);

struct LedgerInputs {
  double beta_hat = 0.0;
  double c_a = 1.0;
  double c_b = 1.0;
  double c_star_hat = 1.0;
  double rho_hat = 0.0;
  double c_e_hat = 1.0;
  StepSchedule schedule = StepSchedule::polynomial(0.7);
  int n_agents = 1;
  double p_q_star = 0.0;   // p(Q*)
  double p_delta0 = 0.0;   // p(Q_0 - Q* - e*)
  std::optional<double> c_q_hat;
};

struct ConstantsLedger {
  LedgerInputs in;
  int block_h = 1;
  double beta_h = 0.0;
  std::int64_t t_star = 0;

  // Derived bound constants; +inf when they overflow, NaN when an input
  // (C_Q, or alpha for the classic schedule) is unavailable.
  double c_gamma = 0.0;
  double k_gamma = 0.0;
  double c1_noise = 0.0;
  double c2_noise = 0.0;
  double c_delta = 0.0;
  double c2_nonlin = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;

  // min{tau > 0 : rho^tau <= alpha_t^2}.
  std::int64_t tau(std::int64_t t) const;
};

// Throws NotAContraction when beta_hat >= 1.
ConstantsLedger build_ledger(const LedgerInputs& inputs);

nlohmann::json to_json(const ConstantsLedger& ledger);

struct A4Result {
  double c_q_hat = 0.0;
  double tail_slope = 0.0;  // log-log slope of the ratio over the last decade
  std::vector<std::pair<std::int64_t, double>> ratios;
  bool pass = false;
  std::string note;
};

// Slack on the last-decade slope of mean[p^2] / (tau_t alpha_t) that still
// counts as non-increasing.
inline constexpr double kA4SlopeTolerance = 0.1;

A4Result check_a4(const AggregateTrace& trace, const ConstantsLedger& ledger);

struct DecompositionTrace {
  std::vector<Vector> delta;  // Delta_t, t = 0..T
  std::vector<Vector> omega;  // t = 0..T-1
  std::vector<Vector> xi;
  std::vector<double> p_error;  // p(Q_t - Q*), t = 0..T-1
  std::vector<bool> policy_matches;  // greedy(Q_t) == pi*
  double max_step_residual = 0.0;

  std::int64_t t_star = 0;
  Vector trans, init, noise, nonlin;  // the four averaged components
  Vector delta_bar;
  double pr_residual = 0.0;

  double mean_field_residual = 0.0;  // |b^{Q*} + A^{Q*} Q* - Q* - e*|_inf
  double p_gamma_total = 0.0;        // p(Gamma_{0:T})
  double gamma_residual = 0.0;       // |Gamma_{0:T} Delta_0 - init recursion|_inf
};

inline constexpr double kStepIdentityTolerance = 1e-10;
inline constexpr double kPrIdentityTolerance = 1e-8;
inline constexpr Eigen::Index kMaxTraceDim = 64;
inline constexpr std::int64_t kMaxTraceIters = 10000;

// Replays run(setup, replica_id) and rebuilds both error decompositions
// step by step. Requires |S||A| <= 64 and T <= 10^4. Throws
// IdentityViolation on a tolerance breach, InvalidInstance when the
// oracle is not a fixed point of the mean-field operator (e.g. a
// heterogeneous asynchronous fleet).
DecompositionTrace trace_decomposition(const RunSetup& setup, int replica_id, std::int64_t t_star);

// xi = (b^Q - b^{Q*}) + (A^Q - A^{Q*}) Q averaged over agents at one step.
Vector nonlinear_residual(std::span<const LinearDecomposition> decomps, const Vector& q,
                          const Vector& q_star, std::span<const Sample> samples);

struct XiBoundResult {
  double factor = 0.0;     // 2 (C_A / C* + C_b / C*^2)
  double max_ratio = 0.0;  // max p(xi_k) / p(Q_k - Q*)^2
  std::int64_t inside_steps = 0;
  bool pass = true;
};

// Throws BoundViolation with the first witness k.
XiBoundResult check_xi_bound(const DecompositionTrace& trace, const ConstantsLedger& ledger,
                             const SemiNorm& norm);

nlohmann::json to_json(const MixingEstimate& m);
nlohmann::json to_json(const CStarEstimate& c);
nlohmann::json summary_json(const DecompositionTrace& trace);

// JSON number, or null when not finite.
nlohmann::json finite_or_null(double x);

}  // namespace semiq
