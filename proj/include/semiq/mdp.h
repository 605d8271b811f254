#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semiq/seminorm.h"

namespace semiq {

// Tabular MDP. State-action pairs are flattened as s * num_actions + a.
struct Mdp {
  int num_states = 0;
  int num_actions = 0;
  Matrix transitions;  // (|S||A|) x |S|, row-stochastic: P(s' | s, a)
  Vector rewards;      // |S||A|, |R(s,a)| <= r_max
  double r_max = 1.0;

  Eigen::Index dim() const { return static_cast<Eigen::Index>(num_states) * num_actions; }
  Eigen::Index index(int s, int a) const {
    return static_cast<Eigen::Index>(s) * num_actions + a;
  }

  // Throws std::invalid_argument on shape, stochasticity or reward-bound errors.
  void validate() const;

  bool operator==(const Mdp& other) const;
};

using Fleet = std::vector<Mdp>;

// Dirichlet(1,...,1) rows mixed with the uniform distribution at weight
// `smoothing`, so every entry is >= smoothing / |S|. Rewards ~ U[-r_max, r_max].
Mdp generate_mdp(int num_states, int num_actions, double smoothing, double r_max,
                 std::uint64_t seed);

// Heterogeneous copies of `base`: P_i = (1 - eps_p) P + eps_p P_i^rand and
// R_i = clip(R + eps_r u_i, +-r_max) with u_i ~ U[-1, 1]^{|S||A|}.
Fleet derive_fleet(const Mdp& base, int n_agents, double eps_p, double eps_r,
                   std::uint64_t seed);

struct GreedyPolicy {
  std::vector<int> action_of;
  bool operator==(const GreedyPolicy&) const = default;
};

// Per-state argmax, ties broken toward the smallest action index.
GreedyPolicy greedy(const Vector& q, int num_states, int num_actions);

// min over states of (best - second best) Q value; +inf for |A| == 1.
double argmax_margin(const Vector& q, int num_states, int num_actions);

// P^pi(s',a' | s,a) = P(s'|s,a) if a' = pi(s') else 0, as a dense d x d matrix.
Matrix policy_transition(const Mdp& mdp, const GreedyPolicy& policy);

// (T q)(s,a) = R(s,a) + gamma sum_s' P(s'|s,a) max_a' q(s',a').
Vector bellman_discounted(const Mdp& mdp, double gamma, const Vector& q);

// T^J q = sum_{k<J} (P^{pi_q})^k R + (P^{pi_q})^J q with pi_q frozen at the
// greedy policy of the input q for every power.
Vector bellman_jstep_differential(const Mdp& mdp, int j_steps, const Vector& q);

// Which Q-learning instance is being run.
struct Variant {
  enum class Kind { AvgRewardJStep, DiscountedAsync };
  Kind kind = Kind::DiscountedAsync;
  int j = 1;
  double gamma = 0.9;

  static Variant jstep(int j) { return {Kind::AvgRewardJStep, j, 0.0}; }
  static Variant discounted(double gamma) { return {Kind::DiscountedAsync, 1, gamma}; }

  bool is_avg() const { return kind == Kind::AvgRewardJStep; }
  // Span for average reward, sup norm for discounting.
  SemiNormKind natural_seminorm() const {
    return is_avg() ? SemiNormKind::Span : SemiNormKind::Sup;
  }
  std::string name() const;
  void validate() const;
};

// The per-agent Bellman operator selected by `variant`.
Vector bellman(const Mdp& mdp, const Variant& variant, const Vector& q);

// Q -> (1/N) sum_i T_i Q. Bitwise-identical fleet members are grouped, so a
// homogeneous fleet evaluates to exactly the single-agent operator.
Operator averaged_operator(std::span<const Mdp> fleet, const Variant& variant);

struct FixedPointOracle {
  Vector q_star;  // canonical representative of Q* + E
  Vector e_star;  // H(Q*) - Q*, an element of E
  double gain = 0.0;
  double residual_seminorm = 0.0;
  double beta_hat = 0.0;
  std::int64_t iterations = 0;
};

struct SolveOptions {
  double tol = 1e-10;
  std::int64_t max_iters = 1'000'000;
  int contraction_pairs = 2000;
  double contraction_radius = 10.0;
  std::uint64_t seed = 0;
};

// Value iteration (discounted) or relative value iteration with re-centering
// every sweep (average reward). Refuses with NotAContraction when the
// measured contraction factor is >= 1; throws ConvergenceFailure when
// max_iters is exhausted.
FixedPointOracle solve_fixed_point(std::span<const Mdp> fleet, const Variant& variant,
                                   const SemiNorm& norm, const SolveOptions& options = {});

}  // namespace semiq
