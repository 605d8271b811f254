#include "semiq/mdp.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "semiq/errors.h"
#include "semiq/rng.h"

namespace semiq {

namespace {

// (P^pi v)(s,a) = sum_s' P(s'|s,a) v(s', pi(s')).
Vector apply_policy_transition(const Mdp& mdp, const GreedyPolicy& pi, const Vector& v) {
  Vector at_policy(mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) at_policy[s] = v[mdp.index(s, pi.action_of[s])];
  return mdp.transitions * at_policy;
}

Vector state_max(const Mdp& mdp, const Vector& q) {
  Vector v(mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) {
    v[s] = q.segment(mdp.index(s, 0), mdp.num_actions).maxCoeff();
  }
  return v;
}

void fill_dirichlet_row(CounterRng& rng, Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> row) {
  double total = 0.0;
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    row[k] = rng.exponential();
    total += row[k];
  }
  row /= total;
}

void check_q(const Mdp& mdp, const Vector& q) {
  if (q.size() != mdp.dim()) {
    throw std::invalid_argument("Q table has length " + std::to_string(q.size()) +
                                ", expected " + std::to_string(mdp.dim()));
  }
}

}  // namespace

void Mdp::validate() const {
  if (num_states < 1 || num_actions < 1) throw std::invalid_argument("Mdp: empty state or action set");
  if (transitions.rows() != dim() || transitions.cols() != num_states) {
    throw std::invalid_argument("Mdp: transition matrix has wrong shape");
  }
  if (rewards.size() != dim()) throw std::invalid_argument("Mdp: reward vector has wrong length");
  if (!(r_max > 0.0)) throw std::invalid_argument("Mdp: r_max must be positive");
  for (Eigen::Index i = 0; i < dim(); ++i) {
    if (transitions.row(i).minCoeff() < 0.0) {
      throw std::invalid_argument("Mdp: negative transition probability in row " + std::to_string(i));
    }
    if (std::abs(transitions.row(i).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("Mdp: transition row " + std::to_string(i) + " does not sum to 1");
    }
    if (!(std::abs(rewards[i]) <= r_max)) {
      throw std::invalid_argument("Mdp: reward exceeds r_max at " + std::to_string(i));
    }
  }
}

bool Mdp::operator==(const Mdp& other) const {
  return num_states == other.num_states && num_actions == other.num_actions &&
         r_max == other.r_max && transitions == other.transitions && rewards == other.rewards;
}

Mdp generate_mdp(int num_states, int num_actions, double smoothing, double r_max,
                 std::uint64_t seed) {
  if (num_states < 2 || num_actions < 2) {
    throw std::invalid_argument("generate_mdp: need at least 2 states and 2 actions");
  }
  if (!(smoothing > 0.0 && smoothing < 1.0)) {
    throw std::invalid_argument("generate_mdp: smoothing must lie in (0, 1)");
  }
  if (!(r_max > 0.0)) throw std::invalid_argument("generate_mdp: r_max must be positive");

  Mdp mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.r_max = r_max;
  mdp.transitions.resize(mdp.dim(), num_states);
  mdp.rewards.resize(mdp.dim());

  CounterRng rng(stream_key({seed, 0x3d9ULL}));
  const double floor = smoothing / num_states;
  for (Eigen::Index i = 0; i < mdp.dim(); ++i) {
    fill_dirichlet_row(rng, mdp.transitions.row(i));
    mdp.transitions.row(i) = (1.0 - smoothing) * mdp.transitions.row(i).array() + floor;
  }
  for (Eigen::Index i = 0; i < mdp.dim(); ++i) mdp.rewards[i] = rng.uniform(-r_max, r_max);
  return mdp;
}

Fleet derive_fleet(const Mdp& base, int n_agents, double eps_p, double eps_r, std::uint64_t seed) {
  if (n_agents < 1) throw std::invalid_argument("derive_fleet: n_agents must be >= 1");
  if (!(eps_p >= 0.0 && eps_p <= 1.0)) throw std::invalid_argument("derive_fleet: eps_p must lie in [0, 1]");
  if (!(eps_r >= 0.0)) throw std::invalid_argument("derive_fleet: eps_r must be >= 0");
  base.validate();

  Fleet fleet;
  fleet.reserve(n_agents);
  for (int i = 0; i < n_agents; ++i) {
    Mdp agent = base;
    if (eps_p > 0.0 || eps_r > 0.0) {
      CounterRng rng(stream_key({seed, 0xf1ee7ULL, static_cast<std::uint64_t>(i)}));
      Eigen::RowVectorXd noise(base.num_states);
      for (Eigen::Index r = 0; r < base.dim(); ++r) {
        fill_dirichlet_row(rng, noise);
        agent.transitions.row(r) = (1.0 - eps_p) * base.transitions.row(r) + eps_p * noise;
      }
      for (Eigen::Index r = 0; r < base.dim(); ++r) {
        const double u = rng.uniform(-1.0, 1.0);
        agent.rewards[r] = std::clamp(base.rewards[r] + eps_r * u, -base.r_max, base.r_max);
      }
    }
    fleet.push_back(std::move(agent));
  }
  return fleet;
}

GreedyPolicy greedy(const Vector& q, int num_states, int num_actions) {
  if (q.size() != static_cast<Eigen::Index>(num_states) * num_actions) {
    throw std::invalid_argument("greedy: Q table length does not match |S||A|");
  }
  GreedyPolicy pi;
  pi.action_of.resize(num_states);
  for (int s = 0; s < num_states; ++s) {
    const Eigen::Index base = static_cast<Eigen::Index>(s) * num_actions;
    int best = 0;
    for (int a = 1; a < num_actions; ++a) {
      if (q[base + a] > q[base + best]) best = a;
    }
    pi.action_of[s] = best;
  }
  return pi;
}

double argmax_margin(const Vector& q, int num_states, int num_actions) {
  if (num_actions < 2) return std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  for (int s = 0; s < num_states; ++s) {
    const Eigen::Index base = static_cast<Eigen::Index>(s) * num_actions;
    double top = -std::numeric_limits<double>::infinity();
    double second = top;
    for (int a = 0; a < num_actions; ++a) {
      const double v = q[base + a];
      if (v > top) {
        second = top;
        top = v;
      } else if (v > second) {
        second = v;
      }
    }
    margin = std::min(margin, top - second);
  }
  return margin;
}

Matrix policy_transition(const Mdp& mdp, const GreedyPolicy& policy) {
  Matrix m = Matrix::Zero(mdp.dim(), mdp.dim());
  for (Eigen::Index row = 0; row < mdp.dim(); ++row) {
    for (int s2 = 0; s2 < mdp.num_states; ++s2) {
      m(row, mdp.index(s2, policy.action_of[s2])) = mdp.transitions(row, s2);
    }
  }
  return m;
}

Vector bellman_discounted(const Mdp& mdp, double gamma, const Vector& q) {
  check_q(mdp, q);
  return mdp.rewards + gamma * (mdp.transitions * state_max(mdp, q));
}

Vector bellman_jstep_differential(const Mdp& mdp, int j_steps, const Vector& q) {
  if (j_steps < 1) throw std::invalid_argument("bellman_jstep_differential: J must be >= 1");
  check_q(mdp, q);
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  Vector out = mdp.rewards;
  Vector reward_power = mdp.rewards;
  for (int k = 1; k < j_steps; ++k) {
    reward_power = apply_policy_transition(mdp, pi, reward_power);
    out += reward_power;
  }
  Vector q_power = q;
  for (int k = 0; k < j_steps; ++k) q_power = apply_policy_transition(mdp, pi, q_power);
  return out + q_power;
}

std::string Variant::name() const {
  return is_avg() ? "avg_jstep" : "discounted";
}

void Variant::validate() const {
  if (is_avg()) {
    if (j < 1) throw std::invalid_argument("Variant: J must be >= 1");
  } else if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("Variant: gamma must lie in (0, 1)");
  }
}

Vector bellman(const Mdp& mdp, const Variant& variant, const Vector& q) {
  return variant.is_avg() ? bellman_jstep_differential(mdp, variant.j, q)
                          : bellman_discounted(mdp, variant.gamma, q);
}

Operator averaged_operator(std::span<const Mdp> fleet, const Variant& variant) {
  if (fleet.empty()) throw std::invalid_argument("averaged_operator: empty fleet");
  variant.validate();

  struct Group {
    Mdp mdp;
    double weight;
  };
  std::vector<Group> groups;
  const double unit = 1.0 / static_cast<double>(fleet.size());
  for (const Mdp& m : fleet) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) { return g.mdp == m; });
    if (it == groups.end()) {
      groups.push_back({m, unit});
    } else {
      it->weight += unit;
    }
  }
  return [groups = std::move(groups), variant](const Vector& q) -> Vector {
    if (groups.size() == 1) return bellman(groups.front().mdp, variant, q);
    Vector out = Vector::Zero(q.size());
    for (const Group& g : groups) out += g.weight * bellman(g.mdp, variant, q);
    return out;
  };
}

FixedPointOracle solve_fixed_point(std::span<const Mdp> fleet, const Variant& variant,
                                   const SemiNorm& norm, const SolveOptions& options) {
  if (fleet.empty()) throw std::invalid_argument("solve_fixed_point: empty fleet");
  if (norm.kind() != variant.natural_seminorm()) {
    throw std::invalid_argument(std::string("solve_fixed_point: variant ") + variant.name() +
                                " requires the " + to_string(variant.natural_seminorm()) +
                                " semi-norm");
  }
  if (norm.dim() != fleet.front().dim()) {
    throw std::invalid_argument("solve_fixed_point: semi-norm dimension does not match the MDP");
  }
  const Operator op = averaged_operator(fleet, variant);

  FixedPointOracle oracle;
  oracle.beta_hat = estimate_contraction(op, norm, options.contraction_pairs,
                                         options.contraction_radius, options.seed);
  if (!(oracle.beta_hat < 1.0)) {
    throw NotAContraction("solve_fixed_point: measured contraction factor " +
                              std::to_string(oracle.beta_hat) + " >= 1",
                          oracle.beta_hat);
  }

  Vector q = Vector::Zero(norm.dim());
  double residual = std::numeric_limits<double>::infinity();
  std::int64_t it = 0;
  for (; it < options.max_iters; ++it) {
    const Vector tq = op(q);
    residual = norm(tq - q);
    if (!std::isfinite(residual)) break;
    if (residual <= options.tol) break;
    q = norm.project_mod_e(tq);
  }
  if (!(residual <= options.tol)) {
    throw ConvergenceFailure("solve_fixed_point: no convergence after " +
                                 std::to_string(options.max_iters) + " iterations",
                             residual);
  }

  oracle.iterations = it;
  oracle.q_star = norm.project_mod_e(q);
  const Vector diff = op(oracle.q_star) - oracle.q_star;
  if (variant.is_avg()) {
    oracle.gain = diff.mean();
    oracle.e_star = Vector::Constant(norm.dim(), oracle.gain);
  } else {
    oracle.gain = 0.0;
    oracle.e_star = Vector::Zero(norm.dim());
  }
  oracle.residual_seminorm = norm(diff - oracle.e_star);
  return oracle;
}

}  // namespace semiq
