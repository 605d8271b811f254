#include "semiq/verify.h"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "semiq/errors.h"
#include "semiq/rng.h"

namespace semiq {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int draw_row(CounterRng& rng, const Matrix& probs, Eigen::Index row) {
  const double u = rng.uniform();
  double acc = 0.0;
  const Eigen::Index last = probs.cols() - 1;
  for (Eigen::Index c = 0; c < last; ++c) {
    acc += probs(row, c);
    if (u < acc) return static_cast<int>(c);
  }
  return static_cast<int>(last);
}

GreedyPolicy random_policy(CounterRng& rng, int num_states, int num_actions) {
  GreedyPolicy pi;
  pi.action_of.resize(num_states);
  for (int& a : pi.action_of) a = static_cast<int>(rng.below(num_actions));
  return pi;
}

// Any sample in the support of the sampler: a J-path per (s,a) following a
// random deterministic policy, or a single transition from a random pair.
Sample random_sample(const Mdp& mdp, const Variant& variant, CounterRng& rng) {
  if (variant.is_avg()) {
    const GreedyPolicy pi = random_policy(rng, mdp.num_states, mdp.num_actions);
    PathSample y;
    y.j = variant.j;
    y.states.reserve(static_cast<std::size_t>(mdp.dim() * variant.j));
    for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
      int s = draw_row(rng, mdp.transitions, sa);
      y.states.push_back(s);
      for (int k = 1; k < variant.j; ++k) {
        s = draw_row(rng, mdp.transitions, mdp.index(s, pi.action_of[s]));
        y.states.push_back(s);
      }
    }
    return y;
  }
  TransitionSample y;
  y.s = static_cast<int>(rng.below(mdp.num_states));
  y.a = static_cast<int>(rng.below(mdp.num_actions));
  y.s_next = draw_row(rng, mdp.transitions, mdp.index(y.s, y.a));
  return y;
}

Vector random_vector(CounterRng& rng, Eigen::Index d, double radius) {
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = rng.uniform(-radius, radius);
  return v;
}

// Per-state value of q under a policy: v(s) = q(s, pi(s)).
Vector at_policy(const Mdp& mdp, const GreedyPolicy& pi, const Vector& q) {
  Vector v(mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) v[s] = q[mdp.index(s, pi.action_of[s])];
  return v;
}

// |S| x |S| transition matrix of the state chain under a deterministic policy.
Matrix state_chain(const Mdp& mdp, const GreedyPolicy& pi) {
  Matrix m(mdp.num_states, mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) m.row(s) = mdp.transitions.row(mdp.index(s, pi.action_of[s]));
  return m;
}

// |S| x d selector: row s is the indicator of (s, pi(s)).
Matrix selector(const Mdp& mdp, const GreedyPolicy& pi) {
  Matrix m = Matrix::Zero(mdp.num_states, mdp.dim());
  for (int s = 0; s < mdp.num_states; ++s) m(s, mdp.index(s, pi.action_of[s])) = 1.0;
  return m;
}

nlohmann::json vector_json(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(finite_or_null(v[i]));
  return out;
}

bool strongly_connected(const Matrix& m) {
  const Eigen::Index n = m.rows();
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::deque<Eigen::Index> queue{0};
    seen[0] = true;
    Eigen::Index count = 1;
    while (!queue.empty()) {
      const Eigen::Index u = queue.front();
      queue.pop_front();
      for (Eigen::Index v = 0; v < n; ++v) {
        const double w = pass == 0 ? m(u, v) : m(v, u);
        if (w > 0.0 && !seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = true;
          ++count;
          queue.push_back(v);
        }
      }
    }
    if (count != n) return false;
  }
  return true;
}

// Second largest eigenvalue modulus via subspace iteration on the deflated
// chain M - 1 pi^T, with Rayleigh-Ritz on the iterated block.
double slem(const Matrix& chain, const Vector& stationary) {
  const Eigen::Index d = chain.rows();
  const Matrix deflated = chain - Vector::Ones(d) * stationary.transpose();
  const Eigen::Index k = std::min<Eigen::Index>(d, 8);

  CounterRng rng(stream_key({0x51e3ULL, static_cast<std::uint64_t>(d)}));
  Matrix v(d, k);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(-1.0, 1.0);
  auto orthonormalize = [&](const Matrix& w) -> Matrix {
    Eigen::HouseholderQR<Matrix> qr(w);
    return qr.householderQ() * Matrix::Identity(d, k);
  };
  v = orthonormalize(v);

  double rho = kInf;
  int stable = 0;
  for (int it = 0; it < 100000 && stable < 5; ++it) {
    const Matrix w = deflated * v;
    const Matrix h = v.transpose() * w;
    Eigen::EigenSolver<Matrix> es(h, false);
    const double next = es.eigenvalues().cwiseAbs().maxCoeff();
    stable = std::abs(next - rho) <= 1e-13 ? stable + 1 : 0;
    rho = next;
    if (w.cwiseAbs().maxCoeff() < 1e-300) break;
    v = orthonormalize(w);
  }
  return rho < 1e-14 ? 0.0 : rho;
}

double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace

nlohmann::json finite_or_null(double x) {
  if (!std::isfinite(x)) return nullptr;
  return x;
}

LinearDecomposition::LinearDecomposition(const Mdp& mdp, const Variant& variant)
    : mdp_(&mdp), variant_(variant) {
  variant.validate();
}

double LinearDecomposition::c_a() const {
  return variant_.is_avg() ? 1.0 : 2.0 + variant_.gamma;
}

double LinearDecomposition::c_b() const {
  return variant_.is_avg() ? 2.0 * variant_.j * mdp_->r_max : mdp_->r_max;
}

Vector LinearDecomposition::b(const Vector& q, const Sample& y) const {
  const Mdp& mdp = *mdp_;
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  if (variant_.is_avg()) {
    const auto& path = std::get<PathSample>(y);
    Vector out(mdp.dim());
    for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
      const auto p = path.path(sa);
      double value = mdp.rewards[sa];
      for (int k = 0; k + 1 < path.j; ++k) {
        const int s = p[static_cast<std::size_t>(k)];
        value += mdp.rewards[mdp.index(s, pi.action_of[s])];
      }
      out[sa] = value;
    }
    return out;
  }
  const auto& tr = std::get<TransitionSample>(y);
  Vector out = Vector::Zero(mdp.dim());
  const Eigen::Index sa = mdp.index(tr.s, tr.a);
  out[sa] = mdp.rewards[sa];
  return out;
}

Matrix LinearDecomposition::a(const Vector& q, const Sample& y) const {
  const Mdp& mdp = *mdp_;
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  if (variant_.is_avg()) {
    const auto& path = std::get<PathSample>(y);
    Matrix out = Matrix::Zero(mdp.dim(), mdp.dim());
    for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
      const int last = path.path(sa).back();
      out(sa, mdp.index(last, pi.action_of[last])) = 1.0;
    }
    return out;
  }
  const auto& tr = std::get<TransitionSample>(y);
  Matrix out = Matrix::Identity(mdp.dim(), mdp.dim());
  const Eigen::Index sa = mdp.index(tr.s, tr.a);
  out(sa, sa) -= 1.0;
  out(sa, mdp.index(tr.s_next, pi.action_of[tr.s_next])) += variant_.gamma;
  return out;
}

Vector LinearDecomposition::mean_b(const Vector& q, const Vector& weights,
                                   const GreedyPolicy* sampling) const {
  const Mdp& mdp = *mdp_;
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  if (variant_.is_avg()) {
    const Matrix walk = state_chain(mdp, sampling ? *sampling : pi);
    const Vector r_pi = at_policy(mdp, pi, mdp.rewards);
    Vector out = mdp.rewards;
    Matrix dist = mdp.transitions;  // distribution of s_k, k = 1
    for (int k = 1; k < variant_.j; ++k) {
      out += dist * r_pi;
      dist = dist * walk;
    }
    return out;
  }
  if (weights.size() != mdp.dim()) throw std::invalid_argument("mean_b: weights have wrong length");
  return weights.cwiseProduct(mdp.rewards);
}

Matrix LinearDecomposition::mean_a(const Vector& q, const Vector& weights,
                                   const GreedyPolicy* sampling) const {
  const Mdp& mdp = *mdp_;
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  if (variant_.is_avg()) {
    const Matrix walk = state_chain(mdp, sampling ? *sampling : pi);
    Matrix dist = mdp.transitions;
    for (int k = 1; k < variant_.j; ++k) dist = dist * walk;
    return dist * selector(mdp, pi);
  }
  if (weights.size() != mdp.dim()) throw std::invalid_argument("mean_a: weights have wrong length");
  const Matrix p_pi = policy_transition(mdp, pi);
  const Matrix id = Matrix::Identity(mdp.dim(), mdp.dim());
  return id - weights.asDiagonal() * (id - variant_.gamma * p_pi);
}

Matrix state_action_chain(const Mdp& mdp, const BehaviorPolicy& behavior) {
  const BehaviorPolicy mu = behavior.probs.size() == 0
                                ? BehaviorPolicy::uniform(mdp.num_states, mdp.num_actions)
                                : behavior;
  if (mu.probs.rows() != mdp.num_states || mu.probs.cols() != mdp.num_actions) {
    throw std::invalid_argument("state_action_chain: behaviour policy has wrong shape");
  }
  Matrix m(mdp.dim(), mdp.dim());
  for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
    for (int s2 = 0; s2 < mdp.num_states; ++s2) {
      for (int a2 = 0; a2 < mdp.num_actions; ++a2) {
        m(sa, mdp.index(s2, a2)) = mdp.transitions(sa, s2) * mu.probs(s2, a2);
      }
    }
  }
  return m;
}

Vector stationary_distribution(const Matrix& chain) {
  const Eigen::Index d = chain.rows();
  Matrix lhs(d + 1, d);
  lhs.topRows(d) = chain.transpose() - Matrix::Identity(d, d);
  lhs.row(d).setOnes();
  Vector rhs = Vector::Zero(d + 1);
  rhs[d] = 1.0;
  Vector pi = lhs.colPivHouseholderQr().solve(rhs);
  pi = pi.cwiseMax(0.0);
  return pi / pi.sum();
}

Operator mean_operator(const Fleet& fleet, const Variant& variant, const BehaviorPolicy& behavior) {
  if (fleet.empty()) throw std::invalid_argument("mean_operator: empty fleet");
  if (variant.is_avg()) return averaged_operator(fleet, variant);
  std::vector<Vector> weights;
  for (const Mdp& m : fleet) weights.push_back(stationary_distribution(state_action_chain(m, behavior)));
  return [fleet, variant, weights = std::move(weights)](const Vector& q) -> Vector {
    Vector out = Vector::Zero(q.size());
    for (std::size_t i = 0; i < fleet.size(); ++i) {
      out += q + weights[i].cwiseProduct(bellman(fleet[i], variant, q) - q);
    }
    return out / static_cast<double>(fleet.size());
  };
}

nlohmann::json to_json(const CheckResult& r) {
  nlohmann::json out = {{"name", r.name},
                        {"pass", r.pass},
                        {"skipped", r.skipped},
                        {"witnesses", r.witnesses},
                        {"measured_constants", r.measured}};
  if (!r.note.empty()) out["note"] = r.note;
  return out;
}

std::vector<CheckResult> check_a1(const LinearDecomposition& decomp, const SemiNorm& norm,
                                  const FixedPointOracle& oracle, double c_star,
                                  const A1Options& options) {
  const Mdp& mdp = decomp.mdp();
  const Variant& variant = decomp.variant();
  const Eigen::Index d = mdp.dim();
  if (options.trials < 1 || options.monotone_trials < 1 || options.forward_trials < 1) {
    throw std::invalid_argument("check_a1: trial counts must be >= 1");
  }
  if (norm.dim() != d || oracle.q_star.size() != d) {
    throw std::invalid_argument("check_a1: dimension mismatch");
  }
  const double radius = 10.0 * std::max(1.0, oracle.q_star.cwiseAbs().maxCoeff());
  constexpr std::size_t kMaxWitnesses = 5;

  std::vector<CheckResult> results(5);
  CheckResult& a = results[0];
  CheckResult& b = results[1];
  CheckResult& c = results[2];
  CheckResult& dd = results[3];
  CheckResult& rev = results[4];
  a.name = "A1(a)";
  b.name = "A1(b)";
  c.name = "A1(c)";
  dd.name = "A1(d)";
  rev.name = "A1(d) reverse";

  {
    CounterRng rng(stream_key({options.seed, 0xa1aULL}));
    for (int k = 0; k < options.trials; ++k) {
      const Vector q = random_vector(rng, d, radius);
      const Sample y = random_sample(mdp, variant, rng);
      const double shift = norm.kind() == SemiNormKind::Span ? rng.uniform(-radius, radius) : 0.0;
      const Vector e = Vector::Constant(d, shift);
      const Vector ae = decomp.a(q, y) * e;
      if (ae != e) {
        a.pass = false;
        if (a.witnesses.size() < kMaxWitnesses) {
          a.witnesses.push_back({{"trial", k}, {"e", shift}, {"max_abs_error", (ae - e).cwiseAbs().maxCoeff()}});
        }
      }
    }
    a.measured["trials"] = options.trials;
  }

  {
    CounterRng rng(stream_key({options.seed, 0xa1bULL}));
    double worst = kInf;
    for (int k = 0; k < options.monotone_trials; ++k) {
      const Vector q = random_vector(rng, d, radius);
      const Vector q2 = random_vector(rng, d, radius);
      const Sample y = random_sample(mdp, variant, rng);
      const double gap = (decomp.a(q, y) * q - decomp.a(q2, y) * q).minCoeff();
      worst = std::min(worst, gap);
      if (gap < 0.0) {
        b.pass = false;
        if (b.witnesses.size() < kMaxWitnesses) b.witnesses.push_back({{"trial", k}, {"min_gap", gap}});
      }
    }
    b.measured["trials"] = options.monotone_trials;
    b.measured["min_coordinate_gap"] = worst;
  }

  {
    CounterRng rng(stream_key({options.seed, 0xa1cULL}));
    double max_pa = 0.0, max_pb = 0.0;
    for (int k = 0; k < options.trials; ++k) {
      const Vector q = random_vector(rng, d, radius);
      const Sample y = random_sample(mdp, variant, rng);
      const double pa = norm.of_matrix(decomp.a(q, y));
      const double pb = norm(decomp.b(q, y));
      max_pa = std::max(max_pa, pa);
      max_pb = std::max(max_pb, pb);
      const bool ok = pa <= decomp.c_a() * (1.0 + 1e-12) && pb <= decomp.c_b() * (1.0 + 1e-12);
      if (!ok) {
        c.pass = false;
        if (c.witnesses.size() < kMaxWitnesses) {
          c.witnesses.push_back({{"trial", k}, {"p_a", finite_or_null(pa)}, {"p_b", pb}});
        }
      }
    }
    c.measured = {{"max_p_a", finite_or_null(max_pa)},
                  {"max_p_b", max_pb},
                  {"c_a", decomp.c_a()},
                  {"c_b", decomp.c_b()}};
  }

  {
    CounterRng rng(stream_key({options.seed, 0xa1dULL}));
    const int reverse_trials = std::max(1, options.forward_trials / 10);
    std::int64_t unchanged_outside = 0;
    for (int k = 0; k < options.forward_trials + reverse_trials; ++k) {
      const bool forward = k < options.forward_trials;
      Vector delta = random_vector(rng, d, 1.0);
      const double pd = norm(delta);
      if (pd <= 0.0) continue;
      const double r = forward ? rng.uniform() * c_star : c_star * (1.0 + 2.0 * rng.uniform());
      delta *= r / pd;
      if (norm.kind() == SemiNormKind::Span) delta.array() += rng.uniform(-radius, radius);
      const Vector q = oracle.q_star + delta;
      if (forward && !(norm(q - oracle.q_star) < c_star)) continue;
      const Sample y = random_sample(mdp, variant, rng);
      const bool same = decomp.a(q, y) == decomp.a(oracle.q_star, y) &&
                        decomp.b(q, y) == decomp.b(oracle.q_star, y);
      if (forward && !same) {
        dd.pass = false;
        if (dd.witnesses.size() < kMaxWitnesses) {
          dd.witnesses.push_back({{"trial", k}, {"p_q_minus_q_star", norm(q - oracle.q_star)}});
        }
      } else if (!forward && same) {
        ++unchanged_outside;
      }
    }
    dd.measured = {{"trials", options.forward_trials}, {"c_star", c_star}};
    rev.measured = {{"trials", reverse_trials}, {"unchanged_outside_ball", unchanged_outside}};
    rev.note = "informational: decompositions left unchanged by some Q outside the C* ball";
  }

  for (const CheckResult& r : results) {
    if (!r.pass) {
      nlohmann::json report = nlohmann::json::array();
      for (const CheckResult& x : results) report.push_back(to_json(x));
      throw AssumptionViolation(r.name + " failed", report.dump(2));
    }
  }
  return results;
}

CStarEstimate estimate_c_star(int num_states, int num_actions, const FixedPointOracle& oracle,
                              const SemiNorm& norm, int directions, std::uint64_t seed) {
  const Vector& q_star = oracle.q_star;
  const Eigen::Index d = static_cast<Eigen::Index>(num_states) * num_actions;
  if (q_star.size() != d || norm.dim() != d) throw std::invalid_argument("estimate_c_star: dimension mismatch");
  if (directions < 1) throw std::invalid_argument("estimate_c_star: directions must be >= 1");

  const double margin = argmax_margin(q_star, num_states, num_actions);
  if (!(margin > 1e-9 * std::max(1.0, q_star.cwiseAbs().maxCoeff()))) {
    throw DegenerateInstance("estimate_c_star: Q* has a tied greedy action (margin " +
                             std::to_string(margin) + ")");
  }
  CStarEstimate out;
  out.exact = norm.kind() == SemiNormKind::Span ? margin : 0.5 * margin;

  const GreedyPolicy pi_star = greedy(q_star, num_states, num_actions);
  auto changed = [&](const Vector& u, double r) {
    return greedy(q_star + r * u, num_states, num_actions) != pi_star;
  };
  out.directional = kInf;
  for (int i = 0; i < directions; ++i) {
    CounterRng rng(stream_key({seed, 0xc5ULL, static_cast<std::uint64_t>(i)}));
    Vector u = random_vector(rng, d, 1.0);
    if (norm.kind() == SemiNormKind::Span) u = norm.project_mod_e(u);
    const double size = norm.induced_norm(u);
    if (!(size > 0.0)) continue;
    u /= size;
    const double pu = norm(u);

    double hi = out.exact;
    int doublings = 0;
    while (!changed(u, hi) && doublings < 200) {
      hi *= 2.0;
      ++doublings;
    }
    if (!changed(u, hi)) continue;  // this ray never leaves the cone
    double lo = doublings == 0 ? 0.0 : hi / 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (changed(u, mid) ? hi : lo) = mid;
    }
    out.directional = std::min(out.directional, hi * pu);
  }
  out.value = std::min(out.directional, out.exact);
  return out;
}

MixingEstimate MixingEstimate::iid() {
  MixingEstimate m;
  m.rho_hat = 0.0;
  m.c_e_hat = 1.0;
  return m;
}

MixingEstimate estimate_mixing(const Mdp& mdp, const BehaviorPolicy& behavior, int horizon) {
  if (horizon < 1) throw std::invalid_argument("estimate_mixing: horizon must be >= 1");
  const Matrix chain = state_action_chain(mdp, behavior);
  if (!strongly_connected(chain)) {
    throw InvalidInstance("estimate_mixing: the state-action chain under the behaviour policy is reducible");
  }
  MixingEstimate out;
  out.horizon = horizon;
  out.stationary = stationary_distribution(chain);
  out.rho_hat = slem(chain, out.stationary);

  const Eigen::Index d = chain.rows();
  std::vector<std::pair<int, double>> tv_by_tau;
  Matrix power = Matrix::Identity(d, d);
  out.c_e_hat = 0.0;
  for (int tau = 0; tau <= horizon; ++tau) {
    double tv = 0.0;
    for (Eigen::Index r = 0; r < d; ++r) {
      tv = std::max(tv, 0.5 * (power.row(r).transpose() - out.stationary).cwiseAbs().sum());
    }
    if (tv >= 1e-12) {
      tv_by_tau.emplace_back(tau, tv);
      const double envelope = std::pow(out.rho_hat, tau);
      out.c_e_hat = std::max(out.c_e_hat, envelope > 0.0 ? tv / envelope : kInf);
    }
    power = power * chain;
  }
  for (const auto& [tau, tv] : tv_by_tau) {
    const double envelope = out.c_e_hat * std::pow(out.rho_hat, tau);
    out.max_envelope_ratio = std::max(out.max_envelope_ratio, envelope > 0.0 ? tv / envelope : kInf);
  }
  return out;
}

std::int64_t ConstantsLedger::tau(std::int64_t t) const {
  const double rho = in.rho_hat;
  if (rho <= 0.0) return 1;
  const double a = in.schedule(t);
  const double target = a * a;
  std::int64_t tau = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(std::log(target) / std::log(rho))));
  while (std::pow(rho, static_cast<double>(tau)) > target) ++tau;
  while (tau > 1 && std::pow(rho, static_cast<double>(tau - 1)) <= target) --tau;
  return tau;
}

ConstantsLedger build_ledger(const LedgerInputs& inputs) {
  if (!(inputs.beta_hat < 1.0)) {
    throw NotAContraction("build_ledger: beta_hat >= 1", inputs.beta_hat);
  }
  if (!(inputs.rho_hat >= 0.0 && inputs.rho_hat < 1.0)) {
    throw std::invalid_argument("build_ledger: rho_hat must lie in [0, 1)");
  }
  if (!(inputs.c_star_hat > 0.0) || inputs.n_agents < 1) {
    throw std::invalid_argument("build_ledger: C* must be positive and N >= 1");
  }
  ConstantsLedger l;
  l.in = inputs;
  const double beta = inputs.beta_hat;
  const double rho = inputs.rho_hat;
  const double mixing = inputs.c_e_hat * inputs.c_a / (1.0 - rho);

  double h = std::floor(mixing / (1.0 - beta)) + 1.0;
  while (h * (1.0 - beta) - mixing <= 0.0) h += 1.0;
  while (h > 1.0 && (h - 1.0) * (1.0 - beta) - mixing > 0.0) h -= 1.0;
  if (h > 2e9) throw std::invalid_argument("build_ledger: block size h overflows");
  l.block_h = static_cast<int>(h);
  l.beta_h = h * (1.0 - beta) - mixing;

  std::int64_t t = 0;
  while (t < 2 * l.tau(t)) {
    if (++t > 10'000'000'000LL) throw std::invalid_argument("build_ledger: t_* not found");
  }
  l.t_star = t;

  const double alpha = inputs.schedule.kind() == StepSchedule::Kind::PolynomialParameterFree
                           ? inputs.schedule.exponent()
                           : 1.0;
  const double one_minus_alpha = 1.0 - alpha;
  const double ca = inputs.c_a, cb = inputs.c_b, cs = inputs.c_star_hat;
  const double scale = cb + ca * inputs.p_q_star;

  l.c_gamma = (1.0 - beta) * ca * h * h * std::pow(1.0 + (1.0 - beta) * ca, h);
  l.k_gamma = 2.0 * l.c_gamma / (l.beta_h * one_minus_alpha);
  l.c1_noise = 4.0 * l.k_gamma * scale;
  l.c2_noise = 3.0 * l.c1_noise +
               4.0 * scale / (1.0 - rho) * (2.0 * l.c_gamma * std::exp(1.0 - beta) / (1.0 - beta));
  const double ts = static_cast<double>(l.t_star);
  l.c_delta = (inputs.p_delta0 + 4.0 * ts * scale) * std::exp(ts);
  const double log_inv_rho = -std::log(rho);  // +inf when rho = 0
  const double c_q = inputs.c_q_hat.value_or(kNaN);
  l.c2_nonlin = l.c2_noise + (2.0 * alpha / log_inv_rho + std::abs(std::log(inputs.c_e_hat) / log_inv_rho)) *
                                 2.0 * l.k_gamma * c_q / (inputs.n_agents * one_minus_alpha) *
                                 (cb / (cs * cs) + ca / cs);
  l.c1 = l.c1_noise;
  l.c2 = ts * l.c_delta +
         std::numbers::pi * std::numbers::pi * l.c_gamma / 6.0 *
             std::pow(2.0 / (std::numbers::e * l.beta_h), 2.0 / one_minus_alpha) +
         l.c2_nonlin;
  return l;
}

nlohmann::json to_json(const ConstantsLedger& l) {
  return {
      {"beta_hat", finite_or_null(l.in.beta_hat)},
      {"c_a", l.in.c_a},
      {"c_b", l.in.c_b},
      {"c_star_hat", finite_or_null(l.in.c_star_hat)},
      {"rho_hat", l.in.rho_hat},
      {"c_e_hat", finite_or_null(l.in.c_e_hat)},
      {"c_q_hat", l.in.c_q_hat ? finite_or_null(*l.in.c_q_hat) : nlohmann::json(nullptr)},
      {"schedule", l.in.schedule.describe()},
      {"n_agents", l.in.n_agents},
      {"p_q_star", l.in.p_q_star},
      {"p_delta0", l.in.p_delta0},
      {"block_h", l.block_h},
      {"beta_h", l.beta_h},
      {"t_star", l.t_star},
      {"tau_at_t_star", l.tau(l.t_star)},
      {"derived",
       {{"C_Gamma", finite_or_null(l.c_gamma)},
        {"K_Gamma", finite_or_null(l.k_gamma)},
        {"C1_noise", finite_or_null(l.c1_noise)},
        {"C2_noise", finite_or_null(l.c2_noise)},
        {"C_Delta", finite_or_null(l.c_delta)},
        {"C2_nonlin", finite_or_null(l.c2_nonlin)},
        {"C1", finite_or_null(l.c1)},
        {"C2", finite_or_null(l.c2)}}},
  };
}

A4Result check_a4(const AggregateTrace& trace, const ConstantsLedger& ledger) {
  A4Result out;
  for (const AggregatePoint& p : trace.points) {
    if (p.t <= ledger.t_star) continue;
    const double ratio = p.mean_raw_sq / (static_cast<double>(ledger.tau(p.t)) * ledger.in.schedule(p.t));
    out.ratios.emplace_back(p.t, ratio);
    out.c_q_hat = std::max(out.c_q_hat, ratio);
  }
  if (out.ratios.empty()) {
    out.note = "no checkpoints beyond t_*";
    return out;
  }
  const double t_last = static_cast<double>(out.ratios.back().first);
  std::vector<double> x, y;
  for (const auto& [t, ratio] : out.ratios) {
    if (static_cast<double>(t) * 10.0 < t_last) continue;
    x.push_back(std::log(static_cast<double>(t)));
    y.push_back(std::log(std::max(ratio, 1e-300)));
  }
  if (x.size() < 3) {
    out.note = "fewer than 3 checkpoints in the last decade";
    return out;
  }
  out.tail_slope = ols_slope(x, y);
  out.pass = std::isfinite(out.c_q_hat) && out.tail_slope <= kA4SlopeTolerance;
  if (!out.pass) out.note = "ratio still growing over the last decade";
  return out;
}

Vector nonlinear_residual(std::span<const LinearDecomposition> decomps, const Vector& q,
                          const Vector& q_star, std::span<const Sample> samples) {
  if (decomps.size() != samples.size() || decomps.empty()) {
    throw std::invalid_argument("nonlinear_residual: one sample per agent required");
  }
  Vector out = Vector::Zero(q.size());
  for (std::size_t i = 0; i < decomps.size(); ++i) {
    const LinearDecomposition& dec = decomps[i];
    out += (dec.b(q, samples[i]) - dec.b(q_star, samples[i])) +
           (dec.a(q, samples[i]) - dec.a(q_star, samples[i])) * q;
  }
  return out / static_cast<double>(decomps.size());
}

DecompositionTrace trace_decomposition(const RunSetup& setup, int replica_id, std::int64_t t_star) {
  setup.validate();
  const Mdp& shape = setup.fleet.front();
  const Eigen::Index d = shape.dim();
  if (d > kMaxTraceDim) throw std::invalid_argument("trace_decomposition: |S||A| exceeds 64");
  if (setup.total_iters > kMaxTraceIters) throw std::invalid_argument("trace_decomposition: T exceeds 10^4");
  if (t_star < 0) throw std::invalid_argument("trace_decomposition: t_star must be >= 0");

  const SemiNorm norm(setup.norm_kind, d);
  const bool exact = setup.mode == SamplingMode::ExactOperator;
  const bool avg = setup.variant.is_avg();
  const double n = static_cast<double>(setup.fleet.size());
  const Vector& q_star = setup.oracle.q_star;
  const Vector e_star = setup.oracle.e_star.size() == d ? setup.oracle.e_star : Vector::Zero(d);
  const Vector target = q_star + e_star;
  const GreedyPolicy pi_star = greedy(q_star, shape.num_states, shape.num_actions);

  std::vector<LinearDecomposition> decomps;
  std::vector<Vector> weights;
  for (const Mdp& m : setup.fleet) {
    decomps.emplace_back(m, setup.variant);
    if (avg) {
      weights.emplace_back();
    } else if (exact) {
      weights.push_back(Vector::Ones(d));
    } else {
      weights.push_back(stationary_distribution(state_action_chain(m, setup.behavior)));
    }
  }

  Vector b_star = Vector::Zero(d);
  Matrix a_star = Matrix::Zero(d, d);
  for (std::size_t i = 0; i < decomps.size(); ++i) {
    b_star += decomps[i].mean_b(q_star, weights[i], &pi_star);
    a_star += decomps[i].mean_a(q_star, weights[i], &pi_star);
  }
  b_star /= n;
  a_star /= n;

  DecompositionTrace tr;
  tr.t_star = t_star;
  tr.mean_field_residual = (b_star + a_star * q_star - target).cwiseAbs().maxCoeff();
  if (tr.mean_field_residual > 1e-8 * std::max(1.0, q_star.cwiseAbs().maxCoeff())) {
    throw InvalidInstance("trace_decomposition: Q* is not a fixed point of the mean-field operator (residual " +
                          std::to_string(tr.mean_field_residual) + ")");
  }

  const Matrix id = Matrix::Identity(d, d);
  const double inv_t = 1.0 / static_cast<double>(setup.total_iters);
  Vector init = setup.q0 - target;
  Vector noise = Vector::Zero(d);
  Vector nonlin = Vector::Zero(d);
  tr.trans = tr.init = tr.noise = tr.nonlin = Vector::Zero(d);
  Matrix gamma = id;
  tr.delta.push_back(setup.q0 - target);

  auto observer = [&](const IterationView& v) {
    Vector b_hat_star = Vector::Zero(d), b_hat_q = Vector::Zero(d);
    Matrix a_hat_star = Matrix::Zero(d, d), a_hat_q = Matrix::Zero(d, d);
    const GreedyPolicy pi_t = greedy(v.q, shape.num_states, shape.num_actions);
    for (std::size_t i = 0; i < decomps.size(); ++i) {
      if (exact) {
        b_hat_star += decomps[i].mean_b(q_star, weights[i], &pi_t);
        a_hat_star += decomps[i].mean_a(q_star, weights[i], &pi_t);
        b_hat_q += decomps[i].mean_b(v.q, weights[i], &pi_t);
        a_hat_q += decomps[i].mean_a(v.q, weights[i], &pi_t);
      } else {
        const Sample& y = v.samples[i];
        b_hat_star += decomps[i].b(q_star, y);
        a_hat_star += decomps[i].a(q_star, y);
        b_hat_q += decomps[i].b(v.q, y);
        a_hat_q += decomps[i].a(v.q, y);
      }
    }
    b_hat_star /= n;
    a_hat_star /= n;
    b_hat_q /= n;
    a_hat_q /= n;

    const Vector delta = v.q - target;
    const Vector omega = (b_hat_star - b_star) + (a_hat_star - a_star) * q_star + e_star;
    const Vector xi = (b_hat_q - b_hat_star) + (a_hat_q - a_hat_star) * v.q;
    const Matrix g = id - v.alpha * (id - a_hat_star);
    const Vector next = v.q_next - target;
    const Vector rhs = g * delta + v.alpha * omega + v.alpha * xi;
    tr.max_step_residual = std::max(tr.max_step_residual, (next - rhs).cwiseAbs().maxCoeff());

    tr.omega.push_back(omega);
    tr.xi.push_back(xi);
    tr.p_error.push_back(norm(v.q - q_star));
    tr.policy_matches.push_back(pi_t == pi_star);
    tr.delta.push_back(next);

    if (v.t < t_star) {
      tr.trans += delta * inv_t;
    } else {
      tr.init += init * inv_t;
      tr.noise += noise * inv_t;
      tr.nonlin += nonlin * inv_t;
    }
    init = g * init;
    noise = g * noise + v.alpha * omega;
    nonlin = g * nonlin + v.alpha * xi;
    gamma = g * gamma;
  };
  const RunTrace run_trace = run(setup, replica_id, observer);

  tr.delta_bar = run_trace.final_q_bar - target;
  tr.pr_residual = (tr.trans + tr.init + tr.noise + tr.nonlin - tr.delta_bar).cwiseAbs().maxCoeff();
  tr.p_gamma_total = norm.of_matrix(gamma);
  tr.gamma_residual = (gamma * tr.delta.front() - init).cwiseAbs().maxCoeff();

  if (!(tr.max_step_residual <= kStepIdentityTolerance)) {
    throw IdentityViolation("per-step error decomposition residual " + std::to_string(tr.max_step_residual),
                            tr.max_step_residual);
  }
  if (!(tr.pr_residual <= kPrIdentityTolerance)) {
    throw IdentityViolation("averaged error decomposition residual " + std::to_string(tr.pr_residual),
                            tr.pr_residual);
  }
  return tr;
}

XiBoundResult check_xi_bound(const DecompositionTrace& trace, const ConstantsLedger& ledger,
                             const SemiNorm& norm) {
  XiBoundResult out;
  const double cs = ledger.in.c_star_hat;
  out.factor = 2.0 * (ledger.in.c_a / cs + ledger.in.c_b / (cs * cs));
  for (std::size_t k = 0; k < trace.xi.size(); ++k) {
    const double pe = trace.p_error[k];
    const double pxi = norm(trace.xi[k]);
    if (pe < cs) {
      ++out.inside_steps;
      if (!trace.xi[k].isZero(0.0)) {
        out.pass = false;
        throw BoundViolation("xi is nonzero inside the C* ball at k = " + std::to_string(k),
                             static_cast<std::int64_t>(k));
      }
    }
    if (pe > 0.0) out.max_ratio = std::max(out.max_ratio, pxi / (pe * pe));
    if (pxi > out.factor * pe * pe * (1.0 + 1e-9) + 1e-12) {
      out.pass = false;
      throw BoundViolation("p(xi_k) exceeds the quadratic bound at k = " + std::to_string(k),
                           static_cast<std::int64_t>(k));
    }
  }
  return out;
}

nlohmann::json to_json(const MixingEstimate& m) {
  return {{"rho_hat", m.rho_hat},
          {"c_e_hat", finite_or_null(m.c_e_hat)},
          {"horizon", m.horizon},
          {"max_envelope_ratio", finite_or_null(m.max_envelope_ratio)},
          {"stationary", vector_json(m.stationary)}};
}

nlohmann::json to_json(const CStarEstimate& c) {
  return {{"directional", finite_or_null(c.directional)}, {"exact", c.exact}, {"value", c.value}};
}

nlohmann::json summary_json(const DecompositionTrace& t) {
  std::int64_t matches = 0;
  for (bool b : t.policy_matches) matches += b ? 1 : 0;
  return {{"steps", t.xi.size()},
          {"t_star", t.t_star},
          {"max_step_residual", t.max_step_residual},
          {"pr_residual", t.pr_residual},
          {"mean_field_residual", t.mean_field_residual},
          {"p_gamma_total", finite_or_null(t.p_gamma_total)},
          {"gamma_residual", t.gamma_residual},
          {"steps_with_optimal_policy", matches},
          {"components",
           {{"trans", vector_json(t.trans)},
            {"init", vector_json(t.init)},
            {"noise", vector_json(t.noise)},
            {"nonlin", vector_json(t.nonlin)},
            {"delta_bar", vector_json(t.delta_bar)}}}};
}

}  // namespace semiq
