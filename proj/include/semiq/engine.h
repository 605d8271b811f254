#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "semiq/mdp.h"
#include "semiq/seminorm.h"

namespace semiq {

class StepSchedule {
 public:
  enum class Kind { PolynomialParameterFree, Classic };

  // alpha_t = 1 / (t + 1)^exponent, exponent in (1/2, 1).
  static StepSchedule polynomial(double exponent);
  // alpha_t = c / (t + offset), requires 0 < c <= offset so alpha_0 <= 1.
  static StepSchedule classic(double c, double offset);

  double operator()(std::int64_t t) const;

  Kind kind() const { return kind_; }
  double exponent() const { return exponent_; }
  double c() const { return c_; }
  double offset() const { return offset_; }
  std::string describe() const;

 private:
  StepSchedule(Kind kind, double exponent, double c, double offset)
      : kind_(kind), exponent_(exponent), c_(c), offset_(offset) {}

  Kind kind_;
  double exponent_;
  double c_;
  double offset_;
};

// One J-step path per state-action pair: states[(s*|A| + a) * j + k] is s_{k+1}.
struct PathSample {
  int j = 1;
  std::vector<int> states;

  std::span<const int> path(Eigen::Index sa) const {
    return std::span<const int>(states).subspan(static_cast<std::size_t>(sa * j),
                                                static_cast<std::size_t>(j));
  }
};

struct TransitionSample {
  int s = 0;
  int a = 0;
  int s_next = 0;
};

using Sample = std::variant<PathSample, TransitionSample>;

// h(Q,y)(s,a) = R(s,a) + sum_{k=1}^{J-1} R(s_k, pi_Q(s_k)) + max_a' Q(s_J, a').
Vector local_update_avg_jstep(const Mdp& mdp, const Vector& q, const PathSample& y);

// Q with the (s,a) entry replaced by R(s,a) + gamma max_a' Q(s', a').
Vector local_update_disc_async(const Mdp& mdp, double gamma, const Vector& q,
                               const TransitionSample& y);

Vector local_update(const Mdp& mdp, const Variant& variant, const Vector& q, const Sample& y);

// Stochastic behaviour policy mu(a|s) for asynchronous sampling; |S| x |A|.
struct BehaviorPolicy {
  Matrix probs;
  static BehaviorPolicy uniform(int num_states, int num_actions);
};

std::uint64_t agent_stream_key(std::uint64_t master_seed, int replica_id, int agent_id);

// Draws y_t for one agent. J-step mode draws fresh paths for every (s,a)
// following the supplied greedy policy; trajectory mode advances a single
// Markov chain under the behaviour policy. Iteration t uses the stream
// (agent key, t), so draws do not depend on how work is scheduled.
class AgentSampler {
 public:
  AgentSampler(const Mdp& mdp, const Variant& variant, const BehaviorPolicy& behavior,
               std::uint64_t key);

  Sample draw(std::int64_t t, const GreedyPolicy& pi_t);
  void draw_into(std::int64_t t, const GreedyPolicy& pi_t, Sample& out);

  int current_state() const { return current_state_; }

 private:
  const Mdp* mdp_;
  Variant variant_;
  Matrix transition_cdf_;  // row-wise cumulative P
  Matrix behavior_cdf_;    // row-wise cumulative mu
  std::uint64_t key_;
  int current_state_ = 0;
};

enum class SamplingMode {
  Stochastic,
  // Test hook: h_i(Q, y) is replaced by the exact operator T_i(Q).
  ExactOperator,
};

struct RunSetup {
  Fleet fleet;
  Variant variant;
  StepSchedule schedule = StepSchedule::polynomial(0.7);
  Vector q0;
  std::int64_t total_iters = 1;
  std::vector<std::int64_t> checkpoints;  // strictly increasing, within [1, T]
  FixedPointOracle oracle;
  SemiNormKind norm_kind = SemiNormKind::Sup;
  BehaviorPolicy behavior;  // empty means uniform
  std::uint64_t master_seed = 0;
  SamplingMode mode = SamplingMode::Stochastic;

  void validate() const;
};

// Everything about iteration t, exposed to observers before Q_{t+1} replaces Q_t.
struct IterationView {
  std::int64_t t;
  double alpha;
  const Vector& q;       // Q_t
  const Vector& q_next;  // Q_{t+1}
  std::span<const Sample> samples;  // y_t^i in agent order; empty in exact mode
};

using IterationObserver = std::function<void(const IterationView&)>;

struct Checkpoint {
  std::int64_t t;
  double p_raw_error;
  double p_pr_error;
};

struct RunTrace {
  std::vector<Checkpoint> checkpoints;
  Vector final_q;
  Vector final_q_bar;
  std::string config_digest;
};

// Stable 64-bit FNV-1a digest of the run configuration, as 16 hex digits.
std::string config_digest(const RunSetup& setup);

// Q_{t+1} = Q_t + alpha_t [(1/N) sum_i h_i(Q_t, y_t^i) - Q_t] and the
// Polyak-Ruppert mean Qbar_{t+1} = Qbar_t + (Q_t - Qbar_t) / (t + 1), Qbar_0 = Q_0.
// Throws NumericalDivergence when an iterate is non-finite or exceeds 1e9.
RunTrace run(const RunSetup& setup, int replica_id, const IterationObserver& observer = {});

struct AggregatePoint {
  std::int64_t t;
  double mean_raw;
  double se_raw;
  double mean_pr;
  double se_pr;
  double mean_raw_sq;  // mean of p(Q_t - Q*)^2, used by the A4 check
};

struct AggregateTrace {
  std::vector<AggregatePoint> points;
  std::vector<RunTrace> replicas;
  std::string config_digest;
};

// Replica-wise mean and standard error, summed in replica order.
AggregateTrace aggregate(std::vector<RunTrace> replicas);

// Runs replica ids 0..replicas-1 on up to `threads` workers. The result does
// not depend on `threads`. A divergence is rethrown with its replica id.
AggregateTrace run_replicated(const RunSetup& setup, int replicas, int threads = 1);

void write_trace_csv(std::ostream& out, const RunTrace& trace);
void write_aggregate_csv(std::ostream& out, const AggregateTrace& trace);
AggregateTrace read_aggregate_csv(std::istream& in);

std::string format_real(double x);

}  // namespace semiq
