#include "semiq/engine.h"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "semiq/errors.h"
#include "semiq/mdp_io.h"
#include "semiq/parallel.h"
#include "semiq/rng.h"

namespace semiq {

namespace {

constexpr double kDivergenceBound = 1e9;

Matrix cumulative_rows(const Matrix& probs) {
  Matrix cdf(probs.rows(), probs.cols());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      acc += probs(r, c);
      cdf(r, c) = acc;
    }
  }
  return cdf;
}

// Row r of a column-major matrix is strided; copy it out for std::upper_bound.
int sample_row(CounterRng& rng, const Matrix& cdf, Eigen::Index row, std::vector<double>& scratch) {
  scratch.resize(static_cast<std::size_t>(cdf.cols()));
  for (Eigen::Index c = 0; c < cdf.cols(); ++c) scratch[static_cast<std::size_t>(c)] = cdf(row, c);
  return rng.categorical(scratch);
}

double state_max(const Mdp& mdp, const Vector& q, int s) {
  return q.segment(mdp.index(s, 0), mdp.num_actions).maxCoeff();
}

class Fnv1a {
 public:
  void add(const std::string& s) {
    for (unsigned char c : s) {
      h_ ^= c;
      h_ *= 0x100000001b3ULL;
    }
    h_ ^= 0xff;
    h_ *= 0x100000001b3ULL;
  }
  void add(double x) { add(hex_double(x)); }
  void add(std::int64_t x) { add(std::to_string(x)); }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace

StepSchedule StepSchedule::polynomial(double exponent) {
  if (!(exponent > 0.5 && exponent < 1.0)) {
    throw std::invalid_argument("StepSchedule: exponent must lie in (1/2, 1)");
  }
  return StepSchedule(Kind::PolynomialParameterFree, exponent, 0.0, 0.0);
}

StepSchedule StepSchedule::classic(double c, double offset) {
  if (!(c > 0.0)) throw std::invalid_argument("StepSchedule: classic constant must be positive");
  if (!(offset >= c)) throw std::invalid_argument("StepSchedule: classic offset must be >= c");
  return StepSchedule(Kind::Classic, 0.0, c, offset);
}

double StepSchedule::operator()(std::int64_t t) const {
  if (kind_ == Kind::PolynomialParameterFree) {
    return std::pow(static_cast<double>(t) + 1.0, -exponent_);
  }
  return c_ / (static_cast<double>(t) + offset_);
}

std::string StepSchedule::describe() const {
  std::ostringstream os;
  if (kind_ == Kind::PolynomialParameterFree) {
    os << "1/(t+1)^" << exponent_;
  } else {
    os << c_ << "/(t+" << offset_ << ")";
  }
  return os.str();
}

Vector local_update_avg_jstep(const Mdp& mdp, const Vector& q, const PathSample& y) {
  if (q.size() != mdp.dim()) throw std::invalid_argument("local_update_avg_jstep: Q has wrong length");
  if (y.j < 1 || y.states.size() != static_cast<std::size_t>(mdp.dim() * y.j)) {
    throw std::invalid_argument("local_update_avg_jstep: path map must hold a J-path per (s,a)");
  }
  const GreedyPolicy pi = greedy(q, mdp.num_states, mdp.num_actions);
  Vector out(mdp.dim());
  for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
    const auto path = y.path(sa);
    double value = mdp.rewards[sa];
    for (int k = 0; k + 1 < y.j; ++k) {
      const int s = path[static_cast<std::size_t>(k)];
      value += mdp.rewards[mdp.index(s, pi.action_of[s])];
    }
    const int last = path.back();
    out[sa] = value + q[mdp.index(last, pi.action_of[last])];
  }
  return out;
}

Vector local_update_disc_async(const Mdp& mdp, double gamma, const Vector& q,
                               const TransitionSample& y) {
  if (q.size() != mdp.dim()) throw std::invalid_argument("local_update_disc_async: Q has wrong length");
  Vector out = q;
  out[mdp.index(y.s, y.a)] = mdp.rewards[mdp.index(y.s, y.a)] + gamma * state_max(mdp, q, y.s_next);
  return out;
}

Vector local_update(const Mdp& mdp, const Variant& variant, const Vector& q, const Sample& y) {
  if (variant.is_avg()) {
    const auto& path = std::get<PathSample>(y);
    if (path.j != variant.j) throw std::invalid_argument("local_update: path length differs from J");
    return local_update_avg_jstep(mdp, q, path);
  }
  return local_update_disc_async(mdp, variant.gamma, q, std::get<TransitionSample>(y));
}

BehaviorPolicy BehaviorPolicy::uniform(int num_states, int num_actions) {
  return {Matrix::Constant(num_states, num_actions, 1.0 / num_actions)};
}

std::uint64_t agent_stream_key(std::uint64_t master_seed, int replica_id, int agent_id) {
  return stream_key({master_seed, static_cast<std::uint64_t>(replica_id),
                     static_cast<std::uint64_t>(agent_id), 0xa6e47ULL});
}

AgentSampler::AgentSampler(const Mdp& mdp, const Variant& variant, const BehaviorPolicy& behavior,
                           std::uint64_t key)
    : mdp_(&mdp),
      variant_(variant),
      transition_cdf_(cumulative_rows(mdp.transitions)),
      key_(key) {
  if (!variant.is_avg()) {
    const BehaviorPolicy mu = behavior.probs.size() == 0
                                  ? BehaviorPolicy::uniform(mdp.num_states, mdp.num_actions)
                                  : behavior;
    if (mu.probs.rows() != mdp.num_states || mu.probs.cols() != mdp.num_actions) {
      throw std::invalid_argument("AgentSampler: behaviour policy has wrong shape");
    }
    behavior_cdf_ = cumulative_rows(mu.probs);
    CounterRng init(stream_key({key_, ~0ULL}));
    current_state_ = static_cast<int>(init.below(static_cast<std::uint64_t>(mdp.num_states)));
  }
}

Sample AgentSampler::draw(std::int64_t t, const GreedyPolicy& pi_t) {
  Sample out;
  draw_into(t, pi_t, out);
  return out;
}

void AgentSampler::draw_into(std::int64_t t, const GreedyPolicy& pi_t, Sample& out) {
  CounterRng rng(stream_key({key_, static_cast<std::uint64_t>(t)}));
  thread_local std::vector<double> scratch;
  const Mdp& mdp = *mdp_;
  if (variant_.is_avg()) {
    if (!std::holds_alternative<PathSample>(out)) out = PathSample{};
    auto& y = std::get<PathSample>(out);
    y.j = variant_.j;
    y.states.resize(static_cast<std::size_t>(mdp.dim() * variant_.j));
    std::size_t k = 0;
    for (Eigen::Index sa = 0; sa < mdp.dim(); ++sa) {
      int s = sample_row(rng, transition_cdf_, sa, scratch);
      y.states[k++] = s;
      for (int step = 1; step < variant_.j; ++step) {
        s = sample_row(rng, transition_cdf_, mdp.index(s, pi_t.action_of[s]), scratch);
        y.states[k++] = s;
      }
    }
  } else {
    TransitionSample y;
    y.s = current_state_;
    y.a = sample_row(rng, behavior_cdf_, y.s, scratch);
    y.s_next = sample_row(rng, transition_cdf_, mdp.index(y.s, y.a), scratch);
    current_state_ = y.s_next;
    out = y;
  }
}

void RunSetup::validate() const {
  if (fleet.empty()) throw std::invalid_argument("RunSetup: empty fleet");
  variant.validate();
  const Eigen::Index d = fleet.front().dim();
  for (const Mdp& m : fleet) {
    if (m.num_states != fleet.front().num_states || m.num_actions != fleet.front().num_actions) {
      throw std::invalid_argument("RunSetup: fleet members disagree on |S| or |A|");
    }
  }
  if (q0.size() != d) throw std::invalid_argument("RunSetup: q0 has wrong length");
  if (total_iters < 1) throw std::invalid_argument("RunSetup: T must be >= 1");
  if (oracle.q_star.size() != d) throw std::invalid_argument("RunSetup: oracle has wrong dimension");
  std::int64_t prev = 0;
  for (std::int64_t t : checkpoints) {
    if (t <= prev || t > total_iters) {
      throw std::invalid_argument("RunSetup: checkpoints must be strictly increasing within [1, T]");
    }
    prev = t;
  }
}

std::string config_digest(const RunSetup& setup) {
  Fnv1a h;
  h.add(setup.variant.name());
  h.add(static_cast<std::int64_t>(setup.variant.j));
  h.add(setup.variant.gamma);
  h.add(setup.schedule.describe());
  h.add(setup.schedule.exponent());
  h.add(setup.schedule.c());
  h.add(setup.schedule.offset());
  h.add(setup.total_iters);
  h.add(static_cast<std::int64_t>(setup.master_seed));
  h.add(to_string(setup.norm_kind));
  h.add(static_cast<std::int64_t>(setup.mode));
  for (Eigen::Index i = 0; i < setup.q0.size(); ++i) h.add(setup.q0[i]);
  for (std::int64_t t : setup.checkpoints) h.add(t);
  for (Eigen::Index i = 0; i < setup.oracle.q_star.size(); ++i) h.add(setup.oracle.q_star[i]);
  for (const Mdp& m : setup.fleet) h.add(mdp_to_json(m).dump());
  for (Eigen::Index i = 0; i < setup.behavior.probs.size(); ++i) h.add(setup.behavior.probs.data()[i]);
  return h.hex();
}

RunTrace run(const RunSetup& setup, int replica_id, const IterationObserver& observer) {
  setup.validate();
  const Mdp& shape = setup.fleet.front();
  const SemiNorm norm(setup.norm_kind, shape.dim());
  const int n_agents = static_cast<int>(setup.fleet.size());
  const double inv_n = 1.0 / n_agents;
  const bool exact = setup.mode == SamplingMode::ExactOperator;
  const bool async = !setup.variant.is_avg();

  std::vector<AgentSampler> samplers;
  samplers.reserve(setup.fleet.size());
  for (int i = 0; i < n_agents; ++i) {
    samplers.emplace_back(setup.fleet[static_cast<std::size_t>(i)], setup.variant, setup.behavior,
                          agent_stream_key(setup.master_seed, replica_id, i));
  }
  std::vector<Sample> samples(exact ? 0 : setup.fleet.size());

  RunTrace trace;
  trace.config_digest = config_digest(setup);
  trace.checkpoints.reserve(setup.checkpoints.size());

  Vector q = setup.q0;
  Vector q_bar = setup.q0;
  Vector q_next(q.size());
  Vector increment(q.size());
  std::size_t next_checkpoint = 0;

  for (std::int64_t t = 0; t < setup.total_iters; ++t) {
    const double alpha = setup.schedule(t);
    increment.setZero();
    if (exact) {
      for (int i = 0; i < n_agents; ++i) {
        increment += bellman(setup.fleet[static_cast<std::size_t>(i)], setup.variant, q) - q;
      }
    } else {
      const GreedyPolicy pi = async ? GreedyPolicy{} : greedy(q, shape.num_states, shape.num_actions);
      for (int i = 0; i < n_agents; ++i) {
        const Mdp& mdp = setup.fleet[static_cast<std::size_t>(i)];
        Sample& y = samples[static_cast<std::size_t>(i)];
        samplers[static_cast<std::size_t>(i)].draw_into(t, pi, y);
        if (async) {
          // h_i - Q is nonzero only at the visited pair.
          const auto& tr = std::get<TransitionSample>(y);
          const Eigen::Index sa = mdp.index(tr.s, tr.a);
          increment[sa] += mdp.rewards[sa] + setup.variant.gamma * state_max(mdp, q, tr.s_next) - q[sa];
        } else {
          increment += local_update_avg_jstep(mdp, q, std::get<PathSample>(y)) - q;
        }
      }
    }
    q_next = q + (alpha * inv_n) * increment;

    const double size = q_next.cwiseAbs().maxCoeff();
    if (!std::isfinite(size) || size > kDivergenceBound) {
      throw NumericalDivergence("iterate diverged at t = " + std::to_string(t + 1), t + 1);
    }
    if (observer) observer(IterationView{t, alpha, q, q_next, samples});

    q_bar += (q - q_bar) / static_cast<double>(t + 1);
    q.swap(q_next);

    const std::int64_t now = t + 1;
    if (next_checkpoint < setup.checkpoints.size() && setup.checkpoints[next_checkpoint] == now) {
      trace.checkpoints.push_back(
          {now, norm(q - setup.oracle.q_star), norm(q_bar - setup.oracle.q_star)});
      ++next_checkpoint;
    }
  }
  trace.final_q = q;
  trace.final_q_bar = q_bar;
  return trace;
}

AggregateTrace aggregate(std::vector<RunTrace> replicas) {
  if (replicas.empty()) throw std::invalid_argument("aggregate: no replicas");
  AggregateTrace out;
  out.config_digest = replicas.front().config_digest;
  const std::size_t m = replicas.front().checkpoints.size();
  const double n = static_cast<double>(replicas.size());
  for (std::size_t c = 0; c < m; ++c) {
    double sum_raw = 0.0, sum_pr = 0.0, sum_sq = 0.0;
    for (const RunTrace& r : replicas) {
      if (r.checkpoints.size() != m || r.checkpoints[c].t != replicas.front().checkpoints[c].t) {
        throw std::invalid_argument("aggregate: replicas have different checkpoint grids");
      }
      sum_raw += r.checkpoints[c].p_raw_error;
      sum_pr += r.checkpoints[c].p_pr_error;
      sum_sq += r.checkpoints[c].p_raw_error * r.checkpoints[c].p_raw_error;
    }
    AggregatePoint p{};
    p.t = replicas.front().checkpoints[c].t;
    p.mean_raw = sum_raw / n;
    p.mean_pr = sum_pr / n;
    p.mean_raw_sq = sum_sq / n;
    if (replicas.size() > 1) {
      double var_raw = 0.0, var_pr = 0.0;
      for (const RunTrace& r : replicas) {
        var_raw += std::pow(r.checkpoints[c].p_raw_error - p.mean_raw, 2);
        var_pr += std::pow(r.checkpoints[c].p_pr_error - p.mean_pr, 2);
      }
      p.se_raw = std::sqrt(var_raw / (n - 1.0) / n);
      p.se_pr = std::sqrt(var_pr / (n - 1.0) / n);
    }
    out.points.push_back(p);
  }
  out.replicas = std::move(replicas);
  return out;
}

AggregateTrace run_replicated(const RunSetup& setup, int replicas, int threads) {
  if (replicas < 1) throw std::invalid_argument("run_replicated: replicas must be >= 1");
  setup.validate();
  std::vector<RunTrace> traces(static_cast<std::size_t>(replicas));
  parallel_for(replicas, threads, [&](int r) {
    try {
      traces[static_cast<std::size_t>(r)] = run(setup, r);
    } catch (const NumericalDivergence& e) {
      throw NumericalDivergence(std::string(e.what()) + " in replica " + std::to_string(r), e.t(), r);
    }
  });
  return aggregate(std::move(traces));
}

std::string format_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_trace_csv(std::ostream& out, const RunTrace& trace) {
  out << "t,p_raw_error,p_pr_error\n";
  for (const Checkpoint& c : trace.checkpoints) {
    out << c.t << ',' << format_real(c.p_raw_error) << ',' << format_real(c.p_pr_error) << '\n';
  }
}

void write_aggregate_csv(std::ostream& out, const AggregateTrace& trace) {
  out << "t,mean_raw,se_raw,mean_pr,se_pr\n";
  for (const AggregatePoint& p : trace.points) {
    out << p.t << ',' << format_real(p.mean_raw) << ',' << format_real(p.se_raw) << ','
        << format_real(p.mean_pr) << ',' << format_real(p.se_pr) << '\n';
  }
}

AggregateTrace read_aggregate_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,mean_raw,se_raw,mean_pr,se_pr", 0) != 0) {
    throw std::invalid_argument("aggregate CSV: missing header t,mean_raw,se_raw,mean_pr,se_pr");
  }
  AggregateTrace trace;
  std::int64_t prev = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    AggregatePoint p{};
    long long t = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf,%lf", &t, &p.mean_raw, &p.se_raw, &p.mean_pr,
                    &p.se_pr) != 5) {
      throw std::invalid_argument("aggregate CSV: malformed row \"" + line + "\"");
    }
    p.t = t;
    if (p.t <= prev) throw std::invalid_argument("aggregate CSV: t must be strictly increasing");
    prev = p.t;
    p.mean_raw_sq = p.mean_raw * p.mean_raw;
    trace.points.push_back(p);
  }
  return trace;
}

}  // namespace semiq
