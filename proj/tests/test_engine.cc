#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.h"
#include "semiq/engine.h"
#include "semiq/errors.h"
#include "semiq/rng.h"

namespace semiq {
namespace {

std::vector<std::int64_t> every_step(std::int64_t total) {
  std::vector<std::int64_t> out;
  for (std::int64_t t = 1; t <= total; ++t) out.push_back(t);
  return out;
}

RunSetup make_setup(const Mdp& base, const Variant& v, int n_agents, std::int64_t total, std::uint64_t seed) {
  RunSetup s;
  s.fleet = Fleet(static_cast<std::size_t>(n_agents), base);
  s.variant = v;
  s.q0 = Vector::Zero(base.dim());
  s.total_iters = total;
  s.checkpoints = {1, total};
  if (total == 1) s.checkpoints = {1};
  s.norm_kind = v.natural_seminorm();
  s.master_seed = seed;
  SolveOptions opts;
  opts.tol = 1e-12;
  s.oracle = solve_fixed_point(s.fleet, v, SemiNorm(s.norm_kind, base.dim()), opts);
  return s;
}

TEST(StepSchedule, PolynomialAndClassic) {
  const StepSchedule poly = StepSchedule::polynomial(0.7);
  EXPECT_EQ(poly(0), 1.0);
  EXPECT_NEAR(poly(9), std::pow(10.0, -0.7), 1e-15);
  double prev = 2.0;
  for (std::int64_t t = 0; t < 100000; t += 37) {
    const double a = poly(t);
    EXPECT_GT(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_LT(a, prev);
    prev = a;
  }
  const StepSchedule classic = StepSchedule::classic(2.0, 4.0);
  EXPECT_EQ(classic(0), 0.5);
  EXPECT_EQ(classic(4), 0.25);
  EXPECT_THROW(StepSchedule::polynomial(0.5), std::invalid_argument);
  EXPECT_THROW(StepSchedule::polynomial(1.0), std::invalid_argument);
  EXPECT_THROW(StepSchedule::classic(2.0, 1.0), std::invalid_argument);
}

TEST(LocalUpdate, AverageRewardClosedForms) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 1);
  std::mt19937_64 gen(4);
  const Vector q = testing::random_vector(gen, 6);
  PathSample y;
  y.j = 1;
  y.states = {2, 0, 1, 1, 0, 2};
  const Vector h = local_update_avg_jstep(m, q, y);
  for (Eigen::Index sa = 0; sa < 6; ++sa) {
    const int s1 = y.states[static_cast<std::size_t>(sa)];
    EXPECT_EQ(h[sa], m.rewards[sa] + std::max(q[2 * s1], q[2 * s1 + 1]));
  }
  Mdp zero = m;
  zero.rewards.setZero();
  y.j = 2;
  y.states.assign(12, 1);
  EXPECT_EQ(local_update_avg_jstep(zero, Vector::Zero(6), y), Vector::Zero(6));
  y.states.resize(5);
  EXPECT_THROW(local_update_avg_jstep(m, q, y), std::invalid_argument);
}

TEST(LocalUpdate, DiscountedWritesOneCoordinate) {
  Mdp m = generate_mdp(3, 2, 0.2, 1.0, 2);
  m.rewards[m.index(1, 0)] = 0.3;
  const Vector h = local_update_disc_async(m, 0.9, Vector::Zero(6), {1, 0, 2});
  Vector expected = Vector::Zero(6);
  expected[m.index(1, 0)] = 0.3;
  EXPECT_EQ(h, expected);

  std::mt19937_64 gen(5);
  const Vector q = testing::random_vector(gen, 6);
  // gamma = 0 is outside the variant's admissible range, but the update rule
  // itself degenerates cleanly.
  for (int s2 = 0; s2 < 3; ++s2) {
    EXPECT_EQ(local_update_disc_async(m, 0.0, q, {2, 1, s2})[m.index(2, 1)], m.rewards[m.index(2, 1)]);
  }
}

TEST(AgentSampler, GenerativeMarginalsPassChiSquare) {
  const Mdp m = generate_mdp(4, 2, 0.2, 1.0, 3);
  AgentSampler sampler(m, Variant::jstep(1), {}, agent_stream_key(1, 0, 0));
  const GreedyPolicy pi = greedy(Vector::Zero(8), 4, 2);
  const int draws = 100000;
  Matrix counts = Matrix::Zero(8, 4);
  Sample y;
  for (int t = 0; t < draws; ++t) {
    sampler.draw_into(t, pi, y);
    const auto& path = std::get<PathSample>(y);
    for (Eigen::Index sa = 0; sa < 8; ++sa) counts(sa, path.path(sa)[0]) += 1.0;
  }
  // 99.9% quantile of chi-square with 3 degrees of freedom.
  constexpr double kCritical = 16.266;
  for (Eigen::Index sa = 0; sa < 8; ++sa) {
    double chi2 = 0.0;
    for (int s = 0; s < 4; ++s) {
      const double expected = draws * m.transitions(sa, s);
      chi2 += (counts(sa, s) - expected) * (counts(sa, s) - expected) / expected;
    }
    EXPECT_LT(chi2, kCritical) << "row " << sa;
  }
}

TEST(AgentSampler, JStepExpectationMatchesOperator) {
  const Mdp m = generate_mdp(4, 2, 0.2, 1.0, 1);
  const Variant v = Variant::jstep(4);
  std::mt19937_64 gen(9);
  const Vector q = testing::random_vector(gen, 8, -2, 2);
  const GreedyPolicy pi = greedy(q, 4, 2);
  AgentSampler sampler(m, v, {}, agent_stream_key(2, 0, 0));
  const int n = 100000;
  Vector sum = Vector::Zero(8), sum_sq = Vector::Zero(8);
  Sample y;
  for (int t = 0; t < n; ++t) {
    sampler.draw_into(t, pi, y);
    const Vector h = local_update(m, v, q, y);
    sum += h;
    sum_sq += h.cwiseProduct(h);
  }
  const Vector mean = sum / n;
  const Vector se = ((sum_sq / n - mean.cwiseProduct(mean)) / (n - 1)).cwiseSqrt();
  const Vector exact = bellman_jstep_differential(m, 4, q);
  for (Eigen::Index i = 0; i < 8; ++i) EXPECT_LE(std::abs(mean[i] - exact[i]), 3.0 * se[i]) << "coordinate " << i;
}

TEST(AgentSampler, TrajectoryAverageMatchesStationaryMeanField) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 4);
  const double gamma = 0.8;
  const Variant v = Variant::discounted(gamma);
  std::mt19937_64 gen(10);
  const Vector q = testing::random_vector(gen, 6, -1, 1);
  AgentSampler sampler(m, v, {}, agent_stream_key(3, 0, 0));
  const GreedyPolicy pi = greedy(q, 3, 2);
  const int n = 1000000;
  Vector sum = Vector::Zero(6);
  Sample y;
  for (int t = 0; t < n; ++t) {
    sampler.draw_into(t, pi, y);
    sum += local_update(m, v, q, y) - q;
  }
  const Vector d = testing::stationary_by_power(testing::sa_chain(m, Matrix::Constant(3, 2, 0.5)));
  const Vector expected = d.cwiseProduct(bellman_discounted(m, gamma, q) - q);
  EXPECT_LE((sum / n - expected).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Run, FirstStepUnrolled) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 1);
  for (const Variant& v : {Variant::jstep(3), Variant::discounted(0.9)}) {
    RunSetup s = make_setup(m, v, 2, 1, 5);
    std::mt19937_64 gen(1);
    s.q0 = testing::random_vector(gen, 6);
    Vector expected;
    const RunTrace tr = run(s, 0, [&](const IterationView& view) {
      ASSERT_EQ(view.t, 0);
      EXPECT_EQ(view.alpha, 1.0);
      ASSERT_EQ(view.samples.size(), 2u);
      expected = 0.5 * (local_update(m, v, s.q0, view.samples[0]) + local_update(m, v, s.q0, view.samples[1]));
    });
    EXPECT_NEAR((tr.final_q - expected).cwiseAbs().maxCoeff(), 0.0, 1e-15);
    EXPECT_EQ(tr.final_q_bar, s.q0);
  }
}

TEST(Run, PolyakRuppertRecursionIsArithmeticMean) {
  const Mdp m = generate_mdp(4, 2, 0.2, 1.0, 2);
  for (const Variant& v : {Variant::jstep(4), Variant::discounted(0.9)}) {
    const RunSetup s = make_setup(m, v, 1, 100, 3);
    Vector sum = Vector::Zero(8);
    const RunTrace tr = run(s, 0, [&](const IterationView& view) { sum += view.q; });
    const Vector mean = sum / 100.0;
    EXPECT_LE((tr.final_q_bar - mean).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, mean.cwiseAbs().maxCoeff()));
  }
}

TEST(Run, ExactOperatorConvergesDeterministically) {
  const Mdp m = generate_mdp(4, 2, 0.2, 1.0, 1);
  RunSetup s = make_setup(m, Variant::jstep(4), 1, 10000, 0);
  s.mode = SamplingMode::ExactOperator;
  s.checkpoints = {10, 100, 1000, 10000};
  const RunTrace tr = run(s, 0);
  EXPECT_LE(tr.checkpoints.back().p_raw_error, 1e-6);
  for (std::size_t i = 1; i < tr.checkpoints.size(); ++i) {
    EXPECT_LE(tr.checkpoints[i].p_raw_error, tr.checkpoints[i - 1].p_raw_error + 1e-15);
  }
}

TEST(Run, AverageRewardIsInsensitiveToConstantShifts) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 6);
  RunSetup a = make_setup(m, Variant::jstep(3), 2, 300, 8);
  a.checkpoints = every_step(300);
  RunSetup b = a;
  b.q0 = a.q0 + Vector::Constant(6, 4.0);
  std::vector<GreedyPolicy> pa, pb;
  const RunTrace ta = run(a, 0, [&](const IterationView& v) { pa.push_back(greedy(v.q, 3, 2)); });
  const RunTrace tb = run(b, 0, [&](const IterationView& v) { pb.push_back(greedy(v.q, 3, 2)); });
  EXPECT_EQ(pa, pb);
  for (std::size_t i = 0; i < ta.checkpoints.size(); ++i) {
    EXPECT_NEAR(ta.checkpoints[i].p_raw_error, tb.checkpoints[i].p_raw_error, 1e-12);
    EXPECT_NEAR(ta.checkpoints[i].p_pr_error, tb.checkpoints[i].p_pr_error, 1e-12);
  }
}

TEST(Run, DivergenceReportsReplica) {
  // Rewards far above the divergence bound make the first iterate explode.
  const Mdp m = generate_mdp(3, 2, 0.2, 1e12, 1);
  const RunSetup s = make_setup(m, Variant::discounted(0.5), 1, 50, 0);
  try {
    run_replicated(s, 3, 2);
    FAIL() << "expected NumericalDivergence";
  } catch (const NumericalDivergence& e) {
    EXPECT_GE(e.replica_id(), 0);
    EXPECT_LT(e.replica_id(), 3);
    EXPECT_GE(e.t(), 1);
  }
}

TEST(Run, RejectsInvalidSetups) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 1);
  RunSetup s = make_setup(m, Variant::discounted(0.9), 1, 10, 0);
  s.checkpoints = {5, 3};
  EXPECT_THROW(run(s, 0), std::invalid_argument);
  s.checkpoints = {11};
  EXPECT_THROW(run(s, 0), std::invalid_argument);
  s = make_setup(m, Variant::discounted(0.9), 1, 10, 0);
  s.q0 = Vector::Zero(3);
  EXPECT_THROW(run(s, 0), std::invalid_argument);
}

std::string aggregate_csv(const AggregateTrace& agg) {
  std::ostringstream os;
  write_aggregate_csv(os, agg);
  for (const RunTrace& r : agg.replicas) write_trace_csv(os, r);
  return os.str();
}

TEST(RunReplicated, IndependentOfThreadCount) {
  const Mdp m = generate_mdp(4, 2, 0.2, 1.0, 3);
  for (const Variant& v : {Variant::jstep(4), Variant::discounted(0.8)}) {
    RunSetup s = make_setup(m, v, 3, 2000, 11);
    s.checkpoints = {10, 100, 1000, 2000};
    const std::string one = aggregate_csv(run_replicated(s, 6, 1));
    EXPECT_EQ(one, aggregate_csv(run_replicated(s, 6, 4)));
    EXPECT_EQ(one, aggregate_csv(run_replicated(s, 6, 8)));
    EXPECT_EQ(one, aggregate_csv(run_replicated(s, 6, 1)));
  }
}

TEST(RunReplicated, SingleReplicaHasZeroStandardError) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 3);
  const RunSetup s = make_setup(m, Variant::discounted(0.8), 1, 500, 2);
  const AggregateTrace agg = run_replicated(s, 1, 1);
  const RunTrace single = run(s, 0);
  ASSERT_EQ(agg.points.size(), single.checkpoints.size());
  for (std::size_t i = 0; i < agg.points.size(); ++i) {
    EXPECT_EQ(agg.points[i].mean_raw, single.checkpoints[i].p_raw_error);
    EXPECT_EQ(agg.points[i].mean_pr, single.checkpoints[i].p_pr_error);
    EXPECT_EQ(agg.points[i].se_raw, 0.0);
    EXPECT_EQ(agg.points[i].se_pr, 0.0);
  }
}

TEST(RunReplicated, DifferentSeedsDiffer) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 3);
  const RunSetup a = make_setup(m, Variant::discounted(0.8), 1, 500, 2);
  RunSetup b = a;
  b.master_seed = 3;
  EXPECT_NE(run_replicated(a, 2).points.back().mean_raw, run_replicated(b, 2).points.back().mean_raw);
  EXPECT_NE(config_digest(a), config_digest(b));
  EXPECT_EQ(config_digest(a), config_digest(a));
  EXPECT_EQ(config_digest(a).size(), 16u);
}

TEST(AggregateCsv, HeaderAndRoundTrip) {
  const Mdp m = generate_mdp(3, 2, 0.2, 1.0, 3);
  RunSetup s = make_setup(m, Variant::discounted(0.8), 1, 1000, 2);
  s.checkpoints = {1, 10, 100, 1000};
  const AggregateTrace agg = run_replicated(s, 4);
  std::ostringstream os;
  write_aggregate_csv(os, agg);
  EXPECT_EQ(os.str().rfind("t,mean_raw,se_raw,mean_pr,se_pr\n", 0), 0u);
  std::istringstream is(os.str());
  const AggregateTrace back = read_aggregate_csv(is);
  ASSERT_EQ(back.points.size(), agg.points.size());
  for (std::size_t i = 0; i < agg.points.size(); ++i) {
    EXPECT_EQ(back.points[i].t, agg.points[i].t);
    EXPECT_EQ(back.points[i].mean_pr, agg.points[i].mean_pr);
    EXPECT_EQ(back.points[i].se_raw, agg.points[i].se_raw);
  }
  std::istringstream bad("t,foo\n1,2\n");
  EXPECT_THROW(read_aggregate_csv(bad), std::invalid_argument);
}

TEST(CounterRng, StreamsAreReproducibleAndUniform) {
  CounterRng a(stream_key({1, 2, 3})), b(stream_key({1, 2, 3}));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(stream_key({1, 2, 3}), stream_key({3, 2, 1}));
  CounterRng c(42);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = c.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.005);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(c.below(7), 7u);
}

}  // namespace
}  // namespace semiq
