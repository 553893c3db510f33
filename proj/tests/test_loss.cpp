#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coxmt/data.hpp"
#include "coxmt/loss.hpp"
#include "gradcheck.hpp"

using namespace coxmt;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

struct Instance {
  std::vector<double> times;
  std::vector<Status> status;
  std::vector<double> f;
};

Instance random_instance(std::mt19937_64& rng, std::size_t n, bool with_unlabeled = true) {
  std::uniform_int_distribution<int> t(1, 12), s(0, with_unlabeled ? 2 : 1);
  std::normal_distribution<double> f(0.0, 1.0);
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    auto st = static_cast<Status>(s(rng));
    in.status.push_back(st);
    in.times.push_back(st == Status::unlabeled ? 0.0 : static_cast<double>(t(rng)));
    in.f.push_back(f(rng));
  }
  in.status[0] = Status::event;
  in.times[0] = 3.0;
  return in;
}

double eval_ls(const std::vector<double>& f, const RiskSetIndex& rs) {
  Tape tape;
  return supervised_loss(tape.constant(Tensor(Shape{f.size()}, f)), rs).item();
}

}  // namespace

TEST(RiskSets, SmallCases) {
  RiskSetIndex rs(std::vector<double>{1, 2, 3}, std::vector<Status>(3, Status::event));
  ASSERT_EQ(rs.n_events(), 3u);
  EXPECT_EQ(rs.at_risk(0).size(), 3u);
  EXPECT_EQ(rs.at_risk(1).size(), 2u);
  EXPECT_EQ(rs.at_risk(2).size(), 1u);
  RiskSetIndex tie(std::vector<double>{2, 2}, std::vector<Status>(2, Status::event));
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(tie.at_risk(k).size(), 2u);
  EXPECT_THROW(RiskSetIndex(std::vector<double>{1, 2}, std::vector<Status>(2, Status::censored)), InvalidRiskSetError);
  EXPECT_THROW(RiskSetIndex(std::vector<double>{-1, 2}, std::vector<Status>(2, Status::event)), InvalidRiskSetError);
}

TEST(RiskSets, MatchPairwiseOracleAndAreMonotone) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 30; ++rep) {
    auto in = random_instance(rng, 40);
    RiskSetIndex rs(in.times, in.status);
    for (std::size_t k = 0; k < rs.n_events(); ++k) {
      const std::size_t i = rs.event_order()[k];
      std::set<std::size_t> expected;
      for (std::size_t j = 0; j < 40; ++j)
        if (in.status[j] != Status::unlabeled && in.times[j] >= in.times[i]) expected.insert(j);
      auto r = rs.at_risk(k);
      EXPECT_EQ(std::set<std::size_t>(r.begin(), r.end()), expected);
      EXPECT_TRUE(expected.count(i));
      if (k > 0) EXPECT_LE(in.times[rs.event_order()[k - 1]], in.times[i]);
    }
  }
}

TEST(SupervisedLoss, ClosedForms) {
  RiskSetIndex one(std::vector<double>{4}, std::vector<Status>{Status::event});
  EXPECT_EQ(eval_ls({1.7}, one), 0.0);
  RiskSetIndex two(std::vector<double>{1, 2}, std::vector<Status>{Status::event, Status::censored});
  EXPECT_NEAR(eval_ls({0.0, 0.0}, two), std::log(2.0), 1e-15);
  EXPECT_THROW(eval_ls({0.0}, two), InvalidRiskSetError);
}

TEST(SupervisedLoss, MatchesNaiveSumAndFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    auto in = random_instance(rng, 20);
    RiskSetIndex rs(in.times, in.status);
    std::vector<bool> ev, lab;
    for (auto s : in.status) ev.push_back(s == Status::event), lab.push_back(s != Status::unlabeled);
    EXPECT_NEAR(eval_ls(in.f, rs), oracle::neg_log_partial_likelihood(in.f, in.times, ev, lab), 1e-10);
    ParameterSet p;
    p.add("f", Tensor(Shape{20, 1}, in.f));
    EXPECT_LT(gradcheck::max_rel_error(p, [&](Tape&, std::span<const Var> v) { return supervised_loss(v[0], rs); }, rep), 1e-4);
  }
}

TEST(SupervisedLoss, ShiftInvariance) {
  std::mt19937_64 rng(3);
  auto in = random_instance(rng, 30);
  RiskSetIndex rs(in.times, in.status);
  auto shifted = in.f;
  for (double& v : shifted) v += 3.21;
  EXPECT_LT(std::abs(eval_ls(shifted, rs) - eval_ls(in.f, rs)), 1e-9);
}

TEST(SupervisedLoss, TruePredictorBeatsZeroPredictor) {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SyntheticConfig cfg;
    cfg.n_samples = 200;
    cfg.d = 5;
    cfg.seed = seed;
    auto c = generate_synthetic(cfg);
    RiskSetIndex rs(c.dataset.times_or(0.0), c.dataset.status);
    wins += eval_ls(c.linear_predictor, rs) < eval_ls(std::vector<double>(200, 0.0), rs);
  }
  EXPECT_GE(wins, 18);
}

TEST(ConsistencyLoss, ValuesGradientAndEmptyInput) {
  Tape tape;
  Var s = tape.constant(Tensor(Shape{2, 1}, std::vector<double>{1, 3}));
  EXPECT_DOUBLE_EQ(consistency_loss(s, std::vector<double>{0, 0}).item(), 5.0);
  EXPECT_DOUBLE_EQ(consistency_loss(s, std::vector<double>{1, 3}).item(), 0.0);
  EXPECT_THROW(consistency_loss(s, std::vector<double>{1}), DimensionError);

  ParameterSet p;
  p.add("s", Tensor(Shape{4, 1}, std::vector<double>{0.3, -1.0, 2.0, 0.5}));
  const std::vector<double> t{0.1, 0.2, -0.3, 0.5};
  p.zero_grad();
  {
    Tape tp;
    auto v = bind(tp, p, true);
    tp.backward(consistency_loss(v[0], t));
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(p[0].grad()[k], 2.0 * (p[0][k] - t[k]) / 4.0, 1e-15);
  EXPECT_LT(gradcheck::max_rel_error(p, [&](Tape&, std::span<const Var> v) { return consistency_loss(v[0], t); }), 1e-6);

  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string& m) { warnings.push_back(m); };
  Tape te;
  EXPECT_EQ(consistency_loss(te.constant(Tensor(Shape{0, 1})), std::vector<double>{}).item(), 0.0);
  warning_sink() = saved;
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(TotalLoss, WeightingAndGradientAdditivity) {
  Tape tape;
  LossConfig cfg;
  EXPECT_DOUBLE_EQ(total_loss(tape.scalar(0.7), tape.scalar(0.3), cfg).item(), 1.0);
  cfg.consistency_weight = 0.0;
  EXPECT_DOUBLE_EQ(total_loss(tape.scalar(0.7), tape.scalar(0.3), cfg).item(), 0.7);
  cfg.consistency_weight = -1.0;
  EXPECT_THROW(total_loss(tape.scalar(0.7), tape.scalar(0.3), cfg), ConfigError);

  std::mt19937_64 rng(4);
  auto in = random_instance(rng, 12);
  RiskSetIndex rs(in.times, in.status);
  const std::vector<double> teacher(12, 0.25);
  LossConfig w;
  w.consistency_weight = 0.6;
  auto grad_of = [&](int which) {
    ParameterSet p;
    p.add("f", Tensor(Shape{12, 1}, in.f));
    p.zero_grad();
    Tape t;
    auto v = bind(t, p, true);
    Var ls = supervised_loss(v[0], rs), lu = consistency_loss(v[0], teacher);
    t.backward(which == 0 ? ls : which == 1 ? lu : total_loss(ls, lu, w));
    return std::vector<double>(p[0].grad().begin(), p[0].grad().end());
  };
  const auto gs = grad_of(0), gu = grad_of(1), gt = grad_of(2);
  for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(gt[k], gs[k] + 0.6 * gu[k], 1e-14);
}

TEST(Minibatch, ContainsEventsAndMatchesFullBatchWithoutSubsampling) {
  std::mt19937_64 g(8);
  auto in = random_instance(g, 60);
  RiskSetIndex rs(in.times, in.status);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < 60; ++i)
    if (in.status[i] != Status::event) pool.push_back(i);
  LossConfig cfg;
  cfg.batch_mode = BatchMode::risk_set_minibatch;
  cfg.minibatch_events = 5;
  cfg.risk_controls_per_event = 4;
  cfg.consistency_samples = 7;
  Rng rng(1);
  auto mb = sample_minibatch(rs, pool, cfg, rng);
  ASSERT_EQ(mb.events.size(), 5u);
  EXPECT_EQ(mb.consistency.size(), 7u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_TRUE(std::binary_search(mb.risk_sets[k].begin(), mb.risk_sets[k].end(), mb.events[k]));
    EXPECT_LE(mb.risk_sets[k].size(), 4u);
  }
  for (auto i : mb.consistency) EXPECT_NE(in.status[i], Status::event);

  // No subsampling: minibatch loss over all events equals the full-batch loss.
  cfg.minibatch_events = rs.n_events();
  cfg.risk_controls_per_event = 1000;
  auto full = sample_minibatch(rs, pool, cfg, rng);
  Tape tape;
  Var f = tape.constant(Tensor(Shape{60}, in.f));
  EXPECT_NEAR(partial_likelihood_loss(f, full.events, full.risk_sets).item(), supervised_loss(f, rs).item(), 1e-12);

  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string& m) { warnings.push_back(m); };
  cfg.minibatch_events = rs.n_events() + 10;
  EXPECT_EQ(sample_minibatch(rs, pool, cfg, rng).events.size(), rs.n_events());
  warning_sink() = saved;
  EXPECT_EQ(warnings.size(), 1u);
  cfg.batch_mode = BatchMode::full_batch;
  EXPECT_THROW(sample_minibatch(rs, pool, cfg, rng), ConfigError);
}

TEST(Minibatch, SubsetLogSumIsUnbiasedAfterRescaling) {
  // E over uniform subsets of sum_{j in subset} exp f_j * |R|/m equals sum_R exp f_j;
  // the test checks the Monte-Carlo mean of the rescaled sum against the exact sum.
  std::mt19937_64 g(10);
  std::vector<double> times, f;
  std::vector<Status> st;
  std::normal_distribution<double> n(0, 0.5);
  for (int i = 0; i < 100; ++i) {
    times.push_back(1.0 + i);
    st.push_back(i % 4 == 0 ? Status::event : Status::censored);
    f.push_back(n(g));
  }
  RiskSetIndex rs(times, st);
  LossConfig cfg;
  cfg.batch_mode = BatchMode::risk_set_minibatch;
  cfg.minibatch_events = rs.n_events();
  cfg.risk_controls_per_event = 10;
  const std::size_t k0 = 0;  // earliest event, |R| = 100
  const std::size_t i0 = rs.event_order()[k0];
  double exact_others = 0.0;
  for (auto j : rs.at_risk(k0))
    if (j != i0) exact_others += std::exp(f[j]);
  Rng rng(2);
  double acc = 0.0;
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    auto mb = sample_minibatch(rs, {}, cfg, rng);
    double s = 0.0;
    for (auto j : mb.risk_sets[k0])
      if (j != i0) s += std::exp(f[j]);
    acc += s * 99.0 / 9.0;
  }
  EXPECT_NEAR(acc / draws, exact_others, 0.02 * exact_others);
}
