#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coxmt/data.hpp"
#include "coxmt/metrics.hpp"
#include "oracles.hpp"

using namespace coxmt;

TEST(CIndex, ClosedForms) {
  const std::vector<double> t{1, 2, 3, 4};
  const std::vector<bool> e(4, true);
  EXPECT_DOUBLE_EQ(concordance_index(std::vector<double>{4, 3, 2, 1}, t, e), 1.0);
  EXPECT_DOUBLE_EQ(concordance_index(std::vector<double>{1, 2, 3, 4}, t, e), 0.0);
  EXPECT_DOUBLE_EQ(concordance_index(std::vector<double>(4, 0.3), t, e), 0.5);
  EXPECT_THROW(concordance_index(std::vector<double>{1, 2}, std::vector<double>{1, 2}, std::vector<bool>{false, true}), UndefinedMetricError);
  EXPECT_THROW(concordance_index(std::vector<double>{1}, t, e), DimensionError);
}

TEST(CIndex, MatchesPairEnumeration) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    auto s = oracle::random_sample(rng, 2 + rep % 49);
    double expected;
    try {
      expected = oracle::cindex(s.risk, s.times, s.events);
    } catch (...) {
      continue;
    }
    if (std::isnan(expected)) {
      EXPECT_THROW(concordance_index(s.risk, s.times, s.events), UndefinedMetricError);
      continue;
    }
    EXPECT_NEAR(concordance_index(s.risk, s.times, s.events), expected, 1e-12);
  }
}

TEST(CIndex, RankInvarianceAndComplement) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  std::vector<double> risk, t;
  std::vector<bool> e;
  for (int i = 0; i < 60; ++i) risk.push_back(n(rng)), t.push_back(std::abs(n(rng)) + 0.1), e.push_back(i % 3 != 0);
  const double c = concordance_index(risk, t, e);
  std::vector<double> mono, neg;
  for (double r : risk) mono.push_back(std::exp(3 * r) + 7), neg.push_back(-r);
  EXPECT_EQ(concordance_index(mono, t, e), c);
  EXPECT_NEAR(concordance_index(neg, t, e) + c, 1.0, 1e-12);
}

TEST(Breslow, ClosedFormsAndNelsonAalen) {
  const std::vector<double> t{1, 2, 3, 4, 5};
  auto h = breslow_cumhaz(std::vector<double>(5, 0.0), t, std::vector<bool>{true, false, false, false, false});
  EXPECT_DOUBLE_EQ(h(1.0), 1.0 / 5.0);
  EXPECT_EQ(h(0.5), 0.0);
  auto na = breslow_cumhaz(std::vector<double>(5, 0.0), t, std::vector<bool>(5, true));
  double expected = 0.0;
  for (int i = 1; i <= 5; ++i) {
    expected += 1.0 / (5 - i + 1);
    EXPECT_NEAR(na(static_cast<double>(i)), expected, 1e-15);
  }
  EXPECT_THROW(breslow_cumhaz(std::vector<double>(2, 0.0), std::vector<double>{1, 2}, std::vector<bool>(2, false)), UndefinedMetricError);
}

TEST(Breslow, MatchesNaiveSumAndShiftCovariance) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    auto s = oracle::random_sample(rng, 2 + rep % 49);
    auto h = breslow_cumhaz(s.risk, s.times, s.events);
    auto shifted = s.risk;
    for (double& v : shifted) v += 0.7;
    auto hs = breslow_cumhaz(shifted, s.times, s.events);
    for (double q = 0.5; q <= 16.0; q += 0.5) {
      ASSERT_NEAR(h(q), oracle::breslow(s.risk, s.times, s.events, q), 1e-10);
      ASSERT_NEAR(hs(q), std::exp(-0.7) * h(q), 1e-10);
    }
    for (std::size_t k = 1; k < h.cumhaz.size(); ++k) EXPECT_GE(h.cumhaz[k], h.cumhaz[k - 1]);
  }
}

TEST(Survival, PointwiseFormula) {
  EXPECT_EQ(survival_at(0.0, 5.0), 1.0);
  EXPECT_LT(survival_at(0.1, 20.0), 1e-6);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> H(0, 3), f(-3, 3);
  for (int k = 0; k < 50; ++k) {
    const double h = H(rng), x = f(rng);
    EXPECT_NEAR(survival_at(h, x), std::exp(-h * std::exp(x)), 1e-12);
  }
  BaselineHazard h0{{1, 2, 3}, {0.1, 0.3, 0.6}};
  auto c = predict_survival(0.2, h0, std::vector<double>{0, 1, 1.5, 2, 3, 4});
  EXPECT_EQ(c.values.front(), 1.0);
  for (std::size_t k = 1; k < c.values.size(); ++k) EXPECT_LE(c.values[k], c.values[k - 1]);
}

TEST(KaplanMeier, ClosedFormsAndOracle) {
  auto flat = km_estimate(std::vector<double>{1, 2, 3}, std::vector<bool>(3, false));
  for (double q : {0.0, 1.0, 5.0}) EXPECT_EQ(flat(q), 1.0);
  auto two = km_estimate(std::vector<double>{1, 2}, std::vector<bool>{true, true});
  EXPECT_EQ(two(0.5), 1.0);
  EXPECT_EQ(two(1.0), 0.5);
  EXPECT_EQ(two(2.0), 0.0);
  EXPECT_EQ(two.left(2.0), 0.5);
  EXPECT_EQ(two.at_risk_counts, (std::vector<std::size_t>{2, 1}));
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    auto s = oracle::random_sample(rng, 1 + rep % 50);
    auto fwd = km_estimate(s.times, s.events);
    auto rev = km_estimate(s.times, flip(s.events));
    const auto cens = oracle::negate(s.events);
    for (double q = 0.0; q <= 16.0; q += 0.5) {
      ASSERT_NEAR(fwd(q), oracle::km(s.times, s.events, q), 1e-10);
      ASSERT_NEAR(rev(q), oracle::km(s.times, cens, q), 1e-10);
      ASSERT_NEAR(rev.left(q), oracle::km(s.times, cens, q, true), 1e-10);
    }
    for (std::size_t k = 1; k < fwd.values.size(); ++k) EXPECT_LE(fwd.values[k], fwd.values[k - 1]);
  }
}

TEST(Brier, ClosedForms) {
  const std::vector<double> t{1, 2, 3, 4};
  const std::vector<bool> e(4, true);
  auto G = km_estimate(t, flip(e));
  EXPECT_EQ(brier_score(2.5, std::vector<double>{0, 0, 1, 1}, t, e, G), 0.0);
  EXPECT_DOUBLE_EQ(brier_score(2.5, std::vector<double>(4, 0.5), t, e, G), 0.25);
}

TEST(Brier, MatchesTermByTermOracle) {
  std::mt19937_64 rng(6);
  int checked = 0;
  for (int rep = 0; rep < 100; ++rep) {
    auto fit = oracle::random_sample(rng, 10 + rep % 41);
    auto test = oracle::random_sample(rng, 5 + rep % 20);
    auto h = breslow_cumhaz(fit.risk, fit.times, fit.events);
    auto G = km_estimate(fit.times, flip(fit.events));
    for (double q : {2.0, 4.5, 7.0}) {
      std::vector<double> S;
      for (double f : test.risk) S.push_back(survival_at(h(q), f));
      double got;
      try {
        got = brier_score(q, S, test.times, test.events, G);
      } catch (const UndefinedMetricError&) {
        continue;
      }
      EXPECT_NEAR(got, oracle::brier(q, test.risk, test.times, test.events, fit.risk, fit.times, fit.events), 1e-12);
      ++checked;
    }
  }
  EXPECT_GT(checked, 200);
}

TEST(Brier, ZeroCensoringWeightIsReported) {
  // Censoring curve drops to 0 at t=1, so weights for the t=3 survivor blow up.
  EXPECT_THROW(brier_score(1.5, std::vector<double>{0.5, 0.5}, std::vector<double>{3.0, 1.0}, std::vector<bool>{true, true},
                           km_estimate(std::vector<double>{1.0}, std::vector<bool>{true})),
               UndefinedMetricError);
}

TEST(Ibs, TrapezoidProperties) {
  EXPECT_DOUBLE_EQ(trapezoid_average(std::vector<double>{0, 1, 3}, std::vector<double>{0.2, 0.2, 0.2}), 0.2);
  EXPECT_DOUBLE_EQ(trapezoid_average(std::vector<double>{0, 1.5}, std::vector<double>{0.2, 0.2}), 0.2);
  EXPECT_THROW(trapezoid_average(std::vector<double>{1}, std::vector<double>{1}), UndefinedMetricError);
  // Coarse vs fine grid on a smooth curve.
  auto bs = [](double t) { return 0.1 + 0.05 * std::sin(t); };
  std::vector<double> g50, v50, g5k, v5k;
  for (int k = 0; k < 50; ++k) g50.push_back(3.0 * k / 49), v50.push_back(bs(g50.back()));
  for (int k = 0; k < 5000; ++k) g5k.push_back(3.0 * k / 4999), v5k.push_back(bs(g5k.back()));
  EXPECT_NEAR(trapezoid_average(g50, v50), trapezoid_average(g5k, v5k), 1e-3);
}

TEST(Ibs, MatchesOracle) {
  std::mt19937_64 rng(7);
  int checked = 0;
  for (int rep = 0; rep < 40; ++rep) {
    auto fit = oracle::random_sample(rng, 60);
    auto test = oracle::random_sample(rng, 20);
    auto h = breslow_cumhaz(fit.risk, fit.times, fit.events);
    auto G = km_estimate(fit.times, flip(fit.events));
    auto hz = ibs_horizon(fit.times, fit.events, test.times);
    double got;
    try {
      got = integrated_brier_score(test.risk, test.times, test.events, h, G, hz.T);
    } catch (const UndefinedMetricError&) {
      continue;
    }
    EXPECT_NEAR(got, oracle::ibs(hz.T, test.risk, test.times, test.events, fit.risk, fit.times, fit.events), 1e-10);
    ++checked;
  }
  EXPECT_GT(checked, 20);
}

TEST(Ibs, HorizonRuleAndFallback) {
  std::vector<double> t;
  std::vector<bool> e;
  for (int i = 1; i <= 30; ++i) t.push_back(i), e.push_back(true);
  // Event at time 11 has |R| = 20; later events have fewer.
  auto h = ibs_horizon(t, e, std::vector<double>{5, 25});
  EXPECT_EQ(h.t_max, 11.0);
  EXPECT_EQ(h.T, 11.0);
  EXPECT_EQ(ibs_horizon(t, e, std::vector<double>{3, 8}).T, 8.0);
  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string& m) { warnings.push_back(m); };
  auto small = ibs_horizon(std::vector<double>(t.begin(), t.begin() + 10), std::vector<bool>(10, true), std::vector<double>{9});
  warning_sink() = saved;
  EXPECT_TRUE(small.fallback);
  EXPECT_EQ(small.min_risk_set, 2u);
  EXPECT_EQ(small.t_max, 9.0);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Ibs, KmReferenceIsWorseThanTrueModelOnSignaledCohorts) {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SyntheticConfig cfg;
    cfg.n_samples = 400;
    cfg.d = 5;
    cfg.beta_scale = 1.0;
    cfg.seed = seed;
    auto c = generate_synthetic(cfg);
    const auto t = c.dataset.times_or(0.0);
    const auto e = c.dataset.event_flags();
    std::vector<double> ft(c.linear_predictor.begin(), c.linear_predictor.begin() + 300), tt(t.begin(), t.begin() + 300);
    std::vector<bool> et(e.begin(), e.begin() + 300);
    std::vector<double> fv(c.linear_predictor.begin() + 300, c.linear_predictor.end()), tv(t.begin() + 300, t.end());
    std::vector<bool> ev(e.begin() + 300, e.end());
    auto G = km_estimate(tt, flip(et));
    const double T = ibs_horizon(tt, et, tv).T;
    const double model = integrated_brier_score(fv, tv, ev, breslow_cumhaz(ft, tt, et), G, T);
    // Reference: every test sample gets the training KM curve, i.e. f = 0 with H0 = -log KM.
    auto km = km_estimate(tt, et);
    BaselineHazard ref;
    for (std::size_t k = 0; k < km.times.size(); ++k)
      if (km.values[k] > 0) ref.times.push_back(km.times[k]), ref.cumhaz.push_back(-std::log(km.values[k]));
    const double reference = integrated_brier_score(std::vector<double>(fv.size(), 0.0), tv, ev, ref, G, T);
    wins += model < reference;
  }
  EXPECT_GE(wins, 18);
}

TEST(LogRank, MatchesOracleAndSeparatesGroups) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 50; ++rep) {
    auto s = oracle::random_sample(rng, 30);
    std::vector<bool> g;
    for (std::size_t i = 0; i < 30; ++i) g.push_back(i % 2 == 0);
    const auto r = log_rank_test(s.times, s.events, g);
    const double chi = oracle::logrank_chi2(s.times, s.events, g);
    EXPECT_NEAR(r.chi_square, chi, 1e-10 * std::max(1.0, chi));
    EXPECT_NEAR(r.p_value, std::erfc(std::sqrt(chi / 2)), 1e-12);
  }
  Rng g2(3);
  std::vector<double> t;
  std::vector<bool> e, grp;
  std::exponential_distribution<double> fast(4.0), slow(1.0);
  for (int i = 0; i < 100; ++i) t.push_back(fast(g2)), e.push_back(true), grp.push_back(true);
  for (int i = 0; i < 100; ++i) t.push_back(slow(g2)), e.push_back(true), grp.push_back(false);
  EXPECT_LT(log_rank_test(t, e, grp).p_value, 1e-3);
}

TEST(LogRank, ExchangeableGroupsMostlyNonSignificant) {
  int high_p = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng g(seed);
    std::exponential_distribution<double> d(1.0);
    std::vector<double> t;
    std::vector<bool> e, grp;
    for (int i = 0; i < 80; ++i) t.push_back(d(g)), e.push_back(true), grp.push_back(i % 2 == 0);
    high_p += log_rank_test(t, e, grp).p_value > 0.5;
  }
  EXPECT_GT(high_p, 10);
}

TEST(Stratify, SplitsAtTrainingMedian) {
  const std::vector<double> risk{0.1, 0.9, 0.4, 0.8}, t{5, 1, 4, 2};
  const std::vector<bool> e(4, true);
  auto s = stratify_and_logrank(risk, 0.5, t, e);
  EXPECT_EQ(s.n_high, 2u);
  EXPECT_EQ(s.n_low, 2u);
  EXPECT_THROW(stratify_and_logrank(risk, 5.0, t, e), ProtocolError);
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
}

TEST(Wilcoxon, FloorForFullySeparatedSamples) {
  std::vector<double> a, b;
  for (int i = 0; i < 20; ++i) a.push_back(i), b.push_back(100 + i);
  const double p = wilcoxon_rank_sum(a, b);
  EXPECT_NEAR(p, 6.8e-8, 0.2e-8);
  EXPECT_EQ(p, wilcoxon_rank_sum(b, a));
  EXPECT_GE(wilcoxon_rank_sum(a, a), 0.99);
  EXPECT_EQ(wilcoxon_rank_sum(std::vector<double>(5, 1.0), std::vector<double>(4, 1.0)), 1.0);
  EXPECT_THROW(wilcoxon_rank_sum(std::vector<double>{1}, b), ConfigError);
  EXPECT_EQ(midranks(std::vector<double>{3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}
