#pragma once

// Evaluation: Harrell's c-index, Breslow baseline hazard, predicted survival,
// Kaplan-Meier, Brier score / IBS with inverse-probability-of-censoring
// weights, median-risk stratification with log-rank, Wilcoxon rank-sum.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "coxmt/errors.hpp"
#include "coxmt/log.hpp"

namespace coxmt {

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, std::size_t c, const char* what) {
  if (a != b || a != c) throw DimensionError(std::string(what) + ": input lengths differ");
}

// Fenwick tree over counts.
class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : t_(n + 1, 0) {}
  void add(std::size_t i, long v) {
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += v;
  }
  // count over positions [0, i)
  long prefix(std::size_t i) const {
    long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += t_[i];
    return s;
  }

 private:
  std::vector<long> t_;
};

}  // namespace detail

// Comparable pairs (i, j): t_i < t_j and i is an event. Concordant when
// risk_i > risk_j; tied risks count 1/2. O(n log n) via a sweep in
// decreasing time over a Fenwick tree of risk ranks.
inline double concordance_index(std::span<const double> risk, std::span<const double> times, const std::vector<bool>& events) {
  detail::require_same_length(risk.size(), times.size(), events.size(), "concordance_index");
  const std::size_t n = risk.size();
  std::vector<double> sorted_risk(risk.begin(), risk.end());
  std::sort(sorted_risk.begin(), sorted_risk.end());
  sorted_risk.erase(std::unique(sorted_risk.begin(), sorted_risk.end()), sorted_risk.end());
  auto rank_of = [&](double r) { return static_cast<std::size_t>(std::lower_bound(sorted_risk.begin(), sorted_risk.end(), r) - sorted_risk.begin()); };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
  detail::Fenwick tree(sorted_risk.size());
  long inserted = 0;
  double concordant = 0.0, comparable = 0.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t h = g;
    while (h < n && times[order[h]] == times[order[g]]) ++h;
    for (std::size_t q = g; q < h; ++q) {
      const std::size_t i = order[q];
      if (!events[i]) continue;
      const std::size_t r = rank_of(risk[i]);
      const long lower = tree.prefix(r);
      const long equal = tree.prefix(r + 1) - lower;
      concordant += static_cast<double>(lower) + 0.5 * static_cast<double>(equal);
      comparable += static_cast<double>(inserted);
    }
    for (std::size_t q = g; q < h; ++q) {
      tree.add(rank_of(risk[order[q]]), 1);
      ++inserted;
    }
    g = h;
  }
  if (comparable == 0.0) throw UndefinedMetricError("c-index undefined: no comparable pairs");
  return concordant / comparable;
}

// Cumulative baseline hazard as a right-continuous step function over the
// distinct event times.
struct BaselineHazard {
  std::vector<double> times;   // distinct event times, ascending
  std::vector<double> cumhaz;  // H0 just after each time

  double operator()(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 0.0;
    return cumhaz[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

// Breslow: H0(t) = sum_{events j, t_j <= t} 1 / sum_{k in R(t_j)} exp(f_k).
// Tied events contribute one jump each, sharing the risk-set denominator.
inline BaselineHazard breslow_cumhaz(std::span<const double> f, std::span<const double> times, const std::vector<bool>& events) {
  detail::require_same_length(f.size(), times.size(), events.size(), "breslow_cumhaz");
  const std::size_t n = f.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  // Suffix sums of exp(f) in ascending-time order give each risk-set denominator.
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] + std::exp(f[order[k]]);
  BaselineHazard h;
  double acc = 0.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t e = g;
    std::size_t d = 0;
    while (e < n && times[order[e]] == times[order[g]]) d += events[order[e++]] ? 1 : 0;
    if (d > 0) {
      acc += static_cast<double>(d) / suffix[g];
      h.times.push_back(times[order[g]]);
      h.cumhaz.push_back(acc);
    }
    g = e;
  }
  if (h.times.empty()) throw UndefinedMetricError("Breslow estimator needs at least one event");
  return h;
}

struct SurvivalCurve {
  std::vector<double> times;
  std::vector<double> values;
};

inline double survival_at(double cumhaz, double f) { return std::exp(-cumhaz * std::exp(f)); }

// S(t) = exp(-H0(t) exp(f)) on `grid`.
inline SurvivalCurve predict_survival(double f, const BaselineHazard& h0, std::span<const double> grid) {
  SurvivalCurve c;
  c.times.assign(grid.begin(), grid.end());
  c.values.reserve(grid.size());
  for (double t : grid) c.values.push_back(survival_at(h0(t), f));
  return c;
}

// Product-limit estimate over the distinct observed times. `indicator`
// marks the occurrences of interest (events for S, censorings for the
// reverse estimate G).
struct KmCurve {
  std::vector<double> times;
  std::vector<double> values;              // estimate just after each time
  std::vector<std::size_t> at_risk_counts;  // n_j at each time
  std::vector<std::size_t> occurrences;     // d_j at each time

  // Right-continuous value S(t).
  double operator()(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return values[static_cast<std::size_t>(it - times.begin()) - 1];
  }
  // Left limit S(t-).
  double left(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 1.0;
    return values[static_cast<std::size_t>(it - times.begin()) - 1];
  }
};

inline KmCurve km_estimate(std::span<const double> times, const std::vector<bool>& indicator) {
  if (times.size() != indicator.size()) throw DimensionError("km_estimate: input lengths differ");
  if (times.empty()) throw UndefinedMetricError("Kaplan-Meier estimate of an empty sample");
  const std::size_t n = times.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  KmCurve km;
  double s = 1.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t e = g, d = 0;
    while (e < n && times[order[e]] == times[order[g]]) d += indicator[order[e++]] ? 1 : 0;
    const std::size_t at_risk = n - g;
    s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
    km.times.push_back(times[order[g]]);
    km.values.push_back(s);
    km.at_risk_counts.push_back(at_risk);
    km.occurrences.push_back(d);
    g = e;
  }
  return km;
}

inline std::vector<bool> flip(const std::vector<bool>& v) {
  std::vector<bool> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = !v[i];
  return out;
}

// BS(t) = (1/N) [ sum_{events, t_i <= t} S_i(t)^2 / G(t_i-) + sum_{t_i > t} (1 - S_i(t))^2 / G(t) ].
// Censored samples with t_i <= t contribute nothing. `surv_at_t` holds S_i(t).
inline double brier_score(double t, std::span<const double> surv_at_t, std::span<const double> times, const std::vector<bool>& events,
                          const KmCurve& censoring) {
  detail::require_same_length(surv_at_t.size(), times.size(), events.size(), "brier_score");
  if (times.empty()) throw UndefinedMetricError("Brier score of an empty sample");
  double s = 0.0;
  const double g_t = censoring(t);
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] <= t) {
      if (!events[i]) continue;
      const double g = censoring.left(times[i]);
      if (!(g > 0.0)) throw UndefinedMetricError("censoring survival is zero before t_i; choose a smaller evaluation time");
      s += surv_at_t[i] * surv_at_t[i] / g;
    } else {
      if (!(g_t > 0.0)) throw UndefinedMetricError("censoring survival G(t) is zero at t=" + std::to_string(t) + "; choose a smaller t");
      s += (1.0 - surv_at_t[i]) * (1.0 - surv_at_t[i]) / g_t;
    }
  }
  return s / static_cast<double>(times.size());
}

// Same, with per-sample curves evaluated at t (right-continuous step lookup).
inline double brier_score(double t, std::span<const SurvivalCurve> curves, std::span<const double> times, const std::vector<bool>& events,
                          const KmCurve& censoring) {
  std::vector<double> s(curves.size());
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    auto it = std::upper_bound(c.times.begin(), c.times.end(), t);
    s[i] = it == c.times.begin() ? 1.0 : c.values[static_cast<std::size_t>(it - c.times.begin()) - 1];
  }
  return brier_score(t, s, times, events, censoring);
}

// (1/(b-a)) * trapezoid integral of values over an ascending grid.
inline double trapezoid_average(std::span<const double> grid, std::span<const double> values) {
  if (grid.size() != values.size()) throw DimensionError("trapezoid grid/value length mismatch");
  if (grid.size() < 2 || !(grid.back() > grid.front())) throw UndefinedMetricError("integration grid is empty or degenerate");
  double area = 0.0;
  for (std::size_t k = 1; k < grid.size(); ++k) area += 0.5 * (values[k] + values[k - 1]) * (grid[k] - grid[k - 1]);
  return area / (grid.back() - grid.front());
}

struct Horizon {
  double t_max = 0.0;       // from training data
  double test_t_max = 0.0;  // largest test time
  double T = 0.0;
  std::size_t min_risk_set = 20;
  bool fallback = false;
};

// T = min(t_max, largest test time), where t_max is the largest training
// event time whose risk set has at least 20 members. Cohorts without such an
// event fall back to the threshold max(2, events/5).
inline Horizon ibs_horizon(std::span<const double> train_times, const std::vector<bool>& train_events, std::span<const double> test_times,
                           std::size_t min_risk_set = 20) {
  if (train_times.size() != train_events.size()) throw DimensionError("ibs_horizon: training lengths differ");
  if (test_times.empty()) throw UndefinedMetricError("IBS horizon needs test samples");
  auto largest_with = [&](std::size_t threshold) {
    double best = -1.0;
    for (std::size_t i = 0; i < train_times.size(); ++i) {
      if (!train_events[i]) continue;
      std::size_t r = 0;
      for (double t : train_times) r += t >= train_times[i];
      if (r >= threshold) best = std::max(best, train_times[i]);
    }
    return best;
  };
  Horizon h;
  h.min_risk_set = min_risk_set;
  h.t_max = largest_with(min_risk_set);
  if (h.t_max < 0.0) {
    const std::size_t n_ev = static_cast<std::size_t>(std::count(train_events.begin(), train_events.end(), true));
    h.min_risk_set = std::max<std::size_t>(2, n_ev / 5);
    h.fallback = true;
    h.t_max = largest_with(h.min_risk_set);
    warn("no training event has a risk set of size >= " + std::to_string(min_risk_set) + "; IBS horizon falls back to risk-set threshold " +
         std::to_string(h.min_risk_set));
    if (h.t_max < 0.0) throw UndefinedMetricError("no training event qualifies for the IBS horizon");
  }
  h.test_t_max = *std::max_element(test_times.begin(), test_times.end());
  h.T = std::min(h.t_max, h.test_t_max);
  return h;
}

// IBS = (1/T) int_0^T BS(t) dt by the trapezoid rule on {0} u {distinct test
// times < T} u {T}. Predictions are log-hazards f_i; survival comes from
// the Breslow baseline.
inline double integrated_brier_score(std::span<const double> f, std::span<const double> times, const std::vector<bool>& events,
                                     const BaselineHazard& h0, const KmCurve& censoring, double T) {
  detail::require_same_length(f.size(), times.size(), events.size(), "integrated_brier_score");
  if (!(T > 0.0)) throw UndefinedMetricError("IBS horizon must be positive");
  std::vector<double> grid{0.0};
  std::vector<double> sorted(times.begin(), times.end());
  std::sort(sorted.begin(), sorted.end());
  for (double t : sorted)
    if (t > grid.back() && t < T) grid.push_back(t);
  grid.push_back(T);
  std::vector<double> bs(grid.size()), s(f.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double H = h0(grid[k]);
    for (std::size_t i = 0; i < f.size(); ++i) s[i] = survival_at(H, f[i]);
    bs[k] = brier_score(grid[k], s, times, events, censoring);
  }
  return trapezoid_average(grid, bs);
}

// ---------------------------------------------------------------------------
// Tests

// Upper tail of the standard normal, P(Z > z).
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

struct LogRankResult {
  double chi_square = 0.0;
  double p_value = 1.0;
};

// Two-sample log-rank test; `group` true for the first sample.
inline LogRankResult log_rank_test(std::span<const double> times, const std::vector<bool>& events, const std::vector<bool>& group) {
  detail::require_same_length(times.size(), events.size(), group.size(), "log_rank_test");
  const std::size_t n = times.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  double n1 = static_cast<double>(std::count(group.begin(), group.end(), true));
  double nall = static_cast<double>(n);
  double o_minus_e = 0.0, var = 0.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t e = g;
    double d = 0.0, d1 = 0.0, leaving1 = 0.0;
    while (e < n && times[order[e]] == times[order[g]]) {
      const std::size_t i = order[e++];
      if (events[i]) {
        d += 1.0;
        if (group[i]) d1 += 1.0;
      }
      if (group[i]) leaving1 += 1.0;
    }
    if (d > 0.0 && nall > 0.0) {
      o_minus_e += d1 - d * n1 / nall;
      if (nall > 1.0) var += d * (n1 / nall) * (1.0 - n1 / nall) * (nall - d) / (nall - 1.0);
    }
    n1 -= leaving1;
    nall -= static_cast<double>(e - g);
    g = e;
  }
  LogRankResult r;
  if (var > 0.0) {
    r.chi_square = o_minus_e * o_minus_e / var;
    r.p_value = std::erfc(std::sqrt(r.chi_square / 2.0));  // chi-square(1) upper tail
  }
  return r;
}

struct Stratification {
  KmCurve high;
  KmCurve low;
  double p_value = 1.0;
  std::size_t n_high = 0;
  std::size_t n_low = 0;
};

// High-risk group: predicted risk strictly above the training median.
inline Stratification stratify_and_logrank(std::span<const double> test_risk, double median_train_risk, std::span<const double> times,
                                           const std::vector<bool>& events) {
  detail::require_same_length(test_risk.size(), times.size(), events.size(), "stratify_and_logrank");
  std::vector<bool> high(test_risk.size());
  std::vector<double> th, tl;
  std::vector<bool> eh, el;
  for (std::size_t i = 0; i < test_risk.size(); ++i) {
    high[i] = test_risk[i] > median_train_risk;
    (high[i] ? th : tl).push_back(times[i]);
    (high[i] ? eh : el).push_back(events[i]);
  }
  if (th.empty() || tl.empty()) throw ProtocolError("stratification at the training median leaves an empty risk group");
  Stratification s;
  s.high = km_estimate(th, eh);
  s.low = km_estimate(tl, el);
  s.n_high = th.size();
  s.n_low = tl.size();
  s.p_value = log_rank_test(times, events, high).p_value;
  return s;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw UndefinedMetricError("median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Midranks (1-based) of the pooled sample.
inline std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t g = 0; g < x.size();) {
    std::size_t e = g;
    while (e < x.size() && x[order[e]] == x[order[g]]) ++e;
    const double mid = 0.5 * static_cast<double>(g + 1 + e);
    for (std::size_t q = g; q < e; ++q) r[order[q]] = mid;
    g = e;
  }
  return r;
}

// Two-sided rank-sum test: normal approximation with tie-corrected variance
// and continuity correction.
inline double wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ConfigError("rank-sum test needs at least two values per sample");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto r = midranks(pooled);
  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size()), N = n1 + n2;
  double w = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) w += r[i];
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t g = 0; g < sorted.size();) {
    std::size_t e = g;
    while (e < sorted.size() && sorted[e] == sorted[g]) ++e;
    const double t = static_cast<double>(e - g);
    tie_term += t * t * t - t;
    g = e;
  }
  const double var = n1 * n2 / 12.0 * ((N + 1.0) - tie_term / (N * (N - 1.0)));
  if (!(var > 0.0)) return 1.0;
  const double z = (std::abs(w - n1 * (N + 1.0) / 2.0) - 0.5) / std::sqrt(var);
  if (z <= 0.0) return 1.0;
  return std::min(1.0, 2.0 * normal_sf(z));
}

}  // namespace coxmt
