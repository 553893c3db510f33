#pragma once

// Risk sets and the training losses: negative log partial likelihood over
// events (L_s), student/teacher consistency over censored and unlabeled
// samples (L_u), and L = L_s + w L_u.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "coxmt/autodiff.hpp"
#include "coxmt/data.hpp"
#include "coxmt/log.hpp"

namespace coxmt {

// R(t_i) = { j labeled : t_j >= t_i } for every event i (Breslow ties: tied
// events sit in each other's risk sets). Stored as suffixes of the labeled
// samples sorted by ascending time, so every risk set is a contiguous span.
class RiskSetIndex {
 public:
  RiskSetIndex() = default;

  // Indices refer to positions in `times`/`statuses`; unlabeled positions
  // are ignored.
  RiskSetIndex(std::span<const double> times, std::span<const Status> statuses) {
    if (times.size() != statuses.size()) throw DimensionError("times and statuses differ in length");
    n_samples_ = times.size();
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (statuses[i] == Status::unlabeled) continue;
      if (!(times[i] > 0.0) || !std::isfinite(times[i]))
        throw InvalidRiskSetError("labeled sample " + std::to_string(i) + " has non-positive or non-finite time");
      sorted_.push_back(i);
    }
    std::stable_sort(sorted_.begin(), sorted_.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
    for (std::size_t pos = 0; pos < sorted_.size(); ++pos) {
      const std::size_t i = sorted_[pos];
      if (statuses[i] != Status::event) continue;
      std::size_t start = pos;
      while (start > 0 && times[sorted_[start - 1]] == times[i]) --start;
      event_order_.push_back(i);
      start_.push_back(start);
      event_time_.push_back(times[i]);
    }
    if (event_order_.empty()) throw InvalidRiskSetError("no events: the partial likelihood is undefined");
  }

  // Uncensored sample indices by ascending time.
  const std::vector<std::size_t>& event_order() const noexcept { return event_order_; }
  std::size_t n_events() const noexcept { return event_order_.size(); }
  std::size_t n_labeled() const noexcept { return sorted_.size(); }
  double event_time(std::size_t k) const { return event_time_.at(k); }
  // Length of the time/status vectors the index was built from.
  std::size_t n_samples() const noexcept { return n_samples_; }

  // R(t) for the k-th event of event_order().
  std::span<const std::size_t> at_risk(std::size_t k) const {
    return std::span<const std::size_t>(sorted_).subspan(start_.at(k));
  }

 private:
  std::vector<std::size_t> sorted_;
  std::vector<std::size_t> event_order_;
  std::vector<std::size_t> start_;
  std::vector<double> event_time_;
  std::size_t n_samples_ = 0;
};

inline RiskSetIndex build_risk_sets(std::span<const double> times, std::span<const Status> statuses) {
  return RiskSetIndex(times, statuses);
}

inline RiskSetIndex build_risk_sets(const SurvivalDataset& ds) {
  const auto t = ds.times_or(0.0);
  return RiskSetIndex(t, ds.status);
}

enum class BatchMode { full_batch, risk_set_minibatch };

struct LossConfig {
  double consistency_weight = 1.0;
  BatchMode batch_mode = BatchMode::full_batch;
  std::size_t minibatch_events = 32;
  std::size_t risk_controls_per_event = 64;
  std::size_t consistency_samples = 128;
};

// -(1/E) sum_i [ f_i - log sum_{j in R_i} exp f_j ] over explicit (event,
// risk subset) pairs. Each subset must contain its event.
inline ad::Var partial_likelihood_loss(const ad::Var& f, std::span<const std::size_t> events,
                                       std::span<const std::vector<std::size_t>> risk_sets) {
  if (events.empty()) throw InvalidRiskSetError("partial likelihood over zero events");
  if (events.size() != risk_sets.size()) throw DimensionError("one risk set per event is required");
  const ad::Var flat = ad::reshape(f, ad::Shape{f.value().size(), 1});
  std::vector<ad::Var> terms;
  terms.reserve(events.size());
  for (std::size_t k = 0; k < events.size(); ++k) {
    if (risk_sets[k].empty()) throw InvalidRiskSetError("empty risk set for event " + std::to_string(events[k]));
    terms.push_back(ad::log_sum_exp(flat, risk_sets[k]));
  }
  ad::Var lse_sum = ad::sum(ad::concat_rows(terms));
  ad::Var f_sum = ad::sum(ad::gather_rows(flat, events));
  return ad::scale(ad::sub(lse_sum, f_sum), 1.0 / static_cast<double>(events.size()));
}

// L_s over all events of `rs`; f holds one prediction per sample in the
// ordering used to build `rs`.
inline ad::Var supervised_loss(const ad::Var& f, const RiskSetIndex& rs) {
  const auto& ev = rs.event_order();
  if (ev.empty()) throw InvalidRiskSetError("no events");
  if (f.value().size() != rs.n_samples())
    throw InvalidRiskSetError("risk sets built over " + std::to_string(rs.n_samples()) + " samples, got " + std::to_string(f.value().size()) +
                              " predictions");
  ad::Var flat = ad::reshape(f, ad::Shape{f.value().size(), 1});
  std::vector<ad::Var> terms;
  terms.reserve(ev.size());
  for (std::size_t k = 0; k < ev.size(); ++k) {
    auto r = rs.at_risk(k);
    if (r.empty()) throw InvalidRiskSetError("empty risk set");
    terms.push_back(ad::log_sum_exp(flat, r));
  }
  ad::Var lse_sum = ad::sum(ad::concat_rows(terms));
  ad::Var f_sum = ad::sum(ad::gather_rows(flat, ev));
  return ad::scale(ad::sub(lse_sum, f_sum), 1.0 / static_cast<double>(ev.size()));
}

// Mean squared student/teacher disagreement. Teacher values enter as
// constants. Empty input gives exactly zero (with a warning).
inline ad::Var consistency_loss(const ad::Var& student, std::span<const double> teacher) {
  ad::Tape& tape = *student.tape();
  const std::size_t n = student.value().size();
  if (n != teacher.size())
    throw DimensionError("consistency loss over " + std::to_string(n) + " student and " + std::to_string(teacher.size()) + " teacher values");
  if (n == 0) {
    warn("consistency loss over an empty censored/unlabeled set; using 0");
    return tape.scalar(0.0);
  }
  ad::Var t = tape.constant(ad::Tensor(student.value().shape(), std::vector<double>(teacher.begin(), teacher.end())));
  return ad::mean(ad::square(ad::sub(student, t)));
}

inline ad::Var total_loss(const ad::Var& ls, const ad::Var& lu, const LossConfig& cfg) {
  if (cfg.consistency_weight < 0.0) throw ConfigError("consistency weight must be non-negative");
  return ad::add(ls, ad::scale(lu, cfg.consistency_weight));
}

struct Minibatch {
  std::vector<std::size_t> events;                  // sampled event indices
  std::vector<std::vector<std::size_t>> risk_sets;  // subset of R(t_i), contains the event
  std::vector<std::size_t> full_risk_sizes;         // |R(t_i)| before subsampling
  std::vector<std::size_t> consistency;             // draw from D_u u D_c
};

// Events are drawn uniformly without replacement; for each, up to
// risk_controls_per_event members of R(t_i) including i itself.
// `consistency_pool` lists the D_u u D_c indices.
inline Minibatch sample_minibatch(const RiskSetIndex& rs, std::span<const std::size_t> consistency_pool, const LossConfig& cfg, Rng& rng) {
  if (cfg.batch_mode != BatchMode::risk_set_minibatch) throw ConfigError("sample_minibatch requires risk_set_minibatch mode");
  if (cfg.risk_controls_per_event == 0) throw ConfigError("risk_controls_per_event must be positive");
  std::size_t m = cfg.minibatch_events;
  if (m > rs.n_events()) {
    warn("minibatch_events " + std::to_string(m) + " exceeds " + std::to_string(rs.n_events()) + " events; clipped");
    m = rs.n_events();
  }
  std::vector<std::size_t> ks(rs.n_events());
  std::iota(ks.begin(), ks.end(), 0);
  std::shuffle(ks.begin(), ks.end(), rng);
  ks.resize(m);
  std::sort(ks.begin(), ks.end());
  Minibatch b;
  for (auto k : ks) {
    const std::size_t i = rs.event_order()[k];
    auto full = rs.at_risk(k);
    b.events.push_back(i);
    b.full_risk_sizes.push_back(full.size());
    std::vector<std::size_t> others;
    for (auto j : full)
      if (j != i) others.push_back(j);
    const std::size_t take = std::min(others.size(), cfg.risk_controls_per_event - 1);
    for (std::size_t q = 0; q < take; ++q) {
      std::uniform_int_distribution<std::size_t> pick(q, others.size() - 1);
      std::swap(others[q], others[pick(rng)]);
    }
    others.resize(take);
    others.push_back(i);
    std::sort(others.begin(), others.end());
    b.risk_sets.push_back(std::move(others));
  }
  std::vector<std::size_t> pool(consistency_pool.begin(), consistency_pool.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(pool.size(), cfg.consistency_samples));
  std::sort(pool.begin(), pool.end());
  b.consistency = std::move(pool);
  return b;
}

}  // namespace coxmt
