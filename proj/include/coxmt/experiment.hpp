#pragma once

// Training loop (student/teacher with L = L_s + w L_u), the repeated k-fold
// train/validation/test protocol with grid search, ablations, unlabeled-data
// scaling studies and ledger comparison.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "coxmt/data.hpp"
#include "coxmt/log.hpp"
#include "coxmt/loss.hpp"
#include "coxmt/metrics.hpp"
#include "coxmt/model.hpp"
#include "coxmt/optimizer.hpp"

namespace coxmt {

struct TrainConfig {
  double alpha = 0.99;
  double consistency_weight = 1.0;
  double noise_sigma = 0.1;
  double student_dropout = 0.2;
  double teacher_dropout = 0.2;
  double learning_rate = 0.002;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t epochs = 200;
  // Early stopping on validation c-index; 0 disables it.
  std::size_t early_stop_patience = 20;
  BatchMode batch_mode = BatchMode::full_batch;
  std::size_t minibatch_events = 32;
  std::size_t risk_controls_per_event = 64;
  std::size_t consistency_samples = 128;
  // Predict with the teacher (mean-teacher convention) or the student.
  bool evaluate_teacher = true;
  // Supervised-only baseline: no consistency term, no EMA teacher.
  bool supervised_only = false;
  std::uint64_t seed = 0;

  PairHyper pair_hyper() const { return {alpha, noise_sigma, student_dropout, teacher_dropout}; }
  LossConfig loss_config() const {
    return {consistency_weight, batch_mode, minibatch_events, risk_controls_per_event, consistency_samples};
  }

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
    if (consistency_weight < 0.0) throw ConfigError("consistency weight must be non-negative");
    if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    for (double d : {student_dropout, teacher_dropout})
      if (d < 0.0 || d >= 1.0) throw ConfigError("dropout rates must lie in [0,1)");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  }
};

// Set one TrainConfig knob by name (ablations, CLI overrides).
inline void set_parameter(TrainConfig& cfg, const std::string& name, double v) {
  if (name == "alpha") cfg.alpha = v;
  else if (name == "consistency_weight" || name == "w") cfg.consistency_weight = v;
  else if (name == "noise_sigma" || name == "sigma") cfg.noise_sigma = v;
  else if (name == "student_dropout") cfg.student_dropout = v;
  else if (name == "teacher_dropout") cfg.teacher_dropout = v;
  else if (name == "dropout") cfg.student_dropout = cfg.teacher_dropout = v;
  else if (name == "learning_rate") cfg.learning_rate = v;
  else if (name == "epochs") cfg.epochs = static_cast<std::size_t>(v);
  else throw ConfigError("unknown training parameter '" + name + "'");
}

// Labeled/unlabeled training data in model input form.
template <class Model>
struct TrainingSet {
  typename Model::Inputs inputs;
  std::vector<double> times;    // 0 for unlabeled rows
  std::vector<Status> status;
};

template <class Model>
struct EvalSet {
  typename Model::Inputs inputs;
  std::vector<double> times;
  std::vector<bool> events;
};

struct TrainTrace {
  std::vector<double> supervised_loss;
  std::vector<double> consistency_loss;
  std::vector<double> validation_cindex;  // empty without a validation set
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // epochs completed at the best validation score
  double best_validation_cindex = std::numeric_limits<double>::quiet_NaN();
};

template <class Model>
struct TrainResult {
  StudentTeacherPair<Model> pair;
  TrainTrace trace;
  bool evaluate_teacher = true;

  const ParameterSet& eval_params() const { return evaluate_teacher ? pair.teacher : pair.student; }
};

template <class Model>
using EpochCallback = std::function<void(std::size_t epoch, const StudentTeacherPair<Model>&)>;

namespace detail {

inline void check_finite(double v, const char* what, std::size_t epoch) {
  if (!std::isfinite(v)) throw DivergedError(std::string("non-finite ") + what, epoch);
}

template <class Model>
void train_step(StudentTeacherPair<Model>& pair, OptimizerState& opt, const TrainingSet<Model>& set, const RiskSetIndex& rs,
                const std::vector<std::size_t>& batch_labeled,
                const std::vector<std::size_t>& batch_events, const std::vector<std::vector<std::size_t>>* batch_risk,
                const std::vector<std::size_t>& batch_pool, const TrainConfig& cfg, std::uint64_t step_seed, double& ls_out, double& lu_out,
                std::size_t epoch) {
  Rng rng_ls(derive_seed(step_seed, 1));
  Rng rng_lu(derive_seed(step_seed, 2));
  Rng rng_teacher(derive_seed(step_seed, 3));
  ad::Tape tape;
  ad::Var f = student_forward(tape, pair, set.inputs, batch_labeled, rng_ls, Mode::train);
  ad::Var ls = batch_risk ? partial_likelihood_loss(f, batch_events, *batch_risk) : supervised_loss(f, rs);
  ad::Var loss = ls;
  lu_out = 0.0;
  const bool use_consistency = !cfg.supervised_only && cfg.consistency_weight > 0.0;
  if (use_consistency) {
    ad::Var lu;
    if (batch_pool.empty()) {
      lu = consistency_loss(tape.constant(ad::Tensor(ad::Shape{0, 1})), std::span<const double>());
    } else {
      ad::Var s = student_forward(tape, pair, set.inputs, batch_pool, rng_lu, Mode::train);
      ad::Tape teacher_tape;
      const auto t = teacher_forward(teacher_tape, pair, set.inputs, batch_pool, rng_teacher, Mode::train).value().data();
      lu = consistency_loss(s, t);
    }
    lu_out = lu.item();
    loss = total_loss(ls, lu, cfg.loss_config());
  }
  ls_out = ls.item();
  check_finite(loss.item(), "training loss", epoch);
  pair.student.zero_grad();
  tape.backward(loss);
  optimizer_step(pair.student, opt);
  if (!cfg.supervised_only) ema_update(pair);
}

}  // namespace detail

// Trains a student/teacher pair. Each epoch in full-batch mode makes one
// optimizer step: the student sees every labeled sample (perturbed) for L_s
// and, with w > 0, an independently perturbed pass over D_c u D_u against
// the teacher's detached predictions for L_u; EMA follows every step. With
// a validation set, the state with the best validation c-index is kept and
// training stops after `early_stop_patience` epochs without improvement.
template <class Model>
TrainResult<Model> train_cox_mt(const TrainingSet<Model>& set, const TrainConfig& cfg, const typename Model::Spec& spec,
                                const EvalSet<Model>* validation = nullptr, const EpochCallback<Model>& on_epoch = {}) {
  cfg.validate();
  const std::size_t n = set.inputs.size();
  if (set.times.size() != n || set.status.size() != n) throw DimensionError("training set outcome columns do not match inputs");
  std::vector<std::size_t> labeled, pool;
  for (std::size_t i = 0; i < n; ++i) {
    if (set.status[i] != Status::unlabeled) labeled.push_back(i);
    if (set.status[i] != Status::event) pool.push_back(i);
  }
  std::vector<double> lab_times;
  std::vector<Status> lab_status;
  for (auto i : labeled) {
    lab_times.push_back(set.times[i]);
    lab_status.push_back(set.status[i]);
  }
  const auto n_events = static_cast<std::size_t>(std::count(lab_status.begin(), lab_status.end(), Status::event));
  if (n_events < 2) throw ProtocolError("training needs at least 2 events, got " + std::to_string(n_events));
  const RiskSetIndex rs(lab_times, lab_status);

  TrainResult<Model> result;
  result.evaluate_teacher = cfg.evaluate_teacher && !cfg.supervised_only;
  result.pair = init_model<Model>(spec, cfg.seed, cfg.pair_hyper());
  if (cfg.supervised_only) result.pair.noise_sigma = cfg.noise_sigma;
  auto& pair = result.pair;
  OptimizerState opt = cfg.optimizer == OptimizerKind::adam ? OptimizerState::adam(cfg.learning_rate) : OptimizerState::sgd(cfg.learning_rate);
  const LossConfig lcfg = cfg.loss_config();

  std::optional<StudentTeacherPair<Model>> best;
  std::size_t since_best = 0;
  auto& tr = result.trace;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double ls_sum = 0.0, lu_sum = 0.0;
    std::size_t steps = 0;
    if (cfg.batch_mode == BatchMode::full_batch) {
      double ls = 0.0, lu = 0.0;
      detail::train_step(pair, opt, set, rs, labeled, {}, nullptr, pool, cfg, derive_seed(cfg.seed, 0xe90c, epoch), ls, lu, epoch);
      ls_sum = ls, lu_sum = lu, steps = 1;
    } else {
      const std::size_t per = std::max<std::size_t>(1, std::min(lcfg.minibatch_events, rs.n_events()));
      const std::size_t n_steps = (rs.n_events() + per - 1) / per;
      for (std::size_t s = 0; s < n_steps; ++s) {
        const std::uint64_t step_seed = derive_seed(cfg.seed, 0xe90c, epoch, s + 1);
        Rng brng(derive_seed(step_seed, 0xba7c));
        // Pool indices are positions in `set`; risk-set indices are positions in `labeled`.
        Minibatch mb = sample_minibatch(rs, pool, lcfg, brng);
        std::vector<std::size_t> local_rows;
        for (const auto& r : mb.risk_sets) local_rows.insert(local_rows.end(), r.begin(), r.end());
        std::sort(local_rows.begin(), local_rows.end());
        local_rows.erase(std::unique(local_rows.begin(), local_rows.end()), local_rows.end());
        auto local_pos = [&](std::size_t li) {
          return static_cast<std::size_t>(std::lower_bound(local_rows.begin(), local_rows.end(), li) - local_rows.begin());
        };
        std::vector<std::size_t> rows, ev;
        std::vector<std::vector<std::size_t>> risk;
        for (auto li : local_rows) rows.push_back(labeled[li]);
        for (std::size_t k = 0; k < mb.events.size(); ++k) {
          ev.push_back(local_pos(mb.events[k]));
          std::vector<std::size_t> r;
          for (auto li : mb.risk_sets[k]) r.push_back(local_pos(li));
          risk.push_back(std::move(r));
        }
        double ls = 0.0, lu = 0.0;
        detail::train_step(pair, opt, set, rs, rows, ev, &risk, mb.consistency, cfg, step_seed, ls, lu, epoch);
        ls_sum += ls, lu_sum += lu, ++steps;
      }
    }
    tr.supervised_loss.push_back(ls_sum / static_cast<double>(steps));
    tr.consistency_loss.push_back(lu_sum / static_cast<double>(steps));
    tr.epochs_run = epoch + 1;
    if (on_epoch) on_epoch(epoch, pair);

    if (validation) {
      const auto pred = predict_all<Model>(pair.spec, result.evaluate_teacher ? pair.teacher : pair.student, validation->inputs);
      double c = 0.5;
      try {
        c = concordance_index(pred, validation->times, validation->events);
      } catch (const UndefinedMetricError&) {
      }
      tr.validation_cindex.push_back(c);
      if (!best || c > tr.best_validation_cindex) {
        tr.best_validation_cindex = c;
        tr.best_epoch = epoch + 1;
        best = pair;
        since_best = 0;
      } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (best) pair = std::move(*best);
  else tr.best_epoch = tr.epochs_run;
  pair.check_congruent();
  return result;
}

// Supervised-only Cox MLP: L = L_s, no teacher, no input noise; dropout as
// configured for the student.
template <class Model>
TrainResult<Model> train_supervised_baseline(const TrainingSet<Model>& set, TrainConfig cfg, const typename Model::Spec& spec,
                                             const EvalSet<Model>* validation = nullptr, const EpochCallback<Model>& on_epoch = {}) {
  cfg.supervised_only = true;
  cfg.consistency_weight = 0.0;
  cfg.noise_sigma = 0.0;
  cfg.evaluate_teacher = false;
  return train_cox_mt<Model>(set, cfg, spec, validation, on_epoch);
}

// ---------------------------------------------------------------------------
// Datasets to model inputs

// Per-feature z-scoring with statistics from a fixed set of rows.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const SurvivalDataset& ds, std::span<const std::size_t> rows) {
    Standardizer s;
    s.mean.assign(ds.dim, 0.0);
    s.scale.assign(ds.dim, 1.0);
    if (rows.empty()) return s;
    for (auto r : rows)
      for (std::size_t j = 0; j < ds.dim; ++j) s.mean[j] += ds.features[r * ds.dim + j];
    for (auto& m : s.mean) m /= static_cast<double>(rows.size());
    if (rows.size() > 1) {
      std::vector<double> ss(ds.dim, 0.0);
      for (auto r : rows)
        for (std::size_t j = 0; j < ds.dim; ++j) {
          const double d = ds.features[r * ds.dim + j] - s.mean[j];
          ss[j] += d * d;
        }
      for (std::size_t j = 0; j < ds.dim; ++j) {
        const double sd = std::sqrt(ss[j] / static_cast<double>(rows.size() - 1));
        s.scale[j] = sd > 0.0 ? sd : 1.0;
      }
    }
    return s;
  }

  static Standardizer identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

  ad::Tensor apply(const SurvivalDataset& ds, std::span<const std::size_t> rows) const {
    ad::Tensor t(ad::Shape{rows.size(), ds.dim});
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < ds.dim; ++j) t[k * ds.dim + j] = (ds.features[rows[k] * ds.dim + j] - mean[j]) / scale[j];
    return t;
  }
};

struct MultimodalDataset {
  SurvivalDataset base;                  // expression features and outcomes
  std::vector<PatchFeatureSet> patches;  // aligned with base rows
};

inline const SurvivalDataset& outcomes(const SurvivalDataset& d) { return d; }
inline const SurvivalDataset& outcomes(const MultimodalDataset& d) { return d.base; }

inline TabularInputs make_inputs(const SurvivalDataset& ds, std::span<const std::size_t> rows, const Standardizer& z) {
  return TabularInputs{z.apply(ds, rows), std::nullopt};
}

inline MultimodalInputs make_inputs(const MultimodalDataset& ds, std::span<const std::size_t> rows, const Standardizer& z) {
  MultimodalInputs in;
  in.expression = z.apply(ds.base, rows);
  for (auto r : rows) in.patches.push_back(ds.patches.at(r));
  return in;
}

template <class Model, class Dataset>
TrainingSet<Model> make_training_set(const Dataset& data, std::span<const std::size_t> rows, const Standardizer& z) {
  const auto& ds = outcomes(data);
  TrainingSet<Model> s{make_inputs(data, rows, z), {}, {}};
  for (auto r : rows) {
    s.times.push_back(ds.time[r].value_or(0.0));
    s.status.push_back(ds.status[r]);
  }
  return s;
}

template <class Model, class Dataset>
EvalSet<Model> make_eval_set(const Dataset& data, std::span<const std::size_t> rows, const Standardizer& z) {
  const auto& ds = outcomes(data);
  EvalSet<Model> s{make_inputs(data, rows, z), {}, {}};
  for (auto r : rows) {
    if (!ds.time[r]) throw ProtocolError("evaluation set contains unlabeled sample '" + ds.sample_ids[r] + "'");
    s.times.push_back(*ds.time[r]);
    s.events.push_back(ds.status[r] == Status::event);
  }
  return s;
}

inline MlpSpec with_hidden(MlpSpec s, const std::vector<std::size_t>& hidden) {
  s.hidden_sizes = hidden;
  return s;
}
inline FusionSpec with_hidden(FusionSpec s, const std::vector<std::size_t>& hidden) {
  s.head_hidden_sizes = hidden;
  return s;
}
inline std::vector<std::size_t> hidden_of(const MlpSpec& s) { return s.hidden_sizes; }
inline std::vector<std::size_t> hidden_of(const FusionSpec& s) { return s.head_hidden_sizes; }

// ---------------------------------------------------------------------------
// Grid search space

struct SearchSpace {
  std::vector<double> learning_rate;
  std::vector<double> dropout;  // applied to student and teacher
  std::vector<double> alpha;
  std::vector<double> noise_sigma;
  std::vector<std::vector<std::size_t>> hidden_sizes;

  struct Point {
    TrainConfig cfg;
    std::vector<std::size_t> hidden;
  };

  // Cartesian product; an empty axis keeps the base value.
  std::vector<Point> grid(const TrainConfig& base, const std::vector<std::size_t>& base_hidden) const {
    auto axis = [](const std::vector<double>& v, double d) { return v.empty() ? std::vector<double>{d} : v; };
    const auto lrs = axis(learning_rate, base.learning_rate);
    const auto drs = axis(dropout, base.student_dropout);
    const auto als = axis(alpha, base.alpha);
    const auto sgs = axis(noise_sigma, base.noise_sigma);
    const auto hs = hidden_sizes.empty() ? std::vector<std::vector<std::size_t>>{base_hidden} : hidden_sizes;
    std::vector<Point> out;
    for (const auto& h : hs)
      for (double lr : lrs)
        for (double dr : drs)
          for (double a : als)
            for (double sg : sgs) {
              Point p{base, h};
              p.cfg.learning_rate = lr;
              if (!dropout.empty()) p.cfg.student_dropout = p.cfg.teacher_dropout = dr;
              p.cfg.alpha = a;
              p.cfg.noise_sigma = sg;
              out.push_back(std::move(p));
            }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Protocol

struct RunReport {
  int repeat = 0;
  int fold = 0;
  std::uint64_t seed = 0;
  double c_index = 0.0;
  double ibs = 0.0;
  double stratification_p = 1.0;
  bool stratified = false;
  double validation_cindex = std::numeric_limits<double>::quiet_NaN();
  double ibs_horizon = 0.0;
  std::size_t epochs_trained = 0;
  std::size_t n_train = 0, n_val = 0, n_test = 0, n_unlabeled = 0;
  TrainConfig chosen;
  std::vector<std::size_t> chosen_hidden;
  KmCurve km_high, km_low;
};

// Sample ids that fed each computation of one (repeat, fold).
struct RunAudit {
  int repeat = 0;
  int fold = 0;
  std::vector<std::string> test_ids;
  std::vector<std::string> gradient_ids;       // every row that entered a training loss
  std::vector<std::string> selection_ids;      // rows scored for hyperparameter selection / early stopping
  std::vector<std::string> normalization_ids;  // rows that fed feature standardization
  std::vector<std::string> baseline_hazard_ids;
};

struct RunLedger {
  std::vector<RunReport> reports;
  std::vector<RunAudit> audits;

  std::vector<double> column(double RunReport::*field) const {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.*field);
    return v;
  }
};

enum class Trainer { cox_mt, supervised_baseline };

struct ProtocolOptions {
  SplitOptions split;
  Trainer trainer = Trainer::cox_mt;
  bool standardize = true;
  std::size_t threads = 1;
};

// Runs fn(0..n-1) on up to `threads` workers; the first exception is
// rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

namespace detail {

inline std::vector<std::string> ids_of(const SurvivalDataset& ds, std::span<const std::size_t> rows) {
  std::vector<std::string> out;
  for (auto r : rows) out.push_back(ds.sample_ids[r]);
  return out;
}

template <class Model>
TrainResult<Model> train_with(Trainer trainer, const TrainingSet<Model>& set, const TrainConfig& cfg, const typename Model::Spec& spec,
                              const EvalSet<Model>* val) {
  return trainer == Trainer::cox_mt ? train_cox_mt<Model>(set, cfg, spec, val) : train_supervised_baseline<Model>(set, cfg, spec, val);
}

}  // namespace detail

// One (repeat, fold): select hyperparameters on the inner train/validation
// split (skipped for a single-point grid), retrain on train + validation
// (+ the plan's unlabeled folds), evaluate on the held-out fold.
template <class Model, class Dataset>
std::pair<RunReport, RunAudit> run_fold(const Dataset& data, const FoldPlan& plan, const std::vector<SearchSpace::Point>& grid,
                                        const typename Model::Spec& base_spec, std::uint64_t seed, const ProtocolOptions& opt) {
  const auto& ds = outcomes(data);
  const auto train = plan.indices(Role::train);
  const auto val = plan.indices(Role::validation);
  const auto test = plan.indices(Role::test);
  const auto unl = plan.indices(Role::unlabeled_train);
  std::vector<std::size_t> inner = train;
  inner.insert(inner.end(), unl.begin(), unl.end());
  std::vector<std::size_t> full = train;
  full.insert(full.end(), val.begin(), val.end());
  std::sort(full.begin(), full.end());
  std::vector<std::size_t> full_with_unl = full;
  full_with_unl.insert(full_with_unl.end(), unl.begin(), unl.end());

  RunReport rep;
  RunAudit audit;
  rep.repeat = audit.repeat = plan.repeat;
  rep.fold = audit.fold = plan.test_fold;
  rep.seed = derive_seed(seed, 0x7e57, static_cast<std::uint64_t>(plan.repeat), static_cast<std::uint64_t>(plan.test_fold));
  rep.n_train = train.size(), rep.n_val = val.size(), rep.n_test = test.size(), rep.n_unlabeled = unl.size();
  audit.test_ids = detail::ids_of(ds, test);

  std::size_t chosen = 0;
  std::size_t retrain_epochs = grid.at(0).cfg.epochs;
  if (grid.size() > 1) {
    const Standardizer zi = opt.standardize ? Standardizer::fit(ds, inner) : Standardizer::identity(ds.dim);
    const auto inner_ids = detail::ids_of(ds, inner);
    audit.normalization_ids.insert(audit.normalization_ids.end(), inner_ids.begin(), inner_ids.end());
    audit.gradient_ids.insert(audit.gradient_ids.end(), inner_ids.begin(), inner_ids.end());
    const auto val_ids = detail::ids_of(ds, val);
    audit.selection_ids.insert(audit.selection_ids.end(), val_ids.begin(), val_ids.end());
    const auto tset = make_training_set<Model>(data, inner, zi);
    const auto vset = make_eval_set<Model>(data, val, zi);
    double best = -1.0;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      TrainConfig cfg = grid[g].cfg;
      cfg.seed = derive_seed(rep.seed, g);
      auto res = detail::train_with<Model>(opt.trainer, tset, cfg, with_hidden(base_spec, grid[g].hidden), &vset);
      if (res.trace.best_validation_cindex > best) {
        best = res.trace.best_validation_cindex;
        chosen = g;
        retrain_epochs = std::max<std::size_t>(1, res.trace.best_epoch);
      }
    }
    rep.validation_cindex = best;
  }

  const Standardizer z = opt.standardize ? Standardizer::fit(ds, full_with_unl) : Standardizer::identity(ds.dim);
  const auto fids = detail::ids_of(ds, full_with_unl);
  audit.normalization_ids.insert(audit.normalization_ids.end(), fids.begin(), fids.end());
  audit.gradient_ids.insert(audit.gradient_ids.end(), fids.begin(), fids.end());
  TrainConfig cfg = grid[chosen].cfg;
  cfg.epochs = retrain_epochs;
  cfg.seed = derive_seed(rep.seed, 0xf1a1);
  const auto spec = with_hidden(base_spec, grid[chosen].hidden);
  const auto tset = make_training_set<Model>(data, full_with_unl, z);
  auto res = detail::train_with<Model>(opt.trainer, tset, cfg, spec, nullptr);
  rep.chosen = cfg;
  rep.chosen_hidden = grid[chosen].hidden;
  rep.epochs_trained = res.trace.epochs_run;

  // Test-time evaluation.
  const auto& params = res.eval_params();
  const auto fit_set = make_eval_set<Model>(data, full, z);
  const auto test_set = make_eval_set<Model>(data, test, z);
  const auto f_fit = predict_all<Model>(spec, params, fit_set.inputs);
  const auto f_test = predict_all<Model>(spec, params, test_set.inputs);
  audit.baseline_hazard_ids = detail::ids_of(ds, full);

  rep.c_index = concordance_index(f_test, test_set.times, test_set.events);
  const auto h0 = breslow_cumhaz(f_fit, fit_set.times, fit_set.events);
  const auto G = km_estimate(fit_set.times, flip(fit_set.events));
  const auto hz = ibs_horizon(fit_set.times, fit_set.events, test_set.times);
  rep.ibs_horizon = hz.T;
  rep.ibs = integrated_brier_score(f_test, test_set.times, test_set.events, h0, G, hz.T);
  try {
    auto st = stratify_and_logrank(f_test, median(f_fit), test_set.times, test_set.events);
    rep.stratification_p = st.p_value;
    rep.stratified = true;
    rep.km_high = std::move(st.high);
    rep.km_low = std::move(st.low);
  } catch (const ProtocolError& e) {
    warn(std::string("repeat ") + std::to_string(plan.repeat) + " fold " + std::to_string(plan.test_fold) + ": " + e.what());
  }
  return {rep, audit};
}

// Seed of the fold split used by run_protocol and ablate for a given job seed.
inline std::uint64_t protocol_split_seed(std::uint64_t seed) { return derive_seed(seed, 0x5b11); }

// repeats x k runs, each on its own derived seed. Reports are ordered by
// (repeat, fold) regardless of thread count.
template <class Model, class Dataset>
RunLedger run_protocol(const Dataset& data, const SearchSpace& search, const TrainConfig& base_cfg, const typename Model::Spec& spec,
                       std::uint64_t seed, ProtocolOptions opt = {}) {
  opt.split.seed = protocol_split_seed(seed);
  const auto plans = split_folds(outcomes(data), opt.split);
  const auto grid = search.grid(base_cfg, hidden_of(spec));
  if (grid.empty()) throw ConfigError("empty search space");
  RunLedger ledger;
  ledger.reports.resize(plans.size());
  ledger.audits.resize(plans.size());
  parallel_for(plans.size(), opt.threads, [&](std::size_t i) {
    auto [r, a] = run_fold<Model>(data, plans[i], grid, spec, seed, opt);
    ledger.reports[i] = std::move(r);
    ledger.audits[i] = std::move(a);
  });
  return ledger;
}

// Empty result means no test sample id reached any training, selection,
// normalization or baseline-hazard computation of its own run.
inline std::vector<std::string> audit_leaks(const RunLedger& ledger) {
  std::vector<std::string> problems;
  for (const auto& a : ledger.audits) {
    const std::set<std::string> test(a.test_ids.begin(), a.test_ids.end());
    auto check = [&](const std::vector<std::string>& ids, const char* what) {
      for (const auto& id : ids)
        if (test.count(id))
          problems.push_back("repeat " + std::to_string(a.repeat) + " fold " + std::to_string(a.fold) + ": test sample " + id + " used in " + what);
    };
    check(a.gradient_ids, "training");
    check(a.selection_ids, "model selection");
    check(a.normalization_ids, "normalization");
    check(a.baseline_hazard_ids, "baseline hazard");
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  double value = 0.0;
  int repeat = 0;
  int fold = 0;
  double validation_error = 0.0;  // 1 - validation c-index
};

struct AblationTable {
  std::string parameter;
  std::vector<double> values;
  std::vector<double> mean_error;  // per value
  std::vector<AblationRow> rows;   // |values| x runs
};

// Varies one TrainConfig knob with the rest fixed. For each value and each
// (repeat, fold) triple, trains on the training split for cfg.epochs (no
// early stopping) and records 1 - c-index on the validation split.
template <class Model, class Dataset>
AblationTable ablate(const Dataset& data, const TrainConfig& base_cfg, const std::string& parameter, const std::vector<double>& values,
                     const typename Model::Spec& spec, std::uint64_t seed, ProtocolOptions opt = {}) {
  {
    TrainConfig probe = base_cfg;
    set_parameter(probe, parameter, base_cfg.alpha);
  }
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  opt.split.seed = protocol_split_seed(seed);
  const auto& ds = outcomes(data);
  const auto plans = split_folds(ds, opt.split);
  AblationTable table;
  table.parameter = parameter;
  table.values = values;
  table.rows.resize(values.size() * plans.size());
  parallel_for(table.rows.size(), opt.threads, [&](std::size_t job) {
    const std::size_t vi = job / plans.size(), pi = job % plans.size();
    const auto& plan = plans[pi];
    auto rows = plan.indices(Role::train);
    const auto unl = plan.indices(Role::unlabeled_train);
    rows.insert(rows.end(), unl.begin(), unl.end());
    const auto val = plan.indices(Role::validation);
    const Standardizer z = opt.standardize ? Standardizer::fit(ds, rows) : Standardizer::identity(ds.dim);
    TrainConfig cfg = base_cfg;
    set_parameter(cfg, parameter, values[vi]);
    cfg.early_stop_patience = 0;
    cfg.seed = derive_seed(seed, 0xab1a, static_cast<std::uint64_t>(plan.repeat), static_cast<std::uint64_t>(plan.test_fold));
    const auto tset = make_training_set<Model>(data, rows, z);
    const auto vset = make_eval_set<Model>(data, val, z);
    auto res = detail::train_with<Model>(opt.trainer, tset, cfg, spec, nullptr);
    const auto pred = predict_all<Model>(spec, res.eval_params(), vset.inputs);
    table.rows[job] = AblationRow{values[vi], plan.repeat, plan.test_fold, 1.0 - concordance_index(pred, vset.times, vset.events)};
  });
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    double s = 0.0;
    for (std::size_t pi = 0; pi < plans.size(); ++pi) s += table.rows[vi * plans.size() + pi].validation_error;
    table.mean_error.push_back(s / static_cast<double>(plans.size()));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Unlabeled-data scaling

struct ScalingPoint {
  std::size_t n_unlabeled = 0;
  RunLedger ledger;
  double mean_c_index = 0.0;
  double mean_ibs = 0.0;
  std::vector<std::string> unlabeled_ids;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// For each size n, the first n samples of one seeded shuffle of `pool` join
// `labeled` as D_u (so smaller sets nest inside larger ones) and the full
// protocol runs with the same seed.
inline std::vector<ScalingPoint> unlabeled_scaling_study(const SurvivalDataset& labeled, const SurvivalDataset& pool, const std::vector<std::size_t>& sizes,
                                                         const SearchSpace& search, const TrainConfig& cfg, const MlpSpec& spec, std::uint64_t seed,
                                                         const ProtocolOptions& opt = {}) {
  if (pool.dim != labeled.dim) throw DimensionError("unlabeled pool feature dimension differs from the labeled data");
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x900d));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ScalingPoint> out;
  for (auto n : sizes) {
    if (n > pool.size()) throw ConfigError("requested " + std::to_string(n) + " unlabeled samples from a pool of " + std::to_string(pool.size()));
    SurvivalDataset ds = labeled;
    ScalingPoint pt;
    pt.n_unlabeled = n;
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = order[k];
      ds.sample_ids.push_back(pool.sample_ids[i]);
      auto r = pool.row(i);
      ds.features.insert(ds.features.end(), r.begin(), r.end());
      ds.time.emplace_back(std::nullopt);
      ds.status.push_back(Status::unlabeled);
      pt.unlabeled_ids.push_back(pool.sample_ids[i]);
    }
    pt.ledger = run_protocol<MlpModel>(ds, search, cfg, spec, seed, opt);
    pt.mean_c_index = mean_of(pt.ledger.column(&RunReport::c_index));
    pt.mean_ibs = mean_of(pt.ledger.column(&RunReport::ibs));
    out.push_back(std::move(pt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison

struct BoxStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
};

// Quartiles by linear interpolation between order statistics.
inline BoxStats box_stats(std::vector<double> v) {
  if (v.empty()) throw UndefinedMetricError("box statistics of nothing");
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {v.front(), q(0.25), q(0.5), q(0.75), v.back(), mean_of(v)};
}

struct MetricComparison {
  std::string metric;
  BoxStats a, b;
  double p_value = 1.0;
};

struct Comparison {
  MetricComparison c_index;
  MetricComparison ibs;
};

inline Comparison compare_models(const RunLedger& a, const RunLedger& b) {
  if (a.reports.size() != b.reports.size())
    throw ProtocolError("ledger sizes differ: " + std::to_string(a.reports.size()) + " vs " + std::to_string(b.reports.size()));
  if (a.reports.size() < 2) throw ProtocolError("comparison needs at least two runs per ledger");
  auto cmp = [&](const char* name, double RunReport::*field) {
    MetricComparison m;
    m.metric = name;
    const auto va = a.column(field), vb = b.column(field);
    m.a = box_stats(va);
    m.b = box_stats(vb);
    m.p_value = wilcoxon_rank_sum(va, vb);
    return m;
  };
  return {cmp("c_index", &RunReport::c_index), cmp("ibs", &RunReport::ibs)};
}

// Flat ledger file: header plus one row per run.
inline void write_ledger(std::ostream& out, const RunLedger& ledger) {
  out << "repeat,fold,seed,c_index,ibs,stratification_p,stratified,validation_cindex,ibs_horizon,epochs,n_train,n_val,n_test,n_unlabeled\n";
  for (const auto& r : ledger.reports) {
    out << r.repeat << ',' << r.fold << ',' << r.seed << ',' << csv::format_double(r.c_index) << ',' << csv::format_double(r.ibs) << ','
        << csv::format_double(r.stratification_p) << ',' << (r.stratified ? 1 : 0) << ',' << csv::format_double(r.validation_cindex) << ','
        << csv::format_double(r.ibs_horizon) << ',' << r.epochs_trained << ',' << r.n_train << ',' << r.n_val << ',' << r.n_test << ','
        << r.n_unlabeled << '\n';
  }
}

inline RunLedger read_ledger(std::istream& in) {
  auto rows = csv::read_rows(in);
  if (rows.empty() || rows[0].size() < 6 || rows[0][0] != "repeat" || rows[0][3] != "c_index" || rows[0][4] != "ibs")
    throw FormatError("not a run ledger (expected header repeat,fold,seed,c_index,ibs,...)", 1, 1);
  RunLedger l;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (r.size() < 6) throw FormatError("short ledger row", k + 1, r.size());
    auto num = [&](std::size_t c) {
      auto v = csv::parse_double(r[c]);
      if (!v) throw FormatError("unparseable ledger value '" + r[c] + "'", k + 1, c + 1);
      return *v;
    };
    RunReport rep;
    rep.repeat = static_cast<int>(num(0));
    rep.fold = static_cast<int>(num(1));
    rep.seed = std::stoull(r[2]);
    rep.c_index = num(3);
    rep.ibs = num(4);
    rep.stratification_p = num(5);
    if (r.size() > 6) rep.stratified = r[6] == "1";
    l.reports.push_back(rep);
  }
  return l;
}

// Two-column time/value step function export.
inline void write_km_curve(std::ostream& out, const KmCurve& km) {
  out << "time,survival\n0,1\n";
  for (std::size_t k = 0; k < km.times.size(); ++k) out << csv::format_double(km.times[k]) << ',' << csv::format_double(km.values[k]) << '\n';
}

}  // namespace coxmt
