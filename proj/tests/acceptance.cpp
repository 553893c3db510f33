// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <thread>

#include "coxmt/coxmt.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace coxmt;
using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
std::set<int> selected;  // empty: all criteria

void report(int id, const char* name, const std::function<Outcome()>& check) {
  if (!selected.empty() && !selected.count(id)) return;
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s  %d %-26s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

// Labeled outcomes with ties; at least one event.
void random_outcomes(std::mt19937_64& rng, std::size_t n, std::vector<double>& times, std::vector<Status>& st) {
  std::uniform_int_distribution<int> t(1, 8);
  std::bernoulli_distribution e(0.6);
  times.clear();
  st.clear();
  for (std::size_t i = 0; i < n; ++i) {
    times.push_back(t(rng));
    st.push_back(e(rng) ? Status::event : Status::censored);
  }
  st[0] = Status::event;
}

FusionSpec toy_fusion() {
  FusionSpec s;
  s.expr_dim = 3;
  s.expr_token_count = 2;
  s.token_dim = 4;
  s.patch_dim = 5;
  s.max_patch_tokens = 3;
  s.heads_per_mha = 2;
  s.mha_output_dim = 3;
  s.head_hidden_sizes = {3};
  s.dropout_rate = 0.0;
  return s;
}

void jitter(ParameterSet& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& t : p.tensors)
    for (std::size_t k = 0; k < t.size(); ++k) t[k] += n(rng);
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> size(3, 12);
  double worst = 0.0;
  int instances = 0;
  auto note = [&](double e) {
    worst = std::max(worst, e);
    ++instances;
  };
  std::vector<double> times;
  std::vector<Status> st;

  for (int k = 0; k < 15; ++k) {  // supervised partial likelihood
    const std::size_t n = size(rng);
    random_outcomes(rng, n, times, st);
    const RiskSetIndex rs(times, st);
    ParameterSet p;
    p.add("f", random_tensor(Shape{n, 1}, rng));
    note(gradcheck::max_rel_error(p, [&](Tape&, std::span<const Var> v) { return supervised_loss(v[0], rs); }, k));
  }
  for (int k = 0; k < 15; ++k) {  // consistency loss
    const std::size_t n = size(rng);
    ParameterSet p;
    p.add("s", random_tensor(Shape{n, 1}, rng));
    const Tensor teacher = random_tensor(Shape{n, 1}, rng);
    note(gradcheck::max_rel_error(p, [&](Tape&, std::span<const Var> v) { return consistency_loss(v[0], teacher.data()); }, k));
  }
  for (int k = 0; k < 15; ++k) {  // MLP forward + supervised loss
    const std::size_t n = size(rng), d = 2 + static_cast<std::size_t>(k % 4);
    MlpSpec spec{d, {3 + static_cast<std::size_t>(k % 3), 2}, k % 2 ? Activation::relu : Activation::tanh, 0.0};
    Rng init(static_cast<std::uint64_t>(k));
    auto params = MlpModel::init(spec, init);
    jitter(params, rng);  // zero-initialized biases would sit on the ReLU kink
    const Tensor x = random_tensor(Shape{n, d}, rng);
    random_outcomes(rng, n, times, st);
    const RiskSetIndex rs(times, st);
    note(gradcheck::max_rel_error(params, [&](Tape& t, std::span<const Var> v) {
      Rng unused(0);
      return supervised_loss(mlp_apply(spec, v, t.constant(x), 0.0, unused, Mode::eval), rs);
    }, k, 64));
  }
  for (int k = 0; k < 10; ++k) {  // toy fusion forward + supervised loss
    const auto spec = toy_fusion();
    Rng init(static_cast<std::uint64_t>(50 + k));
    auto params = FusionModel::init(spec, init);
    jitter(params, rng);
    const std::size_t n = 3 + static_cast<std::size_t>(k % 3);
    MultimodalInputs in;
    in.expression = random_tensor(Shape{n, spec.expr_dim}, rng);
    for (std::size_t i = 0; i < n; ++i) {
      PatchFeatureSet pf;
      pf.sample_id = "p" + std::to_string(i);
      pf.patch_features = random_tensor(Shape{1 + i % 3, spec.patch_dim}, rng);
      in.patches.push_back(std::move(pf));
    }
    random_outcomes(rng, n, times, st);
    const RiskSetIndex rs(times, st);
    const auto rows = iota_rows(n);
    note(gradcheck::max_rel_error(params, [&](Tape& t, std::span<const Var> v) {
      Rng unused(0);
      return supervised_loss(FusionModel::forward(t, spec, v, in, rows, Perturbation{}, unused, Mode::eval, View::student), rs);
    }, k, 48));
  }
  return {instances >= 50 && worst < 1e-4, std::to_string(instances) + " instances, max rel err " + fmt("%.2e", worst)};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  std::size_t risk_set_mismatches = 0;
  int instances = 0;
  for (int rep = 0; rep < 100; ++rep, ++instances) {
    const std::size_t n = 5 + static_cast<std::size_t>(rep % 46);
    auto s = oracle::random_sample(rng, n);
    auto fit = oracle::random_sample(rng, n);

    worst = std::max(worst, std::abs(concordance_index(s.risk, s.times, s.events) - oracle::cindex(s.risk, s.times, s.events)));

    std::vector<Status> st;
    for (bool e : s.events) st.push_back(e ? Status::event : Status::censored);
    const RiskSetIndex rs(s.times, st);
    for (std::size_t k = 0; k < rs.n_events(); ++k) {
      const std::size_t i = rs.event_order()[k];
      std::set<std::size_t> expected;
      for (std::size_t j = 0; j < n; ++j)
        if (s.times[j] >= s.times[i]) expected.insert(j);
      auto r = rs.at_risk(k);
      if (std::set<std::size_t>(r.begin(), r.end()) != expected) ++risk_set_mismatches;
    }

    const auto h = breslow_cumhaz(fit.risk, fit.times, fit.events);
    const auto km = km_estimate(s.times, s.events);
    const auto G = km_estimate(fit.times, flip(fit.events));
    for (double q = 0.5; q <= 16.0; q += 0.5) {
      worst = std::max(worst, std::abs(h(q) - oracle::breslow(fit.risk, fit.times, fit.events, q)));
      worst = std::max(worst, std::abs(km(q) - oracle::km(s.times, s.events, q)));
    }
    for (double q : {2.0, 4.5, 7.0}) {
      std::vector<double> S;
      for (double f : s.risk) S.push_back(survival_at(h(q), f));
      double got;
      try {
        got = brier_score(q, S, s.times, s.events, G);
      } catch (const UndefinedMetricError&) {
        continue;  // G reaches zero before q; the oracle divides by zero too
      }
      worst = std::max(worst, std::abs(got - oracle::brier(q, s.risk, s.times, s.events, fit.risk, fit.times, fit.events)));
    }
  }
  return {worst <= 1e-10 && risk_set_mismatches == 0,
          std::to_string(instances) + " instances, max abs diff " + fmt("%.2e", worst) + ", risk-set mismatches " +
              std::to_string(risk_set_mismatches)};
}

Outcome wilcoxon_constant() {
  std::vector<double> a, b;
  for (int i = 0; i < 20; ++i) {
    a.push_back(i);
    b.push_back(100 + i);
  }
  const double p = wilcoxon_rank_sum(a, b);
  return {std::abs(p - 6.8e-8) <= 0.2e-8, "p = " + fmt("%.4g", p)};
}

Outcome reduction_identity() {
  SyntheticConfig sc;
  sc.n_samples = 100;
  sc.d = 5;
  sc.seed = 404;
  sc.unlabeled_fraction = 0.2;
  const auto ds = generate_synthetic(sc).dataset;
  const auto rows = iota_rows(ds.size());
  const auto set = make_training_set<MlpModel>(ds, rows, Standardizer::fit(ds, rows));
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 404;
  cfg.consistency_weight = 0.0;
  cfg.noise_sigma = 0.0;
  cfg.student_dropout = cfg.teacher_dropout = 0.0;
  const MlpSpec spec{5, {8}, Activation::tanh, 0.0};
  std::vector<ParameterSet> mt, base;
  train_cox_mt<MlpModel>(set, cfg, spec, nullptr, [&](std::size_t, const auto& p) { mt.push_back(p.student.snapshot()); });
  train_supervised_baseline<MlpModel>(set, cfg, spec, nullptr, [&](std::size_t, const auto& p) { base.push_back(p.student.snapshot()); });
  std::size_t identical = 0;
  for (std::size_t e = 0; e < std::min(mt.size(), base.size()); ++e) identical += mt[e].values_equal(base[e]) ? 1 : 0;
  return {mt.size() == 10 && base.size() == 10 && identical == 10, std::to_string(identical) + "/10 epochs bit-identical"};
}

Outcome ema_closed_form() {
  double worst = 0.0;
  for (double alpha : {0.9, 0.99, 0.999}) {
    auto pair = init_model<MlpModel>(MlpSpec{4, {5}}, 505, PairHyper{alpha});
    std::mt19937_64 g(5);
    std::vector<std::vector<double>> gap;
    for (auto& t : pair.teacher.tensors) {
      gap.emplace_back();
      for (std::size_t k = 0; k < t.size(); ++k) {
        gap.back().push_back(std::normal_distribution<double>(0, 1)(g));
        t[k] += gap.back().back();
      }
    }
    for (int step = 1; step <= 500; ++step) {
      ema_update(pair);
      for (std::size_t i = 0; i < gap.size(); ++i)
        for (std::size_t k = 0; k < gap[i].size(); ++k)
          worst = std::max(worst, std::abs(pair.teacher[i][k] - pair.student[i][k] - std::pow(alpha, step) * gap[i][k]));
    }
  }
  return {worst <= 1e-12, "alpha 0.9/0.99/0.999, 500 steps, max deviation " + fmt("%.2e", worst)};
}

// Benchmark settings shared by both arms. The generator draws d=50 dense
// coefficients of modest size; both networks get the same width, dropout,
// optimizer and fixed epoch budget.
struct Benchmark {
  std::size_t d = 50, events = 80, censored = 220, unlabeled = 1500;
  double sparsity = 1.0, beta_scale = 0.1;
  std::size_t hidden = 32;
  std::size_t epochs = 300;
  double learning_rate = 0.002;
  std::uint64_t seed = 1;
};

Outcome semi_supervised_gain() {
  const Benchmark b;
  SyntheticConfig sc;
  sc.d = b.d;
  sc.true_beta_sparsity = b.sparsity;
  sc.beta_scale = b.beta_scale;
  sc.seed = b.seed;
  const auto cohort = generate_synthetic_counts(sc, b.events, b.censored, b.unlabeled);
  TrainConfig cfg;
  cfg.epochs = b.epochs;
  cfg.learning_rate = b.learning_rate;
  cfg.seed = b.seed;
  const MlpSpec spec{b.d, {b.hidden}, Activation::tanh, 0.2};
  ProtocolOptions opt;
  opt.threads = std::max(1u, std::thread::hardware_concurrency());

  const auto mt = run_protocol<MlpModel>(cohort.dataset, SearchSpace{}, cfg, spec, b.seed, opt);
  auto base_opt = opt;
  base_opt.trainer = Trainer::supervised_baseline;
  const auto bl = run_protocol<MlpModel>(cohort.dataset, SearchSpace{}, cfg, spec, b.seed, base_opt);
  const auto c_mt = mt.column(&RunReport::c_index), c_bl = bl.column(&RunReport::c_index);
  const double p = wilcoxon_rank_sum(c_mt, c_bl);
  const bool gain = mean_of(c_mt) > mean_of(c_bl) && p < 0.05;

  // Scaling: the generator's unlabeled samples form the pool.
  SurvivalDataset labeled, pool;
  labeled.dim = pool.dim = cohort.dataset.dim;
  for (std::size_t i = 0; i < cohort.dataset.size(); ++i) {
    auto& dst = cohort.dataset.status[i] == Status::unlabeled ? pool : labeled;
    dst.sample_ids.push_back(cohort.dataset.sample_ids[i]);
    auto r = cohort.dataset.row(i);
    dst.features.insert(dst.features.end(), r.begin(), r.end());
    dst.time.push_back(cohort.dataset.time[i]);
    dst.status.push_back(cohort.dataset.status[i]);
  }
  const auto pts = unlabeled_scaling_study(labeled, pool, {0, 500, 1000, 1500}, SearchSpace{}, cfg, spec, b.seed, opt);
  int nondecreasing = 0;
  std::string curve;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    curve += (k ? " " : "") + fmt("%.4f", pts[k].mean_c_index);
    if (k > 0 && pts[k].mean_c_index >= pts[k - 1].mean_c_index) ++nondecreasing;
  }
  // Only three consecutive pairs exist among four sizes, so all must hold.
  const bool monotone = nondecreasing == 3;
  return {gain && monotone, "c-index Cox-MT " + fmt("%.4f", mean_of(c_mt)) + " vs baseline " + fmt("%.4f", mean_of(c_bl)) + ", p " +
                                fmt("%.3g", p) + "; scaling [" + curve + "] " + std::to_string(nondecreasing) + "/3 non-decreasing"};
}

Outcome recovery_bound() {
  SyntheticConfig sc;
  sc.n_samples = 500;
  sc.d = 10;
  sc.true_beta_sparsity = 1.0;
  sc.beta_scale = 1.0;
  sc.seed = 707;
  const auto cohort = generate_synthetic(sc);
  const auto& ds = cohort.dataset;
  SplitOptions so;
  so.seed = 707;
  so.repeats = 1;
  const auto plan = split_folds(ds, so).front();
  auto train = plan.indices(Role::train);
  const auto val = plan.indices(Role::validation);
  train.insert(train.end(), val.begin(), val.end());
  std::sort(train.begin(), train.end());
  const auto test = plan.indices(Role::test);
  const auto z = Standardizer::fit(ds, train);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.learning_rate = 0.005;
  cfg.seed = 707;
  const MlpSpec spec{10, {32}, Activation::tanh, 0.2};
  const auto res = train_cox_mt<MlpModel>(make_training_set<MlpModel>(ds, train, z), cfg, spec);
  const auto eval = make_eval_set<MlpModel>(ds, test, z);
  const double c = concordance_index(predict_all<MlpModel>(spec, res.eval_params(), eval.inputs), eval.times, eval.events);
  std::vector<double> truth, times(eval.times.begin(), eval.times.end());
  for (auto i : test) truth.push_back(cohort.linear_predictor[i]);
  const double c_true = oracle::cindex(truth, times, eval.events);
  return {c >= 0.95 * c_true, "test c-index " + fmt("%.4f", c) + " vs true predictor " + fmt("%.4f", c_true) + " (ratio " +
                                  fmt("%.3f", c / c_true) + ")"};
}

Outcome protocol_audit() {
  const auto ds = load_dataset(std::filesystem::path(COXMT_FIXTURES) / "synthetic_dataset.csv");
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.01;
  const MlpSpec spec{ds.dim, {8}, Activation::tanh, 0.2};
  const std::uint64_t seed = 7;
  const auto ledger = run_protocol<MlpModel>(ds, SearchSpace{}, cfg, spec, seed);
  const auto leaks = audit_leaks(ledger);

  // The audited test ids must be exactly the test role of an independently
  // recomputed split.
  SplitOptions so;
  so.seed = protocol_split_seed(seed);
  const auto plans = split_folds(ds, so);
  std::size_t mismatched = 0;
  for (std::size_t k = 0; k < plans.size() && k < ledger.audits.size(); ++k) {
    std::set<std::string> expected;
    for (auto i : plans[k].indices(Role::test)) expected.insert(ds.sample_ids[i]);
    const auto& a = ledger.audits[k];
    if (std::set<std::string>(a.test_ids.begin(), a.test_ids.end()) != expected || a.gradient_ids.empty() || a.normalization_ids.empty())
      ++mismatched;
  }

  auto tampered = ledger;
  tampered.audits[3].normalization_ids.push_back(tampered.audits[3].test_ids.front());
  const bool detected = audit_leaks(tampered).size() == 1;
  return {ledger.reports.size() == 20 && leaks.empty() && mismatched == 0 && detected,
          std::to_string(ledger.reports.size()) + " reports, " + std::to_string(leaks.size()) + " leaks, " + std::to_string(mismatched) +
              " split mismatches, injected leak " + (detected ? "detected" : "missed")};
}

Outcome fusion_checks() {
  const auto spec = toy_fusion();
  Rng init(909);
  auto params = FusionModel::init(spec, init);
  std::mt19937_64 g(9);
  const Tensor s1 = random_tensor(Shape{3, spec.token_dim}, g), s2 = random_tensor(Shape{4, spec.token_dim}, g);
  std::size_t out_size = 0;
  auto run = [&](std::size_t pad1, std::size_t pad2) {
    Tape tape;
    auto p = bind(tape, params, false);
    auto padded = [&](const Tensor& v, std::size_t pad) {
      Tensor t(Shape{v.rows() + pad, v.cols()});
      std::copy(v.data().begin(), v.data().end(), t.data().begin());
      for (std::size_t k = v.size(); k < t.size(); ++k) t[k] = 250.0 * static_cast<double>(k % 5) - 400.0;
      std::vector<bool> mask(v.rows() + pad, false);
      for (std::size_t k = v.rows(); k < mask.size(); ++k) mask[k] = true;
      return TokenSequence{tape.constant(std::move(t)), mask};
    };
    Rng unused(0);
    const Var out = mutual_attention_forward(spec, p, padded(s1, pad1), padded(s2, pad2), 0.0, unused, Mode::eval);
    out_size = out.value().size();
    return out.item();
  };
  const double base = run(0, 0);
  const bool scalar = out_size == 1;
  double mask_diff = 0.0;
  for (auto [a, b] : {std::pair<std::size_t, std::size_t>{4, 0}, {0, 7}, {2, 3}}) mask_diff = std::max(mask_diff, std::abs(run(a, b) - base));

  // Two keys, one head, identity projections: weights softmax([1, 0] / sqrt(2)).
  Tape tape;
  const Var I = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const Tensor out = multi_head_attention(tape.constant(Tensor::matrix(1, 2, {1, 0})), tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1})),
                                          {false, false}, I, I, I, I, 1)
                         .value();
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double oracle_err = std::max(std::abs(out[0] - e / (e + 1.0)), std::abs(out[1] - 1.0 / (e + 1.0)));
  return {scalar && mask_diff < 1e-12 && oracle_err <= 1e-10, std::string(scalar ? "scalar output" : "non-scalar output") + ", pad change " +
                                                                  fmt("%.1e", mask_diff) + ", oracle err " + fmt("%.1e", oracle_err)};
}

}  // namespace

// Optional arguments pick a subset of criteria by number.
int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  warning_sink() = [](const std::string&) {};
  report(1, "gradient suite", gradients);
  report(2, "metric oracles", metric_oracles);
  report(3, "rank-sum constant", wilcoxon_constant);
  report(4, "reduction identity", reduction_identity);
  report(5, "EMA closed form", ema_closed_form);
  report(6, "semi-supervised gain", semi_supervised_gain);
  report(7, "recovery bound", recovery_bound);
  report(8, "protocol audit", protocol_audit);
  report(9, "fusion shape and mask", fusion_checks);
  std::printf("%d criteria failed\n", failures);
  return failures;
}
