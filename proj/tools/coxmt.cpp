// coxmt: batch front end for ingestion, training, the repeated k-fold
// protocol, ablations, unlabeled-data scaling, ledger comparison and KM export.
//
// Exit codes: 0 ok, 2 input/config error, 3 numerical divergence,
// 4 protocol violation.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "coxmt/coxmt.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace coxmt;

namespace {

constexpr int kExitOk = 0, kExitInput = 2, kExitDiverged = 3, kExitProtocol = 4;
constexpr const char* kOutputRootEnv = "COXMT_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Job configuration

// Rejects keys outside `allowed`, naming the section.
void check_keys(const json& obj, const std::string& section, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + section);
}

template <class T>
void read_opt(const json& obj, const char* key, T& out, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + section);
  }
}

struct DataSection {
  fs::path archive;
  fs::path patch_dir;
  std::size_t patch_width = 1024;
};

struct ScalingSection {
  fs::path pool;
  std::vector<std::size_t> sizes;
};

struct AblationSection {
  std::string parameter;
  std::vector<double> values;
};

struct Job {
  std::uint64_t seed = 1;
  std::string output;
  DataSection data;
  std::string model_type = "mlp";
  MlpSpec mlp{0, {32}, Activation::tanh, 0.2};
  FusionSpec fusion;
  TrainConfig train;
  Trainer trainer = Trainer::cox_mt;
  SearchSpace search;
  ProtocolOptions protocol;
  AblationSection ablation;
  ScalingSection scaling;
  json raw;
};

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("activation must be tanh or relu, got '" + s + "'");
}

Trainer parse_trainer(const std::string& s) {
  if (s == "cox_mt") return Trainer::cox_mt;
  if (s == "baseline") return Trainer::supervised_baseline;
  throw ConfigError("trainer must be cox_mt or baseline, got '" + s + "'");
}

void parse_train(const json& t, TrainConfig& cfg, Trainer& trainer) {
  const std::string sec = "train";
  check_keys(t, sec, {"alpha", "consistency_weight", "noise_sigma", "student_dropout", "teacher_dropout", "dropout", "learning_rate", "optimizer",
                      "epochs", "early_stop_patience", "batch_mode", "minibatch_events", "risk_controls_per_event", "consistency_samples",
                      "evaluate", "trainer"});
  read_opt(t, "alpha", cfg.alpha, sec);
  read_opt(t, "consistency_weight", cfg.consistency_weight, sec);
  read_opt(t, "noise_sigma", cfg.noise_sigma, sec);
  if (t.contains("dropout")) {
    double d = 0;
    read_opt(t, "dropout", d, sec);
    cfg.student_dropout = cfg.teacher_dropout = d;
  }
  read_opt(t, "student_dropout", cfg.student_dropout, sec);
  read_opt(t, "teacher_dropout", cfg.teacher_dropout, sec);
  read_opt(t, "learning_rate", cfg.learning_rate, sec);
  read_opt(t, "epochs", cfg.epochs, sec);
  read_opt(t, "early_stop_patience", cfg.early_stop_patience, sec);
  read_opt(t, "minibatch_events", cfg.minibatch_events, sec);
  read_opt(t, "risk_controls_per_event", cfg.risk_controls_per_event, sec);
  read_opt(t, "consistency_samples", cfg.consistency_samples, sec);
  std::string s;
  if (t.contains("optimizer")) {
    read_opt(t, "optimizer", s, sec);
    if (s == "adam") cfg.optimizer = OptimizerKind::adam;
    else if (s == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else throw ConfigError("optimizer must be adam or sgd");
  }
  if (t.contains("batch_mode")) {
    read_opt(t, "batch_mode", s, sec);
    if (s == "full") cfg.batch_mode = BatchMode::full_batch;
    else if (s == "minibatch") cfg.batch_mode = BatchMode::risk_set_minibatch;
    else throw ConfigError("batch_mode must be full or minibatch");
  }
  if (t.contains("evaluate")) {
    read_opt(t, "evaluate", s, sec);
    if (s != "teacher" && s != "student") throw ConfigError("evaluate must be teacher or student");
    cfg.evaluate_teacher = s == "teacher";
  }
  if (t.contains("trainer")) {
    read_opt(t, "trainer", s, sec);
    trainer = parse_trainer(s);
  }
}

fs::path resolve_input(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

Job parse_job(const json& doc, const fs::path& base_dir) {
  check_keys(doc, "job config", {"version", "seed", "output", "data", "model", "train", "search", "protocol", "ablation", "scaling"});
  if (!doc.contains("version")) throw ConfigError("job config needs a 'version' field");
  if (!doc.at("version").is_number_integer() || doc.at("version").get<int>() != 1)
    throw ConfigError("unsupported job config version (expected 1)");
  Job job;
  job.raw = doc;
  read_opt(doc, "seed", job.seed, "job config");
  read_opt(doc, "output", job.output, "job config");
  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    check_keys(d, "data", {"archive", "patch_dir", "patch_width"});
    std::string s;
    if (d.contains("archive")) read_opt(d, "archive", s, "data"), job.data.archive = resolve_input(base_dir, s);
    if (d.contains("patch_dir")) read_opt(d, "patch_dir", s, "data"), job.data.patch_dir = resolve_input(base_dir, s);
    read_opt(d, "patch_width", job.data.patch_width, "data");
  }
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    check_keys(m, "model", {"type", "hidden_sizes", "activation", "fusion"});
    read_opt(m, "type", job.model_type, "model");
    if (job.model_type != "mlp" && job.model_type != "fusion") throw ConfigError("model type must be mlp or fusion");
    read_opt(m, "hidden_sizes", job.mlp.hidden_sizes, "model");
    job.fusion.head_hidden_sizes = job.mlp.hidden_sizes;
    if (m.contains("activation")) {
      std::string a;
      read_opt(m, "activation", a, "model");
      job.mlp.activation = job.fusion.activation = parse_activation(a);
    }
    if (m.contains("fusion")) {
      const auto& f = m.at("fusion");
      check_keys(f, "model.fusion", {"expr_token_count", "token_dim", "max_patch_tokens", "heads_per_mha", "mha_output_dim"});
      read_opt(f, "expr_token_count", job.fusion.expr_token_count, "model.fusion");
      read_opt(f, "token_dim", job.fusion.token_dim, "model.fusion");
      read_opt(f, "max_patch_tokens", job.fusion.max_patch_tokens, "model.fusion");
      read_opt(f, "heads_per_mha", job.fusion.heads_per_mha, "model.fusion");
      read_opt(f, "mha_output_dim", job.fusion.mha_output_dim, "model.fusion");
    }
  }
  if (doc.contains("train")) parse_train(doc.at("train"), job.train, job.trainer);
  if (doc.contains("search")) {
    const auto& s = doc.at("search");
    check_keys(s, "search", {"learning_rate", "dropout", "alpha", "noise_sigma", "hidden_sizes"});
    read_opt(s, "learning_rate", job.search.learning_rate, "search");
    read_opt(s, "dropout", job.search.dropout, "search");
    read_opt(s, "alpha", job.search.alpha, "search");
    read_opt(s, "noise_sigma", job.search.noise_sigma, "search");
    read_opt(s, "hidden_sizes", job.search.hidden_sizes, "search");
  }
  if (doc.contains("protocol")) {
    const auto& p = doc.at("protocol");
    check_keys(p, "protocol", {"folds", "repeats", "val_fraction", "stratified", "standardize"});
    read_opt(p, "folds", job.protocol.split.k, "protocol");
    read_opt(p, "repeats", job.protocol.split.repeats, "protocol");
    read_opt(p, "val_fraction", job.protocol.split.val_fraction, "protocol");
    read_opt(p, "stratified", job.protocol.split.stratified, "protocol");
    read_opt(p, "standardize", job.protocol.standardize, "protocol");
  }
  if (doc.contains("ablation")) {
    const auto& a = doc.at("ablation");
    check_keys(a, "ablation", {"parameter", "values"});
    read_opt(a, "parameter", job.ablation.parameter, "ablation");
    read_opt(a, "values", job.ablation.values, "ablation");
  }
  if (doc.contains("scaling")) {
    const auto& s = doc.at("scaling");
    check_keys(s, "scaling", {"pool", "sizes"});
    std::string p;
    if (s.contains("pool")) read_opt(s, "pool", p, "scaling"), job.scaling.pool = resolve_input(base_dir, p);
    read_opt(s, "sizes", job.scaling.sizes, "scaling");
  }
  job.train.seed = job.seed;
  return job;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open config " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

Job load_job(const std::string& path) {
  const fs::path p(path);
  return parse_job(read_json_file(p), p.parent_path());
}

json train_config_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"consistency_weight", c.consistency_weight},
          {"noise_sigma", c.noise_sigma},
          {"student_dropout", c.student_dropout},
          {"teacher_dropout", c.teacher_dropout},
          {"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
          {"epochs", c.epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"batch_mode", c.batch_mode == BatchMode::full_batch ? "full" : "minibatch"},
          {"evaluate", c.evaluate_teacher ? "teacher" : "student"},
          {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Shared flags and output handling

struct Common {
  std::string out;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  bool quiet = false;
};

// Resolves the output directory: an absolute --out wins; relative paths sit
// under $COXMT_OUTPUT_ROOT (default: working directory) and may not climb out.
fs::path output_dir(const Common& c, const std::string& from_config, const std::string& fallback) {
  std::string chosen = !c.out.empty() ? c.out : !from_config.empty() ? from_config : fallback;
  fs::path p(chosen);
  if (p.is_absolute()) {
    fs::create_directories(p);
    return p;
  }
  const char* env = std::getenv(kOutputRootEnv);
  const fs::path root = fs::absolute(env && *env ? fs::path(env) : fs::current_path()).lexically_normal();
  const fs::path full = (root / p).lexically_normal();
  const auto rel = full.lexically_relative(root);
  if (rel.empty() || *rel.begin() == "..") throw ConfigError("output directory '" + chosen + "' escapes the output root " + root.string());
  fs::create_directories(full);
  return full;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream o(p);
  if (!o) throw FormatError("cannot write " + p.string());
  return o;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

void add_common(CLI::App* app, Common& c) {
  app->add_option("-o,--out", c.out, "Output directory (relative paths resolve under $" + std::string(kOutputRootEnv) + ")");
  app->add_option("-j,--threads", c.threads, "Worker threads for independent runs")->check(CLI::PositiveNumber);
  app->add_flag("-q,--quiet", c.quiet, "Suppress warnings");
}

// Flag overrides applied on top of the job document.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> trainer;
  std::vector<std::string> set;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--seed", o.seed, "Override the job seed");
  app->add_option("--epochs", o.epochs, "Override train.epochs");
  app->add_option("--trainer", o.trainer, "Override train.trainer (cox_mt | baseline)");
  app->add_option("--set", o.set, "Override a training knob, NAME=VALUE (repeatable)");
}

void apply(const Overrides& o, Job& job) {
  if (o.seed) job.seed = *o.seed, job.train.seed = *o.seed;
  if (o.epochs) job.train.epochs = *o.epochs;
  if (o.trainer) job.trainer = parse_trainer(*o.trainer);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects NAME=VALUE, got '" + kv + "'");
    auto v = csv::parse_double(kv.substr(eq + 1));
    if (!v) throw ConfigError("--set value for " + kv.substr(0, eq) + " is not a number");
    set_parameter(job.train, kv.substr(0, eq), *v);
  }
  job.train.validate();
}

SurvivalDataset load_archive(const fs::path& p) {
  if (p.empty()) throw ConfigError("job config needs data.archive");
  try {
    return load_dataset(p);
  } catch (const FormatError& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

MultimodalDataset load_multimodal(const Job& job) {
  MultimodalDataset m{load_archive(job.data.archive), {}};
  if (job.data.patch_dir.empty()) throw ConfigError("fusion model needs data.patch_dir");
  for (const auto& id : m.base.sample_ids) m.patches.push_back(load_patch_features(job.data.patch_dir, id, job.data.patch_width));
  return m;
}

MlpSpec mlp_spec(const Job& job, std::size_t dim) {
  MlpSpec s = job.mlp;
  s.input_dim = dim;
  s.dropout_rate = job.train.student_dropout;
  s.validate();
  return s;
}

FusionSpec fusion_spec(const Job& job, std::size_t dim) {
  FusionSpec s = job.fusion;
  s.expr_dim = dim;
  s.patch_dim = job.data.patch_width;
  s.dropout_rate = job.train.student_dropout;
  s.validate();
  return s;
}

// Calls fn(model_tag, data, spec) with the configured model family.
template <class Fn>
void with_model(const Job& job, Fn&& fn) {
  if (job.model_type == "fusion") {
    const auto data = load_multimodal(job);
    fn(FusionModel{}, data, fusion_spec(job, data.base.dim));
  } else {
    const auto data = load_archive(job.data.archive);
    fn(MlpModel{}, data, mlp_spec(job, data.dim));
  }
}

json manifest(const Job& job, const std::string& command) {
  json m;
  m["command"] = command;
  m["seed"] = job.seed;
  m["job"] = job.raw;
  m["resolved_train"] = train_config_json(job.train);
  m["trainer"] = job.trainer == Trainer::cox_mt ? "cox_mt" : "baseline";
  m["model"] = job.model_type;
  if (!job.data.archive.empty()) {
    m["data_archive"] = job.data.archive.string();
    m["data_hash"] = hex64(file_hash(job.data.archive));
  }
  return m;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string fmt_p(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2g", p);
  return buf;
}

std::string hidden_str(const std::vector<std::size_t>& h) {
  std::string s;
  for (std::size_t i = 0; i < h.size(); ++i) s += (i ? "x" : "") + std::to_string(h[i]);
  return s.empty() ? "linear" : s;
}

void save_fold_plans(const fs::path& p, const SurvivalDataset& ds, const ProtocolOptions& opt, std::uint64_t seed) {
  SplitOptions so = opt.split;
  so.seed = protocol_split_seed(seed);
  auto o = open_out(p);
  write_fold_plans(o, split_folds(ds, so), ds.sample_ids);
}

json ledger_summary(const RunLedger& l) {
  const auto c = l.column(&RunReport::c_index), b = l.column(&RunReport::ibs), p = l.column(&RunReport::stratification_p);
  std::size_t sig = 0;
  for (double v : p) sig += v < 0.05;
  return {{"runs", l.reports.size()},
          {"mean_c_index", mean_of(c)},
          {"mean_ibs", mean_of(b)},
          {"median_stratification_p", median(p)},
          {"runs_with_logrank_p_below_0.05", sig}};
}

// Ledger, chosen hyperparameters, per-run KM curves and the summary document.
void write_protocol_outputs(const fs::path& dir, const RunLedger& ledger) {
  {
    auto o = open_out(dir / "ledger.csv");
    write_ledger(o, ledger);
  }
  {
    auto o = open_out(dir / "chosen.csv");
    o << "repeat,fold,learning_rate,dropout,alpha,noise_sigma,hidden_sizes,epochs\n";
    for (const auto& r : ledger.reports)
      o << r.repeat << ',' << r.fold << ',' << csv::format_double(r.chosen.learning_rate) << ',' << csv::format_double(r.chosen.student_dropout)
        << ',' << csv::format_double(r.chosen.alpha) << ',' << csv::format_double(r.chosen.noise_sigma) << ',' << hidden_str(r.chosen_hidden)
        << ',' << r.epochs_trained << '\n';
  }
  fs::create_directories(dir / "km");
  for (const auto& r : ledger.reports) {
    if (!r.stratified) continue;
    const std::string stem = "r" + std::to_string(r.repeat) + "_f" + std::to_string(r.fold);
    auto hi = open_out(dir / "km" / (stem + "_high.csv"));
    write_km_curve(hi, r.km_high);
    auto lo = open_out(dir / "km" / (stem + "_low.csv"));
    write_km_curve(lo, r.km_low);
  }
  json s = ledger_summary(ledger);
  s["leak_audit"] = audit_leaks(ledger);
  write_json(dir / "summary.json", s);
}

void print_ledger_table(const RunLedger& l) {
  std::cout << "repeat fold  c-index     IBS  logrank-p\n";
  for (const auto& r : l.reports)
    std::cout << std::setw(6) << r.repeat << std::setw(5) << r.fold << std::setw(9) << fmt(r.c_index) << std::setw(8) << fmt(r.ibs)
              << std::setw(11) << (r.stratified ? fmt_p(r.stratification_p) : std::string("n/a")) << '\n';
  const auto s = ledger_summary(l);
  std::cout << "mean c-index " << fmt(s["mean_c_index"].get<double>()) << "  mean IBS " << fmt(s["mean_ibs"].get<double>())
            << "  median log-rank p " << fmt_p(s["median_stratification_p"].get<double>()) << '\n';
}

// ---------------------------------------------------------------------------
// Subcommands

struct IngestArgs {
  std::string expression, clinical, unlabeled, reference, housekeeping, patch_dir, orientation = "samples";
  std::size_t top_genes = 4000, patch_width = 1024;
  bool unlabeled_rest = false, no_log = false, dedup = false;
};

std::vector<std::string> read_id_list(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open id list " + p.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    auto t = csv::trim(line);
    if (!t.empty()) ids.emplace_back(t);
  }
  return ids;
}

template <class F>
auto with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const FormatError& e) {
    const std::string what = e.what();
    if (what.find(path) != std::string::npos) throw;
    throw FormatError(path + ": " + what);
  }
}

int cmd_ingest(const IngestArgs& a, const Common& c) {
  if (a.orientation != "samples" && a.orientation != "genes") throw ConfigError("--orientation must be samples or genes");
  const auto orient = a.orientation == "samples" ? Orientation::samples_as_rows : Orientation::genes_as_rows;
  IngestionReport ir;
  auto expr = with_path(a.expression, [&] { return load_expression_csv(a.expression, orient, a.dedup, &ir); });
  const auto clinical = with_path(a.clinical, [&] { return load_clinical_csv(a.clinical); });
  std::vector<std::string> unl;
  if (!a.unlabeled.empty()) unl = with_path(a.unlabeled, [&] { return read_id_list(a.unlabeled); });
  if (a.unlabeled_rest) {
    std::set<std::string> labeled;
    for (const auto& r : clinical) labeled.insert(r.sample_id);
    std::set<std::string> listed(unl.begin(), unl.end());
    for (const auto& id : expr.sample_ids)
      if (!labeled.count(id) && !listed.count(id)) unl.push_back(id);
  }

  PreprocessPipeline pipe(std::move(expr));
  if (!a.reference.empty()) {
    const auto ref = with_path(a.reference, [&] { return load_expression_csv(a.reference, orient); });
    if (a.housekeeping.empty()) pipe.normalize(ref);
    else pipe.normalize(ref, with_path(a.housekeeping, [&] { return read_id_list(a.housekeeping); }));
  }
  const std::size_t genes_in = pipe.matrix().n_genes();
  const std::size_t k = std::min(a.top_genes, genes_in);
  if (k < a.top_genes) warn("only " + std::to_string(genes_in) + " genes available; keeping all of them");
  pipe.select_top_variance(k);
  if (!a.no_log) pipe.log_transform();
  const auto factor = pipe.normalization_factor();
  const ExpressionMatrix m = std::move(pipe).release();
  AssemblyReport ar;
  const auto ds = assemble_dataset(m, clinical, unl, &ar);

  std::size_t with_patches = 0;
  if (!a.patch_dir.empty())
    for (const auto& id : ds.sample_ids) load_patch_features(a.patch_dir, id, a.patch_width), ++with_patches;

  const auto dir = output_dir(c, "", "ingest");
  save_dataset(dir / "dataset.csv", ds);
  fs::create_directories(dir / "export");
  {
    // Samples dropped at assembly are absent from the export too.
    ExpressionMatrix kept;
    kept.gene_ids = m.gene_ids;
    kept.sample_ids = ds.sample_ids;
    kept.values = ds.features;
    write_expression_csv(dir / "export" / "expression.csv", kept);
    auto cl = open_out(dir / "export" / "clinical.csv");
    cl << "sample_id,time,status\n";
    auto ul = open_out(dir / "export" / "unlabeled.txt");
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.status[i] == Status::unlabeled) ul << ds.sample_ids[i] << '\n';
      else cl << ds.sample_ids[i] << ',' << csv::format_double(*ds.time[i]) << ',' << (ds.status[i] == Status::event ? 1 : 0) << '\n';
    }
  }
  const auto hash = hex64(file_hash(dir / "dataset.csv"));
  std::size_t n_ev = 0, n_ce = 0, n_un = 0;
  for (auto s : ds.status) (s == Status::event ? n_ev : s == Status::censored ? n_ce : n_un)++;
  {
    auto r = open_out(dir / "ingest_report.txt");
    r << "archive dataset.csv\nhash " << hash << '\n';
    r << "samples " << ds.size() << "\nevent " << n_ev << "\ncensored " << n_ce << "\nunlabeled " << n_un << '\n';
    r << "genes_after_missing_filter " << genes_in << "\ngenes_kept " << ds.dim << '\n';
    r << "log2_transform " << (a.no_log ? "no" : "yes") << '\n';
    r << "normalization_factor " << (factor ? csv::format_double(*factor) : std::string("none")) << '\n';
    if (!a.patch_dir.empty()) r << "samples_with_patch_features " << with_patches << '\n';
    for (const auto& g : ir.dropped_genes) r << "dropped_gene " << g << '\n';
    for (const auto& s : ir.duplicate_samples_removed) r << "duplicate_sample_removed " << s << '\n';
    for (const auto& s : ar.dropped_samples) r << "dropped_sample " << s << '\n';
  }
  std::cout << "samples " << ds.size() << " (event " << n_ev << ", censored " << n_ce << ", unlabeled " << n_un << "), genes " << ds.dim
            << "\narchive " << (dir / "dataset.csv").string() << "\nhash " << hash << '\n';
  return kExitOk;
}

struct SynthArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
};

int cmd_synth(const SynthArgs& a, const Common& c) {
  const auto doc = read_json_file(a.config);
  check_keys(doc, "synthetic config", {"version", "output", "synthetic"});
  if (!doc.contains("version") || doc.at("version") != 1) throw ConfigError("synthetic config needs \"version\": 1");
  SyntheticConfig cfg;
  std::optional<std::array<std::size_t, 3>> counts;
  if (doc.contains("synthetic")) {
    const auto& s = doc.at("synthetic");
    const std::string sec = "synthetic";
    check_keys(s, sec, {"n_samples", "d", "true_beta_sparsity", "beta_scale", "baseline_rate", "censor_rate", "unlabeled_fraction", "seed", "beta",
                        "counts"});
    read_opt(s, "n_samples", cfg.n_samples, sec);
    read_opt(s, "d", cfg.d, sec);
    read_opt(s, "true_beta_sparsity", cfg.true_beta_sparsity, sec);
    read_opt(s, "beta_scale", cfg.beta_scale, sec);
    read_opt(s, "baseline_rate", cfg.baseline_rate, sec);
    read_opt(s, "censor_rate", cfg.censor_rate, sec);
    read_opt(s, "unlabeled_fraction", cfg.unlabeled_fraction, sec);
    read_opt(s, "seed", cfg.seed, sec);
    if (s.contains("beta")) {
      std::vector<double> b;
      read_opt(s, "beta", b, sec);
      cfg.beta = b;
    }
    if (s.contains("counts")) {
      const auto& k = s.at("counts");
      check_keys(k, "synthetic.counts", {"events", "censored", "unlabeled"});
      std::array<std::size_t, 3> v{0, 0, 0};
      read_opt(k, "events", v[0], "synthetic.counts");
      read_opt(k, "censored", v[1], "synthetic.counts");
      read_opt(k, "unlabeled", v[2], "synthetic.counts");
      counts = v;
    }
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.n) cfg.n_samples = *a.n;
  cfg.validate();
  const auto cohort = counts ? generate_synthetic_counts(cfg, (*counts)[0], (*counts)[1], (*counts)[2]) : generate_synthetic(cfg);
  std::string out_cfg;
  if (doc.contains("output")) read_opt(doc, "output", out_cfg, "synthetic config");
  const auto dir = output_dir(c, out_cfg, "synth");
  save_dataset(dir / "dataset.csv", cohort.dataset);
  json truth = {{"seed", cfg.seed},
                {"beta", cohort.beta},
                {"censoring_rate", cohort.censoring_rate},
                {"linear_predictor", cohort.linear_predictor},
                {"sample_ids", cohort.dataset.sample_ids}};
  write_json(dir / "truth.json", truth);
  std::size_t n_ev = cohort.dataset.n_events(), n_ce = 0, n_un = 0;
  for (auto s : cohort.dataset.status) n_ce += s == Status::censored, n_un += s == Status::unlabeled;
  const std::size_t labeled = n_ev + n_ce;
  std::cout << "samples " << cohort.dataset.size() << " (event " << n_ev << ", censored " << n_ce << ", unlabeled " << n_un << ")\n";
  std::cout << "censored fraction " << fmt(labeled ? static_cast<double>(n_ce) / static_cast<double>(labeled) : 0.0) << '\n';
  std::cout << "archive " << (dir / "dataset.csv").string() << "\nhash " << hex64(file_hash(dir / "dataset.csv")) << '\n';
  return kExitOk;
}

int cmd_train(Job job, const Overrides& ov, const Common& c) {
  apply(ov, job);
  const auto dir = output_dir(c, job.output, "train");
  with_model(job, [&](auto tag, const auto& data, const auto& spec) {
    using Model = decltype(tag);
    const auto& ds = outcomes(data);
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), 0);
    std::vector<std::size_t> labeled = ds.labeled_indices();
    const Standardizer z = job.protocol.standardize ? Standardizer::fit(ds, rows) : Standardizer::identity(ds.dim);
    const auto tset = make_training_set<Model>(data, rows, z);
    auto res = detail::train_with<Model>(job.trainer, tset, job.train, spec, nullptr);
    const auto pred = predict_all<Model>(spec, res.eval_params(), tset.inputs);

    const auto& cfg = job.train;
    save_checkpoint(dir / "checkpoint.bin",
                    Checkpoint{spec.describe(),
                               {cfg.alpha, cfg.consistency_weight, cfg.noise_sigma, cfg.student_dropout, cfg.teacher_dropout, cfg.learning_rate},
                               res.pair.student,
                               res.pair.teacher});
    {
      auto o = open_out(dir / "trace.csv");
      o << "epoch,supervised_loss,consistency_loss\n";
      for (std::size_t e = 0; e < res.trace.supervised_loss.size(); ++e)
        o << e + 1 << ',' << csv::format_double(res.trace.supervised_loss[e]) << ',' << csv::format_double(res.trace.consistency_loss[e]) << '\n';
    }
    {
      auto o = open_out(dir / "predictions.csv");
      o << "sample_id,risk\n";
      for (std::size_t i = 0; i < ds.size(); ++i) o << ds.sample_ids[i] << ',' << csv::format_double(pred[i]) << '\n';
      auto zo = open_out(dir / "standardizer.csv");
      zo << "feature,mean,scale\n";
      for (std::size_t j = 0; j < z.mean.size(); ++j) zo << j << ',' << csv::format_double(z.mean[j]) << ',' << csv::format_double(z.scale[j]) << '\n';
    }
    std::vector<double> lp, lt;
    std::vector<bool> le;
    for (auto i : labeled) lp.push_back(pred[i]), lt.push_back(*ds.time[i]), le.push_back(ds.status[i] == Status::event);
    const double cidx = concordance_index(lp, lt, le);
    auto m = manifest(job, "train");
    m["checkpoint"] = "checkpoint.bin";
    m["spec"] = spec.describe();
    m["epochs_run"] = res.trace.epochs_run;
    m["training_c_index"] = cidx;
    write_json(dir / "manifest.json", m);
    std::cout << "epochs " << res.trace.epochs_run << "  final L_s " << fmt(res.trace.supervised_loss.empty() ? 0.0 : res.trace.supervised_loss.back())
              << "  final L_u " << fmt(res.trace.consistency_loss.empty() ? 0.0 : res.trace.consistency_loss.back()) << "  training c-index "
              << fmt(cidx) << "\ncheckpoint " << (dir / "checkpoint.bin").string() << '\n';
  });
  return kExitOk;
}

int cmd_protocol(Job job, const Overrides& ov, const Common& c) {
  apply(ov, job);
  job.protocol.trainer = job.trainer;
  job.protocol.threads = c.threads;
  const auto dir = output_dir(c, job.output, "protocol");
  with_model(job, [&](auto tag, const auto& data, const auto& spec) {
    using Model = decltype(tag);
    const auto ledger = run_protocol<Model>(data, job.search, job.train, spec, job.seed, job.protocol);
    write_protocol_outputs(dir, ledger);
    save_fold_plans(dir / "fold_plans.txt", outcomes(data), job.protocol, job.seed);
    auto m = manifest(job, "protocol");
    m["fold_plans"] = "fold_plans.txt";
    m["ledger"] = "ledger.csv";
    m["checkpoint"] = nullptr;
    json seeds = json::array();
    for (const auto& r : ledger.reports) seeds.push_back(r.seed);
    m["run_seeds"] = seeds;
    write_json(dir / "manifest.json", m);
    print_ledger_table(ledger);
    const auto leaks = audit_leaks(ledger);
    if (!leaks.empty()) throw ProtocolError("test isolation violated: " + leaks.front());
  });
  return kExitOk;
}

struct AblateArgs {
  std::string parameter;
  std::vector<double> values;
};

int cmd_ablate(Job job, const Overrides& ov, const AblateArgs& a, const Common& c) {
  apply(ov, job);
  if (!a.parameter.empty()) job.ablation.parameter = a.parameter;
  if (!a.values.empty()) job.ablation.values = a.values;
  if (job.ablation.parameter.empty()) throw ConfigError("ablation needs a parameter (ablation.parameter or --parameter)");
  job.protocol.trainer = job.trainer;
  job.protocol.threads = c.threads;
  const auto dir = output_dir(c, job.output, "ablate");
  with_model(job, [&](auto tag, const auto& data, const auto& spec) {
    using Model = decltype(tag);
    const auto t = ablate<Model>(data, job.train, job.ablation.parameter, job.ablation.values, spec, job.seed, job.protocol);
    {
      auto o = open_out(dir / "ablation.csv");
      o << "parameter,value,repeat,fold,validation_error\n";
      for (const auto& r : t.rows)
        o << t.parameter << ',' << csv::format_double(r.value) << ',' << r.repeat << ',' << r.fold << ',' << csv::format_double(r.validation_error) << '\n';
    }
    json s = {{"parameter", t.parameter}, {"values", t.values}, {"mean_validation_error", t.mean_error}};
    write_json(dir / "summary.json", s);
    write_json(dir / "manifest.json", manifest(job, "ablate"));
    std::cout << std::setw(16) << t.parameter << "  mean validation error (1 - c-index)\n";
    for (std::size_t k = 0; k < t.values.size(); ++k) std::cout << std::setw(16) << csv::format_double(t.values[k]) << "  " << fmt(t.mean_error[k]) << '\n';
  });
  return kExitOk;
}

int cmd_scaling(Job job, const Overrides& ov, const std::vector<std::size_t>& sizes, const Common& c) {
  apply(ov, job);
  if (!sizes.empty()) job.scaling.sizes = sizes;
  if (job.model_type != "mlp") throw ConfigError("the scaling study supports the mlp model only");
  if (job.scaling.pool.empty()) throw ConfigError("scaling study needs scaling.pool");
  if (job.scaling.sizes.empty()) throw ConfigError("scaling study needs scaling.sizes");
  job.protocol.trainer = job.trainer;
  job.protocol.threads = c.threads;
  const auto labeled = load_archive(job.data.archive);
  const auto pool = load_archive(job.scaling.pool);
  const auto dir = output_dir(c, job.output, "scaling");
  const auto pts = unlabeled_scaling_study(labeled, pool, job.scaling.sizes, job.search, job.train, mlp_spec(job, labeled.dim), job.seed, job.protocol);
  auto o = open_out(dir / "scaling.csv");
  o << "n_unlabeled,mean_c_index,mean_ibs\n";
  json s = json::array();
  std::cout << "n_unlabeled  mean c-index  mean IBS\n";
  for (const auto& p : pts) {
    const auto sub = dir / ("n" + std::to_string(p.n_unlabeled));
    fs::create_directories(sub);
    write_protocol_outputs(sub, p.ledger);
    auto ids = open_out(sub / "unlabeled_ids.txt");
    for (const auto& id : p.unlabeled_ids) ids << id << '\n';
    o << p.n_unlabeled << ',' << csv::format_double(p.mean_c_index) << ',' << csv::format_double(p.mean_ibs) << '\n';
    s.push_back({{"n_unlabeled", p.n_unlabeled}, {"mean_c_index", p.mean_c_index}, {"mean_ibs", p.mean_ibs}});
    std::cout << std::setw(11) << p.n_unlabeled << std::setw(14) << fmt(p.mean_c_index) << std::setw(10) << fmt(p.mean_ibs) << '\n';
  }
  write_json(dir / "summary.json", s);
  auto m = manifest(job, "scaling");
  m["pool_archive"] = job.scaling.pool.string();
  m["pool_hash"] = hex64(file_hash(job.scaling.pool));
  write_json(dir / "manifest.json", m);
  return kExitOk;
}

RunLedger load_ledger(const std::string& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open ledger " + p);
  return with_path(p, [&] { return read_ledger(in); });
}

json box_json(const BoxStats& b) {
  return {{"min", b.min}, {"q1", b.q1}, {"median", b.median}, {"q3", b.q3}, {"max", b.max}, {"mean", b.mean}};
}

int cmd_compare(const std::string& a, const std::string& b, const Common& c) {
  const auto la = load_ledger(a), lb = load_ledger(b);
  const auto cmp = compare_models(la, lb);
  const auto dir = output_dir(c, "", "compare");
  json j;
  for (const auto* m : {&cmp.c_index, &cmp.ibs}) j[m->metric] = {{"a", box_json(m->a)}, {"b", box_json(m->b)}, {"wilcoxon_p", m->p_value}};
  j["ledger_a"] = a;
  j["ledger_b"] = b;
  write_json(dir / "comparison.json", j);
  {
    auto o = open_out(dir / "comparison.csv");
    o << "metric,mean_a,mean_b,median_a,median_b,wilcoxon_p\n";
    for (const auto* m : {&cmp.c_index, &cmp.ibs})
      o << m->metric << ',' << csv::format_double(m->a.mean) << ',' << csv::format_double(m->b.mean) << ',' << csv::format_double(m->a.median) << ','
        << csv::format_double(m->b.median) << ',' << csv::format_double(m->p_value) << '\n';
  }
  std::cout << "metric     mean A   mean B   Wilcoxon p\n";
  for (const auto* m : {&cmp.c_index, &cmp.ibs})
    std::cout << std::left << std::setw(9) << m->metric << std::right << std::setw(8) << fmt(m->a.mean) << std::setw(9) << fmt(m->b.mean) << "   "
              << fmt_p(m->p_value) << '\n';
  return kExitOk;
}

struct KmArgs {
  std::string archive, risk;
  std::optional<double> cutoff;
};

int cmd_km_export(const KmArgs& a, const Common& c) {
  const auto ds = load_archive(a.archive);
  std::vector<std::size_t> lab = ds.labeled_indices();
  std::vector<double> t;
  std::vector<bool> e;
  for (auto i : lab) t.push_back(*ds.time[i]), e.push_back(ds.status[i] == Status::event);
  const auto dir = output_dir(c, "", "km");
  {
    auto o = open_out(dir / "km_all.csv");
    write_km_curve(o, km_estimate(t, e));
  }
  if (a.risk.empty()) {
    std::cout << "km_all.csv written for " << lab.size() << " labeled samples\n";
    return kExitOk;
  }
  std::map<std::string, double> risk_of;
  {
    std::ifstream in(a.risk);
    if (!in) throw FormatError("cannot open risk file " + a.risk);
    const auto rows = with_path(a.risk, [&] { return csv::read_rows(in); });
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() < 2) throw FormatError(a.risk + ": expected sample_id,risk", r + 1, rows[r].size());
      auto v = csv::parse_double(rows[r][1]);
      if (!v) throw FormatError(a.risk + ": bad risk value", r + 1, 2);
      risk_of[rows[r][0]] = *v;
    }
  }
  std::vector<double> risk;
  for (auto i : lab) {
    auto it = risk_of.find(ds.sample_ids[i]);
    if (it == risk_of.end()) throw FormatError(a.risk + ": no risk for sample '" + ds.sample_ids[i] + "'");
    risk.push_back(it->second);
  }
  const double cut = a.cutoff ? *a.cutoff : median(risk);
  const auto st = stratify_and_logrank(risk, cut, t, e);
  auto hi = open_out(dir / "km_high.csv");
  write_km_curve(hi, st.high);
  auto lo = open_out(dir / "km_low.csv");
  write_km_curve(lo, st.low);
  write_json(dir / "logrank.json", {{"cutoff", cut}, {"n_high", st.n_high}, {"n_low", st.n_low}, {"p_value", st.p_value}});
  std::cout << "high " << st.n_high << "  low " << st.n_low << "  log-rank p " << fmt_p(st.p_value) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised Cox mean-teacher survival models: data ingestion, training and evaluation protocol"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "coxmt 1.0");

  Common common;
  Overrides ov;

  IngestArgs ia;
  auto* ingest = app.add_subcommand("ingest", "Preprocess expression + clinical CSVs into a dataset archive");
  ingest->add_option("--expression", ia.expression, "Expression matrix CSV")->required();
  ingest->add_option("--clinical", ia.clinical, "Clinical CSV with columns sample_id,time,status (1 event, 0 censored)")->required();
  ingest->add_option("--orientation", ia.orientation, "Expression layout: samples (samples as rows) or genes")->check(CLI::IsMember({"samples", "genes"}));
  ingest->add_option("--unlabeled", ia.unlabeled, "File listing unlabeled sample ids, one per line");
  ingest->add_flag("--unlabeled-rest", ia.unlabeled_rest, "Treat every expression sample without a clinical record as unlabeled");
  ingest->add_option("--reference", ia.reference, "Reference expression matrix for housekeeping-gene normalization");
  ingest->add_option("--housekeeping", ia.housekeeping, "Housekeeping gene list (default: built-in 10-gene set)");
  ingest->add_option("--top-genes", ia.top_genes, "Number of highest-variance genes to keep")->check(CLI::PositiveNumber);
  ingest->add_flag("--no-log", ia.no_log, "Skip the log2(1+x) transform");
  ingest->add_flag("--dedup", ia.dedup, "Keep the first of duplicated sample ids instead of failing");
  ingest->add_option("--patch-dir", ia.patch_dir, "Directory of per-sample patch feature files to validate");
  ingest->add_option("--patch-width", ia.patch_width, "Patch feature width");
  add_common(ingest, common);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic Cox cohort archive and its ground truth");
  synth->add_option("config", sa.config, "Synthetic config JSON")->required();
  synth->add_option("--seed", sa.seed, "Override the generator seed");
  synth->add_option("--n", sa.n, "Override n_samples");
  add_common(synth, common);

  std::string job_path;
  auto job_cmd = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("job", job_path, "Job config JSON")->required();
    add_overrides(s, ov);
    add_common(s, common);
    return s;
  };
  auto* train = job_cmd("train", "Train one model on a whole archive; writes checkpoint, trace and predictions");
  auto* protocol = job_cmd("protocol", "Run the repeated k-fold train/validation/test protocol; writes the run ledger");
  AblateArgs aa;
  auto* abl = job_cmd("ablate", "Vary one training knob over the k-fold splits; writes validation errors");
  abl->add_option("--parameter", aa.parameter, "Knob to vary (alpha, w, sigma, dropout, student_dropout, teacher_dropout, learning_rate, epochs)");
  abl->add_option("--values", aa.values, "Values to try");
  std::vector<std::size_t> sizes;
  auto* scaling = job_cmd("scaling", "Repeat the protocol with growing nested unlabeled sets");
  scaling->add_option("--sizes", sizes, "Unlabeled set sizes");

  std::string la, lb;
  auto* compare = app.add_subcommand("compare", "Compare two run ledgers (means, quartiles, Wilcoxon rank-sum p)");
  compare->add_option("ledger_a", la, "First ledger CSV")->required();
  compare->add_option("ledger_b", lb, "Second ledger CSV")->required();
  add_common(compare, common);

  KmArgs ka;
  auto* km = app.add_subcommand("km-export", "Export Kaplan-Meier curves, optionally split into high/low risk groups");
  km->add_option("archive", ka.archive, "Dataset archive")->required();
  km->add_option("--risk", ka.risk, "CSV sample_id,risk (e.g. predictions.csv from train)");
  km->add_option("--cutoff", ka.cutoff, "Risk cutoff (default: median risk)");
  add_common(km, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }
  if (common.quiet) warning_sink() = nullptr;

  try {
    if (ingest->parsed()) return cmd_ingest(ia, common);
    if (synth->parsed()) return cmd_synth(sa, common);
    if (compare->parsed()) return cmd_compare(la, lb, common);
    if (km->parsed()) return cmd_km_export(ka, common);
    Job job = load_job(job_path);
    if (train->parsed()) return cmd_train(std::move(job), ov, common);
    if (protocol->parsed()) return cmd_protocol(std::move(job), ov, common);
    if (abl->parsed()) return cmd_ablate(std::move(job), ov, aa, common);
    if (scaling->parsed()) return cmd_scaling(std::move(job), ov, sizes, common);
  } catch (const DivergedError& e) {
    std::cerr << "error: training diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const ProtocolError& e) {
    std::cerr << "error: protocol violation: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const InvalidRiskSetError& e) {
    std::cerr << "error: protocol violation: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const UndefinedMetricError& e) {
    std::cerr << "error: protocol violation: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}
