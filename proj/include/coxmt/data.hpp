#pragma once

// Ingestion and preprocessing of expression matrices and clinical outcomes,
// survival datasets, synthetic Cox cohorts and cross-validation fold plans.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "coxmt/autodiff.hpp"
#include "coxmt/errors.hpp"

namespace coxmt {

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class... Ts>
std::uint64_t derive_seed(std::uint64_t base, Ts... parts) {
  std::uint64_t s = mix_seed(base);
  ((s = mix_seed(s ^ static_cast<std::uint64_t>(parts))), ...);
  return s;
}

// 64-bit FNV-1a, used for archive fingerprints.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t file_hash(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a(ss.str());
}

// ---------------------------------------------------------------------------
// CSV helpers

namespace csv {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool is_missing(std::string_view cell) { return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan"; }

inline std::optional<double> parse_double(std::string_view cell) {
  double v = 0.0;
  const auto* first = cell.data();
  const auto* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

inline std::vector<std::vector<std::string>> read_rows(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (csv::trim(line).empty()) continue;
    rows.push_back(split(line));
  }
  return rows;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace csv

// ---------------------------------------------------------------------------
// Expression matrices

struct ExpressionMatrix {
  std::vector<std::string> sample_ids;
  std::vector<std::string> gene_ids;
  std::vector<double> values;  // samples x genes, row-major

  std::size_t n_samples() const noexcept { return sample_ids.size(); }
  std::size_t n_genes() const noexcept { return gene_ids.size(); }
  double at(std::size_t s, std::size_t g) const { return values[s * gene_ids.size() + g]; }
  double& at(std::size_t s, std::size_t g) { return values[s * gene_ids.size() + g]; }

  std::optional<std::size_t> gene_index(std::string_view id) const {
    for (std::size_t g = 0; g < gene_ids.size(); ++g)
      if (gene_ids[g] == id) return g;
    return std::nullopt;
  }

  ExpressionMatrix select_genes(std::span<const std::size_t> genes) const {
    ExpressionMatrix out;
    out.sample_ids = sample_ids;
    for (auto g : genes) out.gene_ids.push_back(gene_ids.at(g));
    out.values.reserve(n_samples() * genes.size());
    for (std::size_t s = 0; s < n_samples(); ++s)
      for (auto g : genes) out.values.push_back(at(s, g));
    return out;
  }

  friend bool operator==(const ExpressionMatrix&, const ExpressionMatrix&) = default;
};

enum class Orientation { samples_as_rows, genes_as_rows };

struct IngestionReport {
  std::vector<std::string> dropped_genes;
  std::vector<std::string> duplicate_samples_removed;
};

// Parses a CSV expression matrix. Genes with any missing cell are dropped and
// listed in the report. Duplicate sample ids are an error unless `dedup` is
// set, in which case the first occurrence is kept.
inline ExpressionMatrix parse_expression_csv(std::istream& in, Orientation orientation, bool dedup = false,
                                             IngestionReport* report = nullptr) {
  const auto rows = csv::read_rows(in);
  if (rows.empty()) throw FormatError("empty expression file");
  if (rows.size() < 2 || rows[0].size() < 2) throw FormatError("expression file needs a header row, an id column and at least one value");
  const std::size_t width = rows[0].size();
  for (std::size_t r = 1; r < rows.size(); ++r)
    if (rows[r].size() != width)
      throw FormatError("expected " + std::to_string(width) + " cells, found " + std::to_string(rows[r].size()), r + 1, rows[r].size());

  // Raw grid: first index = file row (minus header), second = file column (minus id column).
  const std::size_t nr = rows.size() - 1, nc = width - 1;
  std::vector<double> grid(nr * nc, 0.0);
  std::vector<char> missing(nr * nc, 0);
  for (std::size_t r = 0; r < nr; ++r)
    for (std::size_t c = 0; c < nc; ++c) {
      const std::string& cell = rows[r + 1][c + 1];
      if (csv::is_missing(cell)) {
        missing[r * nc + c] = 1;
        continue;
      }
      auto v = csv::parse_double(cell);
      if (!v) throw FormatError("unparseable cell '" + cell + "'", r + 2, c + 2);
      grid[r * nc + c] = *v;
    }

  const bool samples_rows = orientation == Orientation::samples_as_rows;
  std::vector<std::string> samples, genes;
  if (samples_rows) {
    for (std::size_t r = 0; r < nr; ++r) samples.push_back(rows[r + 1][0]);
    genes.assign(rows[0].begin() + 1, rows[0].end());
  } else {
    for (std::size_t r = 0; r < nr; ++r) genes.push_back(rows[r + 1][0]);
    samples.assign(rows[0].begin() + 1, rows[0].end());
  }
  auto cell = [&](std::size_t s, std::size_t g) { return samples_rows ? s * nc + g : g * nc + s; };

  std::vector<std::size_t> keep_samples;
  std::unordered_set<std::string> seen;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (!seen.insert(samples[s]).second) {
      if (!dedup) throw FormatError("duplicate sample id '" + samples[s] + "'");
      if (report) report->duplicate_samples_removed.push_back(samples[s]);
      continue;
    }
    keep_samples.push_back(s);
  }
  std::vector<std::size_t> keep_genes;
  for (std::size_t g = 0; g < genes.size(); ++g) {
    bool any_missing = false;
    for (auto s : keep_samples) any_missing = any_missing || missing[cell(s, g)];
    if (any_missing) {
      if (report) report->dropped_genes.push_back(genes[g]);
    } else {
      keep_genes.push_back(g);
    }
  }

  ExpressionMatrix m;
  for (auto s : keep_samples) m.sample_ids.push_back(samples[s]);
  for (auto g : keep_genes) m.gene_ids.push_back(genes[g]);
  m.values.reserve(keep_samples.size() * keep_genes.size());
  for (auto s : keep_samples)
    for (auto g : keep_genes) m.values.push_back(grid[cell(s, g)]);
  return m;
}

inline ExpressionMatrix load_expression_csv(const std::filesystem::path& path, Orientation orientation, bool dedup = false,
                                            IngestionReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open expression file " + path.string());
  return parse_expression_csv(in, orientation, dedup, report);
}

inline void write_expression_csv(std::ostream& out, const ExpressionMatrix& m, Orientation orientation = Orientation::samples_as_rows) {
  if (orientation == Orientation::samples_as_rows) {
    out << "sample_id";
    for (const auto& g : m.gene_ids) out << ',' << g;
    out << '\n';
    for (std::size_t s = 0; s < m.n_samples(); ++s) {
      out << m.sample_ids[s];
      for (std::size_t g = 0; g < m.n_genes(); ++g) out << ',' << csv::format_double(m.at(s, g));
      out << '\n';
    }
  } else {
    out << "gene_id";
    for (const auto& s : m.sample_ids) out << ',' << s;
    out << '\n';
    for (std::size_t g = 0; g < m.n_genes(); ++g) {
      out << m.gene_ids[g];
      for (std::size_t s = 0; s < m.n_samples(); ++s) out << ',' << csv::format_double(m.at(s, g));
      out << '\n';
    }
  }
}

inline void write_expression_csv(const std::filesystem::path& path, const ExpressionMatrix& m,
                                 Orientation orientation = Orientation::samples_as_rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write_expression_csv(out, m, orientation);
}

// log2(1 + x) on every cell.
inline ExpressionMatrix log_transform(ExpressionMatrix m) {
  for (double& v : m.values) {
    if (v < 0.0) throw DomainError("log2(1+x) transform on negative expression value " + std::to_string(v));
    v = std::log2(1.0 + v);
  }
  return m;
}

// Unbiased per-gene sample variance (0 when fewer than two samples).
inline std::vector<double> gene_variances(const ExpressionMatrix& m) {
  const std::size_t n = m.n_samples(), G = m.n_genes();
  std::vector<double> var(G, 0.0);
  if (n < 2) return var;
  for (std::size_t g = 0; g < G; ++g) {
    double mean = 0.0;
    for (std::size_t s = 0; s < n; ++s) mean += m.at(s, g);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t s = 0; s < n; ++s) ss += (m.at(s, g) - mean) * (m.at(s, g) - mean);
    var[g] = ss / static_cast<double>(n - 1);
  }
  return var;
}

// Keeps the k genes of largest variance; ties break toward the earlier gene
// and the original gene order is preserved among the survivors.
inline ExpressionMatrix select_top_variance_genes(const ExpressionMatrix& m, std::size_t k) {
  if (k == 0) throw ConfigError("variance selection needs k > 0");
  if (k > m.n_genes())
    throw ConfigError("cannot select " + std::to_string(k) + " genes from " + std::to_string(m.n_genes()));
  const auto var = gene_variances(m);
  std::vector<std::size_t> order(m.n_genes());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return m.select_genes(order);
}

inline const std::vector<std::string>& default_housekeeping_genes() {
  static const std::vector<std::string> genes = {"C1orf43", "CHMP2A", "GPI",    "PSMB2", "PSMB4",
                                                 "RAB7A",   "REEP5",  "SNRPD3", "VCP",   "VPS29"};
  return genes;
}

struct NormalizationResult {
  ExpressionMatrix matrix;
  double reference_mean = 0.0;  // E_t
  double source_mean = 0.0;     // E_g
  double factor = 1.0;          // E_t / E_g
};

// Scales every source cell by E_t/E_g, where E_t and E_g are the pooled means
// over (samples x housekeeping genes) of the reference and source matrices.
// Operates on the pre-log scale.
inline NormalizationResult normalize_to_reference(const ExpressionMatrix& source, const ExpressionMatrix& reference,
                                                  const std::vector<std::string>& housekeeping = default_housekeeping_genes()) {
  std::vector<std::string> missing;
  std::vector<std::size_t> src_idx, ref_idx;
  for (const auto& g : housekeeping) {
    auto s = source.gene_index(g);
    auto r = reference.gene_index(g);
    if (!s || !r) {
      missing.push_back(g + (s ? " (reference)" : r ? " (source)" : " (both)"));
      continue;
    }
    src_idx.push_back(*s);
    ref_idx.push_back(*r);
  }
  if (!missing.empty()) {
    std::string msg = "housekeeping genes missing:";
    for (const auto& g : missing) msg += " " + g;
    throw ConfigError(msg);
  }
  if (housekeeping.empty()) throw ConfigError("empty housekeeping gene list");
  auto pooled = [](const ExpressionMatrix& m, const std::vector<std::size_t>& idx) {
    if (m.n_samples() == 0) throw ConfigError("normalization over a matrix without samples");
    double s = 0.0;
    for (std::size_t r = 0; r < m.n_samples(); ++r)
      for (auto g : idx) s += m.at(r, g);
    return s / static_cast<double>(m.n_samples() * idx.size());
  };
  NormalizationResult out;
  out.reference_mean = pooled(reference, ref_idx);
  out.source_mean = pooled(source, src_idx);
  if (out.source_mean == 0.0) throw DomainError("degenerate normalization: source housekeeping mean is zero");
  out.factor = out.reference_mean / out.source_mean;
  out.matrix = source;
  for (double& v : out.matrix.values) v *= out.factor;
  return out;
}

// Enforces the preprocessing order: missing-gene drop (at load) ->
// optional reference normalization -> variance selection -> log transform.
class PreprocessPipeline {
 public:
  enum class Stage { loaded = 0, normalized = 1, selected = 2, logged = 3 };

  explicit PreprocessPipeline(ExpressionMatrix m) : m_(std::move(m)) {}

  PreprocessPipeline& normalize(const ExpressionMatrix& reference,
                                const std::vector<std::string>& housekeeping = default_housekeeping_genes()) {
    advance(Stage::normalized, "normalize_to_reference");
    auto r = normalize_to_reference(m_, reference, housekeeping);
    factor_ = r.factor;
    m_ = std::move(r.matrix);
    return *this;
  }
  PreprocessPipeline& select_top_variance(std::size_t k) {
    advance(Stage::selected, "select_top_variance_genes");
    m_ = select_top_variance_genes(m_, k);
    return *this;
  }
  PreprocessPipeline& log_transform() {
    advance(Stage::logged, "log_transform");
    m_ = coxmt::log_transform(std::move(m_));
    return *this;
  }

  Stage stage() const noexcept { return stage_; }
  std::optional<double> normalization_factor() const noexcept { return factor_; }
  const ExpressionMatrix& matrix() const noexcept { return m_; }
  ExpressionMatrix release() && { return std::move(m_); }

 private:
  void advance(Stage next, const char* step) {
    if (static_cast<int>(next) <= static_cast<int>(stage_))
      throw ProtocolError(std::string("preprocessing step ") + step + " applied out of order");
    stage_ = next;
  }

  ExpressionMatrix m_;
  Stage stage_ = Stage::loaded;
  std::optional<double> factor_;
};

// ---------------------------------------------------------------------------
// Clinical data and survival datasets

enum class Status : std::uint8_t { event = 1, censored = 0, unlabeled = 2 };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::event: return "event";
    case Status::censored: return "censored";
    default: return "unlabeled";
  }
}

struct ClinicalRecord {
  std::string sample_id;
  double time = 0.0;
  Status status = Status::event;
};

// Columns sample_id,time,status with status 1 = event, 0 = censored.
inline std::vector<ClinicalRecord> parse_clinical_csv(std::istream& in) {
  const auto rows = csv::read_rows(in);
  if (rows.empty()) throw FormatError("empty clinical file");
  const auto& h = rows[0];
  if (h.size() < 3 || h[0] != "sample_id" || h[1] != "time" || h[2] != "status")
    throw FormatError("clinical header must be sample_id,time,status", 1, 1);
  std::vector<ClinicalRecord> out;
  std::unordered_set<std::string> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() < 3) throw FormatError("expected 3 cells", r + 1, row.size());
    ClinicalRecord rec;
    rec.sample_id = row[0];
    auto t = csv::parse_double(row[1]);
    if (!t) throw FormatError("unparseable time '" + row[1] + "'", r + 1, 2);
    if (!(*t > 0.0) || !std::isfinite(*t)) throw FormatError("time must be positive and finite", r + 1, 2);
    rec.time = *t;
    if (row[2] == "1") rec.status = Status::event;
    else if (row[2] == "0") rec.status = Status::censored;
    else throw FormatError("status must be 1 (event) or 0 (censored), got '" + row[2] + "'", r + 1, 3);
    if (!seen.insert(rec.sample_id).second) throw FormatError("duplicate clinical sample id '" + rec.sample_id + "'", r + 1, 1);
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<ClinicalRecord> load_clinical_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open clinical file " + path.string());
  return parse_clinical_csv(in);
}

// Feature matrix with per-sample outcome. Status unlabeled <=> time absent.
struct SurvivalDataset {
  std::vector<std::string> sample_ids;
  std::size_t dim = 0;
  std::vector<double> features;  // n x dim, row-major
  std::vector<std::optional<double>> time;
  std::vector<Status> status;

  std::size_t size() const noexcept { return sample_ids.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  std::size_t count(Status s) const { return static_cast<std::size_t>(std::count(status.begin(), status.end(), s)); }
  std::size_t n_events() const { return count(Status::event); }
  std::size_t n_censored() const { return count(Status::censored); }
  std::size_t n_unlabeled() const { return count(Status::unlabeled); }
  bool labeled(std::size_t i) const { return status[i] != Status::unlabeled; }

  std::vector<std::size_t> indices_where(auto pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (pred(status[i])) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> labeled_indices() const {
    return indices_where([](Status s) { return s != Status::unlabeled; });
  }
  std::vector<std::size_t> unlabeled_indices() const {
    return indices_where([](Status s) { return s == Status::unlabeled; });
  }

  SurvivalDataset subset(std::span<const std::size_t> idx) const {
    SurvivalDataset out;
    out.dim = dim;
    out.features.reserve(idx.size() * dim);
    for (auto i : idx) {
      out.sample_ids.push_back(sample_ids.at(i));
      auto r = row(i);
      out.features.insert(out.features.end(), r.begin(), r.end());
      out.time.push_back(time[i]);
      out.status.push_back(status[i]);
    }
    return out;
  }

  // Labeled times/status-as-event-flag, in dataset order, for metrics.
  std::vector<double> times_or(double fill) const {
    std::vector<double> t(size());
    for (std::size_t i = 0; i < size(); ++i) t[i] = time[i].value_or(fill);
    return t;
  }
  std::vector<bool> event_flags() const {
    std::vector<bool> e(size());
    for (std::size_t i = 0; i < size(); ++i) e[i] = status[i] == Status::event;
    return e;
  }

  ad::Tensor feature_tensor() const { return ad::Tensor(ad::Shape{size(), dim}, features); }

  void validate() const {
    const std::size_t n = size();
    if (features.size() != n * dim || time.size() != n || status.size() != n)
      throw DimensionError("survival dataset columns have inconsistent lengths");
    for (std::size_t i = 0; i < n; ++i) {
      if ((status[i] == Status::unlabeled) != !time[i].has_value())
        throw ProtocolError("sample '" + sample_ids[i] + "': unlabeled status must coincide with missing time");
      if (time[i] && !(*time[i] > 0.0)) throw ProtocolError("sample '" + sample_ids[i] + "': time must be positive");
    }
  }

  friend bool operator==(const SurvivalDataset&, const SurvivalDataset&) = default;
};

struct AssemblyReport {
  std::vector<std::string> dropped_samples;  // no clinical record and not unlabeled
};

// Joins expression rows with clinical records. Samples listed in
// `unlabeled_ids` become D_u; samples with neither are dropped.
inline SurvivalDataset assemble_dataset(const ExpressionMatrix& expr, const std::vector<ClinicalRecord>& clinical,
                                        const std::vector<std::string>& unlabeled_ids, AssemblyReport* report = nullptr) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t s = 0; s < expr.n_samples(); ++s) row_of.emplace(expr.sample_ids[s], s);
  std::unordered_map<std::string, const ClinicalRecord*> rec_of;
  for (const auto& r : clinical) {
    if (!row_of.count(r.sample_id)) throw ProtocolError("clinical sample '" + r.sample_id + "' absent from expression matrix");
    rec_of.emplace(r.sample_id, &r);
  }
  std::unordered_set<std::string> unl(unlabeled_ids.begin(), unlabeled_ids.end());
  for (const auto& u : unlabeled_ids) {
    if (rec_of.count(u)) throw ProtocolError("sample '" + u + "' is both labeled and unlabeled");
    if (!row_of.count(u)) throw ProtocolError("unlabeled sample '" + u + "' absent from expression matrix");
  }

  SurvivalDataset ds;
  ds.dim = expr.n_genes();
  for (std::size_t s = 0; s < expr.n_samples(); ++s) {
    const auto& id = expr.sample_ids[s];
    auto it = rec_of.find(id);
    if (it != rec_of.end()) {
      ds.time.emplace_back(it->second->time);
      ds.status.push_back(it->second->status);
    } else if (unl.count(id)) {
      ds.time.emplace_back(std::nullopt);
      ds.status.push_back(Status::unlabeled);
    } else {
      if (report) report->dropped_samples.push_back(id);
      continue;
    }
    ds.sample_ids.push_back(id);
    ds.features.insert(ds.features.end(), expr.values.begin() + static_cast<std::ptrdiff_t>(s * ds.dim),
                       expr.values.begin() + static_cast<std::ptrdiff_t>((s + 1) * ds.dim));
  }
  if (ds.n_events() < 2)
    throw ProtocolError("dataset has " + std::to_string(ds.n_events()) + " events; at least 2 are required");
  ds.validate();
  return ds;
}

// Plain-text archive: header, dimension line, then one line per sample:
// id,status,time,f1,...,fd. Status is event|censored|unlabeled, time empty
// for unlabeled samples. Doubles use shortest round-trip formatting.
inline void write_dataset(std::ostream& out, const SurvivalDataset& ds) {
  out << "coxmt-dataset 1\n";
  out << "samples " << ds.size() << " dim " << ds.dim << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.sample_ids[i] << ',' << status_name(ds.status[i]) << ',';
    if (ds.time[i]) out << csv::format_double(*ds.time[i]);
    for (double v : ds.row(i)) out << ',' << csv::format_double(v);
    out << '\n';
  }
}

inline SurvivalDataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "coxmt-dataset 1") throw FormatError("not a coxmt-dataset v1 archive", 1, 1);
  std::size_t n = 0, dim = 0;
  {
    if (!std::getline(in, line)) throw FormatError("truncated archive", 2, 1);
    std::istringstream hs(line);
    std::string a, b;
    if (!(hs >> a >> n >> b >> dim) || a != "samples" || b != "dim") throw FormatError("bad archive size line", 2, 1);
  }
  SurvivalDataset ds;
  ds.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw FormatError("truncated archive", i + 3, 1);
    auto cells = csv::split(line);
    if (cells.size() != dim + 3) throw FormatError("expected " + std::to_string(dim + 3) + " cells", i + 3, cells.size());
    ds.sample_ids.push_back(cells[0]);
    Status st;
    if (cells[1] == "event") st = Status::event;
    else if (cells[1] == "censored") st = Status::censored;
    else if (cells[1] == "unlabeled") st = Status::unlabeled;
    else throw FormatError("bad status '" + cells[1] + "'", i + 3, 2);
    ds.status.push_back(st);
    if (cells[2].empty()) ds.time.emplace_back(std::nullopt);
    else {
      auto t = csv::parse_double(cells[2]);
      if (!t) throw FormatError("bad time", i + 3, 3);
      ds.time.emplace_back(*t);
    }
    for (std::size_t j = 0; j < dim; ++j) {
      auto v = csv::parse_double(cells[3 + j]);
      if (!v) throw FormatError("bad feature value", i + 3, 4 + j);
      ds.features.push_back(*v);
    }
  }
  ds.validate();
  return ds;
}

inline void save_dataset(const std::filesystem::path& p, const SurvivalDataset& ds) {
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  write_dataset(out, ds);
}

inline SurvivalDataset load_dataset(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open dataset archive " + p.string());
  return read_dataset(in);
}

// ---------------------------------------------------------------------------
// Patch features

struct PatchFeatureSet {
  std::string sample_id;
  ad::Tensor patch_features;                        // n x width
  std::optional<ad::Tensor> augmented_patch_features;  // same shape when present

  std::size_t n_patches() const { return patch_features.rows(); }

  void validate(std::size_t width = 1024) const {
    if (patch_features.rank() != 2 || patch_features.rows() < 1)
      throw DimensionError("patch feature set '" + sample_id + "' needs at least one patch row");
    if (patch_features.cols() != width)
      throw DimensionError("patch feature width " + std::to_string(patch_features.cols()) + ", expected " + std::to_string(width));
    if (augmented_patch_features && augmented_patch_features->shape() != patch_features.shape())
      throw DimensionError("augmented patch features " + ad::shape_str(augmented_patch_features->shape()) +
                           " do not match " + ad::shape_str(patch_features.shape()));
  }
};

inline constexpr std::array<char, 8> kPatchMagic = {'C', 'M', 'T', 'P', 'A', 'T', 'C', 'H'};

// Binary layout: 8-byte magic, uint64 rows, uint64 cols, rows*cols float64,
// all little-endian host order.
inline void write_patch_matrix_binary(const std::filesystem::path& p, const ad::Tensor& m) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  const std::uint64_t r = m.rows(), c = m.cols();
  out.write(kPatchMagic.data(), kPatchMagic.size());
  out.write(reinterpret_cast<const char*>(&r), sizeof r);
  out.write(reinterpret_cast<const char*>(&c), sizeof c);
  out.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline ad::Tensor read_patch_matrix(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open patch feature file " + p.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() == 8 && magic == kPatchMagic) {
    std::uint64_t r = 0, c = 0;
    in.read(reinterpret_cast<char*>(&r), sizeof r);
    in.read(reinterpret_cast<char*>(&c), sizeof c);
    std::vector<double> v(r * c);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw FormatError(p.string() + ": truncated binary patch matrix");
    return ad::Tensor(ad::Shape{r, c}, std::move(v));
  }
  in.clear();
  in.seekg(0);
  auto rows = csv::read_rows(in);
  if (rows.empty()) throw FormatError(p.string() + ": empty patch feature file");
  std::vector<double> v;
  const std::size_t c = rows[0].size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != c) throw FormatError(p.string() + ": ragged patch row", r + 1, rows[r].size());
    for (std::size_t j = 0; j < c; ++j) {
      auto x = csv::parse_double(rows[r][j]);
      if (!x) throw FormatError(p.string() + ": unparseable patch value", r + 1, j + 1);
      v.push_back(*x);
    }
  }
  return ad::Tensor(ad::Shape{rows.size(), c}, std::move(v));
}

// Loads <dir>/<sample_id>.{bin,csv} and, when present, the sibling
// <sample_id>.aug.{bin,csv}.
inline PatchFeatureSet load_patch_features(const std::filesystem::path& dir, const std::string& sample_id, std::size_t width = 1024) {
  auto pick = [&](const std::string& stem) -> std::optional<std::filesystem::path> {
    for (const char* ext : {".bin", ".csv"}) {
      auto p = dir / (stem + ext);
      if (std::filesystem::exists(p)) return p;
    }
    return std::nullopt;
  };
  auto main = pick(sample_id);
  if (!main) throw FormatError("no patch feature file for sample '" + sample_id + "' in " + dir.string());
  PatchFeatureSet set;
  set.sample_id = sample_id;
  set.patch_features = read_patch_matrix(*main);
  if (auto aug = pick(sample_id + ".aug")) set.augmented_patch_features = read_patch_matrix(*aug);
  set.validate(width);
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic Cox cohorts

struct SyntheticConfig {
  std::size_t n_samples = 500;
  std::size_t d = 10;
  double true_beta_sparsity = 1.0;  // fraction of non-zero coefficients
  double beta_scale = 1.0;          // |beta_j| drawn uniformly in [0.5, 1.5] * beta_scale
  double baseline_rate = 0.01;
  double censor_rate = 0.3;         // expected censored fraction among labeled samples
  double unlabeled_fraction = 0.0;
  std::uint64_t seed = 1;
  std::optional<std::vector<double>> beta;  // overrides the drawn coefficients

  void validate() const {
    if (n_samples == 0) throw ConfigError("synthetic n_samples must be positive");
    if (d == 0) throw ConfigError("synthetic d must be positive");
    if (!(baseline_rate > 0.0)) throw ConfigError("baseline_rate must be positive");
    if (censor_rate < 0.0 || censor_rate >= 1.0) throw ConfigError("censor_rate must lie in [0,1)");
    if (unlabeled_fraction < 0.0 || unlabeled_fraction > 1.0) throw ConfigError("unlabeled_fraction must lie in [0,1]");
    if (true_beta_sparsity < 0.0 || true_beta_sparsity > 1.0) throw ConfigError("true_beta_sparsity must lie in [0,1]");
    if (beta_scale < 0.0) throw ConfigError("beta_scale must be non-negative");
    if (beta && beta->size() != d) throw ConfigError("explicit beta has wrong length");
  }
};

struct SyntheticCohort {
  SurvivalDataset dataset;
  std::vector<double> beta;
  double censoring_rate = 0.0;  // rate of the exponential censoring clock (0 = none)
  // True linear predictor beta^T x per sample, in dataset order.
  std::vector<double> linear_predictor;
};

namespace detail {

inline std::vector<double> draw_beta(const SyntheticConfig& cfg) {
  if (cfg.beta) return *cfg.beta;
  Rng rng(derive_seed(cfg.seed, 0xbe7a));
  std::vector<double> beta(cfg.d, 0.0);
  const auto nz = static_cast<std::size_t>(std::llround(cfg.true_beta_sparsity * static_cast<double>(cfg.d)));
  std::vector<std::size_t> idx(cfg.d);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::uniform_real_distribution<double> mag(0.5, 1.5);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t k = 0; k < nz; ++k) beta[idx[k]] = (sign(rng) ? 1.0 : -1.0) * mag(rng) * cfg.beta_scale;
  return beta;
}

inline double exponential(Rng& rng, double rate) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x;
  do x = -std::log1p(-u(rng)) / rate;
  while (!(x > 0.0));
  return x;
}

// Censoring-clock rate c with mean_i c/(c + lambda_i) == target, by bisection
// on log c.
inline double calibrate_censoring(std::span<const double> hazards, double target) {
  if (target <= 0.0 || hazards.empty()) return 0.0;
  auto frac = [&](double c) {
    double s = 0.0;
    for (double l : hazards) s += c / (c + l);
    return s / static_cast<double>(hazards.size());
  };
  const auto [mn, mx] = std::minmax_element(hazards.begin(), hazards.end());
  double lo = std::log(*mn) - 40.0, hi = std::log(*mx) + 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (frac(std::exp(mid)) < target ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

inline std::string synth_id(std::size_t i) {
  std::ostringstream os;
  os << 'S' << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace detail

// Standard-normal features, exponential event times with rate
// baseline_rate * exp(beta^T x) and an independent exponential censoring
// clock calibrated to the requested censored fraction.
inline SyntheticCohort generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticCohort out;
  out.beta = detail::draw_beta(cfg);
  Rng rng(derive_seed(cfg.seed, 0xda7a));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = cfg.n_samples, d = cfg.d;
  auto& ds = out.dataset;
  ds.dim = d;
  ds.features.resize(n * d);
  for (double& v : ds.features) v = normal(rng);
  out.linear_predictor.resize(n);
  std::vector<double> hazard(n);
  for (std::size_t i = 0; i < n; ++i) {
    double eta = 0.0;
    for (std::size_t j = 0; j < d; ++j) eta += out.beta[j] * ds.features[i * d + j];
    out.linear_predictor[i] = eta;
    hazard[i] = cfg.baseline_rate * std::exp(eta);
  }
  out.censoring_rate = detail::calibrate_censoring(hazard, cfg.censor_rate);
  for (std::size_t i = 0; i < n; ++i) {
    const double t_event = detail::exponential(rng, hazard[i]);
    const double t_cens = out.censoring_rate > 0.0 ? detail::exponential(rng, out.censoring_rate)
                                                   : std::numeric_limits<double>::infinity();
    ds.sample_ids.push_back(detail::synth_id(i));
    if (t_event <= t_cens) {
      ds.time.emplace_back(t_event);
      ds.status.push_back(Status::event);
    } else {
      ds.time.emplace_back(t_cens);
      ds.status.push_back(Status::censored);
    }
  }
  const auto n_unl = static_cast<std::size_t>(std::llround(cfg.unlabeled_fraction * static_cast<double>(n)));
  if (n_unl > 0) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng urng(derive_seed(cfg.seed, 0x0b1));
    std::shuffle(idx.begin(), idx.end(), urng);
    for (std::size_t k = 0; k < n_unl; ++k) {
      ds.time[idx[k]].reset();
      ds.status[idx[k]] = Status::unlabeled;
    }
  }
  return out;
}

// Cohort with exact status counts: i.i.d. draws from the generator above are
// accepted until the event and censored quotas fill, then n_unlabeled fresh
// feature vectors are appended without outcome. The censoring clock is
// calibrated to n_censored / (n_events + n_censored).
inline SyntheticCohort generate_synthetic_counts(SyntheticConfig cfg, std::size_t n_events, std::size_t n_censored,
                                                 std::size_t n_unlabeled) {
  cfg.n_samples = std::max<std::size_t>(1, n_events + n_censored);
  cfg.censor_rate = static_cast<double>(n_censored) / static_cast<double>(std::max<std::size_t>(1, n_events + n_censored));
  cfg.unlabeled_fraction = 0.0;
  if (cfg.censor_rate >= 1.0) throw ConfigError("quota cohort needs at least one event");
  cfg.validate();
  SyntheticCohort out;
  out.beta = detail::draw_beta(cfg);
  const std::size_t d = cfg.d;
  Rng rng(derive_seed(cfg.seed, 0x9007a));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw_x = [&](std::vector<double>& x) {
    for (double& v : x) v = normal(rng);
    double eta = 0.0;
    for (std::size_t j = 0; j < d; ++j) eta += out.beta[j] * x[j];
    return eta;
  };
  // Pilot sample for calibrating the censoring clock.
  std::vector<double> x(d), pilot;
  for (int k = 0; k < 20000; ++k) pilot.push_back(cfg.baseline_rate * std::exp(draw_x(x)));
  out.censoring_rate = detail::calibrate_censoring(pilot, cfg.censor_rate);

  auto& ds = out.dataset;
  ds.dim = d;
  std::size_t ev = 0, ce = 0;
  for (std::size_t guard = 0; ev < n_events || ce < n_censored; ++guard) {
    if (guard > 100 * (n_events + n_censored) + 100000) throw ConfigError("quota sampling did not fill the requested counts");
    const double eta = draw_x(x);
    const double te = detail::exponential(rng, cfg.baseline_rate * std::exp(eta));
    const double tc = out.censoring_rate > 0.0 ? detail::exponential(rng, out.censoring_rate) : std::numeric_limits<double>::infinity();
    const bool is_event = te <= tc;
    if (is_event ? ev >= n_events : ce >= n_censored) continue;
    (is_event ? ev : ce)++;
    ds.sample_ids.push_back(detail::synth_id(ds.sample_ids.size()));
    ds.features.insert(ds.features.end(), x.begin(), x.end());
    ds.time.emplace_back(is_event ? te : tc);
    ds.status.push_back(is_event ? Status::event : Status::censored);
    out.linear_predictor.push_back(eta);
  }
  for (std::size_t k = 0; k < n_unlabeled; ++k) {
    const double eta = draw_x(x);
    ds.sample_ids.push_back(detail::synth_id(ds.sample_ids.size()));
    ds.features.insert(ds.features.end(), x.begin(), x.end());
    ds.time.emplace_back(std::nullopt);
    ds.status.push_back(Status::unlabeled);
    out.linear_predictor.push_back(eta);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fold plans

enum class Role : std::uint8_t { train, validation, test, unlabeled_train, unused };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::validation: return "validation";
    case Role::test: return "test";
    case Role::unlabeled_train: return "unlabeled_train";
    default: return "unused";
  }
}

inline Role parse_role(std::string_view s) {
  for (Role r : {Role::train, Role::validation, Role::test, Role::unlabeled_train, Role::unused})
    if (s == role_name(r)) return r;
  throw FormatError("unknown role '" + std::string(s) + "'");
}

// One (repeat, test fold) triple. fold_assignments holds each sample's fold
// within its repeat (labeled and unlabeled samples are partitioned
// separately); roles fix the train/validation/test split for this triple.
struct FoldPlan {
  int repeat = 0;
  int test_fold = 0;
  std::uint64_t repeat_seed = 0;
  std::vector<int> fold_assignments;
  std::vector<Role> roles;

  std::vector<std::size_t> indices(Role r) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i)
      if (roles[i] == r) out.push_back(i);
    return out;
  }
  // Validation flags over training-and-validation labeled samples, in index order.
  std::vector<bool> val_mask() const {
    std::vector<bool> m;
    for (Role r : roles)
      if (r == Role::train || r == Role::validation) m.push_back(r == Role::validation);
    return m;
  }

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

struct SplitOptions {
  int k = 5;
  int repeats = 4;
  double val_fraction = 0.2;
  bool stratified = true;
  std::uint64_t seed = 0;
};

namespace detail {

// Deals shuffled groups round-robin so fold sizes, and per-group counts,
// differ by at most one.
inline std::vector<int> deal_folds(std::vector<std::vector<std::size_t>> groups, std::size_t n, int k, Rng& rng) {
  std::vector<int> fold(n, -1);
  std::size_t pos = 0;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (auto i : g) fold[i] = static_cast<int>(pos++ % static_cast<std::size_t>(k));
  }
  return fold;
}

}  // namespace detail

inline std::vector<FoldPlan> split_folds(const SurvivalDataset& ds, const SplitOptions& opt = {}) {
  if (opt.k < 2) throw ConfigError("need at least 2 folds");
  if (opt.repeats < 1) throw ConfigError("need at least 1 repeat");
  if (opt.val_fraction < 0.0 || opt.val_fraction >= 1.0) throw ConfigError("val_fraction must lie in [0,1)");
  const auto labeled = ds.labeled_indices();
  if (labeled.size() < static_cast<std::size_t>(opt.k))
    throw ProtocolError("cannot split " + std::to_string(labeled.size()) + " labeled samples into " + std::to_string(opt.k) + " folds");
  const auto events = ds.indices_where([](Status s) { return s == Status::event; });
  const auto censored = ds.indices_where([](Status s) { return s == Status::censored; });
  const auto unlabeled = ds.unlabeled_indices();
  const std::size_t n = ds.size();

  std::vector<FoldPlan> plans;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    const std::uint64_t rseed = derive_seed(opt.seed, 0xf01d, static_cast<std::uint64_t>(rep));
    Rng rng(rseed);
    std::vector<std::vector<std::size_t>> groups =
        opt.stratified ? std::vector<std::vector<std::size_t>>{events, censored} : std::vector<std::vector<std::size_t>>{labeled};
    auto fold = detail::deal_folds(std::move(groups), n, opt.k, rng);
    auto ufold = detail::deal_folds({unlabeled}, n, opt.k, rng);
    for (auto i : unlabeled) fold[i] = ufold[i];

    for (int f = 0; f < opt.k; ++f) {
      FoldPlan p;
      p.repeat = rep;
      p.test_fold = f;
      p.repeat_seed = rseed;
      p.fold_assignments = fold;
      p.roles.assign(n, Role::unused);
      Rng vrng(derive_seed(rseed, 0x7a1, static_cast<std::uint64_t>(f)));
      auto pick_val = [&](const std::vector<std::size_t>& pool) {
        std::vector<std::size_t> cand;
        for (auto i : pool)
          if (fold[i] != f) cand.push_back(i);
        std::shuffle(cand.begin(), cand.end(), vrng);
        const auto nv = static_cast<std::size_t>(std::llround(opt.val_fraction * static_cast<double>(cand.size())));
        for (std::size_t q = 0; q < cand.size(); ++q) p.roles[cand[q]] = q < nv ? Role::validation : Role::train;
      };
      if (opt.stratified) {
        pick_val(events);
        pick_val(censored);
      } else {
        pick_val(labeled);
      }
      for (auto i : labeled)
        if (fold[i] == f) p.roles[i] = Role::test;
      for (auto i : unlabeled) p.roles[i] = fold[i] == f ? Role::unused : Role::unlabeled_train;
      plans.push_back(std::move(p));
    }
  }
  return plans;
}

// Versioned text form: one line per (plan, sample).
inline void write_fold_plans(std::ostream& out, const std::vector<FoldPlan>& plans, const std::vector<std::string>& sample_ids) {
  out << "coxmt-foldplan 1\n";
  out << "plans " << plans.size() << " samples " << sample_ids.size() << '\n';
  for (const auto& p : plans) {
    out << "plan " << p.repeat << ' ' << p.test_fold << ' ' << p.repeat_seed << '\n';
    for (std::size_t i = 0; i < sample_ids.size(); ++i)
      out << sample_ids[i] << ' ' << p.repeat << ' ' << p.fold_assignments[i] << ' ' << role_name(p.roles[i]) << '\n';
  }
}

inline std::vector<FoldPlan> read_fold_plans(std::istream& in, std::vector<std::string>* sample_ids = nullptr) {
  std::string line;
  if (!std::getline(in, line) || line != "coxmt-foldplan 1") throw FormatError("not a coxmt-foldplan v1 file", 1, 1);
  std::size_t np = 0, ns = 0;
  std::string a, b;
  if (!std::getline(in, line)) throw FormatError("truncated fold plan", 2, 1);
  std::istringstream hs(line);
  if (!(hs >> a >> np >> b >> ns) || a != "plans" || b != "samples") throw FormatError("bad fold plan header", 2, 1);
  std::vector<FoldPlan> plans;
  std::size_t lineno = 2;
  for (std::size_t k = 0; k < np; ++k) {
    FoldPlan p;
    ++lineno;
    if (!std::getline(in, line)) throw FormatError("truncated fold plan", lineno, 1);
    std::istringstream ps(line);
    std::string tag;
    if (!(ps >> tag >> p.repeat >> p.test_fold >> p.repeat_seed) || tag != "plan") throw FormatError("bad plan line", lineno, 1);
    if (sample_ids && k == 0) sample_ids->clear();
    for (std::size_t i = 0; i < ns; ++i) {
      ++lineno;
      if (!std::getline(in, line)) throw FormatError("truncated fold plan", lineno, 1);
      std::istringstream ls(line);
      std::string id, role;
      int rep = 0, fold = 0;
      if (!(ls >> id >> rep >> fold >> role)) throw FormatError("bad sample line", lineno, 1);
      if (sample_ids && k == 0) sample_ids->push_back(id);
      p.fold_assignments.push_back(fold);
      p.roles.push_back(parse_role(role));
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

}  // namespace coxmt
