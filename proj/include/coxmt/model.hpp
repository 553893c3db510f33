#pragma once

// Student/teacher networks: the single-modal MLP hazard predictor and the
// multimodal mutual-attention fusion model, plus EMA teacher updates and
// parameter checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "coxmt/autodiff.hpp"
#include "coxmt/data.hpp"
#include "coxmt/optimizer.hpp"

namespace coxmt {

enum class Activation { tanh, relu };
enum class Mode { train, eval };
// Which copy of the inputs a forward pass sees: the teacher may receive
// augmented inputs (e.g. features of augmented image patches).
enum class View { student, teacher };

inline const char* activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }
inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct Perturbation {
  double noise_sigma = 0.0;
  double dropout = 0.0;
};

inline ad::Var activate(const ad::Var& x, Activation a) { return a == Activation::tanh ? ad::tanh(x) : ad::relu(x); }

// Binds every tensor of a parameter set to the tape; constants when not
// trainable, so no gradient can reach them.
inline std::vector<ad::Var> bind(ad::Tape& tape, ParameterSet& params, bool trainable) {
  std::vector<ad::Var> out;
  out.reserve(params.size());
  for (auto& t : params.tensors) out.push_back(trainable ? tape.parameter(t) : tape.constant(ad::Tensor(t.shape(), t.data())));
  return out;
}

// Weight matrix with entries ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline ad::Tensor scaled_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  ad::Tensor w(ad::Shape{fan_in, fan_out});
  for (double& v : w.data()) v = u(rng);
  return w;
}

// ---------------------------------------------------------------------------
// MLP

struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_sizes;
  Activation activation = Activation::tanh;
  double dropout_rate = 0.2;

  void validate() const {
    if (input_dim == 0) throw ConfigError("MLP input_dim must be positive");
    for (auto h : hidden_sizes)
      if (h == 0) throw ConfigError("MLP hidden sizes must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "mlp in=" << input_dim << " hidden=";
    for (std::size_t i = 0; i < hidden_sizes.size(); ++i) os << (i ? "," : "") << hidden_sizes[i];
    if (hidden_sizes.empty()) os << '-';
    os << " act=" << activation_name(activation) << " dropout=" << dropout_rate;
    return os.str();
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

// Appends an MLP with a single output node to `params`; names carry `prefix`.
inline void init_mlp_params(ParameterSet& params, const MlpSpec& spec, Rng& rng, const std::string& prefix = "") {
  std::size_t fan_in = spec.input_dim;
  for (std::size_t l = 0; l < spec.hidden_sizes.size(); ++l) {
    const auto h = spec.hidden_sizes[l];
    params.add(prefix + "layer" + std::to_string(l) + ".weight", scaled_uniform(fan_in, h, rng));
    params.add(prefix + "layer" + std::to_string(l) + ".bias", ad::Tensor(ad::Shape{1, h}));
    fan_in = h;
  }
  params.add(prefix + "out.weight", scaled_uniform(fan_in, 1, rng));
  params.add(prefix + "out.bias", ad::Tensor(ad::Shape{1, 1}));
}

inline std::size_t mlp_param_count(const MlpSpec& spec) { return 2 * spec.hidden_sizes.size() + 2; }

// x: n x input_dim. Returns n x 1. Dropout follows every hidden activation
// in train mode; the input noise is applied by the caller.
inline ad::Var mlp_apply(const MlpSpec& spec, std::span<const ad::Var> p, ad::Var x, double dropout, Rng& rng, Mode mode) {
  std::size_t k = 0;
  for (std::size_t l = 0; l < spec.hidden_sizes.size(); ++l) {
    x = activate(ad::add_row(ad::matmul(x, p[k]), p[k + 1]), spec.activation);
    k += 2;
    if (mode == Mode::train) x = ad::dropout(x, dropout, rng);
  }
  return ad::add_row(ad::matmul(x, p[k]), p[k + 1]);
}

// Feature matrix for the single-modal model. `teacher_features`, when set,
// replaces `features` for teacher-view passes (augmented inputs).
struct TabularInputs {
  ad::Tensor features;  // n x d
  std::optional<ad::Tensor> teacher_features;

  std::size_t size() const { return features.rows(); }
};

struct MlpModel {
  using Spec = MlpSpec;
  using Inputs = TabularInputs;

  static ParameterSet init(const Spec& spec, Rng& rng) {
    spec.validate();
    ParameterSet p;
    init_mlp_params(p, spec, rng);
    return p;
  }

  static ad::Var forward(ad::Tape& tape, const Spec& spec, std::span<const ad::Var> params, const Inputs& in,
                         std::span<const std::size_t> rows, const Perturbation& pert, Rng& rng, Mode mode, View view) {
    const ad::Tensor& src = view == View::teacher && in.teacher_features ? *in.teacher_features : in.features;
    if (src.cols() != spec.input_dim)
      throw DimensionError("feature dimension " + std::to_string(src.cols()) + " does not match model input " + std::to_string(spec.input_dim));
    ad::Tensor batch(ad::Shape{rows.size(), spec.input_dim});
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k] >= src.rows()) throw DimensionError("row index out of range");
      std::copy_n(&src[rows[k] * spec.input_dim], spec.input_dim, &batch[k * spec.input_dim]);
    }
    ad::Var x = tape.constant(std::move(batch));
    if (mode == Mode::train) x = ad::gaussian_noise(x, pert.noise_sigma, rng);
    return mlp_apply(spec, params, x, pert.dropout, rng, mode);
  }
};

// ---------------------------------------------------------------------------
// Multimodal fusion

struct FusionSpec {
  std::size_t expr_dim = 0;
  std::size_t expr_token_count = 32;
  std::size_t token_dim = 256;
  std::size_t patch_dim = 1024;
  std::size_t max_patch_tokens = 128;
  std::size_t heads_per_mha = 4;
  std::size_t mha_output_dim = 256;
  std::vector<std::size_t> head_hidden_sizes = {64};
  Activation activation = Activation::tanh;
  double dropout_rate = 0.2;

  MlpSpec head_mlp() const { return MlpSpec{2 * mha_output_dim, head_hidden_sizes, activation, dropout_rate}; }

  void validate() const {
    if (expr_dim == 0 || expr_token_count == 0 || token_dim == 0 || patch_dim == 0 || max_patch_tokens == 0 || mha_output_dim == 0)
      throw ConfigError("fusion dimensions must be positive");
    if (heads_per_mha == 0 || token_dim % heads_per_mha != 0)
      throw ConfigError("token_dim " + std::to_string(token_dim) + " not divisible by " + std::to_string(heads_per_mha) + " heads");
    head_mlp().validate();
  }

  std::string describe() const {
    std::ostringstream os;
    os << "fusion expr_dim=" << expr_dim << " tokens=" << expr_token_count << " token_dim=" << token_dim
       << " patch_dim=" << patch_dim << " max_patches=" << max_patch_tokens << " heads=" << heads_per_mha
       << " mha_out=" << mha_output_dim << " head=" << head_mlp().describe();
    return os.str();
  }

  friend bool operator==(const FusionSpec&, const FusionSpec&) = default;
};

// Layout of the fusion parameter set, by index.
struct FusionLayout {
  std::size_t expr_proj = 0;  // expr_token_count consecutive d x token_dim matrices
  std::size_t patch_proj = 0;
  std::size_t cls_expr = 0;
  std::size_t cls_patch = 0;
  std::size_t mha[2] = {0, 0};  // wq, wk, wv, wo at +0..+3
  std::size_t head = 0;

  explicit FusionLayout(const FusionSpec& s) {
    patch_proj = expr_proj + s.expr_token_count;
    cls_expr = patch_proj + 1;
    cls_patch = cls_expr + 1;
    mha[0] = cls_patch + 1;
    mha[1] = mha[0] + 4;
    head = mha[1] + 4;
  }
};

struct TokenSequence {
  ad::Var tokens;                // (1 + seq_len) x token_dim, row 0 = CLS
  std::vector<bool> pad_mask;    // true for padded positions

  std::size_t length() const { return pad_mask.size(); }
};

// Tokens z_j = y W_j for the learned projections W_j, with the CLS token
// prepended. y: 1 x expr_dim.
inline TokenSequence tokenize_expression(const FusionSpec& spec, std::span<const ad::Var> params, const ad::Var& y) {
  if (y.value().size() != spec.expr_dim)
    throw DimensionError("expression vector of length " + std::to_string(y.value().size()) + ", expected " + std::to_string(spec.expr_dim));
  const FusionLayout lay(spec);
  ad::Var row = ad::reshape(y, ad::Shape{1, spec.expr_dim});
  std::vector<ad::Var> parts{params[lay.cls_expr]};
  for (std::size_t j = 0; j < spec.expr_token_count; ++j) parts.push_back(ad::matmul(row, params[lay.expr_proj + j]));
  TokenSequence seq{ad::concat_rows(parts), std::vector<bool>(1 + spec.expr_token_count, false)};
  return seq;
}

// Projects patch rows by the shared patch projection. With at least
// max_patch_tokens rows, a uniformly random subset of exactly that many is
// kept (in original order); otherwise zero tokens pad the sequence and are
// masked. CLS is prepended.
inline TokenSequence tokenize_patches(const FusionSpec& spec, std::span<const ad::Var> params, const ad::Tensor& patches, Rng& rng,
                                      std::vector<std::size_t>* selected = nullptr) {
  if (patches.rank() != 2 || patches.cols() != spec.patch_dim)
    throw DimensionError("patch features " + ad::shape_str(patches.shape()) + ", expected width " + std::to_string(spec.patch_dim));
  if (patches.rows() == 0) throw DimensionError("patch feature set without patches");
  const FusionLayout lay(spec);
  ad::Tape& tape = *params[0].tape();
  const std::size_t n = patches.rows(), cap = spec.max_patch_tokens;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  if (n > cap) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(cap);
    std::sort(rows.begin(), rows.end());
  }
  if (selected) *selected = rows;
  ad::Tensor chosen(ad::Shape{rows.size(), spec.patch_dim});
  for (std::size_t k = 0; k < rows.size(); ++k) std::copy_n(&patches[rows[k] * spec.patch_dim], spec.patch_dim, &chosen[k * spec.patch_dim]);
  ad::Var projected = ad::matmul(tape.constant(std::move(chosen)), params[lay.patch_proj]);
  std::vector<ad::Var> parts{params[lay.cls_patch], projected};
  const std::size_t pad = cap > rows.size() ? cap - rows.size() : 0;
  if (pad > 0) parts.push_back(tape.constant(ad::Tensor::zeros(pad, spec.token_dim)));
  TokenSequence seq{ad::concat_rows(parts), std::vector<bool>(1 + cap, false)};
  for (std::size_t k = 0; k < pad; ++k) seq.pad_mask[1 + rows.size() + k] = true;
  return seq;
}

// softmax(Q K^T / sqrt(d_head) + mask) V per head, heads concatenated and
// projected by wo. q_tokens: Lq x T, kv_tokens: Lk x T. Masked key positions
// receive zero attention.
inline ad::Var multi_head_attention(const ad::Var& q_tokens, const ad::Var& kv_tokens, const std::vector<bool>& kv_mask, const ad::Var& wq,
                                    const ad::Var& wk, const ad::Var& wv, const ad::Var& wo, std::size_t heads) {
  const std::size_t T = wq.value().cols();
  if (heads == 0 || T % heads != 0) throw ConfigError("attention width not divisible by head count");
  const std::size_t dh = T / heads;
  ad::Var Q = ad::matmul(q_tokens, wq);
  ad::Var K = ad::matmul(kv_tokens, wk);
  ad::Var V = ad::matmul(kv_tokens, wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = ad::slice_cols(Q, h * dh, (h + 1) * dh);
    ad::Var kh = ad::slice_cols(K, h * dh, (h + 1) * dh);
    ad::Var vh = ad::slice_cols(V, h * dh, (h + 1) * dh);
    ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
    outs.push_back(ad::matmul(ad::softmax(scores, 1, kv_mask), vh));
  }
  ad::Var cat = heads == 1 ? outs[0] : ad::concat_cols(outs);
  return ad::matmul(cat, wo);
}

// Mutual attention: unit 1 takes queries from seq2 and keys/values from
// seq1, unit 2 the reverse. The CLS outputs of both units are concatenated
// (1 x 2*mha_output_dim) and mapped to one log-hazard by the head MLP.
inline ad::Var mutual_attention_forward(const FusionSpec& spec, std::span<const ad::Var> params, const TokenSequence& seq1,
                                        const TokenSequence& seq2, double dropout, Rng& rng, Mode mode) {
  auto real_tokens = [](const TokenSequence& s) {
    std::size_t n = 0;
    for (std::size_t i = 1; i < s.pad_mask.size(); ++i) n += !s.pad_mask[i];
    return n;
  };
  if (real_tokens(seq1) == 0 || real_tokens(seq2) == 0) throw DimensionError("degenerate attention: key sequence is entirely padding");
  const FusionLayout lay(spec);
  const std::size_t cls_row[] = {0};
  ad::Var q1 = ad::gather_rows(seq2.tokens, cls_row);
  ad::Var q2 = ad::gather_rows(seq1.tokens, cls_row);
  const auto& a = lay.mha[0];
  const auto& b = lay.mha[1];
  ad::Var o1 = multi_head_attention(q1, seq1.tokens, seq1.pad_mask, params[a], params[a + 1], params[a + 2],
                                    params[a + 3], spec.heads_per_mha);
  ad::Var o2 = multi_head_attention(q2, seq2.tokens, seq2.pad_mask, params[b], params[b + 1], params[b + 2],
                                    params[b + 3], spec.heads_per_mha);
  const ad::Var both[] = {o1, o2};
  ad::Var fused = ad::concat_cols(both);
  if (mode == Mode::train) fused = ad::dropout(fused, dropout, rng);
  return mlp_apply(spec.head_mlp(), params.subspan(lay.head), fused, dropout, rng, mode);
}

struct MultimodalInputs {
  ad::Tensor expression;                 // n x expr_dim
  std::vector<PatchFeatureSet> patches;  // one per sample, same order

  std::size_t size() const { return expression.rows(); }
};

struct FusionModel {
  using Spec = FusionSpec;
  using Inputs = MultimodalInputs;

  static ParameterSet init(const Spec& spec, Rng& rng) {
    spec.validate();
    ParameterSet p;
    for (std::size_t j = 0; j < spec.expr_token_count; ++j) p.add("expr_proj." + std::to_string(j), scaled_uniform(spec.expr_dim, spec.token_dim, rng));
    p.add("patch_proj", scaled_uniform(spec.patch_dim, spec.token_dim, rng));
    // CLS tokens: 1 x token_dim rows drawn with the same bound as a token_dim fan-in.
    for (const char* name : {"cls_expr", "cls_patch"})
      p.add(name, ad::Tensor(ad::Shape{1, spec.token_dim}, scaled_uniform(spec.token_dim, 1, rng).data()));
    for (int u = 1; u <= 2; ++u) {
      const std::string pre = "mha" + std::to_string(u) + ".";
      p.add(pre + "wq", scaled_uniform(spec.token_dim, spec.token_dim, rng));
      p.add(pre + "wk", scaled_uniform(spec.token_dim, spec.token_dim, rng));
      p.add(pre + "wv", scaled_uniform(spec.token_dim, spec.token_dim, rng));
      p.add(pre + "wo", scaled_uniform(spec.token_dim, spec.mha_output_dim, rng));
    }
    init_mlp_params(p, spec.head_mlp(), rng, "head.");
    return p;
  }

  // Expression noise is added before projection; the teacher view swaps in
  // augmented patch features when a sample has them.
  static ad::Var forward(ad::Tape& tape, const Spec& spec, std::span<const ad::Var> params, const Inputs& in,
                         std::span<const std::size_t> rows, const Perturbation& pert, Rng& rng, Mode mode, View view) {
    if (in.expression.cols() != spec.expr_dim) throw DimensionError("expression width does not match fusion spec");
    if (in.patches.size() != in.size()) throw DimensionError("one patch feature set per sample is required");
    std::vector<ad::Var> outs;
    outs.reserve(rows.size());
    for (auto r : rows) {
      ad::Tensor x(ad::Shape{1, spec.expr_dim});
      std::copy_n(&in.expression[r * spec.expr_dim], spec.expr_dim, &x[0]);
      ad::Var y = tape.constant(std::move(x));
      if (mode == Mode::train) y = ad::gaussian_noise(y, pert.noise_sigma, rng);
      const auto& ps = in.patches[r];
      const ad::Tensor& patches =
          view == View::teacher && ps.augmented_patch_features ? *ps.augmented_patch_features : ps.patch_features;
      TokenSequence s1 = tokenize_expression(spec, params, y);
      TokenSequence s2 = tokenize_patches(spec, params, patches, rng);
      outs.push_back(mutual_attention_forward(spec, params, s1, s2, pert.dropout, rng, mode));
    }
    return ad::concat_rows(outs);
  }
};

// ---------------------------------------------------------------------------
// Student / teacher pair

template <class Model>
struct StudentTeacherPair {
  typename Model::Spec spec;
  ParameterSet student;
  ParameterSet teacher;
  double alpha = 0.99;
  double noise_sigma = 0.1;
  double student_dropout = 0.2;
  double teacher_dropout = 0.2;

  Perturbation student_perturbation() const { return {noise_sigma, student_dropout}; }
  Perturbation teacher_perturbation() const { return {noise_sigma, teacher_dropout}; }

  void check_congruent() const {
    if (!student.congruent_with(teacher)) throw DimensionError("student and teacher parameters are not shape-congruent");
  }
};

struct PairHyper {
  double alpha = 0.99;
  double noise_sigma = 0.1;
  double student_dropout = 0.2;
  double teacher_dropout = 0.2;
};

// Student weights ~ U(+-1/sqrt(fan_in)), zero biases; the teacher starts as
// an exact copy.
template <class Model>
StudentTeacherPair<Model> init_model(const typename Model::Spec& spec, std::uint64_t seed, const PairHyper& h = {}) {
  if (!(h.alpha >= 0.0 && h.alpha < 1.0)) throw ConfigError("EMA constant alpha must lie in [0,1)");
  Rng rng(derive_seed(seed, 0x1417));
  StudentTeacherPair<Model> pair;
  pair.spec = spec;
  pair.student = Model::init(spec, rng);
  pair.teacher = pair.student.snapshot();
  pair.alpha = h.alpha;
  pair.noise_sigma = h.noise_sigma;
  pair.student_dropout = h.student_dropout;
  pair.teacher_dropout = h.teacher_dropout;
  return pair;
}

// Student forward with trainable parameters bound to `tape`.
template <class Model>
ad::Var student_forward(ad::Tape& tape, StudentTeacherPair<Model>& pair, const typename Model::Inputs& in, std::span<const std::size_t> rows,
                        Rng& rng, Mode mode) {
  auto p = bind(tape, pair.student, true);
  return Model::forward(tape, pair.spec, p, in, rows, pair.student_perturbation(), rng, mode, View::student);
}

// Teacher forward: parameters enter as constants, so backward never reaches
// the teacher.
template <class Model>
ad::Var teacher_forward(ad::Tape& tape, StudentTeacherPair<Model>& pair, const typename Model::Inputs& in, std::span<const std::size_t> rows,
                        Rng& rng, Mode mode) {
  auto p = bind(tape, pair.teacher, false);
  return Model::forward(tape, pair.spec, p, in, rows, pair.teacher_perturbation(), rng, mode, View::teacher);
}

// Evaluates a parameter set on rows (eval mode, no perturbation).
template <class Model>
std::vector<double> predict(const typename Model::Spec& spec, const ParameterSet& params, const typename Model::Inputs& in,
                            std::span<const std::size_t> rows) {
  ad::Tape tape;
  ParameterSet copy = params.snapshot();
  auto p = bind(tape, copy, false);
  Rng unused(0);
  ad::Var out = Model::forward(tape, spec, p, in, rows, Perturbation{}, unused, Mode::eval, View::student);
  return out.value().data();
}

template <class Model>
std::vector<double> predict_all(const typename Model::Spec& spec, const ParameterSet& params, const typename Model::Inputs& in) {
  std::vector<std::size_t> rows(in.size());
  std::iota(rows.begin(), rows.end(), 0);
  return predict<Model>(spec, params, in, rows);
}

// Single-sample convenience wrappers for the MLP.
inline double forward_student(StudentTeacherPair<MlpModel>& pair, std::span<const double> x, Rng& rng, Mode mode) {
  ad::Tape tape;
  TabularInputs in{ad::Tensor(ad::Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), std::nullopt};
  const std::size_t row[] = {0};
  return student_forward(tape, pair, in, row, rng, mode).item();
}

inline double forward_teacher(StudentTeacherPair<MlpModel>& pair, std::span<const double> x, Rng& rng, Mode mode) {
  ad::Tape tape;
  TabularInputs in{ad::Tensor(ad::Shape{1, x.size()}, std::vector<double>(x.begin(), x.end())), std::nullopt};
  const std::size_t row[] = {0};
  return teacher_forward(tape, pair, in, row, rng, mode).item();
}

// theta' <- alpha theta' + (1 - alpha) theta, in place on the teacher.
template <class Model>
void ema_update(StudentTeacherPair<Model>& pair) {
  pair.check_congruent();
  const double a = pair.alpha, b = 1.0 - pair.alpha;
  for (std::size_t i = 0; i < pair.teacher.size(); ++i) {
    auto& t = pair.teacher[i];
    const auto& s = pair.student[i];
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = a * t[k] + b * s[k];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary: "CMTCKPT" + version byte, then length-prefixed spec description,
// six float64 hyperparameters (alpha, w, sigma, student dropout, teacher
// dropout, learning rate), then student and teacher parameter sets, each as
// count followed by (name, rank, dims, values). A text manifest with shapes
// and hyperparameters is written next to it as <path>.manifest.txt.

struct CheckpointHyper {
  double alpha = 0.99;
  double consistency_weight = 1.0;
  double noise_sigma = 0.1;
  double student_dropout = 0.2;
  double teacher_dropout = 0.2;
  double learning_rate = 0.002;
};

struct Checkpoint {
  std::string spec_description;
  CheckpointHyper hyper;
  ParameterSet student;
  ParameterSet teacher;
};

namespace detail {

template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError("truncated checkpoint");
  return v;
}
inline void put_string(std::ostream& o, const std::string& s) {
  put<std::uint64_t>(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1u << 20)) throw FormatError("implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("truncated checkpoint");
  return s;
}
inline void put_params(std::ostream& o, const ParameterSet& p) {
  put<std::uint64_t>(o, p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    put_string(o, p.names[i]);
    put<std::uint64_t>(o, p[i].rank());
    for (auto d : p[i].shape()) put<std::uint64_t>(o, d);
    o.write(reinterpret_cast<const char*>(p[i].data().data()), static_cast<std::streamsize>(p[i].size() * sizeof(double)));
  }
}
inline ParameterSet get_params(std::istream& in) {
  ParameterSet p;
  const auto n = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = get_string(in);
    const auto rank = get<std::uint64_t>(in);
    if (rank > 8) throw FormatError("implausible tensor rank in checkpoint");
    ad::Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in);
    std::vector<double> v(ad::shape_size(shape));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw FormatError("truncated checkpoint");
    p.add(std::move(name), ad::Tensor(std::move(shape), std::move(v)));
  }
  return p;
}

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'T', 'C', 'K', 'P', 'T', '\x01'};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  {
    std::ofstream o(path, std::ios::binary);
    if (!o) throw FormatError("cannot write checkpoint " + path.string());
    o.write(detail::kCheckpointMagic, 8);
    detail::put_string(o, ck.spec_description);
    const auto& h = ck.hyper;
    for (double v : {h.alpha, h.consistency_weight, h.noise_sigma, h.student_dropout, h.teacher_dropout, h.learning_rate}) detail::put(o, v);
    detail::put_params(o, ck.student);
    detail::put_params(o, ck.teacher);
  }
  std::ofstream m(path.string() + ".manifest.txt");
  m << "coxmt-checkpoint 1\n";
  m << "spec " << ck.spec_description << '\n';
  m << "alpha " << ck.hyper.alpha << "\nconsistency_weight " << ck.hyper.consistency_weight << "\nnoise_sigma " << ck.hyper.noise_sigma
    << "\nstudent_dropout " << ck.hyper.student_dropout << "\nteacher_dropout " << ck.hyper.teacher_dropout << "\nlearning_rate "
    << ck.hyper.learning_rate << '\n';
  for (std::size_t i = 0; i < ck.student.size(); ++i) m << "param " << ck.student.names[i] << ' ' << ad::shape_str(ck.student[i].shape()) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, detail::kCheckpointMagic)) throw FormatError(path.string() + ": not a coxmt checkpoint");
  Checkpoint ck;
  ck.spec_description = detail::get_string(in);
  auto& h = ck.hyper;
  for (double* v : {&h.alpha, &h.consistency_weight, &h.noise_sigma, &h.student_dropout, &h.teacher_dropout, &h.learning_rate})
    *v = detail::get<double>(in);
  ck.student = detail::get_params(in);
  ck.teacher = detail::get_params(in);
  if (!ck.student.congruent_with(ck.teacher)) throw FormatError(path.string() + ": student/teacher shapes differ");
  return ck;
}

}  // namespace coxmt
