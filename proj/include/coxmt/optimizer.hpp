#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "coxmt/autodiff.hpp"

namespace coxmt {

// Named, ordered collection of parameter tensors. Student and teacher
// networks are two ParameterSets with identical names and shapes.
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<ad::Tensor> tensors;

  std::size_t size() const noexcept { return tensors.size(); }

  ad::Tensor& add(std::string name, ad::Tensor t) {
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
    return tensors.back();
  }

  ad::Tensor& operator[](std::size_t i) { return tensors[i]; }
  const ad::Tensor& operator[](std::size_t i) const { return tensors[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors) t.zero_grad();
  }

  // Deep copy of values only (no gradient buffers).
  ParameterSet snapshot() const {
    ParameterSet s;
    s.names = names;
    for (const auto& t : tensors) {
      ad::Tensor c(t.shape(), t.data());
      s.tensors.push_back(std::move(c));
    }
    return s;
  }

  bool congruent_with(const ParameterSet& o) const {
    if (names != o.names || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].shape() != o.tensors[i].shape()) return false;
    return true;
  }

  bool values_equal(const ParameterSet& o) const {
    if (!congruent_with(o)) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].data() != o.tensors[i].data()) return false;
    return true;
  }

  // max |a - b| over all entries.
  double max_abs_diff(const ParameterSet& o) const {
    if (!congruent_with(o)) throw DimensionError("parameter sets are not shape-congruent");
    double m = 0.0;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      for (std::size_t k = 0; k < tensors[i].size(); ++k) m = std::max(m, std::abs(tensors[i][k] - o.tensors[i][k]));
    return m;
  }
};

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step_count = 0;

  static OptimizerState sgd(double lr) {
    OptimizerState s;
    s.kind = OptimizerKind::sgd;
    s.learning_rate = lr;
    return s;
  }
  static OptimizerState adam(double lr) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = lr;
    return s;
  }
};

// One update from the gradients currently held by `params`. Gradients are
// checked for finiteness before anything is modified.
inline void optimizer_step(ParameterSet& params, OptimizerState& state) {
  if (!(state.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) throw Error("optimizer_step: parameter '" + params.names[i] + "' has no gradient buffer");
    for (double g : params[i].grad())
      if (!std::isfinite(g)) throw DivergedError("non-finite gradient in parameter '" + params.names[i] + "'", state.step_count);
  }
  if (state.kind == OptimizerKind::adam && state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& t : params.tensors) {
      state.first_moment.emplace_back(t.size(), 0.0);
      state.second_moment.emplace_back(t.size(), 0.0);
    }
  }
  ++state.step_count;
  const double lr = state.learning_rate;
  if (state.kind == OptimizerKind::sgd) {
    for (auto& t : params.tensors) {
      auto g = t.grad();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] -= lr * g[k];
    }
    return;
  }
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i];
    auto g = t.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != t.size()) throw DimensionError("optimizer moment buffer does not match parameter '" + params.names[i] + "'");
    for (std::size_t k = 0; k < t.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      t[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.epsilon);
    }
  }
}

}  // namespace coxmt
