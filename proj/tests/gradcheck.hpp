#pragma once

#include <functional>
#include <random>

#include "coxmt/coxmt.hpp"
#include "oracles.hpp"

namespace gradcheck {

using Builder = std::function<coxmt::ad::Var(coxmt::ad::Tape&, std::span<const coxmt::ad::Var>)>;

// Largest relative error between tape gradients and central differences over
// up to `max_checked` parameter scalars drawn at random.
inline double max_rel_error(coxmt::ParameterSet& params, const Builder& build, std::uint64_t seed = 0, std::size_t max_checked = 32,
                            double step = 1e-5) {
  using namespace coxmt;
  params.zero_grad();
  {
    ad::Tape tape;
    auto vars = bind(tape, params, true);
    tape.backward(build(tape, vars));
  }
  auto eval = [&]() {
    ad::Tape tape;
    auto vars = bind(tape, params, false);
    return build(tape, vars).item();
  };
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t k = 0; k < params[p].size(); ++k) slots.emplace_back(p, k);
  std::mt19937_64 rng(seed);
  std::shuffle(slots.begin(), slots.end(), rng);
  if (slots.size() > max_checked) slots.resize(max_checked);
  double worst = 0.0;
  for (auto [p, k] : slots) {
    double& x = params[p][k];
    const double x0 = x;
    x = x0 + step;
    const double up = eval();
    x = x0 - step;
    const double dn = eval();
    x = x0;
    const double fd = (up - dn) / (2 * step);
    worst = std::max(worst, oracle::rel_err(params[p].grad()[k], fd));
  }
  return worst;
}

}  // namespace gradcheck
