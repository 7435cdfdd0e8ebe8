#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cpmr/autodiff.hpp"
#include "cpmr/parameters.hpp"

namespace cpmr {

// Builds a 1x1 loss on the tape from the given parameter values. Must pull
// parameters through tape.parameter(name, ...) so gradients are collected.
using LossFn = std::function<Var(Tape&, const ParameterSet&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients with central differences. Error per
// coordinate is |analytic - numeric| / max(1, |analytic|). At most
// max_coords coordinates per parameter are probed (all when fewer).
inline GradCheckResult grad_check(const LossFn& f, const ParameterSet& params, double h = 1e-5,
                                  std::size_t max_coords = 64, std::uint64_t seed = 7) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("grad_check: step h must lie in [1e-7, 1e-3]");
  GradMap analytic;
  {
    Tape tape;
    Var loss = f(tape, params);
    analytic = tape.backward(loss);
  }
  auto eval = [&](const ParameterSet& p) {
    Tape tape;
    return f(tape, p).value()[0];
  };

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  ParameterSet probe = params;
  for (const auto& [name, value] : params) {
    std::vector<std::size_t> coords(value.size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    const Tensor zero(value.rows(), value.cols());
    auto git = analytic.find(name);
    const Tensor& g = git != analytic.end() ? git->second : zero;
    for (std::size_t k : coords) {
      Tensor& p = probe.at(name);
      const double orig = p[k];
      p[k] = orig + h;
      const double fp = eval(probe);
      p[k] = orig - h;
      const double fm = eval(probe);
      p[k] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(g[k] - numeric) / std::max(1.0, std::abs(g[k]));
      ++res.checked;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = name;
        res.worst_index = k;
      }
    }
  }
  return res;
}

}  // namespace cpmr
