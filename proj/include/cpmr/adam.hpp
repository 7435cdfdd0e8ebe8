#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "cpmr/autodiff.hpp"
#include "cpmr/parameters.hpp"

namespace cpmr {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// One Adam step with classic L2: weight_decay * param is added to the
// gradient before the moment updates. Parameters without a gradient entry
// are treated as having a zero gradient.
inline void adam_step(ParameterSet& params, const GradMap& grads, double lr, double weight_decay,
                      AdamState& state) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git != grads.end() && !git->second.same_shape(p)) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + git->second.shape_str() +
                       ", parameter " + p.shape_str());
    }
    auto [mit, m_new] = state.m.try_emplace(name, p.rows(), p.cols());
    auto [vit, v_new] = state.v.try_emplace(name, p.rows(), p.cols());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (!m.same_shape(p) || !v.same_shape(p)) throw ShapeError("adam_step: moment shape for '" + name + "'");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = (git != grads.end() ? git->second[k] : 0.0) + weight_decay * p[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace cpmr
