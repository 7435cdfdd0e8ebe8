#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cpmr/autodiff.hpp"
#include "cpmr/gradcheck.hpp"
#include "cpmr/graph.hpp"
#include "cpmr/model.hpp"
#include "cpmr/training.hpp"

namespace cpmr {

struct GradSuiteCase {
  std::string name;
  GradCheckResult result;
};

struct GradSuiteReport {
  std::vector<GradSuiteCase> cases;
  double tolerance = 1e-4;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& c : cases) m = std::max(m, c.result.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() <= tolerance; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t toy_d = 4;
  // Adds a case whose backward rule is deliberately wrong.
  bool sabotage = false;
};

namespace detail {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(r, c);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Values away from the ReLU kink so central differences stay one-sided-free.
inline Tensor kink_free(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  Tensor t = random_tensor(rng, r, c, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) v = sign(rng) ? v : -v;
  return t;
}

// sum(weights * y) so every output coordinate gets a distinct adjoint.
inline Var project(Var y, const Tensor& weights) { return sum(hadamard(y, y.tape().constant(weights))); }

// A toy day-structured log: 4 users, 4 items, 3 days.
inline std::vector<Interaction> toy_log() {
  return {{0, 0, 0, 0.0}, {1, 1, 0, 0.0}, {2, 0, 0, 0.0}, {0, 2, 1, 0.5}, {3, 3, 1, 0.5},
          {1, 0, 2, 1.0}, {2, 2, 2, 1.0}, {3, 1, 2, 1.0}};
}

}  // namespace detail

// Loss of one TBPTT segment over the toy log with fixed negatives.
inline LossFn toy_step_loss(const ModelConfig& cfg, std::uint64_t seed) {
  auto store = std::make_shared<EdgeStore>(detail::toy_log(), 4, 4);
  std::mt19937_64 rng(seed);
  auto negatives = std::make_shared<std::vector<std::vector<NegativeSample>>>();
  HistoryIndex hist(4, 4);
  for (const auto& day : store->days()) {
    auto edges = store->instant_edges(day.day);
    std::vector<NegativeSample> negs;
    for (const auto& x : edges) negs.push_back(sample_negatives(x, hist, 2, rng));
    negatives->push_back(std::move(negs));
    hist.add(edges);
  }
  return [cfg, store, negatives](Tape& tape, const ParameterSet& p) {
    ParamView pv(tape, p);
    Recurrence rec(cfg, *store, 0.5);
    rec.attach(pv, init_states(p.at(names::embeddings()), 0));
    std::vector<Var> losses;
    for (std::size_t k = 0; k < store->days().size(); ++k) {
      const auto day = store->days()[k].day;
      Prediction pred = rec.predict(day);
      losses.push_back(batch_loss(pv, pred, store->instant_edges(day), (*negatives)[k]));
      rec.update();
    }
    return mean_of(losses);
  };
}

inline GradSuiteReport run_grad_suite(const GradSuiteOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  GradSuiteReport rep;
  auto check = [&](const std::string& name, const ParameterSet& ps, const LossFn& f) {
    rep.cases.push_back({name, grad_check(f, ps, 1e-5, 64, opt.seed + rep.cases.size())});
  };
  auto R = [&](std::size_t r, std::size_t c) { return detail::random_tensor(rng, r, c); };
  auto P = [](std::initializer_list<std::pair<const char*, Tensor>> xs) {
    ParameterSet ps;
    for (const auto& [n, t] : xs) ps.add(n, t);
    return ps;
  };
  using detail::project;

  // Binary ops on 3x4 operands.
  {
    const Tensor w = R(3, 4), w5 = R(3, 5), w33 = R(3, 3);
    const ParameterSet ab = P({{"a", R(3, 4)}, {"b", R(3, 4)}});
    auto two = [&](const std::string& n, std::function<Var(Var, Var)> op, const Tensor& weights,
                   const ParameterSet& ps) {
      check(n, ps, [=](Tape& t, const ParameterSet& p) {
        return project(op(t.parameter("a", p.at("a")), t.parameter("b", p.at("b"))), weights);
      });
    };
    two("add", [](Var a, Var b) { return add(a, b); }, w, ab);
    two("sub", [](Var a, Var b) { return sub(a, b); }, w, ab);
    two("hadamard", [](Var a, Var b) { return hadamard(a, b); }, w, ab);
    two("matmul", [](Var a, Var b) { return matmul(a, b); }, w5, P({{"a", R(3, 4)}, {"b", R(4, 5)}}));
    two("matmul_nt", [](Var a, Var b) { return matmul_nt(a, b); }, w33, ab);
    two("add_row", [](Var a, Var b) { return add_row(a, b); }, w, P({{"a", R(3, 4)}, {"b", R(1, 4)}}));
    two("concat_cols", [](Var a, Var b) { return concat_cols(a, b); }, R(3, 6), P({{"a", R(3, 4)}, {"b", R(3, 2)}}));
    two("concat_rows", [](Var a, Var b) { return concat_rows(a, b); }, R(5, 4), P({{"a", R(3, 4)}, {"b", R(2, 4)}}));
    two("rowwise_dot", [](Var a, Var b) { return rowwise_dot(a, b); }, R(3, 1), ab);
    two("scale_rows", [](Var a, Var b) { return scale_rows(a, b); }, w, P({{"a", R(3, 4)}, {"b", R(3, 1)}}));
    two("mix2", [](Var a, Var b) { return mix2(softmax_rows(slice_rows(concat_cols(a, a), 0, 3)), b, b); }, w,
        P({{"a", R(3, 1)}, {"b", R(3, 4)}}));
    two("masked_add", [](Var a, Var b) { return masked_add(a, {1, 0, 1}, b); }, w, ab);
    two("row_scatter", [](Var a, Var b) { return row_scatter(a, {2, 0}, slice_rows(b, 0, 2)); }, w, ab);
    two("linear", [](Var a, Var b) { return linear(a, b, Var{}); }, w33, ab);
  }
  {
    const Tensor w = R(3, 4);
    check("mix2_weights", P({{"w", R(3, 2)}, {"a", R(3, 4)}, {"b", R(3, 4)}}), [=](Tape& t, const ParameterSet& p) {
      return project(mix2(t.parameter("w", p.at("w")), t.parameter("a", p.at("a")), t.parameter("b", p.at("b"))), w);
    });
    check("linear_bias", P({{"x", R(3, 4)}, {"W", R(2, 4)}, {"b", R(1, 2)}}), [=](Tape& t, const ParameterSet& p) {
      return project(linear(t.parameter("x", p.at("x")), t.parameter("W", p.at("W")), t.parameter("b", p.at("b"))),
                     Tensor(3, 2, {0.3, -0.7, 1.1, 0.2, -0.4, 0.9}));
    });
  }

  // Unary ops.
  {
    auto one = [&](const std::string& n, std::function<Var(Var)> op, Tensor input, Tensor weights) {
      check(n, P({{"a", std::move(input)}}), [=](Tape& t, const ParameterSet& p) {
        return project(op(t.parameter("a", p.at("a"))), weights);
      });
    };
    one("scale", [](Var a) { return scale(a, -1.7); }, R(3, 4), R(3, 4));
    one("relu", [](Var a) { return relu(a); }, detail::kink_free(rng, 3, 4), R(3, 4));
    one("sigmoid", [](Var a) { return sigmoid(a); }, R(3, 4), R(3, 4));
    one("softmax_rows", [](Var a) { return softmax_rows(a); }, R(3, 4), R(3, 4));
    one("logsumexp_rows", [](Var a) { return logsumexp_rows(a); }, R(3, 4), R(3, 1));
    one("slice_rows", [](Var a) { return slice_rows(a, 1, 3); }, R(3, 4), R(2, 4));
    one("reshape", [](Var a) { return reshape(a, 2, 6); }, R(3, 4), R(2, 6));
    one("row_select", [](Var a) { return row_select(a, {2, 0, 2}); }, R(3, 4), R(3, 4));
    one("sum", [](Var a) { return sum(a); }, R(3, 4), R(1, 1));
    one("mean", [](Var a) { return mean(a); }, R(3, 4), R(1, 1));
    one("mean_of", [](Var a) { return mean_of({sum(a), scale(sum(hadamard(a, a)), 0.5)}); }, R(3, 4), R(1, 1));
    auto s = std::make_shared<const SparseMatrix>(
        SparseMatrix::from_triplets(2, 3, {{0, 0, 0.5}, {0, 2, -1.0}, {1, 1, 2.0}, {1, 2, 0.25}}));
    one("spmm", [s](Var a) { return spmm(s, a); }, R(3, 4), R(2, 4));
  }

  // Evolution under both radius modes, short and split intervals.
  {
    BiAdjacency b(3, 3, std::vector<Interaction>{{0, 0, 0, 0}, {0, 1, 0, 0}, {1, 1, 0, 0}, {2, 2, 0, 0}});
    const NormalizedAdjacency nadj = normalize_adjacency(b);
    const Tensor w = R(6, 3);
    for (RadiusScaling mode : {RadiusScaling::source_columns, RadiusScaling::target_rows}) {
      for (double dt : {0.3, 1.7}) {
        const std::string n = std::string("evolve_") + (mode == RadiusScaling::source_columns ? "columns" : "rows") +
                              (dt > 1 ? "_split" : "");
        check(n, P({{"x", R(6, 3)}, {"e", R(6, 3)}, {"alpha", R(6, 1)}}), [=](Tape& t, const ParameterSet& p) {
          Var y = evolve(t.parameter("x", p.at("x")), t.parameter("e", p.at("e")), nadj,
                         sigmoid(t.parameter("alpha", p.at("alpha"))), dt, {6, 0.5, mode});
          return project(y, w);
        });
      }
    }
  }

  // Full recurrence losses on the toy log.
  {
    for (const auto& [label, d, literal, fusion_off] :
         std::vector<std::tuple<std::string, std::size_t, bool, bool>>{
             {"cpmr_step", opt.toy_d, false, false},
             {"cpmr_step_literal_update", opt.toy_d, true, false},
             {"cpmr_step_wo_fusion", opt.toy_d, false, true},
             {"cpmr_step_d2", 2, false, false}}) {
      ModelConfig cfg;
      cfg.d = d;
      cfg.s_days = 1;
      cfg.literal_update = literal;
      cfg.disable_fusion = fusion_off;
      ParameterSet ps = init_parameters(cfg, 4, 4, opt.seed + 11);
      // Nonzero radii and biases exercise every path.
      std::mt19937_64 r2(opt.seed + 13);
      for (auto& [name, t] : ps)
        if (name.rfind("alpha_", 0) == 0 || name.ends_with(".b"))
          t = detail::random_tensor(r2, t.rows(), t.cols(), -0.5, 0.5);
      check(label, ps, toy_step_loss(cfg, opt.seed));
    }
  }

  if (opt.sabotage) {
    // ReLU whose backward ignores the mask.
    check("sabotaged_relu", P({{"a", detail::kink_free(rng, 3, 4)}}), [](Tape& t, const ParameterSet& p) {
      Var a = t.parameter("a", p.at("a"));
      Tensor y = a.value();
      for (double& v : y.values()) v = std::max(v, 0.0);
      const std::size_t ia = a.id();
      Var out = t.record("relu_wrong", std::move(y), true, [ia](Tape& tp, const Tensor& g) { tp.accumulate(ia, g); });
      return sum(out);
    });
  }
  return rep;
}

}  // namespace cpmr
