#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cpmr/autodiff.hpp"
#include "cpmr/error.hpp"
#include "cpmr/graph.hpp"
#include "cpmr/parameters.hpp"

namespace cpmr {

struct ModelConfig {
  std::size_t d = 128;
  std::int64_t s_days = 5;
  // Taylor truncation order of the evolution series.
  int K = 6;
  // Sub-interval bound on ||(A - I) h||, using ||A - I|| <= 2.
  double max_step_norm = 0.5;
  double alpha0 = kAlpha0;
  RadiusScaling scaling = RadiusScaling::source_columns;
  bool fusion_bias = true;
  bool disable_ctx = false;
  bool disable_his = false;
  bool disable_fusion = false;
  bool literal_update = false;

  bool use_his() const noexcept { return !disable_his; }
  bool use_ctx() const noexcept { return !disable_ctx; }

  void validate() const {
    if (d < 1) throw ConfigError("model.d must be >= 1");
    if (s_days < 1) throw ConfigError("model.s_days must be >= 1");
    if (K < 1) throw ConfigError("model.K must be >= 1");
    if (!(max_step_norm > 0)) throw ConfigError("model.max_step_norm must be positive");
    if (!(alpha0 > 0 && alpha0 < 1)) throw ConfigError("model.alpha0 must lie in (0, 1)");
    if (disable_ctx && disable_his) {
      throw ConfigError("model: disable_ctx and disable_his cannot both be set (one scenario is required)");
    }
  }
};

enum class Scenario { his, ctx };
inline const char* to_string(Scenario s) { return s == Scenario::his ? "his" : "ctx"; }

// Fusion task heads; `final` produces the representation used for scoring.
enum class FusionTask { his, ctx, final };
inline const char* to_string(FusionTask t) {
  switch (t) {
    case FusionTask::his: return "his";
    case FusionTask::ctx: return "ctx";
    case FusionTask::final: return "final";
  }
  return "?";
}

inline std::vector<FusionTask> fusion_tasks(const ModelConfig& c) {
  std::vector<FusionTask> t;
  if (c.use_his()) t.push_back(FusionTask::his);
  if (c.use_ctx()) t.push_back(FusionTask::ctx);
  t.push_back(FusionTask::final);
  return t;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace names {
inline std::string embeddings() { return "E"; }
inline std::string alpha(Scenario s) { return std::string("alpha_") + to_string(s); }
inline std::string fusion(const char* cls, const std::string& net, const char* part) {
  return std::string("fusion.") + cls + "." + net + "." + part;
}
inline std::string update(Scenario s, const char* w) { return std::string("update.") + to_string(s) + "." + w; }
inline std::string predict(const char* fc, const char* part) { return std::string("predict.") + fc + "." + part; }
}  // namespace names

// Embeddings and all linear maps ~ U(-1/sqrt(d), 1/sqrt(d)); spectral radii
// and biases start at zero.
inline ParameterSet init_parameters(const ModelConfig& cfg, std::size_t n_users, std::size_t n_items,
                                    std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto uniform = [&](std::size_t r, std::size_t c) {
    Tensor t(r, c);
    for (double& v : t.values()) v = dist(rng);
    return t;
  };
  const std::size_t d = cfg.d, n = n_users + n_items;
  ParameterSet p;
  p.add(names::embeddings(), uniform(n, d));
  for (Scenario s : {Scenario::his, Scenario::ctx}) {
    if ((s == Scenario::his && !cfg.use_his()) || (s == Scenario::ctx && !cfg.use_ctx())) continue;
    p.add(names::alpha(s), Tensor(n, 1));
  }
  if (!cfg.disable_fusion) {
    const std::size_t in = (cfg.use_his() && cfg.use_ctx()) ? 2 * d : d;
    for (const char* cls : {"user", "item"}) {
      std::vector<std::string> experts{"expert_shared"};
      for (FusionTask t : fusion_tasks(cfg)) experts.push_back(std::string("expert_") + to_string(t));
      for (const auto& e : experts) {
        p.add(names::fusion(cls, e, "W"), uniform(d, in));
        if (cfg.fusion_bias) p.add(names::fusion(cls, e, "b"), Tensor(1, d));
      }
      for (FusionTask t : fusion_tasks(cfg)) {
        const std::string g = std::string("gate_") + to_string(t);
        p.add(names::fusion(cls, g, "W"), uniform(2, in));
        if (cfg.fusion_bias) p.add(names::fusion(cls, g, "b"), Tensor(1, 2));
      }
    }
  }
  for (Scenario s : {Scenario::his, Scenario::ctx}) {
    if ((s == Scenario::his && !cfg.use_his()) || (s == Scenario::ctx && !cfg.use_ctx())) continue;
    for (const char* w : {"W_i2u", "W_u2u", "W_u2i", "W_i2i"}) p.add(names::update(s, w), uniform(d, d));
  }
  for (const char* fc : {"FC_U", "FC_I"}) {
    p.add(names::predict(fc, "W"), uniform(d, 2 * d));
    p.add(names::predict(fc, "b"), Tensor(1, d));
  }
  return p;
}

// Pulls parameters onto a tape. Frozen views register them as constants so
// no gradient bookkeeping is recorded.
class ParamView {
 public:
  ParamView(Tape& tape, const ParameterSet& params, bool frozen = false)
      : tape_(&tape), params_(&params), frozen_(frozen) {}

  Var operator()(const std::string& name) const {
    if (frozen_) {
      if (auto it = cache_.find(name); it != cache_.end()) return it->second;
      Var v = tape_->constant(params_->at(name));
      cache_.emplace(name, v);
      return v;
    }
    return tape_->parameter(name, params_->at(name));
  }

  Var optional(const std::string& name) const { return params_->contains(name) ? (*this)(name) : Var{}; }

  Tape& tape() const { return *tape_; }
  const ParameterSet& params() const { return *params_; }
  bool frozen() const noexcept { return frozen_; }

 private:
  Tape* tape_;
  const ParameterSet* params_;
  bool frozen_;
  mutable std::map<std::string, Var> cache_;
};

// ---------------------------------------------------------------------------
// Evolution: closed-form solution of dX/dt = (A - I) X + E over an interval.
// ---------------------------------------------------------------------------

struct EvolveOptions {
  int K = 6;
  double max_step_norm = 0.5;
  RadiusScaling scaling = RadiusScaling::source_columns;
};

inline std::size_t evolve_substeps(double dt, double max_step_norm) {
  if (dt <= 0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(2.0 * dt / max_step_norm)));
}

namespace detail {

// out = (A - I) u with A the radius-scaled normalized adjacency.
inline void apply_shifted(const SparseMatrix& adj, const Tensor& radius, RadiusScaling mode, const Tensor& u,
                          Tensor& out) {
  if (mode == RadiusScaling::source_columns) {
    Tensor su = u;
    for (std::size_t r = 0; r < su.rows(); ++r)
      for (double& v : su.row(r)) v *= radius(r, 0);
    adj.multiply(su, out);
  } else {
    adj.multiply(u, out);
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (double& v : out.row(r)) v *= radius(r, 0);
  }
  out -= u;
}

// out = (A - I)^T g; grad_radius += d<g, (A - I) u>/d radius. adj is symmetric.
inline void apply_shifted_adjoint(const SparseMatrix& adj, const Tensor& radius, RadiusScaling mode,
                                  const Tensor& u, const Tensor& g, Tensor& out, Tensor* grad_radius) {
  if (mode == RadiusScaling::source_columns) {
    Tensor sg;
    adj.multiply(g, sg);
    if (grad_radius) {
      for (std::size_t r = 0; r < sg.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < sg.cols(); ++c) acc += sg(r, c) * u(r, c);
        (*grad_radius)(r, 0) += acc;
      }
    }
    for (std::size_t r = 0; r < sg.rows(); ++r)
      for (double& v : sg.row(r)) v *= radius(r, 0);
    out = std::move(sg);
  } else {
    if (grad_radius) {
      Tensor au;
      adj.multiply(u, au);
      for (std::size_t r = 0; r < au.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < au.cols(); ++c) acc += au(r, c) * g(r, c);
        (*grad_radius)(r, 0) += acc;
      }
    }
    Tensor sg = g;
    for (std::size_t r = 0; r < sg.rows(); ++r)
      for (double& v : sg.row(r)) v *= radius(r, 0);
    adj.multiply(sg, out);
  }
  out -= g;
}

// One sub-interval of length h:
//   X' = X + h * sum_{k<K} (hM)^k (M X + E) / (k+1)!
// which equals the truncated series Q(h) X + P(h) E with M = A - I.
inline Tensor evolve_substep(const SparseMatrix& adj, const Tensor& radius, RadiusScaling mode, const Tensor& x,
                             const Tensor& e, double h, int K) {
  Tensor term;
  apply_shifted(adj, radius, mode, x, term);
  term += e;
  Tensor acc = term;
  Tensor next;
  for (int k = 1; k < K; ++k) {
    apply_shifted(adj, radius, mode, term, next);
    next *= h / static_cast<double>(k + 1);
    acc += next;
    std::swap(term, next);
  }
  acc *= h;
  acc += x;
  return acc;
}

}  // namespace detail

// Evolves X over dt with the source term E. `radius` is sigmoid(alpha) as
// an n x 1 column living on the tape, so the spectral radii stay trainable.
// The backward pass recomputes the series instead of storing every term.
inline Var evolve(Var x, Var e, const NormalizedAdjacency& nadj, Var radius, double dt,
                  const EvolveOptions& opt = {}) {
  if (opt.K < 1) throw ConfigError("evolve: K must be >= 1");
  if (dt < 0) throw ConfigError("evolve: negative interval");
  Tape& tape = detail::same_tape(x, e, "evolve");
  detail::same_tape(x, radius, "evolve");
  detail::require_same_shape(x.value(), e.value(), "evolve");
  const std::size_t n = nadj.matrix->rows();
  if (x.rows() != n || radius.rows() != n || radius.cols() != 1) {
    throw ShapeError("evolve: state " + x.value().shape_str() + ", radius " + radius.value().shape_str() +
                     " on a " + std::to_string(n) + "-node graph");
  }
  const std::size_t steps = evolve_substeps(dt, opt.max_step_norm);
  if (steps == 0) return x;
  const double h = dt / static_cast<double>(steps);

  Tensor out = x.value();
  for (std::size_t s = 0; s < steps; ++s)
    out = detail::evolve_substep(*nadj.matrix, radius.value(), opt.scaling, out, e.value(), h, opt.K);

  const std::size_t ix = x.id(), ie = e.id(), ir = radius.id();
  const bool rg = x.requires_grad() || e.requires_grad() || radius.requires_grad();
  auto adj = nadj.matrix;
  const int K = opt.K;
  const RadiusScaling mode = opt.scaling;
  return tape.record("evolve", std::move(out), rg, [=](Tape& tp, const Tensor& gy) {
    const Tensor& rad = tp.value(ir);
    const Tensor& ev = tp.value(ie);
    const bool want_r = tp.requires_grad(ir);
    Tensor grad_r(rad.rows(), 1);
    Tensor grad_e(ev.rows(), ev.cols());

    // Inputs of every sub-interval, recomputed.
    std::vector<Tensor> inputs;
    inputs.reserve(steps);
    inputs.push_back(tp.value(ix));
    for (std::size_t s = 1; s < steps; ++s)
      inputs.push_back(detail::evolve_substep(*adj, rad, mode, inputs.back(), ev, h, K));

    Tensor g = gy;
    for (std::size_t s = steps; s-- > 0;) {
      const Tensor& xs = inputs[s];
      // Forward terms: t0 = M x + E, t_k = h/(k+1) M t_{k-1}.
      // Only t_0 .. t_{K-2} feed further products.
      std::vector<Tensor> terms(static_cast<std::size_t>(K));
      detail::apply_shifted(*adj, rad, mode, xs, terms[0]);
      terms[0] += ev;
      for (int k = 1; k < K - 1; ++k) {
        detail::apply_shifted(*adj, rad, mode, terms[k - 1], terms[k]);
        terms[k] *= h / static_cast<double>(k + 1);
      }
      Tensor gacc = g;
      gacc *= h;
      Tensor gt = gacc;
      Tensor back;
      for (int k = K - 1; k >= 1; --k) {
        Tensor scaled = gt;
        scaled *= h / static_cast<double>(k + 1);
        detail::apply_shifted_adjoint(*adj, rad, mode, terms[k - 1], scaled, back, want_r ? &grad_r : nullptr);
        gt = gacc;
        gt += back;
      }
      grad_e += gt;
      detail::apply_shifted_adjoint(*adj, rad, mode, xs, gt, back, want_r ? &grad_r : nullptr);
      g += back;
    }
    tp.accumulate(ix, g);
    tp.accumulate(ie, grad_e);
    if (want_r) tp.accumulate(ir, grad_r);
  });
}

// ---------------------------------------------------------------------------
// Fusion: one-layer customized gate control per entity class.
// ---------------------------------------------------------------------------

struct FusionResult {
  Var his;
  Var ctx;
  Var z;
};

// X_in = Xh ++ Xc (or the single enabled state); for each task,
// out = w0 * Expert_task(X_in) + w1 * Expert_shared(X_in) with
// w = softmax(Gate_task(X_in)). `cls` is "user" or "item".
inline FusionResult fuse(Var xh, Var xc, const ParamView& pv, const char* cls, const ModelConfig& cfg) {
  if (cfg.use_his() && cfg.use_ctx()) {
    detail::require_same_shape(xh.value(), xc.value(), "fuse");
  }
  if (cfg.disable_fusion) {
    Var sum_state = (cfg.use_his() && cfg.use_ctx()) ? add(xh, xc) : (cfg.use_his() ? xh : xc);
    return {cfg.use_his() ? sum_state : Var{}, cfg.use_ctx() ? sum_state : Var{}, sum_state};
  }
  Var xin = (cfg.use_his() && cfg.use_ctx()) ? concat_cols(xh, xc) : (cfg.use_his() ? xh : xc);
  auto net = [&](const std::string& name) {
    return linear(xin, pv(names::fusion(cls, name, "W")), pv.optional(names::fusion(cls, name, "b")));
  };
  Var shared = net("expert_shared");
  FusionResult out;
  for (FusionTask t : fusion_tasks(cfg)) {
    const std::string task = to_string(t);
    Var w = softmax_rows(net("gate_" + task));
    Var y = mix2(w, net("expert_" + task), shared);
    if (t == FusionTask::his) out.his = y;
    else if (t == FusionTask::ctx) out.ctx = y;
    else out.z = y;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Update: discrete jump of the states touched by one day's interactions.
// ---------------------------------------------------------------------------

struct InstantGraph {
  std::vector<std::size_t> users;  // involved users, ascending
  std::vector<std::size_t> items;  // involved items, ascending
  // Row-degree normalized bi-adjacency restricted to involved rows:
  // |users| x n_items and |items| x n_users.
  std::shared_ptr<const SparseMatrix> user_rows;
  std::shared_ptr<const SparseMatrix> item_rows;

  bool empty() const noexcept { return users.empty(); }

  static InstantGraph build(const BiAdjacency& b) {
    InstantGraph g;
    std::vector<std::size_t> udeg(b.rows(), 0), ideg(b.cols(), 0);
    for (auto [u, i] : b.edges()) {
      ++udeg[u];
      ++ideg[i];
    }
    std::vector<std::size_t> upos(b.rows()), ipos(b.cols());
    for (std::size_t u = 0; u < b.rows(); ++u)
      if (udeg[u]) upos[u] = g.users.size(), g.users.push_back(u);
    for (std::size_t i = 0; i < b.cols(); ++i)
      if (ideg[i]) ipos[i] = g.items.size(), g.items.push_back(i);
    std::vector<SparseMatrix::Triplet> ut, it;
    for (auto [u, i] : b.edges()) {
      ut.push_back({upos[u], i, 1.0 / static_cast<double>(udeg[u])});
      it.push_back({ipos[i], u, 1.0 / static_cast<double>(ideg[i])});
    }
    g.user_rows = std::make_shared<const SparseMatrix>(SparseMatrix::from_triplets(g.users.size(), b.cols(), std::move(ut)));
    g.item_rows = std::make_shared<const SparseMatrix>(SparseMatrix::from_triplets(g.items.size(), b.rows(), std::move(it)));
    return g;
  }
};

// Updates one entity class (`self`) from the other class's states:
//   delta = ReLU(Dinv * B * X_other * W_msg^T)   for involved rows
//   default: involved rows become X_self * W_self^T + delta, others unchanged
//   literal: every row becomes X_self * W_self^T, involved rows add delta
inline Var update_instant(Var x_self, Var x_other, const std::vector<std::size_t>& involved,
                          const std::shared_ptr<const SparseMatrix>& norm_rows, Var w_msg, Var w_self,
                          bool literal_update) {
  if (involved.empty()) return literal_update ? matmul_nt(x_self, w_self) : x_self;
  Var delta = relu(matmul_nt(spmm(norm_rows, x_other), w_msg));
  if (!literal_update) {
    Var kept = matmul_nt(row_select(x_self, involved), w_self);
    return row_scatter(x_self, involved, add(kept, delta));
  }
  Var all = matmul_nt(x_self, w_self);
  Tape& t = x_self.tape();
  Var full_delta = row_scatter(t.constant(Tensor(x_self.rows(), x_self.cols())), involved, delta);
  std::vector<std::uint8_t> mask(x_self.rows(), 0);
  for (std::size_t r : involved) mask[r] = 1;
  return masked_add(all, std::move(mask), full_delta);
}

// ---------------------------------------------------------------------------
// Predict: lambda(u, i) = FC_U(E_u ++ Z_u) . FC_I(E_i ++ Z_i)
// ---------------------------------------------------------------------------

// FC(E_rows ++ Z_rows) for plain tensors; rows of e and z are paired.
inline Tensor project_rows(const Tensor& e, const Tensor& z, const Tensor& weight, const Tensor& bias) {
  if (e.rows() != z.rows()) throw ShapeError("project_rows: row counts differ");
  Tensor in(e.rows(), e.cols() + z.cols());
  for (std::size_t r = 0; r < e.rows(); ++r) {
    std::copy(e.row(r).begin(), e.row(r).end(), in.row(r).begin());
    std::copy(z.row(r).begin(), z.row(r).end(), in.row(r).begin() + static_cast<std::ptrdiff_t>(e.cols()));
  }
  Tensor out;
  gemm(in, false, weight, true, out);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias[c];
  return out;
}

inline double score(std::span<const double> e_u, std::span<const double> z_u, std::span<const double> e_i,
                    std::span<const double> z_i, const ParameterSet& params) {
  auto row = [](std::span<const double> v) { return Tensor(1, v.size(), std::vector<double>(v.begin(), v.end())); };
  Tensor pu = project_rows(row(e_u), row(z_u), params.at(names::predict("FC_U", "W")),
                           params.at(names::predict("FC_U", "b")));
  Tensor pi = project_rows(row(e_i), row(z_i), params.at(names::predict("FC_I", "W")),
                           params.at(names::predict("FC_I", "b")));
  double lambda = 0.0;
  for (std::size_t c = 0; c < pu.cols(); ++c) lambda += pu[c] * pi[c];
  return lambda;
}

// Scores (users[k], items[k]) pairs on the tape; returns a pairs x 1 column.
// `e` is the full static embedding matrix (users first), z_users / z_items
// the fused representations.
inline Var score_pairs(const ParamView& pv, Var e, Var z_users, Var z_items, const std::vector<std::size_t>& users,
                       const std::vector<std::size_t>& items) {
  if (users.size() != items.size()) throw ShapeError("score_pairs: user and item lists differ in length");
  const std::size_t nu = z_users.rows();
  std::vector<std::size_t> item_rows(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) item_rows[k] = nu + items[k];
  Var pu = linear(concat_cols(row_select(e, users), row_select(z_users, users)), pv(names::predict("FC_U", "W")),
                  pv(names::predict("FC_U", "b")));
  Var pi = linear(concat_cols(row_select(e, item_rows), row_select(z_items, items)),
                  pv(names::predict("FC_I", "W")), pv(names::predict("FC_I", "b")));
  return rowwise_dot(pu, pi);
}

// ---------------------------------------------------------------------------
// Recurrence
// ---------------------------------------------------------------------------

enum class Phase {
  origin,  // t = 0+, before any batch
  post,    // t_k^+, after the instant update
  pre,     // t_k^-, evolved, not yet fused
  at,      // t_k, fused; Z is exposed for prediction
};

struct Clock {
  std::int64_t day = 0;
  Phase phase = Phase::origin;

  friend bool operator==(const Clock&, const Clock&) = default;
};

// Detached state values (users first, then items).
struct TemporalStates {
  Tensor his;
  Tensor ctx;
  Clock clock;
};

inline TemporalStates init_states(const Tensor& embeddings, std::int64_t origin_day) {
  return {embeddings, embeddings, Clock{origin_day, Phase::origin}};
}

struct Prediction {
  std::int64_t day = 0;
  Var e;        // static embeddings (n_nodes x d)
  Var z_users;  // n_users x d
  Var z_items;  // n_items x d
};

// Runs evolve -> fuse -> (predict) -> update over interaction days on one
// tape. The instant graph of a day is read only by update(), after the
// representations for that day have been exposed.
class Recurrence {
 public:
  Recurrence(const ModelConfig& cfg, const EdgeStore& store, double day_unit)
      : cfg_(cfg), store_(&store), day_unit_(day_unit) {
    cfg_.validate();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const Clock& clock() const noexcept { return clock_; }
  const EdgeStore& store() const noexcept { return *store_; }

  // Places detached states on the tape behind `pv`. At the origin of a
  // trainable run the states are the embedding parameter itself, which is
  // what X(0+) = E means for the gradient.
  void attach(const ParamView& pv, const TemporalStates& st) {
    if (st.clock.phase == Phase::pre || st.clock.phase == Phase::at) {
      throw SequencingError("attach: states must be at an origin or post-update moment");
    }
    pv_.emplace(pv);
    e_ = pv(names::embeddings());
    const std::size_t n = store_->n_nodes();
    if (e_.rows() != n || e_.cols() != cfg_.d) {
      throw ShapeError("embeddings " + e_.value().shape_str() + " do not match " + std::to_string(n) + " nodes x d=" +
                       std::to_string(cfg_.d));
    }
    Tape& t = pv.tape();
    const bool from_e = st.clock.phase == Phase::origin && !pv.frozen();
    his_ = cfg_.use_his() ? (from_e ? e_ : t.constant(st.his)) : Var{};
    ctx_ = cfg_.use_ctx() ? (from_e ? e_ : t.constant(st.ctx)) : Var{};
    if (his_.valid() && !his_.value().same_shape(e_.value())) throw ShapeError("attach: his state shape");
    if (ctx_.valid() && !ctx_.value().same_shape(e_.value())) throw ShapeError("attach: ctx state shape");
    clock_ = st.clock;
  }

  TemporalStates detach() const {
    if (clock_.phase == Phase::pre || clock_.phase == Phase::at) {
      throw SequencingError("detach: update() has not run for day " + std::to_string(clock_.day));
    }
    TemporalStates st;
    if (his_.valid()) st.his = his_.value();
    if (ctx_.valid()) st.ctx = ctx_.value();
    st.clock = clock_;
    return st;
  }

  // Evolves from the previous moment to day^- and fuses at day.
  Prediction predict(std::int64_t day) {
    require_attached();
    const bool first = clock_.phase == Phase::origin;
    if (!(clock_.phase == Phase::post || first) || (first ? day < clock_.day : day <= clock_.day)) {
      throw SequencingError("predict(day " + std::to_string(day) + ") out of sequence after day " +
                            std::to_string(clock_.day));
    }
    const ParamView& pv = *pv_;
    const double dt = static_cast<double>(day - clock_.day) * day_unit_;
    const EvolveOptions opt{cfg_.K, cfg_.max_step_norm, cfg_.scaling};
    Var his_m, ctx_m;
    if (cfg_.use_his()) {
      auto nadj = normalize_adjacency(store_->history_biadjacency(day), cfg_.alpha0);
      his_m = evolve(his_, e_, nadj, sigmoid(pv(names::alpha(Scenario::his))), dt, opt);
    }
    if (cfg_.use_ctx()) {
      auto nadj = normalize_adjacency(store_->context_biadjacency(day, cfg_.s_days), cfg_.alpha0);
      ctx_m = evolve(ctx_, e_, nadj, sigmoid(pv(names::alpha(Scenario::ctx))), dt, opt);
    }
    clock_ = {day, Phase::pre};

    const std::size_t nu = store_->n_users(), n = store_->n_nodes();
    auto users = [&](Var v) { return v.valid() ? slice_rows(v, 0, nu) : Var{}; };
    auto items = [&](Var v) { return v.valid() ? slice_rows(v, nu, n) : Var{}; };
    FusionResult fu = fuse(users(his_m), users(ctx_m), pv, "user", cfg_);
    FusionResult fi = fuse(items(his_m), items(ctx_m), pv, "item", cfg_);
    his_u_ = fu.his, his_i_ = fi.his, ctx_u_ = fu.ctx, ctx_i_ = fi.ctx;
    clock_.phase = Phase::at;
    return {day, e_, fu.z, fi.z};
  }

  // Applies the instant graph of the current day.
  void update() {
    require_attached();
    if (clock_.phase != Phase::at) throw SequencingError("update() must follow predict()");
    const InstantGraph g = InstantGraph::build(store_->instant_biadjacency(clock_.day));
    const ParamView& pv = *pv_;
    auto run = [&](Scenario s, Var xu, Var xi) {
      Var u = update_instant(xu, xi, g.users, g.user_rows, pv(names::update(s, "W_i2u")),
                             pv(names::update(s, "W_u2u")), cfg_.literal_update);
      Var i = update_instant(xi, xu, g.items, g.item_rows, pv(names::update(s, "W_u2i")),
                             pv(names::update(s, "W_i2i")), cfg_.literal_update);
      return concat_rows(u, i);
    };
    if (cfg_.use_his()) his_ = run(Scenario::his, his_u_, his_i_);
    if (cfg_.use_ctx()) ctx_ = run(Scenario::ctx, ctx_u_, ctx_i_);
    his_u_ = his_i_ = ctx_u_ = ctx_i_ = Var{};
    clock_.phase = Phase::post;
  }

  Prediction step(std::int64_t day) {
    Prediction p = predict(day);
    update();
    return p;
  }

  Var his() const noexcept { return his_; }
  Var ctx() const noexcept { return ctx_; }
  Var embeddings() const noexcept { return e_; }

 private:
  void require_attached() const {
    if (!pv_) throw SequencingError("Recurrence used before attach()");
  }

  ModelConfig cfg_;
  const EdgeStore* store_;
  double day_unit_;
  std::optional<ParamView> pv_;
  Var e_, his_, ctx_;
  Var his_u_, his_i_, ctx_u_, ctx_i_;
  Clock clock_;
};

}  // namespace cpmr
