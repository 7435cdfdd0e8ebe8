#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpmr/adam.hpp"
#include "cpmr/autodiff.hpp"
#include "cpmr/data.hpp"
#include "cpmr/evaluation.hpp"
#include "cpmr/graph.hpp"
#include "cpmr/model.hpp"

namespace cpmr {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double lr_decay_factor = 0.5;
  int lr_decay_period = 10;  // epochs
  int n_tbptt = 20;          // interaction days per truncated segment
  int n_neg = 8;
  int max_epochs = 50;
  int patience = 5;  // epochs without validation MRR improvement
  std::uint64_t seed = 0;
  // Asserts every sampled negative is absent from the pre-day history.
  bool check_negatives = false;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(lr_decay_factor > 0)) throw ConfigError("train.lr_decay_factor must be > 0");
    if (lr_decay_period < 1) throw ConfigError("train.lr_decay_period must be >= 1");
    if (n_tbptt < 1) throw ConfigError("train.n_tbptt must be >= 1");
    if (n_neg < 1) throw ConfigError("train.n_neg must be >= 1");
    if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("train.patience must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

struct NegativeSample {
  std::vector<std::uint32_t> users;  // paired with the positive item
  std::vector<std::uint32_t> items;  // paired with the positive user
  bool user_fallback = false;
  bool item_fallback = false;
};

namespace detail {

// Ascending ids in [0, n) that are neither `exclude` nor in sorted `seen`.
inline std::vector<std::uint32_t> candidate_pool(std::size_t n, std::uint32_t exclude,
                                                 const std::vector<std::uint32_t>& seen) {
  std::vector<std::uint32_t> pool;
  pool.reserve(n);
  auto it = seen.begin();
  for (std::uint32_t v = 0; v < n; ++v) {
    while (it != seen.end() && *it < v) ++it;
    if (v == exclude || (it != seen.end() && *it == v)) continue;
    pool.push_back(v);
  }
  return pool;
}

// Without replacement via partial Fisher-Yates when the pool is large
// enough; otherwise with replacement from the pool, or from everything but
// `exclude` when the pool is empty.
inline std::vector<std::uint32_t> draw(std::vector<std::uint32_t> pool, std::size_t n_total, std::uint32_t exclude,
                                       int count, std::mt19937_64& rng, bool& fallback) {
  const auto need = static_cast<std::size_t>(count);
  fallback = pool.size() < need;
  if (!fallback) {
    for (std::size_t j = 0; j < need; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    pool.resize(need);
    return pool;
  }
  if (pool.empty()) {
    if (n_total < 2) throw DataError("negative sampling: no candidate besides the positive");
    for (std::uint32_t v = 0; v < n_total; ++v)
      if (v != exclude) pool.push_back(v);
  }
  std::vector<std::uint32_t> out(need);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (auto& v : out) v = pool[pick(rng)];
  return out;
}

}  // namespace detail

// Negatives for (u, i) at day t: users that never interacted with i and
// items u never interacted with before t. `history` must hold exactly the
// interactions before t.
inline NegativeSample sample_negatives(const Interaction& x, const HistoryIndex& history, int n_neg,
                                       std::mt19937_64& rng) {
  NegativeSample s;
  s.users = detail::draw(detail::candidate_pool(history.n_users(), x.user, history.users_of(x.item)),
                         history.n_users(), x.user, n_neg, rng, s.user_fallback);
  s.items = detail::draw(detail::candidate_pool(history.n_items(), x.item, history.items_of(x.user)),
                         history.n_items(), x.item, n_neg, rng, s.item_fallback);
  return s;
}

// Stream used by train() for negative sampling.
inline std::mt19937_64 negative_rng(std::uint64_t seed) { return std::mt19937_64(seed ^ 0x9e3779b97f4a7c15ull); }

// -log(e^pos / (e^pos + sum e^neg)).
inline double infonce_loss(double lambda_pos, std::span<const double> lambda_negs) {
  Tensor row(1, lambda_negs.size() + 1);
  row[0] = lambda_pos;
  std::copy(lambda_negs.begin(), lambda_negs.end(), row.values().begin() + 1);
  return logsumexp_rows(row)[0] - lambda_pos;
}

// Mean InfoNCE loss over a day's interactions. For each interaction the
// row of logits is [pos, neg users..., neg items...].
inline Var batch_loss(const ParamView& pv, const Prediction& p, std::span<const Interaction> edges,
                      const std::vector<NegativeSample>& negatives) {
  if (edges.empty()) throw DataError("batch_loss: empty instant graph");
  if (negatives.size() != edges.size()) throw ShapeError("batch_loss: one negative sample per edge required");
  const std::size_t width = 1 + negatives.front().users.size() + negatives.front().items.size();
  std::vector<std::size_t> users, items, pos_rows;
  users.reserve(edges.size() * width);
  items.reserve(edges.size() * width);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto& x = edges[k];
    const auto& neg = negatives[k];
    if (1 + neg.users.size() + neg.items.size() != width) throw ShapeError("batch_loss: ragged negatives");
    pos_rows.push_back(users.size());
    users.push_back(x.user), items.push_back(x.item);
    for (auto v : neg.users) users.push_back(v), items.push_back(x.item);
    for (auto j : neg.items) users.push_back(x.user), items.push_back(j);
  }
  Var scores = score_pairs(pv, p.e, p.z_users, p.z_items, users, items);
  Var lse = logsumexp_rows(reshape(scores, edges.size(), width));
  Var pos = row_select(scores, pos_rows);
  return mean(sub(lse, pos));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct SegmentLog {
  int epoch = 0;
  std::int64_t first_day = 0;
  std::int64_t last_day = 0;
  std::size_t n_days = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;  // mean of day losses
  double val_mrr = std::numeric_limits<double>::quiet_NaN();
  double val_recall_at_10 = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct TrainResult {
  ParameterSet params;        // best validation epoch (final epoch without validation)
  ParameterSet final_params;  // after the last epoch run
  std::vector<SegmentLog> segments;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  std::size_t fallback_negatives = 0;
};

struct TrainHooks {
  std::function<void(const SegmentLog&)> on_segment;
  std::function<void(const EpochLog&)> on_epoch;
  // Gradients of each segment, before the optimizer step.
  std::function<void(int epoch, std::size_t segment, const GradMap&)> on_gradients;
};

inline std::string segment_log_line(const SegmentLog& s) {
  nlohmann::json j{{"epoch", s.epoch},     {"first_day", s.first_day}, {"last_day", s.last_day},
                   {"n_days", s.n_days},   {"mean_loss", s.mean_loss}, {"lr", s.lr},
                   {"wall_seconds", s.wall_seconds}};
  return j.dump();
}

// Runs the recurrence over the training days for each epoch, backpropagating
// the mean day loss every n_tbptt days and detaching the states in between.
// States restart from the embeddings at every epoch. Validation MRR drives
// early stopping; validation continues from the end-of-training states.
inline TrainResult train(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const TrainHooks& hooks = {}, std::optional<ParameterSet> init = std::nullopt) {
  mcfg.validate();
  tcfg.validate();
  if (ds.val_begin == 0) throw DataError("train: training split is empty");
  const EdgeStore store(ds);
  const auto train_days = days_in(ds, 0, ds.val_begin);
  const auto val_days = days_in(ds, ds.val_begin, ds.test_begin);

  TrainResult res;
  ParameterSet params = init ? std::move(*init) : init_parameters(mcfg, ds.n_users, ds.n_items, tcfg.seed);
  std::mt19937_64 rng = negative_rng(tcfg.seed);
  AdamState adam;
  double lr = tcfg.lr;
  double best_mrr = -1.0;
  int since_best = 0;
  res.params = params;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    TemporalStates states = init_states(params.at(names::embeddings()), ds.first_day());
    HistoryIndex history(ds.n_users, ds.n_items);
    Tape tape;
    Recurrence rec(mcfg, store, ds.day_unit);
    std::vector<Var> day_losses;
    double epoch_loss_sum = 0.0;
    std::size_t segment_index = 0;
    auto seg_start = std::chrono::steady_clock::now();
    std::int64_t seg_first = 0;

    for (std::size_t k = 0; k < train_days.size(); ++k) {
      const std::int64_t day = train_days[k];
      if (day_losses.empty()) {
        tape.clear();
        rec.attach(ParamView(tape, params), states);
        seg_start = std::chrono::steady_clock::now();
        seg_first = day;
      }
      auto diverged = [&](const std::string& cause) {
        std::ostringstream os;
        os << "training diverged: epoch " << epoch << ", days " << seg_first << ".." << day << ", day losses [";
        for (std::size_t j = 0; j < day_losses.size(); ++j) os << (j ? ", " : "") << day_losses[j].value()[0];
        os << "]: " << cause;
        return NumericalError(os.str());
      };
      const auto edges = store.instant_edges(day);
      try {
        Prediction p = rec.predict(day);
        std::vector<NegativeSample> negs;
        negs.reserve(edges.size());
        for (const auto& x : edges) {
          negs.push_back(sample_negatives(x, history, tcfg.n_neg, rng));
          const auto& s = negs.back();
          res.fallback_negatives += (s.user_fallback ? 1 : 0) + (s.item_fallback ? 1 : 0);
          if (tcfg.check_negatives) {
            if (!s.user_fallback)
              for (auto v : s.users)
                if (std::binary_search(history.users_of(x.item).begin(), history.users_of(x.item).end(), v))
                  throw Error("negative user " + std::to_string(v) + " already interacted with the item");
            if (!s.item_fallback)
              for (auto j : s.items)
                if (std::binary_search(history.items_of(x.user).begin(), history.items_of(x.user).end(), j))
                  throw Error("negative item " + std::to_string(j) + " already seen by the user");
          }
        }
        day_losses.push_back(batch_loss(ParamView(tape, params), p, edges, negs));
        rec.update();
      } catch (const NumericalError& e) {
        throw diverged(e.what());
      }
      history.add(edges);

      const bool last = k + 1 == train_days.size();
      if (static_cast<int>(day_losses.size()) == tcfg.n_tbptt || last) {
        Var seg = mean_of(day_losses);
        const double seg_value = seg.value()[0];
        double day_sum = 0.0;
        for (const Var& v : day_losses) day_sum += v.value()[0];
        if (!std::isfinite(seg_value)) throw diverged("non-finite segment loss");
        states = rec.detach();
        GradMap grads;
        try {
          grads = tape.backward(seg);
        } catch (const NumericalError& e) {
          throw diverged(e.what());
        }
        if (hooks.on_gradients) hooks.on_gradients(epoch, segment_index, grads);
        adam_step(params, grads, lr, tcfg.weight_decay, adam);
        SegmentLog log{epoch, seg_first, day, day_losses.size(), seg_value, lr,
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - seg_start).count()};
        res.segments.push_back(log);
        if (hooks.on_segment) hooks.on_segment(log);
        epoch_loss_sum += day_sum;
        day_losses.clear();
        ++segment_index;
      }
    }

    EpochLog elog{epoch, epoch_loss_sum / static_cast<double>(train_days.size())};
    elog.lr = lr;
    bool stop = false;
    if (!val_days.empty()) {
      FrozenRun val = run_frozen(store, ds.day_unit, params, mcfg, states, val_days, true);
      elog.val_mrr = mrr(val.records);
      elog.val_recall_at_10 = recall_at_k(val.records, 10);
      if (elog.val_mrr > best_mrr) {
        best_mrr = elog.val_mrr;
        res.params = params;
        res.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= tcfg.patience) {
        stop = true;
      }
    } else {
      res.params = params;
      res.best_epoch = epoch;
    }
    res.epochs.push_back(elog);
    if (hooks.on_epoch) hooks.on_epoch(elog);
    if (epoch % tcfg.lr_decay_period == 0) lr *= tcfg.lr_decay_factor;
    if (stop) break;
  }
  res.final_params = std::move(params);
  return res;
}

}  // namespace cpmr
