#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpmr/data.hpp"
#include "cpmr/error.hpp"
#include "cpmr/graph.hpp"
#include "cpmr/model.hpp"
#include "cpmr/parameters.hpp"

namespace cpmr {

struct RankRecord {
  std::uint32_t user = 0;
  std::int64_t day = 0;
  std::uint32_t item = 0;
  std::size_t rank = 1;
  std::size_t ties = 0;  // other candidates with exactly the target's score
};

// 1 + #strictly higher + ceil(#other exact ties / 2).
inline std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw ShapeError("rank_of: target outside the candidate set");
  const double s = scores[target];
  std::size_t higher = 0, ties = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (k == target) continue;
    if (scores[k] > s) ++higher;
    else if (scores[k] == s) ++ties;
  }
  return 1 + higher + (ties + 1) / 2;
}

inline double mrr(std::span<const RankRecord> records) {
  if (records.empty()) throw DataError("mrr: no records");
  double acc = 0.0;
  for (const auto& r : records) acc += 1.0 / static_cast<double>(r.rank);
  return acc / static_cast<double>(records.size());
}

inline double recall_at_k(std::span<const RankRecord> records, std::size_t k = 10) {
  if (records.empty()) throw DataError("recall_at_k: no records");
  std::size_t hits = 0;
  for (const auto& r : records) hits += r.rank <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

struct MetricsReport {
  double mrr = 0.0;
  double recall_at_10 = 0.0;
  std::size_t n_events = 0;
  std::size_t n_tied = 0;  // events whose target shares its score with another item
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"mrr", m.mrr}, {"recall_at_10", m.recall_at_10}, {"n_events", m.n_events}, {"n_tied", m.n_tied}, {"seed", m.seed},
          {"config", m.config}};
}

inline MetricsReport report_from(std::span<const RankRecord> records) {
  MetricsReport m;
  m.mrr = mrr(records);
  m.recall_at_10 = recall_at_k(records, 10);
  m.n_events = records.size();
  for (const auto& r : records) m.n_tied += r.ties > 0 ? 1 : 0;
  return m;
}

// Distinct days among interactions [begin, end), ascending.
inline std::vector<std::int64_t> days_in(const Dataset& ds, std::size_t begin, std::size_t end) {
  std::vector<std::int64_t> days;
  for (std::size_t k = begin; k < end; ++k)
    if (days.empty() || days.back() != ds.interactions[k].day) days.push_back(ds.interactions[k].day);
  return days;
}

// Scores every event of the prediction's day against all items. With
// `seen`, items the user interacted with before the day are dropped from
// the candidates (the target itself always stays).
inline std::vector<RankRecord> rank_day(const Prediction& p, std::span<const Interaction> events,
                                        const ParameterSet& params, std::size_t n_users,
                                        const BiAdjacency* seen = nullptr) {
  const Tensor& e = p.e.value();
  const Tensor& zu = p.z_users.value();
  const Tensor& zi = p.z_items.value();
  const std::size_t n_items = zi.rows(), d = e.cols();
  Tensor e_items(n_items, d);
  std::copy_n(e.data() + n_users * d, n_items * d, e_items.data());
  const Tensor item_proj =
      project_rows(e_items, zi, params.at(names::predict("FC_I", "W")), params.at(names::predict("FC_I", "b")));

  std::vector<std::size_t> users;
  for (const auto& x : events) users.push_back(x.user);
  Tensor eu(users.size(), d), zsel(users.size(), zu.cols());
  for (std::size_t k = 0; k < users.size(); ++k) {
    std::copy_n(e.row(users[k]).data(), d, eu.row(k).data());
    std::copy_n(zu.row(users[k]).data(), zu.cols(), zsel.row(k).data());
  }
  const Tensor user_proj =
      project_rows(eu, zsel, params.at(names::predict("FC_U", "W")), params.at(names::predict("FC_U", "b")));
  Tensor scores;
  gemm(user_proj, false, item_proj, true, scores);  // events x items

  std::vector<RankRecord> out;
  out.reserve(events.size());
  std::vector<double> row(n_items);
  for (std::size_t k = 0; k < events.size(); ++k) {
    const auto& x = events[k];
    std::copy_n(scores.row(k).data(), n_items, row.begin());
    if (seen)
      for (std::uint32_t j = 0; j < n_items; ++j)
        if (j != x.item && (*seen)(x.user, j) != 0.0) row[j] = -std::numeric_limits<double>::infinity();
    const double target = row[x.item];
    const auto ties = static_cast<std::size_t>(std::count(row.begin(), row.end(), target)) - 1;
    out.push_back({x.user, p.day, x.item, rank_of(row, x.item), ties});
  }
  return out;
}

// Called after fusion and before the instant update of each day.
using PredictHook = std::function<void(const Recurrence&, const Prediction&)>;

struct FrozenRun {
  std::vector<RankRecord> records;
  TemporalStates states;
};

// Advances states over `days` with frozen parameters, optionally ranking
// each day's events before that day's instant update is applied.
inline FrozenRun run_frozen(const EdgeStore& store, double day_unit, const ParameterSet& params,
                            const ModelConfig& cfg, TemporalStates states, std::span<const std::int64_t> days,
                            bool rank, const PredictHook& hook = {}, bool filter_seen = false) {
  FrozenRun run;
  for (std::int64_t day : days) {
    Tape tape;
    ParamView pv(tape, params, /*frozen=*/true);
    Recurrence rec(cfg, store, day_unit);
    rec.attach(pv, states);
    Prediction p = rec.predict(day);
    if (!p.z_users.value().all_finite() || !p.z_items.value().all_finite()) {
      throw NumericalError("non-finite representations at day " + std::to_string(day));
    }
    if (hook) hook(rec, p);
    if (rank) {
      std::optional<BiAdjacency> seen;
      if (filter_seen) seen = store.history_biadjacency(day);
      auto recs = rank_day(p, store.instant_edges(day), params, store.n_users(), seen ? &*seen : nullptr);
      run.records.insert(run.records.end(), recs.begin(), recs.end());
    }
    rec.update();
    states = rec.detach();
  }
  run.states = std::move(states);
  return run;
}

// Replays every day before the split with frozen parameters (full
// recurrence, no ranking), then ranks each event of the split before its
// day's instant update.
inline MetricsReport incremental_eval(const Dataset& ds, Split split, const ParameterSet& params,
                                      const ModelConfig& cfg, const PredictHook& hook = {},
                                      std::vector<RankRecord>* records_out = nullptr, bool filter_seen = false) {
  auto [begin, end] = split_range(ds, split);
  if (begin >= end) throw DataError("incremental_eval: split is empty");
  const EdgeStore store(ds);
  TemporalStates st = init_states(params.at(names::embeddings()), ds.first_day());
  const auto before = days_in(ds, 0, begin);
  st = run_frozen(store, ds.day_unit, params, cfg, std::move(st), before, false).states;
  const auto days = days_in(ds, begin, end);
  FrozenRun run = run_frozen(store, ds.day_unit, params, cfg, std::move(st), days, true, hook, filter_seen);
  MetricsReport m = report_from(run.records);
  m.config["split"] = split == Split::test ? "test" : (split == Split::validation ? "val" : "train");
  m.config["unit"] = "per_interaction";
  m.config["filter_seen"] = filter_seen ? "true" : "false";
  if (records_out) *records_out = std::move(run.records);
  return m;
}

}  // namespace cpmr
