#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "cpmr/data.hpp"
#include "cpmr/error.hpp"
#include "cpmr/evaluation.hpp"
#include "cpmr/model.hpp"
#include "cpmr/training.hpp"

namespace cpmr {

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "wo_ctx", "wo_his", "wo_fusion"};
  return v;
}

inline ModelConfig apply_variant(ModelConfig cfg, std::string_view variant) {
  if (variant == "full") return cfg;
  if (variant == "wo_ctx") cfg.disable_ctx = true;
  else if (variant == "wo_his") cfg.disable_his = true;
  else if (variant == "wo_fusion") cfg.disable_fusion = true;
  else throw ConfigError("unknown variant '" + std::string(variant) + "' (expected full, wo_ctx, wo_his or wo_fusion)");
  return cfg;
}

struct RunOutcome {
  TrainResult train;
  MetricsReport report;
};

// Trains on the training split and reports the test split with the
// parameters of the best validation epoch.
inline RunOutcome train_and_test(const Dataset& ds, const ModelConfig& mcfg, const TrainConfig& tcfg,
                                 const TrainHooks& hooks = {}) {
  RunOutcome out{train(ds, mcfg, tcfg, hooks), {}};
  out.report = incremental_eval(ds, Split::test, out.train.params, mcfg);
  out.report.seed = tcfg.seed;
  return out;
}

inline MetricsReport ablation_run(const Dataset& ds, std::string_view variant, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg) {
  MetricsReport r = train_and_test(ds, apply_variant(mcfg, variant), tcfg).report;
  r.config["variant"] = std::string(variant);
  return r;
}

struct SweepRow {
  std::string param;
  std::int64_t value = 0;
  double mrr = 0.0;
  double recall_at_10 = 0.0;
};

// One training run per value of `param` ("s_days" or "n_tbptt").
inline std::vector<SweepRow> sweep(const Dataset& ds, std::string_view param, const std::vector<std::int64_t>& values,
                                   const ModelConfig& mcfg, const TrainConfig& tcfg) {
  if (param != "s_days" && param != "n_tbptt")
    throw ConfigError("unknown sweep parameter '" + std::string(param) + "' (expected s_days or n_tbptt)");
  if (values.empty()) throw ConfigError("sweep: no values");
  std::vector<SweepRow> rows;
  for (std::int64_t v : values) {
    ModelConfig m = mcfg;
    TrainConfig t = tcfg;
    if (param == "s_days") m.s_days = v;
    else t.n_tbptt = static_cast<int>(v);
    const MetricsReport r = train_and_test(ds, m, t).report;
    rows.push_back({std::string(param), v, r.mrr, r.recall_at_10});
  }
  return rows;
}

inline std::vector<SweepRow> window_sweep(const Dataset& ds, const std::vector<std::int64_t>& s_values,
                                          const ModelConfig& mcfg, const TrainConfig& tcfg) {
  return sweep(ds, "s_days", s_values, mcfg, tcfg);
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  const std::string head = rows.empty() ? "s_days" : rows.front().param;
  os << head << ",mrr,recall_at_10\n";
  for (const auto& r : rows) os << r.value << ',' << format_double(r.mrr) << ',' << format_double(r.recall_at_10) << '\n';
}

}  // namespace cpmr
