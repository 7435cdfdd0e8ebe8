#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cpmr/data.hpp"
#include "cpmr/error.hpp"
#include "cpmr/model.hpp"
#include "cpmr/training.hpp"

namespace cpmr {

enum class DatasetFormat { canonical, amazon_csv, movielens_tab };

inline DatasetFormat parse_dataset_format(std::string_view s) {
  if (s == "canonical") return DatasetFormat::canonical;
  if (s == "amazon_csv") return DatasetFormat::amazon_csv;
  if (s == "movielens_tab") return DatasetFormat::movielens_tab;
  throw ConfigError("unknown dataset.format '" + std::string(s) + "' (expected canonical, amazon_csv or movielens_tab)");
}

inline const char* to_string(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::canonical: return "canonical";
    case DatasetFormat::amazon_csv: return "amazon_csv";
    case DatasetFormat::movielens_tab: return "movielens_tab";
  }
  return "?";
}

struct RunConfig {
  std::string dataset_path;
  DatasetFormat dataset_format = DatasetFormat::canonical;
  int k_core = 5;
  ModelConfig model;
  TrainConfig train;
  Split eval_split = Split::test;
  bool eval_filter_seen = false;
  std::string output_dir;
  std::vector<std::uint64_t> seeds{0};
};

namespace detail {

template <class T>
T parse_value(const std::string& key, std::string_view text) {
  T v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || p != text.data() + text.size())
    throw ConfigError("config field '" + key + "': cannot parse '" + std::string(text) + "'");
  return v;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config field '" + key + "': expected true or false, got '" + std::string(text) + "'");
}

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

}  // namespace detail

// Every key with its current value, in a stable order.
inline std::map<std::string, std::string> resolved_config(const RunConfig& c) {
  std::map<std::string, std::string> m;
  m["dataset.path"] = c.dataset_path;
  m["dataset.format"] = to_string(c.dataset_format);
  m["dataset.k_core"] = std::to_string(c.k_core);
  m["model.d"] = std::to_string(c.model.d);
  m["model.s_days"] = std::to_string(c.model.s_days);
  m["model.K"] = std::to_string(c.model.K);
  m["model.max_step_norm"] = format_double(c.model.max_step_norm);
  m["model.alpha0"] = format_double(c.model.alpha0);
  m["model.scaling"] = c.model.scaling == RadiusScaling::source_columns ? "columns" : "rows";
  m["model.fusion_bias"] = detail::bool_text(c.model.fusion_bias);
  m["model.disable_ctx"] = detail::bool_text(c.model.disable_ctx);
  m["model.disable_his"] = detail::bool_text(c.model.disable_his);
  m["model.disable_fusion"] = detail::bool_text(c.model.disable_fusion);
  m["model.literal_update"] = detail::bool_text(c.model.literal_update);
  m["train.lr"] = format_double(c.train.lr);
  m["train.weight_decay"] = format_double(c.train.weight_decay);
  m["train.weight_decay_mode"] = "l2";
  m["train.lr_decay_factor"] = format_double(c.train.lr_decay_factor);
  m["train.lr_decay_period"] = std::to_string(c.train.lr_decay_period);
  m["train.n_tbptt"] = std::to_string(c.train.n_tbptt);
  m["train.n_neg"] = std::to_string(c.train.n_neg);
  m["train.max_epochs"] = std::to_string(c.train.max_epochs);
  m["train.patience"] = std::to_string(c.train.patience);
  m["train.segment_loss_reduction"] = "mean";
  m["eval.split"] = c.eval_split == Split::test ? "test" : (c.eval_split == Split::validation ? "val" : "train");
  m["eval.unit"] = "per_interaction";
  m["eval.filter_seen"] = detail::bool_text(c.eval_filter_seen);
  m["output.dir"] = c.output_dir;
  std::string seeds;
  for (std::size_t k = 0; k < c.seeds.size(); ++k) seeds += (k ? "," : "") + std::to_string(c.seeds[k]);
  m["seeds"] = seeds;
  return m;
}

// Reads `key = value` lines; `#` starts a comment. dataset.path and
// output.dir are required, everything else has a default.
inline RunConfig parse_run_config(std::istream& in) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto num = [](auto& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_value<std::remove_reference_t<decltype(field)>>(k, v);
    };
  };
  auto flag = [](bool& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) { field = detail::parse_bool(k, v); };
  };
  // Fixed-value keys from the echo are accepted only with their one value.
  auto fixed = [](const char* only) -> Setter {
    return [only](const std::string& k, const std::string& v) {
      if (v != only) throw ConfigError("config field '" + k + "' only supports '" + only + "'");
    };
  };
  std::map<std::string, Setter> setters{
      {"dataset.path", [&](const std::string&, const std::string& v) { c.dataset_path = v; }},
      {"dataset.format", [&](const std::string&, const std::string& v) { c.dataset_format = parse_dataset_format(v); }},
      {"dataset.k_core", num(c.k_core)},
      {"model.d", num(c.model.d)},
      {"model.s_days", num(c.model.s_days)},
      {"model.K", num(c.model.K)},
      {"model.max_step_norm", num(c.model.max_step_norm)},
      {"model.alpha0", num(c.model.alpha0)},
      {"model.scaling",
       [&](const std::string& k, const std::string& v) {
         if (v == "columns") c.model.scaling = RadiusScaling::source_columns;
         else if (v == "rows") c.model.scaling = RadiusScaling::target_rows;
         else throw ConfigError("config field '" + k + "': expected columns or rows");
       }},
      {"model.fusion_bias", flag(c.model.fusion_bias)},
      {"model.disable_ctx", flag(c.model.disable_ctx)},
      {"model.disable_his", flag(c.model.disable_his)},
      {"model.disable_fusion", flag(c.model.disable_fusion)},
      {"model.literal_update", flag(c.model.literal_update)},
      {"train.lr", num(c.train.lr)},
      {"train.weight_decay", num(c.train.weight_decay)},
      {"train.weight_decay_mode", fixed("l2")},
      {"train.lr_decay_factor", num(c.train.lr_decay_factor)},
      {"train.lr_decay_period", num(c.train.lr_decay_period)},
      {"train.n_tbptt", num(c.train.n_tbptt)},
      {"train.n_neg", num(c.train.n_neg)},
      {"train.max_epochs", num(c.train.max_epochs)},
      {"train.patience", num(c.train.patience)},
      {"train.segment_loss_reduction", fixed("mean")},
      {"eval.split", [&](const std::string&, const std::string& v) { c.eval_split = parse_split(v); }},
      {"eval.unit", fixed("per_interaction")},
      {"eval.filter_seen", flag(c.eval_filter_seen)},
      {"output.dir", [&](const std::string&, const std::string& v) { c.output_dir = v; }},
      {"seeds",
       [&](const std::string& k, const std::string& v) {
         c.seeds.clear();
         for (auto f : detail::split_fields(v, ',')) c.seeds.push_back(detail::parse_value<std::uint64_t>(k, detail::trim(f)));
       }},
  };

  std::map<std::string, bool> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = detail::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected key = value");
    const std::string key(detail::trim(view.substr(0, eq)));
    const std::string value(detail::trim(view.substr(eq + 1)));
    auto it = setters.find(key);
    if (it == setters.end()) throw ParseError(lineno, "unknown config field '" + key + "'");
    if (seen[key]) throw ParseError(lineno, "config field '" + key + "' given twice");
    seen[key] = true;
    it->second(key, value);
  }
  for (const char* required : {"dataset.path", "output.dir"})
    if (!seen[required]) throw ConfigError("missing config field '" + std::string(required) + "'");
  if (c.seeds.empty()) throw ConfigError("config field 'seeds' must list at least one seed");
  c.model.validate();
  c.train.validate();
  if (c.k_core < 1) throw ConfigError("config field 'dataset.k_core' must be >= 1");
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  RunConfig c = parse_run_config(is);
  if (!std::filesystem::exists(c.dataset_path))
    throw ConfigError("dataset.path '" + c.dataset_path + "' does not exist");
  return c;
}

inline std::string render_config(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : resolved_config(c)) os << k << " = " << v << '\n';
  return os.str();
}

// Inverse of resolved_config, e.g. for configs stored in checkpoint meta.
inline RunConfig run_config_from(const std::map<std::string, std::string>& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  std::istringstream is(os.str());
  return parse_run_config(is);
}

inline Dataset load_configured_dataset(const RunConfig& c) {
  switch (c.dataset_format) {
    case DatasetFormat::canonical: return load_dataset(c.dataset_path);
    case DatasetFormat::amazon_csv: return load_raw_dataset(c.dataset_path, RawFormat::amazon_csv, c.k_core);
    case DatasetFormat::movielens_tab: return load_raw_dataset(c.dataset_path, RawFormat::movielens_tab, c.k_core);
  }
  throw ConfigError("bad dataset format");
}

}  // namespace cpmr
