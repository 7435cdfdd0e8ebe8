#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "cpmr/error.hpp"

namespace cpmr {

struct RawEvent {
  std::string user_key;
  std::string item_key;
  std::int64_t timestamp = 0;
  std::optional<double> rating;

  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

enum class RawFormat { amazon_csv, movielens_tab };

inline RawFormat parse_format(std::string_view name) {
  if (name == "amazon_csv") return RawFormat::amazon_csv;
  if (name == "movielens_tab") return RawFormat::movielens_tab;
  throw ConfigError("unknown input format '" + std::string(name) + "' (expected amazon_csv or movielens_tab)");
}

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::int64_t day = 0;
  double t_norm = 0.0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Chronological interaction log with an 80/10/10 split on day boundaries.
struct Dataset {
  std::vector<Interaction> interactions;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  double day_unit = 0.0;
  std::size_t val_begin = 0;
  std::size_t test_begin = 0;

  std::size_t n_nodes() const noexcept { return n_users + n_items; }
  std::int64_t first_day() const { return interactions.empty() ? 0 : interactions.front().day; }
  std::int64_t last_day() const { return interactions.empty() ? 0 : interactions.back().day; }

  std::span<const Interaction> train() const { return {interactions.data(), val_begin}; }
  std::span<const Interaction> validation() const {
    return {interactions.data() + val_begin, test_begin - val_begin};
  }
  std::span<const Interaction> test() const {
    return {interactions.data() + test_begin, interactions.size() - test_begin};
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

enum class Split { train, validation, test };

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

// [begin, end) interaction index range of a split.
inline std::pair<std::size_t, std::size_t> split_range(const Dataset& ds, Split s) {
  switch (s) {
    case Split::train: return {0, ds.val_begin};
    case Split::validation: return {ds.val_begin, ds.test_begin};
    case Split::test: return {ds.test_begin, ds.interactions.size()};
  }
  return {0, 0};
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

// Accepts integral or fractional epoch seconds ("1404691200" or "1404691200.0").
inline bool parse_timestamp(std::string_view s, std::int64_t& out) {
  if (parse_number(s, out)) return true;
  double d = 0;
  if (!parse_number(s, d) || !(d >= 0) || d > 9.0e15) return false;
  out = static_cast<std::int64_t>(d);
  return true;
}

}  // namespace detail

// One RawEvent per non-blank record, in input order. Records carry
// `user item rating timestamp`; a three-field record omits the rating.
inline std::vector<RawEvent> parse_interactions(std::istream& in, RawFormat format) {
  const char sep = format == RawFormat::amazon_csv ? ',' : '\t';
  std::vector<RawEvent> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = detail::trim(line);
    if (view.empty()) continue;
    auto fields = detail::split_fields(view, sep);
    if (fields.size() < 3 || fields.size() > 4) {
      throw ParseError(lineno, "expected 3 or 4 fields separated by '" +
                                   std::string(sep == '\t' ? "\\t" : ",") + "', got " +
                                   std::to_string(fields.size()));
    }
    RawEvent ev;
    ev.user_key = std::string(detail::trim(fields[0]));
    ev.item_key = std::string(detail::trim(fields[1]));
    if (ev.user_key.empty() || ev.item_key.empty()) throw ParseError(lineno, "empty user or item key");
    const std::string_view ts = fields.back();
    if (!detail::parse_timestamp(ts, ev.timestamp)) {
      throw ParseError(lineno, "bad timestamp '" + std::string(detail::trim(ts)) + "'");
    }
    if (ev.timestamp < 0) throw ParseError(lineno, "negative timestamp");
    if (fields.size() == 4) {
      double r = 0;
      if (!detail::parse_number(fields[2], r)) {
        throw ParseError(lineno, "bad rating '" + std::string(detail::trim(fields[2])) + "'");
      }
      ev.rating = r;
    }
    events.push_back(std::move(ev));
  }
  return events;
}

inline std::vector<RawEvent> parse_interactions(const std::string& text, RawFormat format) {
  std::istringstream is(text);
  return parse_interactions(is, format);
}

// Iterated removal of events whose user or item has fewer than k events,
// until a fixed point. Order of the survivors is preserved.
inline std::vector<RawEvent> k_core_filter(std::vector<RawEvent> events, int k = 5) {
  if (k < 1) throw ConfigError("k_core_filter: k must be >= 1");
  while (true) {
    std::unordered_map<std::string, int> users, items;
    for (const auto& e : events) {
      ++users[e.user_key];
      ++items[e.item_key];
    }
    std::vector<RawEvent> kept;
    kept.reserve(events.size());
    for (auto& e : events) {
      if (users[e.user_key] >= k && items[e.item_key] >= k) kept.push_back(std::move(e));
    }
    const bool stable = kept.size() == events.size();
    events = std::move(kept);
    if (stable) break;
  }
  return events;
}

constexpr std::int64_t kSecondsPerDay = 86400;

// First index at or after `target` that starts a new day (or the end).
inline std::size_t day_aligned_boundary(const std::vector<Interaction>& xs, std::size_t target) {
  std::size_t i = std::min(target, xs.size());
  while (i > 0 && i < xs.size() && xs[i].day == xs[i - 1].day) ++i;
  return i;
}

// Dense ids by first appearance, day coarsening, [0,1] time normalization
// over the full span, chronological sort and day-aligned 80/10/10 split.
inline Dataset canonicalize(const std::vector<RawEvent>& events) {
  if (events.empty()) throw DataError("canonicalize: no events");
  std::unordered_map<std::string, std::uint32_t> user_ids, item_ids;
  Dataset ds;
  ds.interactions.reserve(events.size());
  std::int64_t dmin = INT64_MAX, dmax = INT64_MIN;
  for (const auto& e : events) {
    auto [uit, _u] = user_ids.try_emplace(e.user_key, static_cast<std::uint32_t>(user_ids.size()));
    auto [iit, _i] = item_ids.try_emplace(e.item_key, static_cast<std::uint32_t>(item_ids.size()));
    const std::int64_t day = e.timestamp / kSecondsPerDay;
    dmin = std::min(dmin, day);
    dmax = std::max(dmax, day);
    ds.interactions.push_back({uit->second, iit->second, day, 0.0});
  }
  if (dmax == dmin) throw DataError("canonicalize: all events fall on one day (degenerate time span)");
  ds.n_users = user_ids.size();
  ds.n_items = item_ids.size();
  const double span = static_cast<double>(dmax - dmin);
  ds.day_unit = 1.0 / span;
  for (auto& x : ds.interactions) x.t_norm = static_cast<double>(x.day - dmin) / span;
  std::stable_sort(ds.interactions.begin(), ds.interactions.end(), [](const Interaction& a, const Interaction& b) {
    return std::tie(a.day, a.user, a.item) < std::tie(b.day, b.user, b.item);
  });
  const std::size_t n = ds.interactions.size();
  ds.val_begin = day_aligned_boundary(ds.interactions, (8 * n + 9) / 10);
  ds.test_begin = day_aligned_boundary(ds.interactions, std::max(ds.val_begin, (9 * n + 9) / 10));
  return ds;
}

struct DatasetSummary {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;
  std::size_t n_days = 0;
  std::int64_t span_days = 0;
};

inline DatasetSummary summarize(const Dataset& ds) {
  DatasetSummary s{ds.n_users, ds.n_items, ds.interactions.size(), 0, ds.last_day() - ds.first_day()};
  for (std::size_t k = 0; k < ds.interactions.size(); ++k)
    if (k == 0 || ds.interactions[k].day != ds.interactions[k - 1].day) ++s.n_days;
  return s;
}

// ---------------------------------------------------------------------------
// Canonical dataset file: key/value header, then `user item day t_norm` lines.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "cpmr-dataset 1\n"
     << "n_users " << ds.n_users << '\n'
     << "n_items " << ds.n_items << '\n'
     << "day_unit " << format_double(ds.day_unit) << '\n'
     << "split " << ds.val_begin << ' ' << ds.test_begin << '\n'
     << "interactions " << ds.interactions.size() << '\n';
  for (const auto& x : ds.interactions) {
    os << x.user << ' ' << x.item << ' ' << x.day << ' ' << format_double(x.t_norm) << '\n';
  }
}

inline Dataset read_dataset(std::istream& is) {
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](const char* key) {
    if (!std::getline(is, line)) throw ParseError(lineno + 1, std::string("missing header field '") + key + "'");
    ++lineno;
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k != key) throw ParseError(lineno, std::string("expected header field '") + key + "', got '" + k + "'");
    return ls;
  };
  {
    auto ls = next("cpmr-dataset");
    int version = 0;
    if (!(ls >> version) || version != 1) throw ParseError(lineno, "unsupported dataset version");
  }
  std::size_t count = 0;
  std::string unit;
  if (!(next("n_users") >> ds.n_users)) throw ParseError(lineno, "bad n_users");
  if (!(next("n_items") >> ds.n_items)) throw ParseError(lineno, "bad n_items");
  if (!(next("day_unit") >> unit) || !detail::parse_number(unit, ds.day_unit)) throw ParseError(lineno, "bad day_unit");
  if (!(next("split") >> ds.val_begin >> ds.test_begin)) throw ParseError(lineno, "bad split");
  if (!(next("interactions") >> count)) throw ParseError(lineno, "bad interactions count");
  ds.interactions.reserve(count);
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_fields(detail::trim(line), ' ');
    Interaction x;
    if (f.size() != 4 || !detail::parse_number(f[0], x.user) || !detail::parse_number(f[1], x.item) ||
        !detail::parse_number(f[2], x.day) || !detail::parse_number(f[3], x.t_norm)) {
      throw ParseError(lineno, "bad interaction record '" + line + "'");
    }
    if (x.user >= ds.n_users || x.item >= ds.n_items) throw ParseError(lineno, "id out of range");
    ds.interactions.push_back(x);
  }
  if (ds.interactions.size() != count) throw DataError("dataset: interaction count does not match header");
  if (ds.val_begin > ds.test_begin || ds.test_begin > count) throw DataError("dataset: bad split boundaries");
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  write_dataset(os, ds);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open dataset '" + path + "'");
  return read_dataset(is);
}

inline Dataset load_raw_dataset(const std::string& path, RawFormat format, int k = 5) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open input '" + path + "'");
  return canonicalize(k_core_filter(parse_interactions(is, format), k));
}

}  // namespace cpmr
