#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cpmr/data.hpp"
#include "cpmr/error.hpp"

namespace cpmr {

struct TrendConfig {
  std::size_t n_users = 100;
  std::size_t n_items = 60;
  std::int64_t n_days = 120;
  std::int64_t trend_window = 10;  // days an item stays trendy
  // Probability that an event picks a currently trendy item instead of one
  // of the user's static favourites.
  double mix = 0.5;
  std::size_t events_per_day = 30;
  std::size_t concurrent_trends = 5;
  std::size_t preferences_per_user = 6;
  int k_core = 5;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_users < 2 || n_items < 2) throw ConfigError("trend: need at least two users and two items");
    if (n_days < 2 || trend_window < 1) throw ConfigError("trend: n_days >= 2 and trend_window >= 1 required");
    if (!(mix >= 0 && mix <= 1)) throw ConfigError("trend: mix must lie in [0, 1]");
    if (events_per_day < 1 || concurrent_trends < 1) throw ConfigError("trend: events_per_day and concurrent_trends >= 1");
    if (preferences_per_user < 1 || preferences_per_user > n_items) throw ConfigError("trend: bad preferences_per_user");
  }
};

// Trendy items on `day`. A new item turns trendy every
// trend_window / concurrent_trends days and stays trendy for trend_window
// days, so the trendy set slides instead of flipping all at once.
inline std::vector<std::uint32_t> trendy_items(const TrendConfig& c, std::int64_t day) {
  const std::int64_t stride = std::max<std::int64_t>(1, c.trend_window / static_cast<std::int64_t>(c.concurrent_trends));
  std::vector<std::uint32_t> out;
  // Trend k starts at k * stride and covers [k * stride, k * stride + window).
  const std::int64_t k_hi = day / stride;
  for (std::int64_t k = std::max<std::int64_t>(0, (day - c.trend_window) / stride); k <= k_hi; ++k) {
    if (k * stride <= day && day < k * stride + c.trend_window)
      out.push_back(static_cast<std::uint32_t>((static_cast<std::uint64_t>(k) * 7919u) % c.n_items));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<RawEvent> synthetic_trend_events(const TrendConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  std::vector<std::vector<std::uint32_t>> prefs(c.n_users);
  std::vector<std::uint32_t> all(c.n_items);
  for (std::uint32_t i = 0; i < c.n_items; ++i) all[i] = i;
  for (auto& p : prefs) {
    std::shuffle(all.begin(), all.end(), rng);
    p.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c.preferences_per_user));
  }
  std::uniform_int_distribution<std::size_t> pick_user(0, c.n_users - 1);
  std::bernoulli_distribution trendy(c.mix);
  std::vector<RawEvent> out;
  out.reserve(static_cast<std::size_t>(c.n_days) * c.events_per_day);
  for (std::int64_t day = 0; day < c.n_days; ++day) {
    const auto trend = trendy_items(c, day);
    for (std::size_t k = 0; k < c.events_per_day; ++k) {
      const std::size_t u = pick_user(rng);
      std::uint32_t item;
      if (trendy(rng)) {
        item = trend[std::uniform_int_distribution<std::size_t>(0, trend.size() - 1)(rng)];
      } else {
        item = prefs[u][std::uniform_int_distribution<std::size_t>(0, prefs[u].size() - 1)(rng)];
      }
      out.push_back({"u" + std::to_string(u), "i" + std::to_string(item),
                     day * kSecondsPerDay + static_cast<std::int64_t>(k), std::nullopt});
    }
  }
  return out;
}

inline Dataset synthetic_trend_dataset(const TrendConfig& c) {
  return canonicalize(k_core_filter(synthetic_trend_events(c), c.k_core));
}

}  // namespace cpmr
