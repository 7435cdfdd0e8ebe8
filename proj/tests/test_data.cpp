#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "cpmr/data.hpp"

using namespace cpmr;

namespace {

RawEvent ev(std::string u, std::string i, std::int64_t ts) { return {std::move(u), std::move(i), ts, std::nullopt}; }

// Removes one offending event at a time until nothing changes.
std::vector<RawEvent> brute_force_core(std::vector<RawEvent> xs, int k) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t e = 0; e < xs.size(); ++e) {
      int cu = 0, ci = 0;
      for (const auto& y : xs) {
        cu += y.user_key == xs[e].user_key;
        ci += y.item_key == xs[e].item_key;
      }
      if (cu < k || ci < k) {
        xs.erase(xs.begin() + static_cast<std::ptrdiff_t>(e));
        changed = true;
        break;
      }
    }
  }
  return xs;
}

}  // namespace

TEST(Parse, AmazonCsvRecord) {
  auto xs = parse_interactions("A1,B00X,5.0,1404691200\n", RawFormat::amazon_csv);
  ASSERT_EQ(xs.size(), 1u);
  EXPECT_EQ(xs[0].user_key, "A1");
  EXPECT_EQ(xs[0].item_key, "B00X");
  EXPECT_EQ(xs[0].rating, 5.0);
  EXPECT_EQ(xs[0].timestamp, 1404691200);
}

TEST(Parse, MovielensTabRecord) {
  auto xs = parse_interactions("196\t242\t3\t881250949\n", RawFormat::movielens_tab);
  ASSERT_EQ(xs.size(), 1u);
  EXPECT_EQ(xs[0], (RawEvent{"196", "242", 881250949, 3.0}));
}

TEST(Parse, EmptyStreamAndThreeFieldRecords) {
  EXPECT_TRUE(parse_interactions("", RawFormat::amazon_csv).empty());
  auto xs = parse_interactions("u,i,100\r\n\nu,j,200\n", RawFormat::amazon_csv);
  ASSERT_EQ(xs.size(), 2u);
  EXPECT_FALSE(xs[0].rating.has_value());
  EXPECT_EQ(xs[1].timestamp, 200);
}

TEST(Parse, MalformedRecordReportsLine) {
  try {
    parse_interactions("a,b,1,10\na,b\n", RawFormat::amazon_csv);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_interactions("a,b,1,notatime\n", RawFormat::amazon_csv), ParseError);
  EXPECT_THROW(parse_interactions("a,b,1,-5\n", RawFormat::amazon_csv), ParseError);
  EXPECT_THROW(parse_format("json"), ConfigError);
}

TEST(KCore, AlreadyACoreIsKept) {
  std::vector<RawEvent> xs;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) xs.push_back(ev("u" + std::to_string(u), "i" + std::to_string(i), u * 10 + i));
  EXPECT_EQ(k_core_filter(xs, 5), xs);
  xs.resize(15);  // three users on five shared items: items drop to 3
  EXPECT_TRUE(k_core_filter(xs, 5).empty());
  EXPECT_EQ(k_core_filter(xs, 3), xs);
}

TEST(KCore, CascadeMatchesBruteForceOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RawEvent> xs;
    std::uniform_int_distribution<int> u(0, 5), i(0, 4);
    for (int e = 0; e < 20; ++e) xs.push_back(ev("u" + std::to_string(u(rng)), "i" + std::to_string(i(rng)), e));
    for (int k : {2, 3, 4}) {
      auto got = k_core_filter(xs, k);
      EXPECT_EQ(got, brute_force_core(xs, k)) << "trial " << trial << " k " << k;
      EXPECT_EQ(k_core_filter(got, k), got);
      std::map<std::string, int> cu, ci;
      for (const auto& x : got) ++cu[x.user_key], ++ci[x.item_key];
      for (auto& [_, c] : cu) EXPECT_GE(c, k);
      for (auto& [_, c] : ci) EXPECT_GE(c, k);
    }
  }
  EXPECT_THROW(k_core_filter({}, 0), ConfigError);
}

TEST(Canonicalize, TwoPointNormalization) {
  Dataset ds = canonicalize({ev("a", "x", 0), ev("b", "y", 100 * kSecondsPerDay + 5)});
  EXPECT_EQ(ds.interactions.front().t_norm, 0.0);
  EXPECT_EQ(ds.interactions.back().t_norm, 1.0);
  EXPECT_DOUBLE_EQ(ds.day_unit, 0.01);
  EXPECT_THROW(canonicalize({ev("a", "x", 10), ev("b", "y", 20)}), DataError);
  EXPECT_THROW(canonicalize({}), DataError);
}

TEST(Canonicalize, DenseIdsByFirstAppearanceAndSortedOrder) {
  Dataset ds = canonicalize({ev("u2", "i9", 3 * kSecondsPerDay), ev("u1", "i9", 1 * kSecondsPerDay),
                             ev("u2", "i3", 1 * kSecondsPerDay + 50)});
  EXPECT_EQ(ds.n_users, 2u);
  EXPECT_EQ(ds.n_items, 2u);
  // u2 -> 0, u1 -> 1; i9 -> 0, i3 -> 1. Day 1 sorted by user then item.
  ASSERT_EQ(ds.interactions.size(), 3u);
  EXPECT_EQ(ds.interactions[0], (Interaction{0, 1, 1, 0.0}));
  EXPECT_EQ(ds.interactions[1], (Interaction{1, 0, 1, 0.0}));
  EXPECT_EQ(ds.interactions[2], (Interaction{0, 0, 3, 1.0}));
}

TEST(Canonicalize, TenDaysSplitAfterDayEightAndNine) {
  std::vector<RawEvent> xs;
  for (int d = 0; d < 10; ++d) xs.push_back(ev("u", "i" + std::to_string(d), d * kSecondsPerDay));
  Dataset ds = canonicalize(xs);
  EXPECT_EQ(ds.val_begin, 8u);
  EXPECT_EQ(ds.test_begin, 9u);
}

TEST(Canonicalize, SplitBoundariesMatchEnumerationOracle) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<RawEvent> xs;
    std::uniform_int_distribution<int> day(0, 12), count(1, 60);
    const int n = count(rng);
    for (int e = 0; e < n; ++e) xs.push_back(ev("u" + std::to_string(e % 3), "i", day(rng) * kSecondsPerDay));
    xs.push_back(ev("u0", "i", 13 * kSecondsPerDay));
    Dataset ds;
    try {
      ds = canonicalize(xs);
    } catch (const DataError&) {
      continue;
    }
    const auto& it = ds.interactions;
    const std::size_t total = it.size();
    std::vector<std::size_t> cuts{0};
    for (std::size_t k = 1; k < total; ++k)
      if (it[k].day != it[k - 1].day) cuts.push_back(k);
    cuts.push_back(total);
    auto smallest = [&](double q, std::size_t floor) {
      for (std::size_t c : cuts)
        if (c >= floor && static_cast<double>(c) >= q * static_cast<double>(total)) return c;
      return total;
    };
    const std::size_t v = smallest(0.8, 0);
    EXPECT_EQ(ds.val_begin, v);
    EXPECT_EQ(ds.test_begin, smallest(0.9, v));
    if (ds.val_begin > 0 && ds.val_begin < total) { EXPECT_LT(it[ds.val_begin - 1].day, it[ds.val_begin].day); }
    if (ds.test_begin > 0 && ds.test_begin < total) { EXPECT_LT(it[ds.test_begin - 1].day, it[ds.test_begin].day); }
  }
}

TEST(Canonicalize, DayOrderFollowsTimestampOrder) {
  std::mt19937_64 rng(1);
  std::vector<RawEvent> xs;
  std::uniform_int_distribution<std::int64_t> ts(0, 40 * kSecondsPerDay);
  for (int e = 0; e < 300; ++e) xs.push_back(ev("u" + std::to_string(e % 7), "i" + std::to_string(e % 5), ts(rng)));
  Dataset ds = canonicalize(xs);
  EXPECT_TRUE(std::is_sorted(ds.interactions.begin(), ds.interactions.end(), [](auto& a, auto& b) {
    return std::tie(a.day, a.user, a.item) < std::tie(b.day, b.user, b.item);
  }));
  for (std::size_t k = 1; k < ds.interactions.size(); ++k)
    EXPECT_LE(ds.interactions[k - 1].t_norm, ds.interactions[k].t_norm);
}

TEST(DatasetFile, RoundTripAndDeterministicBytes) {
  std::vector<RawEvent> xs;
  for (int d = 0; d < 30; ++d) xs.push_back(ev("u" + std::to_string(d % 4), "i" + std::to_string(d % 3), d * 90000));
  Dataset ds = canonicalize(xs);
  std::ostringstream a, b;
  write_dataset(a, ds);
  std::istringstream is(a.str());
  Dataset back = read_dataset(is);
  EXPECT_EQ(back, ds);
  write_dataset(b, back);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().rfind("cpmr-dataset 1\nn_users 4\nn_items 3\n", 0), 0u);
}

TEST(DatasetFile, RejectsBadInput) {
  auto read = [](const std::string& s) {
    std::istringstream is(s);
    return read_dataset(is);
  };
  EXPECT_THROW(read("cpmr-dataset 2\n"), ParseError);
  EXPECT_THROW(read("cpmr-dataset 1\nn_users 1\nn_items 1\nday_unit 1\nsplit 0 0\ninteractions 1\n5 0 0 0\n"),
               ParseError);
  EXPECT_THROW(read("cpmr-dataset 1\nn_users 1\nn_items 1\nday_unit 1\nsplit 0 0\ninteractions 2\n0 0 0 0\n"),
               DataError);
}

TEST(Summary, CountsDaysAndSpan) {
  Dataset ds = canonicalize({ev("a", "x", 0), ev("b", "x", 10), ev("a", "y", 5 * kSecondsPerDay)});
  DatasetSummary s = summarize(ds);
  EXPECT_EQ(s.n_users, 2u);
  EXPECT_EQ(s.n_items, 2u);
  EXPECT_EQ(s.n_interactions, 3u);
  EXPECT_EQ(s.n_days, 2u);
  EXPECT_EQ(s.span_days, 5);
}
