#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "cpmr/autodiff.hpp"
#include "cpmr/data.hpp"
#include "cpmr/error.hpp"
#include "cpmr/tensor.hpp"

namespace cpmr {

constexpr double kAlpha0 = 0.98;

// 0/1 user x item matrix stored as sorted, deduplicated (user, item) pairs.
class BiAdjacency {
 public:
  using Edge = std::pair<std::uint32_t, std::uint32_t>;

  BiAdjacency(std::size_t n_users, std::size_t n_items) : n_users_(n_users), n_items_(n_items) {}

  BiAdjacency(std::size_t n_users, std::size_t n_items, std::span<const Interaction> xs)
      : n_users_(n_users), n_items_(n_items) {
    edges_.reserve(xs.size());
    for (const auto& x : xs) edges_.emplace_back(x.user, x.item);
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  std::size_t rows() const noexcept { return n_users_; }
  std::size_t cols() const noexcept { return n_items_; }
  std::size_t edge_count() const noexcept { return edges_.size(); }
  const std::vector<Edge>& edges() const noexcept { return edges_; }

  bool contains(std::uint32_t u, std::uint32_t i) const {
    return std::binary_search(edges_.begin(), edges_.end(), Edge{u, i});
  }

  double operator()(std::uint32_t u, std::uint32_t i) const { return contains(u, i) ? 1.0 : 0.0; }

  SparseMatrix to_sparse() const {
    std::vector<SparseMatrix::Triplet> t;
    t.reserve(edges_.size());
    for (auto [u, i] : edges_) t.push_back({u, i, 1.0});
    return SparseMatrix::from_triplets(n_users_, n_items_, std::move(t));
  }

  friend bool operator==(const BiAdjacency&, const BiAdjacency&) = default;

 private:
  std::size_t n_users_;
  std::size_t n_items_;
  std::vector<Edge> edges_;
};

// Time-indexed interaction log. Edges are sorted by day; each distinct day
// owns a contiguous edge range.
class EdgeStore {
 public:
  struct DayRange {
    std::int64_t day;
    std::size_t begin;
    std::size_t end;
  };

  EdgeStore(std::vector<Interaction> edges, std::size_t n_users, std::size_t n_items)
      : edges_(std::move(edges)), n_users_(n_users), n_items_(n_items) {
    std::stable_sort(edges_.begin(), edges_.end(),
                     [](const Interaction& a, const Interaction& b) { return a.day < b.day; });
    for (std::size_t k = 0; k < edges_.size(); ++k) {
      if (edges_[k].user >= n_users_ || edges_[k].item >= n_items_) throw DataError("EdgeStore: id out of range");
      if (days_.empty() || days_.back().day != edges_[k].day) days_.push_back({edges_[k].day, k, k});
      days_.back().end = k + 1;
    }
  }

  explicit EdgeStore(const Dataset& ds) : EdgeStore(ds.interactions, ds.n_users, ds.n_items) {}

  std::size_t n_users() const noexcept { return n_users_; }
  std::size_t n_items() const noexcept { return n_items_; }
  std::size_t n_nodes() const noexcept { return n_users_ + n_items_; }
  const std::vector<Interaction>& edges() const noexcept { return edges_; }
  const std::vector<DayRange>& days() const noexcept { return days_; }

  // Interactions happening exactly on `day`.
  std::span<const Interaction> instant_edges(std::int64_t day) const {
    auto it = find_day(day);
    if (it == days_.end() || it->day != day) return {};
    return {edges_.data() + it->begin, it->end - it->begin};
  }

  // Edges with day' < day, as a prefix of the log.
  std::span<const Interaction> history_edges(std::int64_t day) const {
    return {edges_.data(), first_edge_at_or_after(day)};
  }

  // Edges with day - s_days <= day' < day.
  std::span<const Interaction> context_edges(std::int64_t day, std::int64_t s_days) const {
    if (s_days < 1) throw ConfigError("context window must be at least one day");
    const std::size_t b = first_edge_at_or_after(day - s_days);
    const std::size_t e = first_edge_at_or_after(day);
    return {edges_.data() + b, e - b};
  }

  BiAdjacency history_biadjacency(std::int64_t day) const {
    return BiAdjacency(n_users_, n_items_, history_edges(day));
  }

  BiAdjacency context_biadjacency(std::int64_t day, std::int64_t s_days) const {
    return BiAdjacency(n_users_, n_items_, context_edges(day, s_days));
  }

  BiAdjacency instant_biadjacency(std::int64_t day) const {
    return BiAdjacency(n_users_, n_items_, instant_edges(day));
  }

  // Index into days() of the next day to be consumed. Only moves forward.
  std::size_t cursor() const noexcept { return cursor_; }

  void advance_to(std::int64_t day) {
    auto it = find_day(day);
    const auto pos = static_cast<std::size_t>(it - days_.begin());
    if (pos < cursor_) throw SequencingError("EdgeStore cursor cannot move backwards");
    cursor_ = pos;
  }

 private:
  std::vector<DayRange>::const_iterator find_day(std::int64_t day) const {
    return std::lower_bound(days_.begin(), days_.end(), day,
                            [](const DayRange& r, std::int64_t d) { return r.day < d; });
  }

  std::size_t first_edge_at_or_after(std::int64_t day) const {
    auto it = find_day(day);
    return it == days_.end() ? edges_.size() : it->begin;
  }

  std::vector<Interaction> edges_;
  std::size_t n_users_;
  std::size_t n_items_;
  std::vector<DayRange> days_;
  std::size_t cursor_ = 0;
};

// Node-level ((|U|+|I|) square) symmetric normalized adjacency.
struct NormalizedAdjacency {
  std::shared_ptr<const SparseMatrix> matrix;
  double alpha0 = kAlpha0;
};

// (alpha0/2)(I + D^-1/2 adj D^-1/2) over the node set users ++ items.
// Zero-degree nodes keep only the self loop.
inline NormalizedAdjacency normalize_adjacency(const BiAdjacency& b, double alpha0 = kAlpha0) {
  const std::size_t nu = b.rows(), n = b.rows() + b.cols();
  std::vector<double> degree(n, 0.0);
  for (auto [u, i] : b.edges()) {
    degree[u] += 1.0;
    degree[nu + i] += 1.0;
  }
  std::vector<double> inv_sqrt(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) inv_sqrt[k] = degree[k] > 0 ? 1.0 / std::sqrt(degree[k]) : 0.0;
  const double half = alpha0 / 2.0;
  std::vector<SparseMatrix::Triplet> t;
  t.reserve(n + 2 * b.edge_count());
  for (std::size_t k = 0; k < n; ++k) t.push_back({k, k, half});
  for (auto [u, i] : b.edges()) {
    // Both triangles get the identical product, so the result is exactly symmetric.
    const double v = half * (inv_sqrt[u] * inv_sqrt[nu + i]);
    t.push_back({u, nu + i, v});
    t.push_back({nu + i, u, v});
  }
  return {std::make_shared<const SparseMatrix>(SparseMatrix::from_triplets(n, n, std::move(t))), alpha0};
}

// How sigmoid(alpha) scales the normalized adjacency.
enum class RadiusScaling {
  source_columns,  // A[i,j] = sigmoid(alpha[j]) * adj[i,j]
  target_rows,     // A[i,j] = sigmoid(alpha[i]) * adj[i,j]
};

// Materialized learnable adjacency for inspection and oracles; the model
// applies the same scaling implicitly inside the evolution operator.
inline SparseMatrix learnable_adjacency(const NormalizedAdjacency& nadj, const Tensor& alpha,
                                        RadiusScaling mode = RadiusScaling::source_columns) {
  const SparseMatrix& s = *nadj.matrix;
  if (alpha.rows() != s.rows() || alpha.cols() != 1) {
    throw ShapeError("learnable_adjacency: alpha " + alpha.shape_str() + " for " + std::to_string(s.rows()) +
                     " nodes");
  }
  SparseMatrix out = s;
  auto vals = out.values();
  auto offs = out.offsets();
  auto idx = out.indices();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t k = offs[r]; k < offs[r + 1]; ++k)
      vals[k] *= sigmoid(alpha(mode == RadiusScaling::source_columns ? idx[k] : r, 0));
  return out;
}

// Per-node interaction partners strictly before the current day, advanced
// one day at a time. Feeds negative sampling.
class HistoryIndex {
 public:
  HistoryIndex(std::size_t n_users, std::size_t n_items) : user_items_(n_users), item_users_(n_items) {}

  void add(std::span<const Interaction> xs) {
    for (const auto& x : xs) {
      insert_sorted(user_items_[x.user], x.item);
      insert_sorted(item_users_[x.item], x.user);
    }
  }

  std::size_t n_users() const noexcept { return user_items_.size(); }
  std::size_t n_items() const noexcept { return item_users_.size(); }
  const std::vector<std::uint32_t>& items_of(std::uint32_t u) const { return user_items_.at(u); }
  const std::vector<std::uint32_t>& users_of(std::uint32_t i) const { return item_users_.at(i); }

 private:
  static void insert_sorted(std::vector<std::uint32_t>& v, std::uint32_t x) {
    auto it = std::lower_bound(v.begin(), v.end(), x);
    if (it == v.end() || *it != x) v.insert(it, x);
  }

  std::vector<std::vector<std::uint32_t>> user_items_;
  std::vector<std::vector<std::uint32_t>> item_users_;
};

}  // namespace cpmr
