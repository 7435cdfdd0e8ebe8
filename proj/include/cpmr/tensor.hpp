#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cpmr/error.hpp"

namespace cpmr {

// Dense row-major matrix of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
      : rows_(rows), cols_(cols), data_(values) {
    if (data_.size() != rows * cols) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows * cols) {
      throw ShapeError("Tensor: value count does not match shape");
    }
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }
  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Tensor& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("Tensor ") + op + ": shapes " + shape_str() + " and " +
                       o.shape_str());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMut = Eigen::Map<RowMajor>;
using MapConst = Eigen::Map<const RowMajor>;

inline MapMut eig(Tensor& t) {
  return MapMut(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MapConst eig(const Tensor& t) {
  return MapConst(t.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

}  // namespace detail

// C = op(A) * op(B), optionally accumulating into C.
inline void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c,
                 bool accumulate = false) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t ka = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (ka != kb) {
    throw ShapeError("gemm: inner dimensions differ (" + a.shape_str() + (trans_a ? "^T" : "") +
                     " * " + b.shape_str() + (trans_b ? "^T" : "") + ")");
  }
  if (!accumulate || c.rows() != m || c.cols() != n) {
    if (accumulate) throw ShapeError("gemm: accumulator has shape " + c.shape_str());
    c = Tensor(m, n);
  }
  if (m == 0 || n == 0 || ka == 0) return;
  auto ce = detail::eig(c);
  auto ae = detail::eig(a);
  auto be = detail::eig(b);
  if (!trans_a && !trans_b) ce.noalias() += ae * be;
  else if (!trans_a && trans_b) ce.noalias() += ae * be.transpose();
  else if (trans_a && !trans_b) ce.noalias() += ae.transpose() * be;
  else ce.noalias() += ae.transpose() * be.transpose();
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c;
  gemm(a, false, b, false, c);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

// Compressed-row sparse matrix. Column indices are sorted within each row.
class SparseMatrix {
 public:
  struct Triplet {
    std::size_t row;
    std::size_t col;
    double value;
  };

  SparseMatrix() : offsets_(1, 0) {}
  SparseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), offsets_(rows + 1, 0) {}

  // Duplicate coordinates are summed.
  static SparseMatrix from_triplets(std::size_t rows, std::size_t cols, std::vector<Triplet> trips) {
    for (const auto& t : trips) {
      if (t.row >= rows || t.col >= cols) {
        throw ShapeError("SparseMatrix: triplet (" + std::to_string(t.row) + "," +
                         std::to_string(t.col) + ") outside " + std::to_string(rows) + "x" +
                         std::to_string(cols));
      }
    }
    std::sort(trips.begin(), trips.end(), [](const Triplet& a, const Triplet& b) {
      return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    SparseMatrix s(rows, cols);
    s.indices_.reserve(trips.size());
    s.values_.reserve(trips.size());
    for (std::size_t k = 0; k < trips.size(); ++k) {
      const auto& t = trips[k];
      if (!s.indices_.empty() && k > 0 && trips[k - 1].row == t.row && trips[k - 1].col == t.col) {
        s.values_.back() += t.value;
        continue;
      }
      s.indices_.push_back(t.col);
      s.values_.push_back(t.value);
      ++s.offsets_[t.row + 1];
    }
    std::partial_sum(s.offsets_.begin(), s.offsets_.end(), s.offsets_.begin());
    return s;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return values_.size(); }

  std::span<const std::size_t> offsets() const noexcept { return offsets_; }
  std::span<const std::size_t> indices() const noexcept { return indices_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  double at(std::size_t r, std::size_t c) const {
    auto first = indices_.begin() + static_cast<std::ptrdiff_t>(offsets_[r]);
    auto last = indices_.begin() + static_cast<std::ptrdiff_t>(offsets_[r + 1]);
    auto it = std::lower_bound(first, last, c);
    if (it == last || *it != c) return 0.0;
    return values_[static_cast<std::size_t>(it - indices_.begin())];
  }

  // out = S * x (or out += S * x).
  void multiply(const Tensor& x, Tensor& out, bool accumulate = false) const {
    if (x.rows() != cols_) {
      throw ShapeError("spmm: sparse " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                       " times dense " + x.shape_str());
    }
    const std::size_t d = x.cols();
    if (!accumulate) out = Tensor(rows_, d);
    else if (out.rows() != rows_ || out.cols() != d) throw ShapeError("spmm: accumulator shape");
    for (std::size_t r = 0; r < rows_; ++r) {
      double* o = out.data() + r * d;
      for (std::size_t k = offsets_[r]; k < offsets_[r + 1]; ++k) {
        const double v = values_[k];
        const double* xr = x.data() + indices_[k] * d;
        for (std::size_t c = 0; c < d; ++c) o[c] += v * xr[c];
      }
    }
  }

  Tensor multiply(const Tensor& x) const {
    Tensor out;
    multiply(x, out);
    return out;
  }

  SparseMatrix transposed() const {
    std::vector<Triplet> trips;
    trips.reserve(nnz());
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t k = offsets_[r]; k < offsets_[r + 1]; ++k)
        trips.push_back({indices_[k], r, values_[k]});
    return from_triplets(cols_, rows_, std::move(trips));
  }

  Tensor to_dense() const {
    Tensor t(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t k = offsets_[r]; k < offsets_[r + 1]; ++k) t(r, indices_[k]) = values_[k];
    return t;
  }

  // `row col value` lines, one per stored entry.
  std::string to_triplet_text() const {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t k = offsets_[r]; k < offsets_[r + 1]; ++k)
        os << r << ' ' << indices_[k] << ' ' << values_[k] << '\n';
    return os.str();
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> indices_;
  std::vector<double> values_;
};

}  // namespace cpmr
