#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpmr/error.hpp"
#include "cpmr/tensor.hpp"

namespace cpmr {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradMap = std::map<std::string, Tensor>;

// Append-only record of differentiable operations. Nodes are in topological
// order by construction; backward() walks them in reverse once and clears
// the tape.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_check_finite(bool on) noexcept { check_finite_ = on; }

  Var constant(Tensor value) { return push("constant", std::move(value), false, nullptr); }

  // Leaf that collects a gradient but is not part of the parameter registry.
  Var variable(Tensor value) { return push("variable", std::move(value), true, nullptr); }

  // Registers a named parameter once per tape; later calls return the same node.
  Var parameter(const std::string& name, const Tensor& value) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    Var v = push("parameter", value, true, nullptr);
    params_.emplace(name, v.id());
    return v;
  }

  Var record(std::string op, Tensor value, bool requires_grad, BackwardFn fn) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericalError("non-finite output from op '" + op + "' (" + value.shape_str() + ")");
    }
    return push(std::move(op), std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

  // Gradient accumulator for a node; allocated as zeros on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor& g) {
    if (!requires_grad(id)) return;
    grad(id) += g;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  const std::unordered_map<std::string, std::size_t>& parameters() const noexcept { return params_; }

  void clear() {
    nodes_.clear();
    params_.clear();
  }

  // Reverse sweep from a 1x1 loss. Every registered parameter appears in the
  // result; unreachable ones get zeros. The tape is cleared afterwards.
  GradMap backward(Var loss) {
    if (nodes_.empty()) throw Error("backward: empty tape");
    if (loss.valid() && &loss.tape() != this) throw Error("backward: loss belongs to another tape");
    const Tensor& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + lv.shape_str());
    }
    if (requires_grad(loss.id())) {
      grad(loss.id())[0] = 1.0;
      for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        Tensor g = std::move(n.grad);
        n.backward(*this, g);
        // Every consumer has already run, so this node's buffers are dead.
        n.backward = nullptr;
        n.value = Tensor{};
      }
    }
    GradMap out;
    for (const auto& [name, id] : params_) {
      Node& n = nodes_[id];
      out[name] = n.grad.empty() ? Tensor(n.value.rows(), n.value.cols()) : std::move(n.grad);
    }
    clear();
    return out;
  }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(std::string op, Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor{}, requires_grad, std::move(fn)});
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> params_;
  bool check_finite_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw Error(std::string(op) + ": operands must live on the same tape");
  }
  return a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shapes " + a.shape_str() + " and " + b.shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operation set. Every op records its forward value and gradient rule.
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.value().shape_str() + " * " + b.value().shape_str());
  }
  Tensor out;
  gemm(a.value(), false, b.value(), false, out);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ia)) gemm(g, false, tp.value(ib), true, tp.grad(ia), true);
                    if (tp.requires_grad(ib)) gemm(tp.value(ia), true, g, false, tp.grad(ib), true);
                  });
}

// a * b^T; the shape used by linear layers whose weights are stored out x in.
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.value().shape_str() + " * (" + b.value().shape_str() + ")^T");
  }
  Tensor out;
  gemm(a.value(), false, b.value(), true, out);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_nt", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ia)) gemm(g, false, tp.value(ib), false, tp.grad(ia), true);
                    if (tp.requires_grad(ib)) gemm(g, true, tp.value(ia), false, tp.grad(ib), true);
                  });
}

// Sparse operand is a constant; only the dense operand receives a gradient.
inline Var spmm(std::shared_ptr<const SparseMatrix> s, Var x) {
  Tape& t = x.tape();
  Tensor out = s->multiply(x.value());
  const std::size_t ix = x.id();
  return t.record("spmm", std::move(out), x.requires_grad(),
                  [ix, s](Tape& tp, const Tensor& g) { s->transposed().multiply(g, tp.grad(ix), true); });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out -= b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    tp.accumulate(ia, g);
                    if (tp.requires_grad(ib)) tp.grad(ib) -= g;
                  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), a.requires_grad(), [ia, s](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += s * g[k];
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "hadamard");
  detail::require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= bv[k];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("hadamard", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    const Tensor& av = tp.value(ia);
                    const Tensor& bv2 = tp.value(ib);
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad(ia);
                      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv2[k];
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
                    }
                  });
}

// x + broadcast of a 1 x cols row vector.
inline Var add_row(Var x, Var bias) {
  Tape& t = detail::same_tape(x, bias, "add_row");
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_row: bias " + bias.value().shape_str() + " for input " + x.value().shape_str());
  }
  Tensor out = x.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record("add_row", std::move(out), x.requires_grad() || bias.requires_grad(),
                  [ix, ib](Tape& tp, const Tensor& g) {
                    tp.accumulate(ix, g);
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
                    }
                  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + a.value().shape_str() + " and " + b.value().shape_str());
  }
  const std::size_t ca = a.cols(), cb = b.cols();
  Tensor out(a.rows(), ca + cb);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    std::copy_n(a.value().row(r).data(), ca, out.row(r).data());
    std::copy_n(b.value().row(r).data(), cb, out.row(r).data() + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("concat_cols", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib, ca, cb](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad(ia);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
                    }
                  });
}

inline Var concat_rows(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: " + a.value().shape_str() + " and " + b.value().shape_str());
  }
  const std::size_t ra = a.rows();
  std::vector<double> data(a.value().values().begin(), a.value().values().end());
  data.insert(data.end(), b.value().values().begin(), b.value().values().end());
  Tensor out(ra + b.rows(), a.cols(), std::move(data));
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("concat_rows", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib, ra](Tape& tp, const Tensor& g) {
                    const std::size_t split = ra * g.cols();
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad(ia);
                      for (std::size_t k = 0; k < split; ++k) ga[k] += g[k];
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t k = split; k < g.size(); ++k) gb[k - split] += g[k];
                    }
                  });
}

// Rows [begin, end).
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + a.value().shape_str());
  }
  const std::size_t c = a.cols();
  const auto src = a.value().values();
  Tensor out(end - begin, c,
             std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 src.begin() + static_cast<std::ptrdiff_t>(end * c)));
  const std::size_t ia = a.id();
  return a.tape().record("slice_rows", std::move(out), a.requires_grad(),
                         [ia, begin, c](Tape& tp, const Tensor& g) {
                           Tensor& ga = tp.grad(ia);
                           for (std::size_t k = 0; k < g.size(); ++k) ga[begin * c + k] += g[k];
                         });
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) {
    throw ShapeError("reshape: " + a.value().shape_str() + " to " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  const auto src = a.value().values();
  Tensor out(rows, cols, std::vector<double>(src.begin(), src.end()));
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(out), a.requires_grad(), [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record("relu", std::move(out), a.requires_grad(), [ia](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k)
      if (x[k] > 0.0) ga[k] += g[k];
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = sigmoid(v);
  const std::size_t ia = a.id();
  auto y = std::make_shared<Tensor>(out);
  return a.tape().record("sigmoid", std::move(out), a.requires_grad(), [ia, y](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * (*y)[k] * (1.0 - (*y)[k]);
  });
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double v : row) m = std::max(m, v);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Tensor out = softmax_rows(a.value());
  auto y = std::make_shared<Tensor>(out);
  const std::size_t ia = a.id();
  return a.tape().record("softmax_rows", std::move(out), a.requires_grad(), [ia, y](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * (*y)(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += (*y)(r, c) * (g(r, c) - dot);
    }
  });
}

// rows x 1 output; shifted by the row max so large logits do not overflow.
inline Tensor logsumexp_rows(const Tensor& x) {
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double v : row) m = std::max(m, v);
    if (!std::isfinite(m)) {
      out(r, 0) = m;
      continue;
    }
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - m);
    out(r, 0) = m + std::log(sum);
  }
  return out;
}

inline Var logsumexp_rows(Var a) {
  Tensor out = logsumexp_rows(a.value());
  auto lse = std::make_shared<Tensor>(out);
  const std::size_t ia = a.id();
  return a.tape().record("logsumexp_rows", std::move(out), a.requires_grad(),
                         [ia, lse](Tape& tp, const Tensor& g) {
                           const Tensor& x = tp.value(ia);
                           Tensor& ga = tp.grad(ia);
                           for (std::size_t r = 0; r < x.rows(); ++r)
                             for (std::size_t c = 0; c < x.cols(); ++c)
                               ga(r, c) += g(r, 0) * std::exp(x(r, c) - (*lse)(r, 0));
                         });
}

// Gathers rows by index (repeats allowed); gradient scatter-adds back.
inline Var row_select(Var a, std::vector<std::size_t> index) {
  const std::size_t c = a.cols();
  Tensor out(index.size(), c);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= a.rows()) {
      throw ShapeError("row_select: index " + std::to_string(index[k]) + " out of " + a.value().shape_str());
    }
    std::copy_n(a.value().row(index[k]).data(), c, out.row(k).data());
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return a.tape().record("row_select", std::move(out), a.requires_grad(), [ia, idx](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (std::size_t k = 0; k < idx->size(); ++k) {
      auto dst = ga.row((*idx)[k]);
      auto src = g.row(k);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

// t + u on rows where row_mask is set; other rows pass t through.
inline Var masked_add(Var t, std::vector<std::uint8_t> row_mask, Var u) {
  Tape& tp0 = detail::same_tape(t, u, "masked_add");
  detail::require_same_shape(t.value(), u.value(), "masked_add");
  if (row_mask.size() != t.rows()) throw ShapeError("masked_add: mask length differs from row count");
  Tensor out = t.value();
  const Tensor& uv = u.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    if (row_mask[r])
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += uv(r, c);
  const std::size_t it = t.id(), iu = u.id();
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(row_mask));
  return tp0.record("masked_add", std::move(out), t.requires_grad() || u.requires_grad(),
                    [it, iu, mask](Tape& tp, const Tensor& g) {
                      tp.accumulate(it, g);
                      if (tp.requires_grad(iu)) {
                        Tensor& gu = tp.grad(iu);
                        for (std::size_t r = 0; r < g.rows(); ++r)
                          if ((*mask)[r])
                            for (std::size_t c = 0; c < g.cols(); ++c) gu(r, c) += g(r, c);
                      }
                    });
}

// Copy of base with rows index[k] replaced by rows(k). Indices must be distinct.
inline Var row_scatter(Var base, std::vector<std::size_t> index, Var rows) {
  Tape& t = detail::same_tape(base, rows, "row_scatter");
  if (rows.rows() != index.size() || rows.cols() != base.cols()) {
    throw ShapeError("row_scatter: " + rows.value().shape_str() + " rows into " + base.value().shape_str());
  }
  Tensor out = base.value();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= out.rows()) throw ShapeError("row_scatter: index out of range");
    std::copy_n(rows.value().row(k).data(), out.cols(), out.row(index[k]).data());
  }
  const std::size_t ib = base.id(), ir = rows.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return t.record("row_scatter", std::move(out), base.requires_grad() || rows.requires_grad(),
                  [ib, ir, idx](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(ib)) {
                      Tensor gb = g;
                      for (std::size_t r : *idx) std::fill(gb.row(r).begin(), gb.row(r).end(), 0.0);
                      tp.grad(ib) += gb;
                    }
                    if (tp.requires_grad(ir)) {
                      Tensor& gr = tp.grad(ir);
                      for (std::size_t k = 0; k < idx->size(); ++k) {
                        auto src = g.row((*idx)[k]);
                        auto dst = gr.row(k);
                        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                      }
                    }
                  });
}

// out[r, :] = s[r] * x[r, :], with s a rows x 1 column.
inline Var scale_rows(Var x, Var s) {
  Tape& t = detail::same_tape(x, s, "scale_rows");
  if (s.rows() != x.rows() || s.cols() != 1) {
    throw ShapeError("scale_rows: scale " + s.value().shape_str() + " for " + x.value().shape_str());
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= s.value()(r, 0);
  const std::size_t ix = x.id(), is = s.id();
  return t.record("scale_rows", std::move(out), x.requires_grad() || s.requires_grad(),
                  [ix, is](Tape& tp, const Tensor& g) {
                    const Tensor& xv = tp.value(ix);
                    const Tensor& sv = tp.value(is);
                    if (tp.requires_grad(ix)) {
                      Tensor& gx = tp.grad(ix);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) += sv(r, 0) * g(r, c);
                    }
                    if (tp.requires_grad(is)) {
                      Tensor& gs = tp.grad(is);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < g.cols(); ++c) acc += xv(r, c) * g(r, c);
                        gs(r, 0) += acc;
                      }
                    }
                  });
}

// Per-row convex mix of two experts: w[r,0] * a[r,:] + w[r,1] * b[r,:].
inline Var mix2(Var w, Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mix2");
  detail::same_tape(w, a, "mix2");
  detail::require_same_shape(a.value(), b.value(), "mix2");
  if (w.rows() != a.rows() || w.cols() != 2) {
    throw ShapeError("mix2: weights " + w.value().shape_str() + " for experts " + a.value().shape_str());
  }
  const Tensor& wv = w.value();
  Tensor out(a.rows(), a.cols());
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c)
      out(r, c) = wv(r, 0) * a.value()(r, c) + wv(r, 1) * b.value()(r, c);
  const std::size_t iw = w.id(), ia = a.id(), ib = b.id();
  return t.record("mix2", std::move(out), w.requires_grad() || a.requires_grad() || b.requires_grad(),
                  [iw, ia, ib](Tape& tp, const Tensor& g) {
                    const Tensor& wv2 = tp.value(iw);
                    const Tensor& av = tp.value(ia);
                    const Tensor& bv = tp.value(ib);
                    if (tp.requires_grad(iw)) {
                      Tensor& gw = tp.grad(iw);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        double s0 = 0.0, s1 = 0.0;
                        for (std::size_t c = 0; c < g.cols(); ++c) {
                          s0 += g(r, c) * av(r, c);
                          s1 += g(r, c) * bv(r, c);
                        }
                        gw(r, 0) += s0;
                        gw(r, 1) += s1;
                      }
                    }
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad(ia);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += wv2(r, 0) * g(r, c);
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c) gb(r, c) += wv2(r, 1) * g(r, c);
                    }
                  });
}

// rows x 1 column of per-row inner products.
inline Var rowwise_dot(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "rowwise_dot");
  detail::require_same_shape(a.value(), b.value(), "rowwise_dot");
  Tensor out(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) acc += a.value()(r, c) * b.value()(r, c);
    out(r, 0) = acc;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("rowwise_dot", std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib](Tape& tp, const Tensor& g) {
                    const Tensor& av = tp.value(ia);
                    const Tensor& bv = tp.value(ib);
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad(ia);
                      for (std::size_t r = 0; r < av.rows(); ++r)
                        for (std::size_t c = 0; c < av.cols(); ++c) ga(r, c) += g(r, 0) * bv(r, c);
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad(ib);
                      for (std::size_t r = 0; r < av.rows(); ++r)
                        for (std::size_t c = 0; c < av.cols(); ++c) gb(r, c) += g(r, 0) * av(r, c);
                    }
                  });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().values()) acc += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor(1, 1, acc), a.requires_grad(), [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ia);
    for (double& v : ga.values()) v += g[0];
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

// Mean of a list of 1x1 values.
inline Var mean_of(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw Error("mean_of: no values");
  Var acc = scalars.front();
  for (std::size_t k = 1; k < scalars.size(); ++k) acc = add(acc, scalars[k]);
  return scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

// x * W^T + b for a weight stored out x in and an optional 1 x out bias.
inline Var linear(Var x, Var weight, Var bias = {}) {
  Tape& t = detail::same_tape(x, weight, "linear");
  if (x.cols() != weight.cols()) {
    throw ShapeError("linear: input " + x.value().shape_str() + " for weight " + weight.value().shape_str());
  }
  const bool has_bias = bias.valid();
  if (has_bias && (bias.rows() != 1 || bias.cols() != weight.rows())) {
    throw ShapeError("linear: bias " + bias.value().shape_str() + " for weight " + weight.value().shape_str());
  }
  Tensor out;
  gemm(x.value(), false, weight.value(), true, out);
  if (has_bias) {
    const Tensor& bv = bias.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = has_bias ? bias.id() : 0;
  const bool rg = x.requires_grad() || weight.requires_grad() || (has_bias && bias.requires_grad());
  return t.record("linear", std::move(out), rg, [ix, iw, ib, has_bias](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ix)) gemm(g, false, tp.value(iw), false, tp.grad(ix), true);
    if (tp.requires_grad(iw)) gemm(g, true, tp.value(ix), false, tp.grad(iw), true);
    if (has_bias && tp.requires_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

}  // namespace cpmr
