#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "salm/rng.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation on an
// explicit tape. Templated on the scalar type: the project-wide type is
// float (TensorT<float>), with double reductions inside every accumulation
// (matmul inner loops, softmax sums, norms) so tiny-model training stays
// stable. The double instantiation shares all code and is what the
// finite-difference test harness drives, since float storage limits how
// small a checkable difference quotient can get.

namespace salm::nn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->values.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT full(Shape shape, T value, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
    return t;
  }

  static TensorT from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static TensorT randn(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->values) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
  }

  // normal(0, stddev) truncated at +/- 2 stddev; the weight init convention.
  static TensorT randn_trunc2(Shape shape, T stddev, Rng& rng, bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->values) v = static_cast<T>(rng.normal_trunc2(static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  size_t rank() const { return impl_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }

  std::span<T> values() { return impl_->values; }
  std::span<const T> values() const { return impl_->values; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T(0));
  }
  std::span<T> grad() {
    ensure_grad();
    return impl_->grad;
  }
  std::span<const T> grad() const {
    if (impl_->grad.empty()) throw std::logic_error("tensor has no gradient");
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw std::logic_error("item() requires a scalar tensor");
    return impl_->values[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != rank()) throw std::logic_error("at(): index rank mismatch");
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t ix : idx) {
      if (ix < 0 || ix >= impl_->shape[i]) throw std::out_of_range("at(): index out of range");
      flat = flat * impl_->shape[i] + ix;
      ++i;
    }
    return impl_->values[static_cast<size_t>(flat)];
  }

  bool all_finite() const {
    for (T v : impl_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  const void* id() const { return impl_.get(); }
  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Records the backward rule of every operation in execution order. backward()
// replays the rules in reverse, accumulating into .grad of every tensor that
// requires a gradient. A tape may be consumed by backward() only once;
// reset() clears it for the next step.
template <class T>
class TapeT {
 public:
  void record(const TensorT<T>& output, std::function<void()> backward_rule) {
    ops_.push_back(std::move(backward_rule));
    produced_.insert(output.id());
  }

  bool produced(const TensorT<T>& t) const { return produced_.count(t.id()) > 0; }
  size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  void backward(TensorT<T>& loss, T seed = T(1)) {
    if (loss.numel() != 1)
      throw std::logic_error("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!produced(loss))
      throw std::logic_error("backward() loss was not produced by operations recorded on this tape");
    if (consumed_)
      throw std::logic_error("backward() called twice on the same tape without reset()");
    consumed_ = true;
    loss.grad()[0] += seed;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void reset() {
    ops_.clear();
    produced_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> ops_;
  std::unordered_set<const void*> produced_;
  bool consumed_ = false;
};

namespace detail {

// Promoted accumulation type: double for both instantiations.
using Acc = double;

template <class T>
bool grads_flow(const TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
  if (!tape) return false;
  for (const auto* in : inputs)
    if (in->requires_grad()) return true;
  return false;
}

// Raw GEMM on spans: C[m,n] = A op B with optional transposes. Accumulates in
// double; the k-loop order is fixed so results are bit-identical run to run.
template <class T>
void gemm(std::span<const T> a, std::span<const T> b, std::span<T> c, int64_t m, int64_t n,
          int64_t k, bool trans_a, bool trans_b, bool accumulate) {
  std::vector<Acc> row(static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), Acc(0));
    if (!trans_b) {
      for (int64_t p = 0; p < k; ++p) {
        const Acc av = static_cast<Acc>(trans_a ? a[static_cast<size_t>(p * m + i)]
                                                : a[static_cast<size_t>(i * k + p)]);
        const T* brow = &b[static_cast<size_t>(p * n)];
        for (int64_t j = 0; j < n; ++j) row[static_cast<size_t>(j)] += av * static_cast<Acc>(brow[j]);
      }
    } else {
      for (int64_t j = 0; j < n; ++j) {
        Acc acc = 0;
        for (int64_t p = 0; p < k; ++p) {
          const Acc av = static_cast<Acc>(trans_a ? a[static_cast<size_t>(p * m + i)]
                                                  : a[static_cast<size_t>(i * k + p)]);
          acc += av * static_cast<Acc>(b[static_cast<size_t>(j * k + p)]);
        }
        row[static_cast<size_t>(j)] = acc;
      }
    }
    T* crow = &c[static_cast<size_t>(i * n)];
    for (int64_t j = 0; j < n; ++j) {
      const T v = static_cast<T>(row[static_cast<size_t>(j)]);
      if (accumulate)
        crow[j] += v;
      else
        crow[j] = v;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Each takes the tape as the last argument; passing nullptr runs
// the forward computation without recording (inference mode).
// ---------------------------------------------------------------------------

// C = A x B, or A x B^T when trans_b (B given as [n,k]).
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape, bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul expects rank-2 tensors, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1);
  const int64_t n = trans_b ? b.dim(0) : b.dim(1);
  const int64_t bk = trans_b ? b.dim(1) : b.dim(0);
  if (k != bk)
    throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros({m, n});
  detail::gemm<T>(a.values(), b.values(), out.values(), m, n, k, false, trans_b, false);
  if (detail::grads_flow(tape, {&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    tape->record(out, [ai, bi, oi, m, n, k, trans_b] {
      if (oi->grad.empty()) return;
      std::span<const T> dy(oi->grad);
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->values.size(), T(0));
        // dA = dY x B^T (plain) or dY x B (when B entered transposed)
        detail::gemm<T>(dy, std::span<const T>(bi->values), std::span<T>(ai->grad), m, k, n,
                        false, !trans_b, true);
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->values.size(), T(0));
        if (!trans_b)  // dB = A^T x dY
          detail::gemm<T>(std::span<const T>(ai->values), dy, std::span<T>(bi->grad), k, n, m,
                          true, false, true);
        else  // dB = dY^T x A
          detail::gemm<T>(dy, std::span<const T>(ai->values), std::span<T>(bi->grad), n, k, m,
                          true, false, true);
      }
    });
  }
  return out;
}

// Batched matmul over the leading dimension: [g,m,k] x [g,k,n] -> [g,m,n]
// (with trans_b, the second factor is [g,n,k]).
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("bmm expects [g,m,k] x [g,k,n] with equal g");
  const int64_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  const int64_t bk = trans_b ? b.dim(2) : b.dim(1);
  if (k != bk) throw std::invalid_argument("bmm inner dimensions disagree");
  TensorT<T> out = TensorT<T>::zeros({g, m, n});
  for (int64_t s = 0; s < g; ++s) {
    detail::gemm<T>(a.values().subspan(static_cast<size_t>(s * m * k), static_cast<size_t>(m * k)),
                    b.values().subspan(static_cast<size_t>(s * k * n), static_cast<size_t>(k * n)),
                    out.values().subspan(static_cast<size_t>(s * m * n), static_cast<size_t>(m * n)),
                    m, n, k, false, trans_b, false);
  }
  if (detail::grads_flow(tape, {&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    tape->record(out, [ai, bi, oi, g, m, n, k, trans_b] {
      if (oi->grad.empty()) return;
      for (int64_t s = 0; s < g; ++s) {
        std::span<const T> dy(oi->grad);
        dy = dy.subspan(static_cast<size_t>(s * m * n), static_cast<size_t>(m * n));
        std::span<const T> av(ai->values);
        av = av.subspan(static_cast<size_t>(s * m * k), static_cast<size_t>(m * k));
        std::span<const T> bv(bi->values);
        bv = bv.subspan(static_cast<size_t>(s * k * n), static_cast<size_t>(k * n));
        if (ai->requires_grad) {
          if (ai->grad.empty()) ai->grad.assign(ai->values.size(), T(0));
          std::span<T> da(ai->grad);
          da = da.subspan(static_cast<size_t>(s * m * k), static_cast<size_t>(m * k));
          detail::gemm<T>(dy, bv, da, m, k, n, false, !trans_b, true);
        }
        if (bi->requires_grad) {
          if (bi->grad.empty()) bi->grad.assign(bi->values.size(), T(0));
          std::span<T> db(bi->grad);
          db = db.subspan(static_cast<size_t>(s * k * n), static_cast<size_t>(k * n));
          if (!trans_b)
            detail::gemm<T>(av, dy, db, k, n, m, true, false, true);
          else
            detail::gemm<T>(dy, av, db, n, k, m, true, false, true);
        }
      }
    });
  }
  return out;
}

// Elementwise sum; shapes must match exactly (no broadcasting).
template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<T>(static_cast<detail::Acc>(av[i]) + static_cast<detail::Acc>(bv[i]));
  if (detail::grads_flow(tape, {&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    tape->record(out, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        if (in->grad.empty()) in->grad.assign(in->values.size(), T(0));
        for (size_t i = 0; i < in->grad.size(); ++i) in->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

// x + bias broadcast along the trailing axis: [.., n] + [n]. The only
// broadcast the library supports.
template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias, TapeT<T>* tape) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0))
    throw std::invalid_argument("add_bias expects [..,n] + [n]");
  const int64_t n = bias.dim(0);
  const int64_t rows = x.numel() / n;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto xv = x.values();
  auto bv = bias.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) {
      const size_t i = static_cast<size_t>(r * n + j);
      ov[i] = static_cast<T>(static_cast<detail::Acc>(xv[i]) +
                             static_cast<detail::Acc>(bv[static_cast<size_t>(j)]));
    }
  if (detail::grads_flow(tape, {&x, &bias})) {
    auto xi = x.impl();
    auto bi = bias.impl();
    auto oi = out.impl();
    tape->record(out, [xi, bi, oi, rows, n] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
        for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->values.size(), T(0));
        for (int64_t j = 0; j < n; ++j) {
          detail::Acc acc = 0;
          for (int64_t r = 0; r < rows; ++r)
            acc += static_cast<detail::Acc>(oi->grad[static_cast<size_t>(r * n + j)]);
          bi->grad[static_cast<size_t>(j)] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<T>(static_cast<detail::Acc>(av[i]) * static_cast<detail::Acc>(bv[i]));
  if (detail::grads_flow(tape, {&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    tape->record(out, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->values.size(), T(0));
        for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->values.size(), T(0));
        for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->values[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T factor, TapeT<T>* tape) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<T>(static_cast<detail::Acc>(xv[i]) * static_cast<detail::Acc>(factor));
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi, factor] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * factor;
    });
  }
  return out;
}

// Softmax along `axis` (negative axes count from the back). Max-subtracted,
// double-precision sums.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis, TapeT<T>* tape) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("softmax: axis out of range");
  const int64_t n = x.dim(static_cast<size_t>(axis));
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(static_cast<size_t>(i));
  const int64_t outer = x.numel() / (n * inner);

  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      detail::Acc mx = -std::numeric_limits<detail::Acc>::infinity();
      for (int64_t j = 0; j < n; ++j)
        mx = std::max(mx, static_cast<detail::Acc>(xv[static_cast<size_t>(base + j * inner)]));
      detail::Acc sum = 0;
      for (int64_t j = 0; j < n; ++j) {
        const detail::Acc e =
            std::exp(static_cast<detail::Acc>(xv[static_cast<size_t>(base + j * inner)]) - mx);
        ov[static_cast<size_t>(base + j * inner)] = static_cast<T>(e);
        sum += e;
      }
      const detail::Acc inv = 1.0 / sum;
      for (int64_t j = 0; j < n; ++j) {
        auto& v = ov[static_cast<size_t>(base + j * inner)];
        v = static_cast<T>(static_cast<detail::Acc>(v) * inv);
      }
    }
  }
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi, outer, inner, n] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          detail::Acc dot = 0;
          for (int64_t j = 0; j < n; ++j) {
            const size_t i = static_cast<size_t>(base + j * inner);
            dot += static_cast<detail::Acc>(oi->grad[i]) * static_cast<detail::Acc>(oi->values[i]);
          }
          for (int64_t j = 0; j < n; ++j) {
            const size_t i = static_cast<size_t>(base + j * inner);
            xi->grad[i] += static_cast<T>((static_cast<detail::Acc>(oi->grad[i]) - dot) *
                                          static_cast<detail::Acc>(oi->values[i]));
          }
        }
      }
    });
  }
  return out;
}

// Layer normalization over the last axis with learned gain/bias.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      TapeT<T>* tape, T eps = T(1e-5)) {
  const int64_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n)
    throw std::invalid_argument("layer_norm: gain/bias must match the last axis");
  const int64_t rows = x.numel() / n;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> rstd(static_cast<size_t>(rows));
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * n);
    detail::Acc mean = 0;
    for (int64_t j = 0; j < n; ++j) mean += static_cast<detail::Acc>(xv[base + static_cast<size_t>(j)]);
    mean /= static_cast<detail::Acc>(n);
    detail::Acc var = 0;
    for (int64_t j = 0; j < n; ++j) {
      const detail::Acc d = static_cast<detail::Acc>(xv[base + static_cast<size_t>(j)]) - mean;
      var += d * d;
    }
    var /= static_cast<detail::Acc>(n);
    const detail::Acc rs = 1.0 / std::sqrt(var + static_cast<detail::Acc>(eps));
    rstd[static_cast<size_t>(r)] = static_cast<T>(rs);
    for (int64_t j = 0; j < n; ++j) {
      const size_t i = base + static_cast<size_t>(j);
      const detail::Acc xh = (static_cast<detail::Acc>(xv[i]) - mean) * rs;
      xhat[i] = static_cast<T>(xh);
      ov[i] = static_cast<T>(xh * static_cast<detail::Acc>(gv[static_cast<size_t>(j)]) +
                             static_cast<detail::Acc>(bv[static_cast<size_t>(j)]));
    }
  }
  if (detail::grads_flow(tape, {&x, &gamma, &beta})) {
    auto xi = x.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    auto oi = out.impl();
    auto xhat_c = std::make_shared<std::vector<T>>(std::move(xhat));
    auto rstd_c = std::make_shared<std::vector<T>>(std::move(rstd));
    tape->record(out, [xi, gi, bi, oi, xhat_c, rstd_c, rows, n] {
      if (oi->grad.empty()) return;
      const auto& xh = *xhat_c;
      for (int64_t r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r * n);
        if (gi->requires_grad) {
          if (gi->grad.empty()) gi->grad.assign(gi->values.size(), T(0));
          for (int64_t j = 0; j < n; ++j)
            gi->grad[static_cast<size_t>(j)] +=
                oi->grad[base + static_cast<size_t>(j)] * xh[base + static_cast<size_t>(j)];
        }
        if (bi->requires_grad) {
          if (bi->grad.empty()) bi->grad.assign(bi->values.size(), T(0));
          for (int64_t j = 0; j < n; ++j)
            bi->grad[static_cast<size_t>(j)] += oi->grad[base + static_cast<size_t>(j)];
        }
        if (xi->requires_grad) {
          if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
          detail::Acc mean_dyh = 0, mean_dyh_xh = 0;
          for (int64_t j = 0; j < n; ++j) {
            const size_t i = base + static_cast<size_t>(j);
            const detail::Acc dyh = static_cast<detail::Acc>(oi->grad[i]) *
                                    static_cast<detail::Acc>(gi->values[static_cast<size_t>(j)]);
            mean_dyh += dyh;
            mean_dyh_xh += dyh * static_cast<detail::Acc>(xh[i]);
          }
          mean_dyh /= static_cast<detail::Acc>(n);
          mean_dyh_xh /= static_cast<detail::Acc>(n);
          const detail::Acc rs = static_cast<detail::Acc>((*rstd_c)[static_cast<size_t>(r)]);
          for (int64_t j = 0; j < n; ++j) {
            const size_t i = base + static_cast<size_t>(j);
            const detail::Acc dyh = static_cast<detail::Acc>(oi->grad[i]) *
                                    static_cast<detail::Acc>(gi->values[static_cast<size_t>(j)]);
            xi->grad[i] += static_cast<T>(
                rs * (dyh - mean_dyh - static_cast<detail::Acc>(xh[i]) * mean_dyh_xh));
          }
        }
      }
    });
  }
  return out;
}

// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <class T>
TensorT<T> gelu(const TensorT<T>& x, TapeT<T>* tape) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  constexpr detail::Acc inv_sqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < ov.size(); ++i) {
    const detail::Acc v = static_cast<detail::Acc>(xv[i]);
    ov[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      constexpr detail::Acc inv_sqrt2 = 0.70710678118654752440;
      constexpr detail::Acc inv_sqrt2pi = 0.39894228040143267794;
      for (size_t i = 0; i < xi->grad.size(); ++i) {
        const detail::Acc v = static_cast<detail::Acc>(xi->values[i]);
        const detail::Acc cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const detail::Acc pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        xi->grad[i] += static_cast<T>(static_cast<detail::Acc>(oi->grad[i]) * (cdf + v * pdf));
      }
    });
  }
  return out;
}

// Row gather: out[i,:] = table[ids[i],:]. Backward scatter-adds.
template <class T>
TensorT<T> embedding(const std::vector<int32_t>& ids, const TensorT<T>& table, TapeT<T>* tape) {
  if (table.rank() != 2) throw std::invalid_argument("embedding table must be [v,h]");
  const int64_t v = table.dim(0), h = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= v) throw std::out_of_range("embedding id " + std::to_string(id) + " out of range");
  TensorT<T> out = TensorT<T>::zeros({static_cast<int64_t>(ids.size()), h});
  auto tv = table.values();
  auto ov = out.values();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&tv[static_cast<size_t>(ids[i]) * static_cast<size_t>(h)], static_cast<size_t>(h),
                &ov[i * static_cast<size_t>(h)]);
  if (detail::grads_flow(tape, {&table})) {
    auto ti = table.impl();
    auto oi = out.impl();
    auto ids_c = std::make_shared<std::vector<int32_t>>(ids);
    tape->record(out, [ti, oi, ids_c, h] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      if (ti->grad.empty()) ti->grad.assign(ti->values.size(), T(0));
      for (size_t i = 0; i < ids_c->size(); ++i) {
        T* dst = &ti->grad[static_cast<size_t>((*ids_c)[i]) * static_cast<size_t>(h)];
        const T* src = &oi->grad[i * static_cast<size_t>(h)];
        for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Metadata reshape (copying); element count must be preserved.
template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape, TapeT<T>* tape) {
  if (shape_numel(new_shape) != x.numel())
    throw std::invalid_argument("reshape to " + shape_str(new_shape) + " changes element count");
  TensorT<T> out = TensorT<T>::zeros(std::move(new_shape));
  auto xv = x.values();
  std::copy(xv.begin(), xv.end(), out.values().begin());
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

// [b,t,h] -> [b*heads, t, h/heads]
template <class T>
TensorT<T> split_heads(const TensorT<T>& x, int64_t heads, TapeT<T>* tape) {
  if (x.rank() != 3 || x.dim(2) % heads != 0)
    throw std::invalid_argument("split_heads expects [b,t,h] with h divisible by heads");
  const int64_t b = x.dim(0), t = x.dim(1), h = x.dim(2), dh = h / heads;
  TensorT<T> out = TensorT<T>::zeros({b * heads, t, dh});
  auto xv = x.values();
  auto ov = out.values();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ti = 0; ti < t; ++ti)
      for (int64_t hd = 0; hd < heads; ++hd)
        std::copy_n(&xv[static_cast<size_t>((bi * t + ti) * h + hd * dh)], static_cast<size_t>(dh),
                    &ov[static_cast<size_t>(((bi * heads + hd) * t + ti) * dh)]);
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi, b, t, h, dh, heads] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t hd = 0; hd < heads; ++hd) {
            const T* src = &oi->grad[static_cast<size_t>(((bi * heads + hd) * t + ti) * dh)];
            T* dst = &xi->grad[static_cast<size_t>((bi * t + ti) * h + hd * dh)];
            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
    });
  }
  return out;
}

// [b*heads, t, dh] -> [b, t, heads*dh]
template <class T>
TensorT<T> merge_heads(const TensorT<T>& x, int64_t heads, TapeT<T>* tape) {
  if (x.rank() != 3 || x.dim(0) % heads != 0)
    throw std::invalid_argument("merge_heads expects [b*heads,t,dh]");
  const int64_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), h = heads * dh;
  TensorT<T> out = TensorT<T>::zeros({b, t, h});
  auto xv = x.values();
  auto ov = out.values();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ti = 0; ti < t; ++ti)
      for (int64_t hd = 0; hd < heads; ++hd)
        std::copy_n(&xv[static_cast<size_t>(((bi * heads + hd) * t + ti) * dh)],
                    static_cast<size_t>(dh),
                    &ov[static_cast<size_t>((bi * t + ti) * h + hd * dh)]);
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi, b, t, h, dh, heads] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t hd = 0; hd < heads; ++hd) {
            const T* src = &oi->grad[static_cast<size_t>((bi * t + ti) * h + hd * dh)];
            T* dst = &xi->grad[static_cast<size_t>(((bi * heads + hd) * t + ti) * dh)];
            for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
          }
    });
  }
  return out;
}

// Sum of all elements, double accumulation.
template <class T>
TensorT<T> sum(const TensorT<T>& x, TapeT<T>* tape) {
  detail::Acc acc = 0;
  for (T v : x.values()) acc += static_cast<detail::Acc>(v);
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (auto& g : xi->grad) g += oi->grad[0];
    });
  }
  return out;
}

// Inverted dropout with the given keep mask drawn from rng. p == 0 is the
// identity.
template <class T>
TensorT<T> dropout(const TensorT<T>& x, T p, Rng& rng, TapeT<T>* tape) {
  if (p < T(0) || p >= T(1)) throw std::invalid_argument("dropout probability must be in [0,1)");
  if (p == T(0)) return x;
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x.numel()));
  const detail::Acc inv_keep = 1.0 / (1.0 - static_cast<detail::Acc>(p));
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    const bool keep = rng.uniform() >= static_cast<double>(p);
    (*mask)[i] = keep ? 1 : 0;
    ov[i] = keep ? static_cast<T>(static_cast<detail::Acc>(xv[i]) * inv_keep) : T(0);
  }
  if (detail::grads_flow(tape, {&x})) {
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record(out, [xi, oi, mask, inv_keep] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      if (xi->grad.empty()) xi->grad.assign(xi->values.size(), T(0));
      for (size_t i = 0; i < xi->grad.size(); ++i)
        if ((*mask)[i]) xi->grad[i] += static_cast<T>(static_cast<detail::Acc>(oi->grad[i]) * inv_keep);
    });
  }
  return out;
}

// Mean negative log-softmax over positions whose target is not ignore_index.
// `positions` reports how many targets contributed; when it is zero the loss
// is defined as 0 and the flag lets callers warn.
template <class T>
struct CrossEntropyResult {
  TensorT<T> loss;
  int64_t positions = 0;
  bool all_ignored = false;
};

template <class T>
CrossEntropyResult<T> cross_entropy(const TensorT<T>& logits, const std::vector<int32_t>& targets,
                                    int32_t ignore_index, TapeT<T>* tape) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy expects [n,v] logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: target count does not match logit rows");
  for (int32_t t : targets)
    if (t != ignore_index && (t < 0 || t >= v))
      throw std::out_of_range("cross_entropy target " + std::to_string(t) + " out of range");

  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n * v));
  auto lv = logits.values();
  detail::Acc total = 0;
  int64_t count = 0;
  for (int64_t r = 0; r < n; ++r) {
    const size_t base = static_cast<size_t>(r * v);
    detail::Acc mx = -std::numeric_limits<detail::Acc>::infinity();
    for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<detail::Acc>(lv[base + static_cast<size_t>(j)]));
    detail::Acc sum = 0;
    for (int64_t j = 0; j < v; ++j)
      sum += std::exp(static_cast<detail::Acc>(lv[base + static_cast<size_t>(j)]) - mx);
    const detail::Acc log_z = mx + std::log(sum);
    for (int64_t j = 0; j < v; ++j)
      (*probs)[base + static_cast<size_t>(j)] = static_cast<T>(
          std::exp(static_cast<detail::Acc>(lv[base + static_cast<size_t>(j)]) - log_z));
    if (targets[static_cast<size_t>(r)] != ignore_index) {
      total += log_z - static_cast<detail::Acc>(lv[base + static_cast<size_t>(targets[static_cast<size_t>(r)])]);
      ++count;
    }
  }
  CrossEntropyResult<T> result;
  result.positions = count;
  result.all_ignored = count == 0;
  result.loss = TensorT<T>::scalar(count > 0 ? static_cast<T>(total / static_cast<detail::Acc>(count)) : T(0));
  if (detail::grads_flow(tape, {&logits})) {
    auto li = logits.impl();
    auto oi = result.loss.impl();
    auto targets_c = std::make_shared<std::vector<int32_t>>(targets);
    tape->record(result.loss, [li, oi, probs, targets_c, ignore_index, n, v, count] {
      if (oi->grad.empty() || !li->requires_grad || count == 0) return;
      if (li->grad.empty()) li->grad.assign(li->values.size(), T(0));
      const detail::Acc g = static_cast<detail::Acc>(oi->grad[0]) / static_cast<detail::Acc>(count);
      for (int64_t r = 0; r < n; ++r) {
        const int32_t t = (*targets_c)[static_cast<size_t>(r)];
        if (t == ignore_index) continue;
        const size_t base = static_cast<size_t>(r * v);
        for (int64_t j = 0; j < v; ++j) {
          detail::Acc p = static_cast<detail::Acc>((*probs)[base + static_cast<size_t>(j)]);
          if (j == t) p -= 1.0;
          li->grad[base + static_cast<size_t>(j)] += static_cast<T>(g * p);
        }
      }
    });
  }
  return result;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using CrossEntropy = CrossEntropyResult<float>;

}  // namespace salm::nn
