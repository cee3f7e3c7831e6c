#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "salm/tensor.hpp"

// Central finite-difference gradient oracle. Independent of the tape: it only
// calls the forward function twice per element and never reads analytic
// gradients. The perturbation actually applied is measured from the stored
// values, so storage rounding of x +/- h does not bias the quotient.
namespace salm::testing {

template <class T>
struct GradCheckReport {
  double max_rel_elem = 0.0;   // per-element, atol-guarded
  double norm_rel = 0.0;       // || g_fd - g_an ||_2 / max(||g_fd||, ||g_an||)
  bool ok = true;
  std::string detail;
};

// Checks d loss / d x for one input tensor. `forward` must recompute the loss
// from current tensor contents each call.
template <class T>
GradCheckReport<T> finite_difference_check(salm::nn::TensorT<T>& x,
                                           const std::function<double()>& forward,
                                           std::span<const T> analytic, double h = 1e-3,
                                           double rtol = 1e-3, double atol = 1e-4) {
  GradCheckReport<T> rep;
  auto xv = x.values();
  double diff_sq = 0.0, fd_sq = 0.0, an_sq = 0.0;
  for (size_t i = 0; i < xv.size(); ++i) {
    const T orig = xv[i];
    const T hi = static_cast<T>(static_cast<double>(orig) + h);
    const T lo = static_cast<T>(static_cast<double>(orig) - h);
    xv[i] = hi;
    const double f_hi = forward();
    xv[i] = lo;
    const double f_lo = forward();
    xv[i] = orig;
    const double span = static_cast<double>(hi) - static_cast<double>(lo);
    const double fd = (f_hi - f_lo) / span;
    const double an = static_cast<double>(analytic[i]);
    const double err = std::abs(fd - an);
    const double rel = err / std::max({std::abs(fd), std::abs(an), atol / rtol});
    rep.max_rel_elem = std::max(rep.max_rel_elem, rel);
    diff_sq += err * err;
    fd_sq += fd * fd;
    an_sq += an * an;
    if (err > atol + rtol * std::max(std::abs(fd), std::abs(an))) {
      rep.ok = false;
      if (rep.detail.empty())
        rep.detail = "element " + std::to_string(i) + ": fd=" + std::to_string(fd) +
                     " analytic=" + std::to_string(an);
    }
  }
  const double denom = std::max(std::sqrt(fd_sq), std::sqrt(an_sq));
  rep.norm_rel = denom > 0 ? std::sqrt(diff_sq) / denom : std::sqrt(diff_sq);
  if (rep.norm_rel > rtol) rep.ok = false;
  return rep;
}

// Exhaustive recursive edit distance, used as the WER oracle. No memoization;
// intended for word lists of length <= 5.
inline int naive_edit_distance(const std::vector<std::string>& a, size_t i,
                               const std::vector<std::string>& b, size_t j) {
  if (i == a.size()) return static_cast<int>(b.size() - j);
  if (j == b.size()) return static_cast<int>(a.size() - i);
  const int sub = naive_edit_distance(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  const int del = naive_edit_distance(a, i + 1, b, j) + 1;
  const int ins = naive_edit_distance(a, i, b, j + 1) + 1;
  return std::min({sub, del, ins});
}

}  // namespace salm::testing
