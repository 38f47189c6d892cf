#pragma once

// Shared test helpers. The finite-difference checker is the independent
// oracle for every gradient assertion: it never touches the backward pass
// of the op under test, only repeated forward evaluations.

#include <cmath>
#include <functional>
#include <vector>

#include "dalace/autodiff.hpp"
#include "dalace/rng.hpp"
#include "dalace/tensor.hpp"

namespace testutil {

using dalace::Rng;
using dalace::Tensor;
using dalace::VarPtr;

inline Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
};

// Central finite differences on every element of `x` (or an index subset),
// compared against the analytic gradient reported by backward().
// rel err per element: |g - fd| / max(|g|, |fd|, scale_floor).
inline GradCheckResult grad_check(
    const std::function<VarPtr<double>(const VarPtr<double>&)>& fn, const Tensor<double>& x0,
    double step = 1e-5, const std::vector<int64_t>& subset = {}, double scale_floor = 1e-3) {
  auto x = dalace::input(x0.clone());
  auto y = fn(x);
  dalace::backward(y);
  Tensor<double> analytic =
      x->grad.defined() ? x->grad : Tensor<double>::zeros(x0.shape());

  std::vector<int64_t> idx = subset;
  if (idx.empty()) {
    idx.resize(size_t(x0.numel()));
    for (int64_t i = 0; i < x0.numel(); ++i) idx[size_t(i)] = i;
  }

  GradCheckResult res;
  for (int64_t i : idx) {
    Tensor<double> xp = x0.clone();
    xp[i] += step;
    Tensor<double> xm = x0.clone();
    xm[i] -= step;
    const double fp = fn(dalace::constant(xp.clone()))->val[0];
    const double fm = fn(dalace::constant(xm.clone()))->val[0];
    const double fd = (fp - fm) / (2.0 * step);
    const double g = analytic[i];
    const double denom = std::max({std::abs(g), std::abs(fd), scale_floor});
    const double rel = std::abs(g - fd) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace testutil
