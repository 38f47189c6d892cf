#pragma once

#include <string>
#include <vector>

#include "dalace/ops.hpp"
#include "dalace/rng.hpp"

namespace dalace {

// Zero-mean fan-in-scaled initialization for conv/linear weights.
template <typename T>
Tensor<T> he_normal(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double s = std::sqrt(2.0 / double(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(s * rng.gaussian());
  return t;
}

template <typename T>
struct Conv2dLayer {
  Param<T> w, b;
  int64_t stride = 1, pad = 1;

  void init(const std::string& name, int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride_,
            Rng& rng) {
    stride = stride_;
    pad = (k - 1) / 2;
    w.init(name + ".w", he_normal<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng));
    b.init(name + ".b", Tensor<T>::zeros({out_ch}));
  }

  VarPtr<T> operator()(const VarPtr<T>& x) { return conv2d(x, leaf(w), leaf(b), stride, pad); }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct LinearLayer {
  Param<T> w, b;

  void init(const std::string& name, int64_t in_dim, int64_t out_dim, Rng& rng) {
    w.init(name + ".w", he_normal<T>({out_dim, in_dim}, in_dim, rng));
    b.init(name + ".b", Tensor<T>::zeros({out_dim}));
  }

  VarPtr<T> operator()(const VarPtr<T>& x) { return linear(x, leaf(w), leaf(b)); }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  void init(const std::string& name, int64_t channels) {
    gamma.init(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta.init(name + ".beta", Tensor<T>::zeros({channels}));
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::full({channels}, T(1));
  }

  VarPtr<T> operator()(const VarPtr<T>& x, bool training) {
    return batch_norm(x, leaf(gamma), leaf(beta), running_mean, running_var, training, momentum,
                      eps);
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Adam with the reference defaults. Moments are owned here, one slot per
// registered parameter, so distinct optimization phases over overlapping
// parameter sets keep independent moment estimates.
template <typename T>
struct Adam {
  T lr = T(1e-3);
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  int64_t t = 0;
  std::vector<Param<T>*> params;
  std::vector<Tensor<T>> m, v;

  void attach(std::vector<Param<T>*> ps, T lr_) {
    params = std::move(ps);
    lr = lr_;
    m.clear();
    v.clear();
    for (auto* p : params) {
      m.push_back(Tensor<T>::zeros(p->value.shape()));
      v.push_back(Tensor<T>::zeros(p->value.shape()));
    }
  }

  void zero_grad() {
    for (auto* p : params) p->zero_grad();
  }

  void step() {
    ++t;
    const T c1 = T(1) - std::pow(beta1, T(t));
    const T c2 = T(1) - std::pow(beta2, T(t));
    for (size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      T* pv = p.value.data();
      const T* pg = p.grad.data();
      T* pm = m[i].data();
      T* pvv = v[i].data();
      const int64_t n = p.value.numel();
      for (int64_t j = 0; j < n; ++j) {
        const T g = pg[j];
        pm[j] = beta1 * pm[j] + (T(1) - beta1) * g;
        pvv[j] = beta2 * pvv[j] + (T(1) - beta2) * g * g;
        const T mhat = pm[j] / c1;
        const T vhat = pvv[j] / c2;
        pv[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace dalace
