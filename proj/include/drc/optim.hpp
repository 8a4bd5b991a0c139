#pragma once

// Adam over any reflected weight struct.

#include "drc/core.hpp"

namespace drc {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class W>
class Adam {
 public:
  using T = typename W::Scalar;

  Adam(const W& params, AdamConfig cfg) : cfg_(cfg), m_(zeros_like(params)), v_(zeros_like(params)) {}

  void step(W& params, const W& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double step = cfg_.lr * std::sqrt(c2) / c1;
    const double eps_hat = cfg_.eps * std::sqrt(c2);
    auto p = param_list<T>(params);
    auto g = param_list<const T>(grads);
    auto m = param_list<T>(m_);
    auto v = param_list<T>(v_);
    if (p.size() != g.size() || p.size() != m.size()) throw InputError("Adam: structure mismatch");
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i].size() != g[i].size()) throw InputError("Adam: shape mismatch at " + p[i].name);
      for (Eigen::Index k = 0; k < p[i].size(); ++k) {
        const T gk = g[i].data[k];
        T& mk = m[i].data[k];
        T& vk = v[i].data[k];
        mk = b1 * mk + (T(1) - b1) * gk;
        vk = b2 * vk + (T(1) - b2) * gk * gk;
        p[i].data[k] -= static_cast<T>(step) * mk / (std::sqrt(vk) + static_cast<T>(eps_hat));
      }
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  W m_, v_;
  long t_ = 0;
};

}  // namespace drc
