#pragma once

#include <cmath>
#include <vector>

#include "wsss/layers.hpp"

namespace wsss::nn {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight-decay Adam.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ag::Var<T>> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  long steps() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (p.grad().size() != p.size()) continue;
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double wi = static_cast<double>(w[i]);
        wi -= opt_.lr * opt_.weight_decay * wi;
        wi -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        w[i] = static_cast<T>(wi);
      }
    }
  }

 private:
  std::vector<ag::Var<T>> params_;
  AdamWOptions opt_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace wsss::nn
