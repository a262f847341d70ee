#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "wsss/autograd.hpp"

namespace wsss::nn {

template <typename T>
struct NamedParameter {
  std::string name;
  ag::Var<T> var;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
ag::Var<T> parameter(Shape shape, std::mt19937_64& rng, T stddev) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return ag::Var<T>(std::move(t), true);
}

template <typename T>
ag::Var<T> constant_parameter(Shape shape, T value) {
  return ag::Var<T>(Tensor<T>(std::move(shape), value), true);
}

// y = x W^T + b over the rows of x.
template <typename T>
struct Linear {
  ag::Var<T> weight;  // [out, in]
  ag::Var<T> bias;    // [out]

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng)
      : weight(parameter<T>({out, in}, rng, static_cast<T>(std::sqrt(1.0 / in)))),
        bias(constant_parameter<T>({out}, T{})) {}

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::add_row_bias(ag::matmul_nt(x, weight), bias); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct Conv2d {
  ag::Var<T> weight;  // [out, in*k*k]
  ag::Var<T> bias;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s, std::mt19937_64& rng)
      : weight(parameter<T>({out, in * k * k}, rng, static_cast<T>(std::sqrt(2.0 / (in * k * k))))),
        bias(constant_parameter<T>({out}, T{})),
        kernel(k),
        stride(s),
        pad(k / 2) {}

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv2d(x, weight, bias, kernel, stride, pad); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  ag::Var<T> gamma;
  ag::Var<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(int n) : gamma(constant_parameter<T>({n}, T{1})), beta(constant_parameter<T>({n}, T{})) {}

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::layer_norm_rows(x, gamma, beta); }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

}  // namespace wsss::nn
