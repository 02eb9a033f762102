// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dmf/tensor.hpp"

namespace dmf {

using Rng = std::mt19937_64;

template <class T>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

/// Kaiming-style fan-in uniform init for conv kernels [Cout, Cin/g, kh, kw].
template <class T>
Tensor<T> conv_weight(std::size_t cout, std::size_t cin_per_group, std::size_t kh, std::size_t kw, Rng& rng) {
  const double fan_in = static_cast<double>(cin_per_group * kh * kw);
  return uniform_param<T>({cout, cin_per_group, kh, kw}, std::sqrt(6.0 / fan_in), rng);
}

/// Fan-in uniform init for linear weights stored [Din, Dout] (unit-variance
/// preserving, no rectifier gain).
template <class T>
Tensor<T> linear_weight(std::size_t din, std::size_t dout, Rng& rng) {
  return uniform_param<T>({din, dout}, std::sqrt(3.0 / static_cast<double>(din)), rng);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace dmf
