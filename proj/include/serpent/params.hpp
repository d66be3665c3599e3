#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "serpent/rng.hpp"
#include "serpent/tensor.hpp"

namespace serpent {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
std::size_t count_elements(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Throws ConfigError on duplicate names.
template <typename T>
void require_unique_names(const ParamList<T>& params) {
  std::unordered_set<std::string> seen;
  for (const auto& p : params)
    if (!seen.insert(p.name).second) throw ConfigError("duplicate parameter name: " + p.name);
}

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

/// Parameter initialized from U(-bound, bound). The stream is keyed by the
/// model seed and the parameter name, so construction order never matters.
template <typename T>
Tensor<T> uniform_param(const Shape& shape, double bound, std::uint64_t seed, const std::string& name) {
  CounterRng rng(derive_seed(seed, hash_name(name)));
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(shape, std::move(v), true);
}

template <typename T>
Tensor<T> constant_param(const Shape& shape, double value) {
  return Tensor<T>::full(shape, static_cast<T>(value), true);
}

/// He-uniform bound for a layer feeding a rectifier.
inline double he_bound(int fan_in) { return std::sqrt(6.0 / std::max(fan_in, 1)); }

/// Default bound 1/sqrt(fan_in) for layers not followed by a rectifier.
inline double fan_in_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1))); }

}  // namespace serpent
