#include "flexio/params.h"

#include <cmath>

namespace flexio {

template <typename T>
Var<T> ParameterStore<T>::Add(const std::string& name, Tensor<T> init) {
  if (Contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, vars_.size());
  names_.push_back(name);
  vars_.emplace_back(std::move(init), true);
  return vars_.back();
}

template <typename T>
const Var<T>& ParameterStore<T>::Get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return vars_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::NumElements() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += v.value().size();
  return n;
}

template <typename T>
void ParameterStore<T>::ZeroGrad() {
  for (auto& v : vars_) v.zero_grad();
}

template <typename T>
Tensor<T> Initializer<T>::FanIn(Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
Tensor<T> Initializer<T>::Normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
  return t;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Initializer<float>;
template class Initializer<double>;

}  // namespace flexio
