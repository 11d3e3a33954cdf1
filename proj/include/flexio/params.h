#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexio/autograd.h"

namespace flexio {

// Ordered collection of named trainable tensors. Order is creation order and
// defines the checkpoint layout.
template <typename T>
class ParameterStore {
 public:
  Var<T> Add(const std::string& name, Tensor<T> init);
  const Var<T>& Get(const std::string& name) const;
  bool Contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Var<T>>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }
  std::size_t NumElements() const;
  void ZeroGrad();

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Deterministic parameter initialisation.
template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense layers.
  Tensor<T> FanIn(Shape shape, std::size_t fan_in);
  Tensor<T> Normal(Shape shape, double stddev);
  static Tensor<T> Constant(Shape shape, T value) { return Tensor<T>(std::move(shape), value); }

 private:
  std::mt19937_64 rng_;
};

}  // namespace flexio
