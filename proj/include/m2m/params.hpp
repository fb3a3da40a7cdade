#pragma once

#include <map>
#include <string>

#include "m2m/autograd.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

// Named trainable tensors. Ordered by name so iteration (and therefore
// optimizer updates and checkpoint layout) is deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  Tensor& add_normal(const std::string& name, Shape dims, Rng& rng, double stddev) {
    Tensor t(std::move(dims));
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return add(name, std::move(t));
  }

  Tensor& add_constant(const std::string& name, Shape dims, double value) {
    return add(name, Tensor::filled(std::move(dims), value));
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

// Puts store entries on a tape on first use.
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name) { return tape_.parameter(name, store_.at(name)); }
  Var constant(Tensor t) { return tape_.constant(std::move(t)); }

  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

 private:
  Tape& tape_;
  const ParamStore& store_;
};

}  // namespace m2m
