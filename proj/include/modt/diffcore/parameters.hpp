#pragma once

#include <map>
#include <string>
#include <vector>

#include "modt/diffcore/tensor.hpp"

namespace modt::diff {

/// Named trainable tensors, iterated in lexicographic name order. Tensor
/// addresses are stable for the life of the entry.
template <class T>
class ParameterStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    auto [it, inserted] = params_.try_emplace(name, std::move(shape), std::move(values), true);
    if (!inserted) throw ContractViolation("duplicate parameter name '" + name + "'");
    return it->second;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : &it->second;
  }
  bool contains(const std::string& name) const { return params_.contains(name); }

  /// Removes every parameter whose name starts with `prefix`; returns the count.
  std::size_t erase_prefix(const std::string& prefix) {
    std::size_t n = 0;
    for (auto it = params_.lower_bound(prefix); it != params_.end() && it->first.starts_with(prefix);) {
      it = params_.erase(it);
      ++n;
    }
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) {
      t.ensure_grad();
      t.zero_grad();
    }
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
  }

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

  /// Value copy in another precision; gradients are not carried over.
  template <class U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, t] : params_) {
      out.add(name, t.shape, std::vector<U>(t.values.begin(), t.values.end()));
    }
    return out;
  }

 private:
  Map params_;
};

}  // namespace modt::diff
