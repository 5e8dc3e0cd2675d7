#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "isg/autodiff.hpp"

namespace isg {

// Named parameter registry. Insertion order is the serialization and update
// order, so checkpoints and optimizer steps are reproducible run to run.
template <class S>
struct ParamStoreT {
  std::vector<std::pair<std::string, VarT<S>>> items;
  std::unordered_map<std::string, std::size_t> index;

  VarT<S> add(const std::string& name, TensorT<S> init, bool requires_grad = true) {
    require(!index.count(name), Err::InvalidConfig, "duplicate parameter: " + name);
    auto v = leaf(std::move(init), requires_grad);
    index.emplace(name, items.size());
    items.emplace_back(name, v);
    return v;
  }

  VarT<S> get(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), Err::MissingArtifact, "parameter not found: " + name);
    return items[it->second].second;
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }
  std::size_t size() const { return items.size(); }

  std::vector<VarT<S>> trainable() const {
    std::vector<VarT<S>> out;
    for (const auto& [name, v] : items)
      if (v->requires_grad) out.push_back(v);
    return out;
  }

  void zero_grads() const {
    for (const auto& [name, v] : items) zero_grad(v);
  }
};

using ParamStore = ParamStoreT<double>;

}  // namespace isg
