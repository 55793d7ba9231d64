#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lkc/core/tensor.hpp"

namespace lkc {

/// Ordered collection of uniquely named tensors (model parameters, buffers).
template <Real T>
class TensorMap {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
    bool operator==(const Entry&) const = default;
  };

  /// Inserts, or replaces the tensor of an existing entry in place.
  void set(const std::string& name, Tensor<T> tensor, bool trainable = true) {
    if (Entry* e = find(name)) {
      e->tensor = std::move(tensor);
      e->trainable = trainable;
      return;
    }
    entries_.push_back({name, std::move(tensor), trainable});
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  Tensor<T>& at(const std::string& name) {
    Entry* e = find(name);
    require(e != nullptr, "missing_tensor", "no tensor named '" + name + "'");
    return e->tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    const Entry* e = find(name);
    require(e != nullptr, "missing_tensor", "no tensor named '" + name + "'");
    return e->tensor;
  }

  void erase(const std::string& name) {
    std::erase_if(entries_, [&](const Entry& e) { return e.name == name; });
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t trainable_values() const {
    std::size_t n = 0;
    for (const Entry& e : entries_)
      if (e.trainable) n += e.tensor.size();
    return n;
  }

  bool operator==(const TensorMap&) const = default;

 private:
  Entry* find(const std::string& name) {
    for (Entry& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  const Entry* find(const std::string& name) const {
    for (const Entry& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::vector<Entry> entries_;
};

template <Real T>
using NamedGrads = std::vector<std::pair<std::string, Tensor<T>>>;

}  // namespace lkc
