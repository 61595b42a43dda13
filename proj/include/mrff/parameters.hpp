#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mrff/errors.hpp"
#include "mrff/tensor.hpp"

namespace mrff {

enum class Partition : std::uint8_t {
  kPrivate = 0,  // stays on the client
  kGlobal = 1,   // averaged over all participants
  kGroup = 2,    // averaged within one (block, group)
};

struct PartitionTag {
  Partition kind = Partition::kGlobal;
  int block = -1;
  int group = -1;

  static PartitionTag private_tag() { return {Partition::kPrivate, -1, -1}; }
  static PartitionTag global_tag() { return {Partition::kGlobal, -1, -1}; }
  static PartitionTag group_tag(int block, int group) { return {Partition::kGroup, block, group}; }

  bool operator==(const PartitionTag&) const = default;

  std::string str() const {
    switch (kind) {
      case Partition::kPrivate:
        return "PRIVATE";
      case Partition::kGlobal:
        return "GLOBAL";
      case Partition::kGroup:
        return "GROUP(" + std::to_string(block) + "," + std::to_string(group) + ")";
    }
    return "?";
  }
};

// Named, partition-tagged parameters of one model. Ordered by name so that
// every traversal (init, aggregation, serialization) is deterministic.
template <typename Real>
class ParameterSet {
 public:
  struct Entry {
    Tensor<Real> tensor;
    PartitionTag tag;
    bool trainable = true;
  };

  void insert(const std::string& name, Tensor<Real> tensor, PartitionTag tag) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(tensor), tag, true});
    if (!inserted) throw ContractError("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<Real>& at(const std::string& name) const { return entry(name).tensor; }
  const PartitionTag& tag(const std::string& name) const { return entry(name).tag; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter name: " + name);
    return it->second;
  }

  void set_trainable(const std::string& name, bool trainable) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter name: " + name);
    it->second.trainable = trainable;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names(Partition kind) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_)
      if (e.tag.kind == kind) out.push_back(name);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.tensor.numel();
    return n;
  }

  // Shallow subset: the returned set shares tensors with this one.
  ParameterSet select(const std::function<bool(const std::string&, const PartitionTag&)>& keep) const {
    ParameterSet out;
    for (const auto& [name, e] : entries_)
      if (keep(name, e.tag)) out.entries_.emplace(name, e);
    return out;
  }

  // Independent copies of every tensor (leaves requiring grad).
  ParameterSet deep_copy() const {
    ParameterSet out;
    for (const auto& [name, e] : entries_) {
      out.entries_.emplace(name, Entry{e.tensor.clone(true), e.tag, e.trainable});
    }
    return out;
  }

  // Adds the other set's entries as shared handles; names must not collide.
  void merge_shared(const ParameterSet& other) {
    for (const auto& [name, e] : other.entries_) {
      if (!entries_.emplace(name, e).second) throw ContractError("duplicate parameter name: " + name);
    }
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) e.tensor.zero_grad();
  }

 private:
  std::map<std::string, Entry, std::less<>> entries_;
};

}  // namespace mrff
