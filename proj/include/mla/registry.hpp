#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mla/tensor.hpp"

namespace mla {

// Owner component of a parameter. Text and vision encoder weights are frozen
// after pre-training; acquirers belong to exactly one language.
enum class Component { TextEncoder, VisionEncoder, NonNativeEmbedding, Acquirer, Heads };

const char* component_name(Component c);
Component component_from_name(const std::string& name);

struct ParamEntry {
  std::string name;
  Component component;
  std::string language;  // acquirer owner tag; empty otherwise
  Tensor tensor;
  bool trainable = false;
  // Embedding tables take per-row optimizer updates; rows whose gradient is
  // zero keep their values and moments untouched.
  bool row_sparse = false;
  // When present on a row-sparse entry, restricts updates to the listed rows.
  std::optional<std::vector<uint8_t>> row_mask;
};

// Ordered, name-addressed parameter store. Iteration order is registration
// order and fixes the checkpoint layout and digest order.
class ParamRegistry {
 public:
  ParamEntry& add(std::string name, Component c, std::string language, Tensor tensor,
                  bool row_sparse = false);
  ParamEntry* find(const std::string& name);
  const ParamEntry* find(const std::string& name) const;
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  ParamEntry& entry(size_t i) { return *entries_[i]; }
  const ParamEntry& entry(size_t i) const { return *entries_[i]; }

  void for_each(const std::function<void(ParamEntry&)>& fn);
  void for_each(const std::function<void(const ParamEntry&)>& fn) const;

  uint64_t digest(const std::function<bool(const ParamEntry&)>& filter) const;
  size_t count_values(const std::function<bool(const ParamEntry&)>& filter) const;
  void clear_grads();

 private:
  std::vector<std::unique_ptr<ParamEntry>> entries_;
  std::unordered_map<std::string, ParamEntry*> by_name_;
};

}  // namespace mla
