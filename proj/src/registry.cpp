#include "mla/registry.hpp"

#include "mla/digest.hpp"
#include "mla/errors.hpp"

namespace mla {

const char* component_name(Component c) {
  switch (c) {
    case Component::TextEncoder: return "text_encoder";
    case Component::VisionEncoder: return "vision_encoder";
    case Component::NonNativeEmbedding: return "nonnative_embedding";
    case Component::Acquirer: return "acquirer";
    case Component::Heads: return "heads";
  }
  return "?";
}

Component component_from_name(const std::string& name) {
  for (Component c : {Component::TextEncoder, Component::VisionEncoder,
                      Component::NonNativeEmbedding, Component::Acquirer, Component::Heads})
    if (name == component_name(c)) return c;
  raise(ErrorCode::Parse, "unknown component tag: " + name);
}

ParamEntry& ParamRegistry::add(std::string name, Component c, std::string language,
                               Tensor tensor, bool row_sparse) {
  if (by_name_.count(name))
    raise(ErrorCode::Contract, "parameter registered twice: " + name);
  auto e = std::make_unique<ParamEntry>();
  e->name = std::move(name);
  e->component = c;
  e->language = std::move(language);
  e->tensor = std::move(tensor);
  e->row_sparse = row_sparse;
  ParamEntry* raw = e.get();
  entries_.push_back(std::move(e));
  by_name_[raw->name] = raw;
  return *raw;
}

ParamEntry* ParamRegistry::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const ParamEntry* ParamRegistry::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

ParamEntry& ParamRegistry::at(const std::string& name) {
  ParamEntry* e = find(name);
  if (!e) raise(ErrorCode::Contract, "unknown parameter: " + name);
  return *e;
}

const ParamEntry& ParamRegistry::at(const std::string& name) const {
  const ParamEntry* e = find(name);
  if (!e) raise(ErrorCode::Contract, "unknown parameter: " + name);
  return *e;
}

void ParamRegistry::for_each(const std::function<void(ParamEntry&)>& fn) {
  for (auto& e : entries_) fn(*e);
}

void ParamRegistry::for_each(const std::function<void(const ParamEntry&)>& fn) const {
  for (const auto& e : entries_) fn(*e);
}

uint64_t ParamRegistry::digest(const std::function<bool(const ParamEntry&)>& filter) const {
  Fnv1a64 h;
  for (const auto& e : entries_) {
    if (!filter(*e)) continue;
    h.update(e->name.data(), e->name.size());
    for (int d : e->tensor.shape()) h.update_u64(static_cast<uint64_t>(d));
    h.update_f32(e->tensor.values());
  }
  return h.value();
}

size_t ParamRegistry::count_values(const std::function<bool(const ParamEntry&)>& filter) const {
  size_t n = 0;
  for (const auto& e : entries_)
    if (filter(*e)) n += e->tensor.numel();
  return n;
}

void ParamRegistry::clear_grads() {
  for (auto& e : entries_) e->tensor.clear_grad();
}

}  // namespace mla
