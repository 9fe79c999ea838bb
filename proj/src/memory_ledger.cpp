#include "quadra/memory_ledger.hpp"

#include <algorithm>

#include "quadra/error.hpp"

namespace quadra {

void MemoryLedger::set_parameter_bytes(std::uint64_t bytes) {
  param_bytes_ = bytes;
  push("parameters");
}

LayerBytes& MemoryLedger::slot(const std::string& layer) {
  auto it = std::find_if(layers_.begin(), layers_.end(),
                         [&](const LayerBytes& l) { return l.layer == layer; });
  if (it != layers_.end()) return *it;
  layers_.push_back({layer, 0, 0});
  return layers_.back();
}

void MemoryLedger::push(const std::string& event) {
  peak_cached_ = std::max(peak_cached_, cached_);
  peak_resident_ = std::max(peak_resident_, resident());
  timeline_.push_back({event, cached_, resident()});
}

void MemoryLedger::cache(const std::string& layer, std::uint64_t bytes, const std::string& event) {
  slot(layer).cached += bytes;
  cached_ += bytes;
  push(event);
}

void MemoryLedger::release(const std::string& layer, std::uint64_t bytes,
                           const std::string& event) {
  auto& s = slot(layer);
  if (bytes > cached_ || s.released + bytes > s.cached) {
    throw IntegrityError("trainer", "ledger release of " + std::to_string(bytes) +
                                        " bytes exceeds what layer '" + layer + "' cached");
  }
  s.released += bytes;
  cached_ -= bytes;
  push(event);
}

void MemoryLedger::add_gradient(std::uint64_t bytes, const std::string& event) {
  grad_bytes_ += bytes;
  push(event);
}

const LayerBytes* MemoryLedger::layer(const std::string& name) const {
  auto it = std::find_if(layers_.begin(), layers_.end(),
                         [&](const LayerBytes& l) { return l.layer == name; });
  return it == layers_.end() ? nullptr : &*it;
}

std::uint64_t MemoryLedger::layer_cached(const std::string& name) const {
  const auto* l = layer(name);
  return l ? l->cached : 0;
}

}  // namespace quadra
