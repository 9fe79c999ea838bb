#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace quadra {

/// One point on the memory curve.
struct LedgerEvent {
  std::string label;
  std::uint64_t cached = 0;    // bytes retained for backward
  std::uint64_t resident = 0;  // parameters + gradients + cached
};

struct LayerBytes {
  std::string layer;
  std::uint64_t cached = 0;
  std::uint64_t released = 0;
};

/// Byte accounting of intermediates held between forward and backward.
///
/// Parameters are resident for the whole step and enter only the `resident`
/// column; gradient bytes join it as each parameter's gradient is finalized.
class MemoryLedger {
 public:
  void set_parameter_bytes(std::uint64_t bytes);

  void cache(const std::string& layer, std::uint64_t bytes, const std::string& event);
  void release(const std::string& layer, std::uint64_t bytes, const std::string& event);
  void add_gradient(std::uint64_t bytes, const std::string& event);

  std::uint64_t cached() const { return cached_; }
  std::uint64_t resident() const { return param_bytes_ + grad_bytes_ + cached_; }
  std::uint64_t peak_cached() const { return peak_cached_; }
  std::uint64_t peak_resident() const { return peak_resident_; }
  std::uint64_t parameter_bytes() const { return param_bytes_; }
  std::uint64_t gradient_bytes() const { return grad_bytes_; }

  const std::vector<LedgerEvent>& timeline() const { return timeline_; }
  const std::vector<LayerBytes>& layers() const { return layers_; }
  /// Null when the layer never cached anything.
  const LayerBytes* layer(const std::string& name) const;
  std::uint64_t layer_cached(const std::string& name) const;

 private:
  LayerBytes& slot(const std::string& layer);
  void push(const std::string& event);

  std::uint64_t param_bytes_ = 0;
  std::uint64_t grad_bytes_ = 0;
  std::uint64_t cached_ = 0;
  std::uint64_t peak_cached_ = 0;
  std::uint64_t peak_resident_ = 0;
  std::vector<LedgerEvent> timeline_;
  std::vector<LayerBytes> layers_;
};

}  // namespace quadra
