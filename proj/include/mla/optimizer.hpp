#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mla/registry.hpp"

namespace mla {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over the trainable entries of a registry. Moment
// slots are created lazily for parameters that actually train. Row-sparse
// entries (embedding tables) update only rows carrying a nonzero gradient —
// skipped rows keep values and moments bit-identical — and honor the entry's
// row mask. Gradients of updated parameters are cleared after the step.
class AdamState {
 public:
  explicit AdamState(AdamParams p = {}) : p_(p) {}

  void step(ParamRegistry& reg, double lr);

  long steps_taken() const { return t_; }
  bool has_moments(const std::string& name) const { return slots_.count(name) != 0; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::unordered_map<std::string, Moments> slots_;
  AdamParams p_;
  long t_ = 0;
};

}  // namespace mla
