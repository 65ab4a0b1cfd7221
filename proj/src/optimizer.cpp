#include "mla/optimizer.hpp"

#include <cmath>

#include "mla/errors.hpp"

namespace mla {

void AdamState::step(ParamRegistry& reg, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(p_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(p_.beta2, static_cast<double>(t_));

  reg.for_each([&](ParamEntry& e) {
    if (!e.trainable) return;
    const std::vector<double>* g = e.tensor.grad();
    if (!g)
      raise(ErrorCode::Contract, "missing gradient on trainable parameter " + e.name);

    Moments& mo = slots_[e.name];
    if (mo.m.size() != e.tensor.numel()) {
      // Zero-extend when an embedding table grew since the last step.
      mo.m.resize(e.tensor.numel(), 0.0);
      mo.v.resize(e.tensor.numel(), 0.0);
    }

    auto update_range = [&](size_t lo, size_t hi) {
      for (size_t i = lo; i < hi; ++i) {
        const double gi = (*g)[i];
        mo.m[i] = p_.beta1 * mo.m[i] + (1.0 - p_.beta1) * gi;
        mo.v[i] = p_.beta2 * mo.v[i] + (1.0 - p_.beta2) * gi * gi;
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        e.tensor.set(i, e.tensor[i] - lr * mhat / (std::sqrt(vhat) + p_.eps));
      }
    };

    if (e.row_sparse && e.tensor.rank() == 2) {
      const size_t rows = static_cast<size_t>(e.tensor.dim(0));
      const size_t width = static_cast<size_t>(e.tensor.dim(1));
      for (size_t r = 0; r < rows; ++r) {
        if (e.row_mask && (r >= e.row_mask->size() || !(*e.row_mask)[r])) continue;
        bool touched = false;
        for (size_t i = r * width; i < (r + 1) * width; ++i)
          if ((*g)[i] != 0.0) {
            touched = true;
            break;
          }
        if (touched) update_range(r * width, (r + 1) * width);
      }
    } else {
      update_range(0, e.tensor.numel());
    }
    e.tensor.clear_grad();
  });
}

}  // namespace mla
