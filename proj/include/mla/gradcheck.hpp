#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>

#include "mla/tape.hpp"

namespace mla {

// Builds a scalar loss on the given tape, registering the parameters under
// check as leaves. Called repeatedly at perturbed parameter values.
using LossBuilder = std::function<Var(Tape&)>;

// Central-difference gradient check in 64-bit mode. Returns the max over all
// parameter coordinates of |analytic - numeric| / max(1e-6, |analytic|, |numeric|).
double grad_check(const LossBuilder& build, std::span<Tensor* const> params,
                  double eps = 1e-5);

struct GradCheckReport {
  std::map<std::string, double> sections;
  double max_rel_error = 0.0;
  double wall_seconds = 0.0;
};

// Checks every differentiable operation on random instances, plus both full
// training losses evaluated through a small model with every parameter
// trainable. The whole battery runs in well under 30 seconds.
GradCheckReport run_grad_check_battery();

}  // namespace mla
