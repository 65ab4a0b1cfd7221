#pragma once

#include <string>

#include "mla/tape.hpp"

namespace mla {

enum class Objective { Mse, Nce };
const char* objective_name(Objective o);
Objective objective_from_name(const std::string& name);

struct LossConfig {
  double temperature = 0.01;
  Objective nlt_objective = Objective::Mse;
  Objective le_objective = Objective::Nce;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

// Cosine similarity of two vectors (or single-row matrices).
double cosine_sim(const Tensor& x, const Tensor& y);
Var cosine_sim(Tape& t, Var x, Var y);

// Mean over the batch of the squared Euclidean distance between paired rows.
Var nlt_loss(Tape& t, Var native, Var nonnative);

// Symmetric in-batch contrastive loss over cosine similarities scaled by
// 1/tau; row i of each side is the positive for row i of the other.
Var le_loss(Tape& t, Var images, Var texts, double tau);

// Unweighted sum of the two objectives on their respective batches.
Var joint_loss(Tape& t, Var native, Var nonnative, Var images, Var texts,
               const LossConfig& cfg);

// Objective dispatch used by the stage drivers and the swap ablations:
// Mse treats (anchor, other) exactly like translation pairs, Nce exactly
// like image-text pairs.
Var pair_loss(Tape& t, Objective o, Var anchor, Var other, double tau);

}  // namespace mla
