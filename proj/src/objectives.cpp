#include "mla/objectives.hpp"

#include <cmath>

#include "mla/errors.hpp"

namespace mla {

const char* objective_name(Objective o) { return o == Objective::Mse ? "mse" : "nce"; }

Objective objective_from_name(const std::string& name) {
  if (name == "mse") return Objective::Mse;
  if (name == "nce") return Objective::Nce;
  raise(ErrorCode::Parse, "unknown objective: " + name);
}

void LossConfig::validate() const {
  if (!(temperature > 0.0))
    raise(ErrorCode::Config, "loss.temperature must be > 0");
}

double cosine_sim(const Tensor& x, const Tensor& y) {
  if (x.numel() != y.numel())
    raise(ErrorCode::Shape, "cosine_sim: " + x.shape_str() + " vs " + y.shape_str());
  double xx = 0, yy = 0, xy = 0;
  for (size_t i = 0; i < x.numel(); ++i) {
    xx += x[i] * x[i];
    yy += y[i] * y[i];
    xy += x[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0)
    raise(ErrorCode::Degenerate, "cosine_sim: zero-norm vector");
  return xy / (std::sqrt(xx) * std::sqrt(yy));
}

Var cosine_sim(Tape& t, Var x, Var y) {
  return t.sum(t.mul(t.normalize_rows(x), t.normalize_rows(y)));
}

Var nlt_loss(Tape& t, Var native, Var nonnative) {
  const Tensor& a = t.value(native);
  const Tensor& b = t.value(nonnative);
  if (!a.same_shape(b) || a.rank() != 2 || a.dim(0) < 1)
    raise(ErrorCode::Shape,
          "nlt_loss: expected equal [B x p] batches, got " + a.shape_str() + " vs " +
              b.shape_str());
  Var d = t.sub(native, nonnative);
  return t.scale(t.sum(t.mul(d, d)), 1.0 / a.dim(0));
}

Var le_loss(Tape& t, Var images, Var texts, double tau) {
  if (!(tau > 0.0)) raise(ErrorCode::InvalidArgument, "le_loss: tau must be > 0");
  const Tensor& a = t.value(images);
  const Tensor& b = t.value(texts);
  if (!a.same_shape(b) || a.rank() != 2 || a.dim(0) < 1)
    raise(ErrorCode::Shape,
          "le_loss: expected equal [B x p] batches, got " + a.shape_str() + " vs " +
              b.shape_str());
  Var sims = t.scale(t.matmul(t.normalize_rows(images), t.transpose(t.normalize_rows(texts))),
                     1.0 / tau);
  Var pos = t.diagonal(sims);
  Var l_v2t = t.mean_all(t.sub(t.logsumexp_rows(sims), pos));
  Var l_t2v = t.mean_all(t.sub(t.logsumexp_rows(t.transpose(sims)), pos));
  return t.scale(t.add(l_v2t, l_t2v), 0.5);
}

Var joint_loss(Tape& t, Var native, Var nonnative, Var images, Var texts,
               const LossConfig& cfg) {
  cfg.validate();
  return t.add(pair_loss(t, cfg.nlt_objective, native, nonnative, cfg.temperature),
               pair_loss(t, cfg.le_objective, images, texts, cfg.temperature));
}

Var pair_loss(Tape& t, Objective o, Var anchor, Var other, double tau) {
  return o == Objective::Mse ? nlt_loss(t, anchor, other) : le_loss(t, anchor, other, tau);
}

}  // namespace mla
