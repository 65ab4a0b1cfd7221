#include "mla/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mla/errors.hpp"
#include "mla/model.hpp"
#include "mla/objectives.hpp"
#include "mla/rng.hpp"

namespace mla {

double grad_check(const LossBuilder& build, std::span<Tensor* const> params, double eps) {
  for (Tensor* p : params)
    if (p->dtype() != Dtype::F64)
      raise(ErrorCode::Contract, "grad_check requires 64-bit parameters");

  // Analytic pass.
  for (Tensor* p : params) p->clear_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape(Dtype::F64);
    Var loss = build(tape);
    tape.backward(loss);
    for (Tensor* p : params) {
      const std::vector<double>* g = p->grad();
      analytic.push_back(g ? *g : std::vector<double>(p->numel(), 0.0));
      p->clear_grad();
    }
  }

  auto eval = [&]() {
    Tape tape(Dtype::F64, /*record_grads=*/false);
    return tape.scalar(build(tape));
  };

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (size_t i = 0; i < p->numel(); ++i) {
      const double saved = (*p)[i];
      p->set(i, saved + eps);
      const double fp = eval();
      p->set(i, saved - eps);
      const double fm = eval();
      p->set(i, saved);
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) / std::max({1e-6, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape), Dtype::F64);
  for (size_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
  return t;
}

// Keeps values away from the ReLU kink so central differences stay clean.
Tensor random_tensor_off_kink(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape), Dtype::F64);
  for (size_t i = 0; i < t.numel(); ++i) {
    double v = rng.normal();
    if (std::abs(v) < 0.1) v = v < 0 ? v - 0.1 : v + 0.1;
    t.set(i, v);
  }
  return t;
}

// Project the op output against fixed random weights so the loss depends on
// every output coordinate with distinct sensitivities.
Var weighted_readout(Tape& t, Var out, const Tensor& weights) {
  return t.sum(t.mul(out, t.constant(weights)));
}

}  // namespace

GradCheckReport run_grad_check_battery() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  auto section = [&](const std::string& name, double value) {
    report.sections[name] = value;
    report.max_rel_error = std::max(report.max_rel_error, value);
  };

  Rng root(20240817);

  // Primitive operations, three random instances each.
  {
    struct OpCase {
      std::string name;
      std::function<double(Rng)> run;
    };
    auto run_simple = [](Rng rng, std::vector<std::vector<int>> shapes,
                         const std::function<Var(Tape&, const std::vector<Var>&)>& body,
                         bool off_kink = false) {
      double worst = 0.0;
      for (int inst = 0; inst < 3; ++inst) {
        Rng r = rng.fork(static_cast<uint64_t>(inst));
        std::vector<Tensor> params;
        for (auto& s : shapes)
          params.push_back(off_kink ? random_tensor_off_kink(s, r) : random_tensor(s, r));
        std::vector<Tensor*> ptrs;
        for (auto& p : params) ptrs.push_back(&p);
        auto builder = [&](Tape& t) {
          std::vector<Var> leaves;
          for (Tensor* p : ptrs) leaves.push_back(t.leaf(p, true));
          return body(t, leaves);
        };
        worst = std::max(worst, grad_check(builder, ptrs));
      }
      return worst;
    };

    auto readout = [&](Rng r, std::vector<int> shape) {
      return random_tensor(std::move(shape), r);
    };

    {
      Rng r = root.fork("matmul");
      Tensor w = readout(r.fork("w"), {4, 3});
      section("op.matmul", run_simple(r, {{4, 5}, {5, 3}}, [&](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.matmul(v[0], v[1]), w);
              }));
    }
    {
      Rng r = root.fork("affine");
      Tensor w = readout(r.fork("w"), {4, 3});
      section("op.affine", run_simple(r, {{4, 5}, {5, 3}, {3}}, [&](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.affine(v[0], v[1], v[2]), w);
              }));
    }
    {
      Rng r = root.fork("addsubmul");
      Tensor w = readout(r.fork("w"), {3, 4});
      section("op.add_sub_mul",
              run_simple(r, {{3, 4}, {3, 4}, {3, 4}}, [&](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(
                    t, t.mul(t.add(v[0], v[1]), t.sub(v[0], v[2])), w);
              }));
    }
    {
      Rng r = root.fork("scale_relu_gelu");
      Tensor w = readout(r.fork("w"), {3, 4});
      section("op.scale_relu_gelu",
              run_simple(
                  r, {{3, 4}}, [&](Tape& t, const std::vector<Var>& v) {
                    return weighted_readout(t, t.gelu(t.relu(t.scale(v[0], 1.7))), w);
                  },
                  /*off_kink=*/true));
    }
    {
      Rng r = root.fork("transpose_slice");
      Tensor w = readout(r.fork("w"), {2, 3});
      section("op.transpose_slice",
              run_simple(r, {{4, 6}}, [&](Tape& t, const std::vector<Var>& v) {
                Var s = t.slice_cols(t.slice_rows(v[0], 1, 4), 2, 4);  // [3 x 2]
                return weighted_readout(t, t.transpose(s), w);
              }));
    }
    {
      Rng r = root.fork("concat_stack");
      Tensor w = readout(r.fork("w"), {5, 3});
      section("op.concat_stack",
              run_simple(r, {{2, 3}, {2, 3}, {3}}, [&](Tape& t, const std::vector<Var>& v) {
                Var one = t.stack_rows({v[2]});
                return weighted_readout(t, t.concat_rows({v[0], v[1], one}), w);
              }));
    }
    {
      Rng r = root.fork("softmax");
      Tensor w = readout(r.fork("w"), {3, 5});
      BoolMask m = BoolMask::all_true(3, 5);
      m.keep[2] = 0;  // row 0, col 2 masked
      m.keep[9] = 0;  // row 1, col 4 masked
      section("op.softmax_rows",
              run_simple(r, {{3, 5}}, [&, m](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.softmax_rows(v[0], m), w);
              }));
    }
    {
      Rng r = root.fork("layer_norm");
      Tensor w = readout(r.fork("w"), {4, 6});
      section("op.layer_norm",
              run_simple(r, {{4, 6}, {6}, {6}}, [&](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.layer_norm(v[0], v[1], v[2], 1e-5), w);
              }));
    }
    {
      Rng r = root.fork("embedding");
      Tensor w = readout(r.fork("w"), {5, 4});
      std::vector<int> ids = {0, 3, 3, 1, 6};
      section("op.embedding_rows",
              run_simple(r, {{7, 4}}, [&, ids](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.embedding_rows(v[0], ids), w);
              }));
    }
    {
      Rng r = root.fork("attention");
      Tensor w = readout(r.fork("w"), {5, 6});
      section("op.attention_causal",
              run_simple(r, {{5, 6}, {5, 6}, {5, 6}}, [&](Tape& t, const std::vector<Var>& v) {
                return weighted_readout(t, t.attention(v[0], v[1], v[2], 2, true), w);
              }));
      section("op.attention_full",
              run_simple(r.fork("full"), {{5, 6}, {5, 6}, {5, 6}},
                         [&](Tape& t, const std::vector<Var>& v) {
                           return weighted_readout(t, t.attention(v[0], v[1], v[2], 3, false), w);
                         }));
    }
    {
      Rng r = root.fork("normalize_lse_diag");
      Tensor w = readout(r.fork("w"), {4});
      section("op.normalize_logsumexp_diagonal",
              run_simple(r, {{4, 4}}, [&](Tape& t, const std::vector<Var>& v) {
                Var n = t.normalize_rows(v[0]);
                Var s = t.matmul(n, t.transpose(n));
                Var lse = t.logsumexp_rows(s);
                Var d = t.diagonal(s);
                return t.sum(t.mul(t.sub(lse, d), t.constant(w)));
              }));
    }
    {
      Rng r = root.fork("reductions");
      section("op.sum_mean", run_simple(r, {{3, 5}}, [&](Tape& t, const std::vector<Var>& v) {
                return t.add(t.sum(v[0]), t.mean_all(t.mul(v[0], v[0])));
              }));
    }
  }

  // Objectives on raw embeddings.
  {
    Rng r = root.fork("objectives");
    for (int inst = 0; inst < 3; ++inst) {
      Rng ri = r.fork(static_cast<uint64_t>(inst));
      Tensor a = random_tensor({4, 6}, ri);
      Tensor b = random_tensor({4, 6}, ri);
      Tensor c = random_tensor({4, 6}, ri);
      Tensor d = random_tensor({4, 6}, ri);
      std::vector<Tensor*> ps = {&a, &b, &c, &d};
      LossConfig lc;
      lc.temperature = 0.01;
      auto builder = [&](Tape& t) {
        return joint_loss(t, t.leaf(&a, true), t.leaf(&b, true), t.leaf(&c, true),
                          t.leaf(&d, true), lc);
      };
      double v = grad_check(builder, ps);
      auto it = report.sections.find("objectives.joint");
      report.sections["objectives.joint"] = it == report.sections.end() ? v : std::max(it->second, v);
      report.max_rel_error = std::max(report.max_rel_error, v);
    }
  }

  // Full losses through a small model, every parameter trainable so each
  // backward path in the encoders is exercised.
  {
    ModelConfig mc;
    mc.num_layers = 2;
    mc.model_dim = 8;
    mc.num_heads = 2;
    mc.ffn_dim = 12;
    mc.proj_dim = 4;
    mc.acquirer_hidden = 4;
    mc.embed_dim = 6;
    mc.max_text_len = 8;
    mc.patch_count = 3;
    mc.patch_dim = 5;
    std::vector<std::string> words = {"aa", "bb", "cc", "dd"};
    Model model(mc, words, 99, Dtype::F64);
    std::vector<std::string> surface = {"z_aa", "z_bb", "z_cc", "z_dd"};
    model.add_language("zz", surface, 7);
    model.registry().for_each([](ParamEntry& e) { e.trainable = true; });
    std::vector<Tensor*> params;
    model.registry().for_each([&](ParamEntry& e) { params.push_back(&e.tensor); });

    const std::vector<std::vector<std::string>> native_sents = {{"aa", "bb"}, {"cc", "dd", "aa"}};
    const std::vector<std::vector<std::string>> surface_sents = {{"z_aa", "z_bb"},
                                                                 {"z_cc", "z_dd", "z_aa"}};
    auto nlt_builder = [&](Tape& t) {
      std::vector<Var> nat, non;
      for (size_t i = 0; i < native_sents.size(); ++i) {
        nat.push_back(model.build_native_text(t, model.native_ids(native_sents[i])));
        non.push_back(model.build_nonnative_text(t, model.nonnative_ids(surface_sents[i]), "zz"));
      }
      return nlt_loss(t, t.stack_rows(nat), t.stack_rows(non));
    };
    section("loss.nlt_through_model", grad_check(nlt_builder, params));

    Rng ir = root.fork("images");
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(random_tensor({3, 5}, ir, 0.8));
    const std::vector<std::vector<std::string>> le_sents = {
        {"z_aa"}, {"z_bb", "z_cc"}, {"z_dd"}, {"z_aa", "z_dd"}};
    auto le_builder = [&](Tape& t) {
      std::vector<Var> v, s;
      for (size_t i = 0; i < imgs.size(); ++i) {
        v.push_back(model.build_image(t, imgs[i]));
        s.push_back(model.build_nonnative_text(t, model.nonnative_ids(le_sents[i]), "zz"));
      }
      return le_loss(t, t.stack_rows(v), t.stack_rows(s), 0.01);
    };
    section("loss.le_through_model", grad_check(le_builder, params));
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace mla
