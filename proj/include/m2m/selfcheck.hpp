#pragma once

#include <string>
#include <vector>

#include "m2m/alignment.hpp"
#include "m2m/fusion.hpp"
#include "m2m/gradcheck.hpp"
#include "m2m/model.hpp"

namespace m2m {

struct NamedGradCheck {
  std::string name;
  GradCheckReport report;
};

namespace selfcheck_detail {

inline Tensor normal_tensor(Shape dims, Rng& rng, double stddev) {
  Tensor t(std::move(dims));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

// Random linear readout so every output entry carries a distinct gradient.
inline Var probe(Binder& b, const Var& out, const Tensor& weights) { return sum(mul(out, b.constant(weights))); }

}  // namespace selfcheck_detail

// Toy model for the full-loss check: c = 8, two spatial patches, two time tokens.
inline ModelConfig gradcheck_toy_model() {
  ModelConfig cfg;
  cfg.encoder.stage_channels = {8};
  cfg.encoder.heads = {2};
  cfg.volume = {4, 2, 2, 2};
  cfg.tabular_features = 3;
  cfg.init_std = 0.5;
  return cfg;
}

// Central-difference checks of co-attention, refinement, bottleneck, the M2M
// loss under every measure, and the full CE + λ·M2M model loss. Toy shapes:
// N ≤ 4 patches, c = 8, T ≤ 3.
inline std::vector<NamedGradCheck> gradient_suite(double h = 1e-5, std::uint64_t seed = 7) {
  using selfcheck_detail::normal_tensor;
  using selfcheck_detail::probe;
  std::vector<NamedGradCheck> out;
  Rng rng({seed, 1});

  {
    ParamStore p;
    p.add("queries", normal_tensor({3, 8}, rng, 1.0));
    p.add("joint", normal_tensor({4, 8}, rng, 1.0));
    init_attention(p, "att", 8, rng, 0.4);
    const Tensor w = normal_tensor({3, 8}, rng, 1.0);
    out.push_back({"co-attention", finite_diff_check(
                                       [&](Binder& b) { return probe(b, attend(b, b("queries"), b("joint"), "att").out, w); },
                                       p, h)});
  }
  {
    ParamStore p;
    p.add("modality", normal_tensor({4, 8}, rng, 1.0));
    p.add("fused", normal_tensor({3, 8}, rng, 1.0));
    init_attention(p, "ref", 8, rng, 0.4);
    const Tensor w = normal_tensor({4, 8}, rng, 1.0);
    out.push_back({"refinement", finite_diff_check(
                                     [&](Binder& b) { return probe(b, attend(b, b("modality"), b("fused"), "ref").out, w); },
                                     p, h)});
  }
  {
    ParamStore p;
    p.add("tokens", normal_tensor({3, 8}, rng, 1.0));
    init_bottleneck(p, "bn", 8, rng, 0.4);
    p.at("bn.pre_b") = normal_tensor({8}, rng, 0.1);
    const Tensor w = normal_tensor({3, 8}, rng, 1.0);
    out.push_back({"bottleneck", finite_diff_check(
                                     [&](Binder& b) { return probe(b, bottleneck_refine(b, b("tokens"), "bn"), w); }, p, h)});
  }
  {
    const TokenGrid g{2, 2, 1, 3};  // N = 4, T = 3
    const Tensor lf = normal_tensor({g.count(), 8}, rng, 0.7);
    const Tensor ls = normal_tensor({g.spatial(), 8}, rng, 0.7);
    for (Measure m : kAllMeasures) {
      M2MConfig cfg;
      cfg.measure = m;
      ParamStore p;
      p.add("lf", lf);
      p.add("ls", ls);
      // Weights are frozen at the base point, as the training loss treats them.
      const WeightMatrix frozen = token_weights(lf, g, ls, cfg);
      out.push_back({std::string("m2m-") + measure_name(m),
                     finite_diff_check([&](Binder& b) { return m2m_loss(b("lf"), g, b("ls"), frozen, cfg); }, p, h)});
    }
  }
  {
    const ModelConfig cfg = gradcheck_toy_model();
    Rng init({seed, 2});
    ParamStore p = init_model(cfg, Modalities{}, init);
    for (const char* b : {"head.b", "refine.f.pre_b", "tab.b1"})
      for (double& v : p.at(b).data()) v = init.normal(0.0, 0.1);
    VolumeSample s{normal_tensor({1, 4, 2, 2, 2}, rng, 1.0), normal_tensor({1, 4, 2, 2, 1}, rng, 1.0),
                   {rng.normal(), rng.normal(), rng.normal()}, 1};
    M2MConfig m2m;
    m2m.lambda = 0.5;
    const WeightMatrix frozen = [&] {
      Tape tape;
      Binder bind(tape, p);
      ForwardOutput f = forward(bind, cfg, Modalities{}, ModuleToggles{}, s);
      return token_weights(f.fmri->tokens.value(), f.fmri->grid, f.smri->tokens.value(), m2m);
    }();
    out.push_back({"full-model", finite_diff_check(
                                     [&](Binder& bind) {
                                       ForwardOutput f = forward(bind, cfg, Modalities{}, ModuleToggles{}, s);
                                       Var align = m2m_loss(f.fmri->tokens, f.fmri->grid, f.smri->tokens, frozen, m2m);
                                       return cross_entropy(f.logits, 1) + scale(align, m2m.lambda);
                                     },
                                     p, h)});
  }
  return out;
}

}  // namespace m2m
