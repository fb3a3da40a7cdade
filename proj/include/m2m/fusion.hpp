#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "m2m/autograd.hpp"
#include "m2m/encoders.hpp"
#include "m2m/params.hpp"

namespace m2m {

// Query/key/value projections of one attention role. Tokens are rows, so a
// projection reads x·W.
struct AttentionWeights {
  Tensor wq, wk, wv;  // (c, c) each
};

struct BottleneckParams {
  Tensor pre_w;   // (c, c)
  Tensor pre_b;   // (c)
  Tensor p_down;  // (c, c/4)
  Tensor p_up;    // (c/4, c)
};

enum class StCombine { kGate, kOuter };

struct AttentionResult {
  Var out;     // (n, c)
  Var scores;  // (n, m) softmax rows
};

// softmax((Q Wq)(KV Wk)^T / sqrt(c)) · (KV Wv). Serves both the latent-query
// co-attention (queries = learned latents) and the modality refinement
// (queries = a modality's own tokens, keys/values = the fused tokens).
inline AttentionResult attend(const Var& queries, const Var& keys_values, const Var& wq,
                              const Var& wk, const Var& wv) {
  if (keys_values.value().rank() != 2 || keys_values.dims()[0] == 0)
    throw ContractError("attention needs at least one key token");
  if (queries.dims()[1] != keys_values.dims()[1])
    throw ShapeError("attention channel mismatch: queries " + shape_str(queries.dims()) +
                     ", keys " + shape_str(keys_values.dims()));
  const double c = static_cast<double>(queries.dims()[1]);
  Var q = matmul(queries, wq);
  Var k = matmul(keys_values, wk);
  Var v = matmul(keys_values, wv);
  Var scores = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(c)));
  return {matmul(scores, v), scores};
}

inline AttentionResult attend(Binder& bind, const Var& queries, const Var& keys_values,
                              const std::string& prefix) {
  return attend(queries, keys_values, bind(prefix + ".wq"), bind(prefix + ".wk"),
                bind(prefix + ".wv"));
}

namespace fusion_detail {
struct PlainAttention {
  Tensor out;
  Tensor scores;
};

inline PlainAttention attend_plain(const Tensor& queries, const Tensor& kv,
                                   const AttentionWeights& w) {
  Tape tape;
  AttentionResult r = attend(tape.constant(queries), tape.constant(kv), tape.constant(w.wq),
                             tape.constant(w.wk), tape.constant(w.wv));
  return {r.out.value(), r.scores.value()};
}
}  // namespace fusion_detail

// Latent-query co-attention over the joint token set. `scores` receives the
// (n, m) attention matrix when non-null.
inline Tensor latent_query_coattention(const Tensor& queries, const Tensor& joint,
                                       const AttentionWeights& w, Tensor* scores = nullptr) {
  auto r = fusion_detail::attend_plain(queries, joint, w);
  if (scores) *scores = r.scores;
  return r.out;
}

// Modality tokens (k, c) attend over the fused tokens; output keeps k rows.
inline Tensor refine_with_joint(const Tensor& modality, const Tensor& joint,
                                const AttentionWeights& w, Tensor* scores = nullptr) {
  auto r = fusion_detail::attend_plain(modality, joint, w);
  if (scores) *scores = r.scores;
  return r.out;
}

struct TemporalFusionResult {
  Var out;            // (t, c)
  Var latent_scores;  // (M_q, t): temporal latent queries over time tokens
  Var self_scores;    // (t, M_q): time tokens over the fused temporal latents
};

// Two-step temporal self-fusion: learned temporal queries attend over the time
// tokens, then the time tokens attend over that fused result.
inline TemporalFusionResult temporal_self_fusion(const Var& time_tokens, const Var& temporal_queries,
                                                 const Var& wq1, const Var& wk1, const Var& wv1,
                                                 const Var& wq2, const Var& wk2, const Var& wv2) {
  AttentionResult joint = attend(temporal_queries, time_tokens, wq1, wk1, wv1);
  AttentionResult self = attend(time_tokens, joint.out, wq2, wk2, wv2);
  return {self.out, joint.scores, self.scores};
}

inline Tensor temporal_self_fusion(const Tensor& time_tokens, const Tensor& temporal_queries,
                                   const AttentionWeights& latent, const AttentionWeights& self) {
  Tape t;
  return temporal_self_fusion(t.constant(time_tokens), t.constant(temporal_queries),
                              t.constant(latent.wq), t.constant(latent.wk), t.constant(latent.wv),
                              t.constant(self.wq), t.constant(self.wk), t.constant(self.wv))
      .out.value();
}

// Gate mode: out[i] = spatial[i] ⊙ mean_t(temporal). Outer mode: one token per
// (spatial i, time τ) pair, spatial[i] ⊙ temporal[τ], ordered i-major.
inline Var combine_spatiotemporal(const Var& spatial, const Var& temporal,
                                  StCombine mode = StCombine::kGate) {
  if (spatial.dims()[1] != temporal.dims()[1])
    throw ShapeError("combine_spatiotemporal channel mismatch");
  if (mode == StCombine::kGate) return mul_rowvec(spatial, mean_rows(temporal));
  const std::size_t k = spatial.dims()[0], t = temporal.dims()[0], c = spatial.dims()[1];
  auto si = std::make_shared<std::vector<std::size_t>>();
  auto ti = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t tau = 0; tau < t; ++tau)
      for (std::size_t ch = 0; ch < c; ++ch) {
        si->push_back(i * c + ch);
        ti->push_back(tau * c + ch);
      }
  return mul(gather(spatial, si, {k * t, c}), gather(temporal, ti, {k * t, c}));
}

inline Tensor combine_spatiotemporal(const Tensor& spatial, const Tensor& temporal,
                                     StCombine mode = StCombine::kGate) {
  Tape t;
  return combine_spatiotemporal(t.constant(spatial), t.constant(temporal), mode).value();
}

// out = H' + P_up(GELU(P_down(H'))) with H' = GELU(H·W + b).
inline Var bottleneck_refine(const Var& tokens, const Var& pre_w, const Var& pre_b,
                             const Var& p_down, const Var& p_up) {
  const std::size_t c = tokens.dims()[1];
  if (c % 4 != 0)
    throw ConfigError("bottleneck width " + std::to_string(c) + " is not divisible by 4");
  Var h = gelu(add_rowvec(matmul(tokens, pre_w), pre_b));
  return h + matmul(gelu(matmul(h, p_down)), p_up);
}

inline Var bottleneck_refine(Binder& bind, const Var& tokens, const std::string& prefix) {
  return bottleneck_refine(tokens, bind(prefix + ".pre_w"), bind(prefix + ".pre_b"),
                           bind(prefix + ".p_down"), bind(prefix + ".p_up"));
}

inline Tensor bottleneck_refine(const Tensor& tokens, const BottleneckParams& p) {
  if (tokens.dims().back() % 4 != 0)
    throw ConfigError("bottleneck width " + std::to_string(tokens.dims().back()) +
                      " is not divisible by 4");
  Tape t;
  return bottleneck_refine(t.constant(tokens), t.constant(p.pre_w), t.constant(p.pre_b),
                           t.constant(p.p_down), t.constant(p.p_up))
      .value();
}

// Mean-pools each present token set, concatenates, projects to two logits.
inline Var classify(const std::vector<Var>& refined, const Var& head_w, const Var& head_b,
                    Var* pooled_out = nullptr) {
  if (refined.empty()) throw ConfigError("classification needs at least one modality");
  std::vector<Var> pooled;
  for (const Var& r : refined) pooled.push_back(mean_rows(r));
  Var cat = pooled.size() == 1 ? pooled.front() : concat_cols(pooled);
  if (cat.dims()[1] != head_w.dims()[0])
    throw ShapeError("head expects input width " + std::to_string(head_w.dims()[0]) + ", got " +
                     std::to_string(cat.dims()[1]));
  if (pooled_out) *pooled_out = cat;
  return add_rowvec(matmul(cat, head_w), head_b);
}

inline void init_attention(ParamStore& store, const std::string& prefix, std::size_t c, Rng& rng,
                           double init_std) {
  for (const char* m : {".wq", ".wk", ".wv"}) store.add_normal(prefix + m, {c, c}, rng, init_std);
}

inline void init_bottleneck(ParamStore& store, const std::string& prefix, std::size_t c, Rng& rng,
                            double init_std) {
  if (c % 4 != 0) throw ConfigError("bottleneck width " + std::to_string(c) +
                                    " is not divisible by 4");
  store.add_normal(prefix + ".pre_w", {c, c}, rng, init_std);
  store.add_constant(prefix + ".pre_b", {c}, 0.0);
  store.add_normal(prefix + ".p_down", {c, c / 4}, rng, init_std);
  store.add_normal(prefix + ".p_up", {c / 4, c}, rng, init_std);
}

}  // namespace m2m
