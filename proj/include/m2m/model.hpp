#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m2m/encoders.hpp"
#include "m2m/fusion.hpp"
#include "m2m/params.hpp"

namespace m2m {

struct Modalities {
  bool fmri = true;
  bool smri = true;
  bool tabular = true;

  std::size_t count() const { return (fmri ? 1 : 0) + (smri ? 1 : 0) + (tabular ? 1 : 0); }
  void validate() const {
    if (count() == 0) throw ConfigError("at least one modality must be enabled");
  }
};

// Ablation switches. Disabled temporal self-fusion uses the raw temporal
// tokens; disabled spatial fusion replaces the latent-query attention with an
// elementwise sum of modality tokens; disabled refinement skips the
// MLP/bottleneck block; disabled alignment drops the M2M term.
struct ModuleToggles {
  bool temporal_self_fusion = true;
  bool spatial_fusion = true;
  bool modality_refinement = true;
  bool alignment = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::array<std::size_t, 4> volume{8, 8, 8, 4};  // fMRI (H, W, D, T)
  std::size_t tabular_features = 6;
  std::size_t tabular_tokens = 1;
  std::size_t joint_queries = 0;     // 0: joint token count
  std::size_t temporal_queries = 0;  // 0: fMRI time-token count
  StCombine st_combine = StCombine::kGate;
  bool share_encoder_weights = false;
  double init_std = 0.02;
  double query_init_std = 1.0;

  std::size_t channels() const { return encoder.channels(); }

  TokenGrid fmri_grid() const {
    return encoder_output_grid(encoder, {1, volume[0], volume[1], volume[2], volume[3]});
  }
  TokenGrid smri_grid() const {
    return encoder_output_grid(encoder, {1, volume[0], volume[1], volume[2], 1});
  }
  TabularConfig tabular() const { return {tabular_features, channels(), tabular_tokens}; }

  std::size_t joint_token_count(const Modalities& m) const {
    std::size_t n = 0;
    if (m.fmri) n += fmri_grid().spatial();
    if (m.smri) n += smri_grid().spatial();
    if (m.tabular) n += tabular_tokens;
    return n;
  }
  std::size_t resolved_joint_queries(const Modalities& m) const {
    return joint_queries ? joint_queries : joint_token_count(m);
  }
  std::size_t resolved_temporal_queries() const {
    return temporal_queries ? temporal_queries : fmri_grid().t;
  }

  std::string fmri_prefix() const { return share_encoder_weights ? "enc" : "enc_f"; }
  std::string smri_prefix() const { return share_encoder_weights ? "enc" : "enc_s"; }

  void validate() const {
    encoder.validate();
    if (channels() % 4 != 0)
      throw ConfigError("final encoder width " + std::to_string(channels()) +
                        " must be divisible by 4 for the bottleneck");
    if (tabular_features == 0 || tabular_tokens == 0)
      throw ConfigError("tabular features and tokens must be positive");
    fmri_grid();
    smri_grid();
  }
};

inline ParamStore init_model(const ModelConfig& cfg, const Modalities& mods, Rng& rng) {
  cfg.validate();
  mods.validate();
  ParamStore store;
  const std::size_t c = cfg.channels();
  const std::array<std::size_t, 3> spatial{cfg.volume[0], cfg.volume[1], cfg.volume[2]};
  if (cfg.share_encoder_weights) {
    init_volume_encoder(store, "enc", cfg.encoder, spatial, cfg.volume[3], rng, cfg.init_std);
  } else {
    init_volume_encoder(store, "enc_f", cfg.encoder, spatial, cfg.volume[3], rng, cfg.init_std);
    init_volume_encoder(store, "enc_s", cfg.encoder, spatial, 1, rng, cfg.init_std);
  }
  init_tabular_encoder(store, "tab", cfg.tabular(), rng, cfg.init_std);

  store.add_normal("fuse.j_sp", {cfg.resolved_joint_queries(mods), c}, rng, cfg.query_init_std);
  store.add_normal("fuse.j_te", {cfg.resolved_temporal_queries(), c}, rng, cfg.query_init_std);
  for (const char* role : {"fuse.joint", "fuse.ref_f", "fuse.ref_s", "fuse.ref_t", "fuse.te1",
                           "fuse.te2"})
    init_attention(store, role, c, rng, cfg.init_std);
  for (const char* role : {"refine.f", "refine.s", "refine.t"})
    init_bottleneck(store, role, c, rng, cfg.init_std);
  store.add_normal("head.w", {mods.count() * c, 2}, rng, cfg.init_std);
  store.add_constant("head.b", {2}, 0.0);
  return store;
}

// Attention matrices of one forward pass, keyed by source tag.
using AttentionTrace = std::map<std::string, Tensor>;

struct ForwardOutput {
  Var logits;  // (1, 2)
  Var pooled;  // (1, modalities*c) classifier input
  std::optional<EncodedTokens> fmri;
  std::optional<EncodedTokens> smri;
  std::optional<Var> tabular;  // (l, c)
};

inline ForwardOutput forward(Binder& bind, const ModelConfig& cfg, const Modalities& mods,
                             const ModuleToggles& toggles, const VolumeSample& sample,
                             AttentionTrace* trace = nullptr) {
  mods.validate();
  ForwardOutput out;
  std::optional<DecomposedTokens> fdec;
  std::vector<Var> joint_parts;
  if (mods.fmri) {
    out.fmri = encode_volume(bind, cfg.fmri_prefix(), cfg.encoder, sample.fmri);
    fdec = decompose_spatiotemporal(*out.fmri);
    joint_parts.push_back(fdec->spatial);
  }
  if (mods.smri) {
    out.smri = encode_volume(bind, cfg.smri_prefix(), cfg.encoder, sample.smri);
    if (out.smri->grid.t != 1) throw ShapeError("structural volume must have a single frame");
    joint_parts.push_back(out.smri->tokens);
  }
  if (mods.tabular) {
    out.tabular = encode_tabular(bind, "tab", cfg.tabular(), sample.tabular);
    joint_parts.push_back(*out.tabular);
  }

  Var joint;
  if (toggles.spatial_fusion) {
    Var lj = joint_parts.size() == 1 ? joint_parts.front() : concat_rows(joint_parts);
    AttentionResult r = attend(bind, bind("fuse.j_sp"), lj, "fuse.joint");
    joint = r.out;
    if (trace) (*trace)["joint-spatial"] = r.scores.value();
  } else {
    // Elementwise sum of the spatial token sets; tabular tokens are pooled and broadcast.
    std::optional<Var> sum;
    if (fdec) sum = fdec->spatial;
    if (out.smri) sum = sum ? *sum + out.smri->tokens : out.smri->tokens;
    if (out.tabular) {
      if (sum)
        sum = add_rowvec(*sum, mean_rows(*out.tabular));
      else
        sum = *out.tabular;
    }
    joint = *sum;
  }

  std::vector<Var> refined;
  auto refine = [&](const Var& tokens, const char* role, const char* tag) {
    AttentionResult r = attend(bind, tokens, joint, role);
    if (trace) (*trace)[tag] = r.scores.value();
    return r.out;
  };
  auto condense = [&](const Var& tokens, const char* prefix) {
    return toggles.modality_refinement ? bottleneck_refine(bind, tokens, prefix) : tokens;
  };
  if (mods.fmri) {
    Var h_sp = refine(fdec->spatial, "fuse.ref_f", "refine-fmri");
    Var h_te = fdec->temporal;
    if (toggles.temporal_self_fusion) {
      TemporalFusionResult tf = temporal_self_fusion(
          fdec->temporal, bind("fuse.j_te"), bind("fuse.te1.wq"), bind("fuse.te1.wk"),
          bind("fuse.te1.wv"), bind("fuse.te2.wq"), bind("fuse.te2.wk"), bind("fuse.te2.wv"));
      h_te = tf.out;
      if (trace) {
        (*trace)["temporal"] = tf.latent_scores.value();
        (*trace)["temporal-self"] = tf.self_scores.value();
      }
    }
    refined.push_back(condense(combine_spatiotemporal(h_sp, h_te, cfg.st_combine), "refine.f"));
  }
  if (mods.smri) refined.push_back(condense(refine(out.smri->tokens, "fuse.ref_s", "refine-smri"), "refine.s"));
  if (mods.tabular)
    refined.push_back(condense(refine(*out.tabular, "fuse.ref_t", "refine-tabular"), "refine.t"));

  out.logits = classify(refined, bind("head.w"), bind("head.b"), &out.pooled);
  return out;
}

}  // namespace m2m
