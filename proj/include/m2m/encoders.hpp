#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "m2m/autograd.hpp"
#include "m2m/params.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

// One subject: a 4D functional volume, a 3D structural volume (time axis of 1),
// a tabular feature row and a binary label.
struct VolumeSample {
  Tensor fmri;  // (1, H, W, D, T)
  Tensor smri;  // (1, H, W, D, 1)
  std::vector<double> tabular;
  int label = 0;
};

struct EncoderConfig {
  std::array<std::size_t, 4> patch{2, 2, 2, 1};  // (p_h, p_w, p_d, p_t)
  std::vector<std::size_t> stage_channels{8, 16};
  std::vector<std::size_t> heads{2, 2};
  std::size_t merge = 2;  // spatial merge factor between stages
  bool full_attention = true;
  std::size_t mlp_ratio = 2;

  std::size_t channels() const { return stage_channels.back(); }

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("encoder stage_channels must be nonempty");
    if (heads.size() != stage_channels.size())
      throw ConfigError("encoder heads must list one entry per stage");
    for (std::size_t s = 0; s < stage_channels.size(); ++s) {
      if (stage_channels[s] == 0) throw ConfigError("encoder stage width must be positive");
      if (heads[s] == 0 || stage_channels[s] % heads[s] != 0)
        throw ConfigError("encoder heads must divide the stage width at stage " +
                          std::to_string(s));
    }
    for (std::size_t p : patch)
      if (p == 0) throw ConfigError("encoder patch sizes must be positive");
    if (merge == 0) throw ConfigError("encoder merge factor must be positive");
    if (!full_attention) throw ConfigError("only full attention over tokens is supported");
    if (mlp_ratio == 0) throw ConfigError("encoder mlp_ratio must be positive");
  }
};

// Token grid of an encoder stage. Tokens are ordered row-major over (h, w, d, t).
struct TokenGrid {
  std::size_t h = 0, w = 0, d = 0, t = 0;

  std::size_t spatial() const { return h * w * d; }
  std::size_t count() const { return spatial() * t; }
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Channel-major encoder output (c, h, w, d, t).
struct LatentFeature {
  Tensor data;

  std::size_t channels() const { return data.dim(0); }
  TokenGrid grid() const { return {data.dim(1), data.dim(2), data.dim(3), data.dim(4)}; }
  std::size_t spatial_count() const { return grid().spatial(); }
  std::size_t time_count() const { return data.dim(4); }
  // Element at channel ch, flattened spatial patch i, time step t.
  double at(std::size_t ch, std::size_t i, std::size_t t) const {
    return data[(ch * spatial_count() + i) * time_count() + t];
  }
};

// Spatial part (c, h, w, d) and temporal part (c, t) of a latent feature.
struct DecomposedLatent {
  Tensor spatial;
  Tensor temporal;
};

// (c, l) tabular tokens.
struct TabularLatent {
  Tensor data;
};

inline LatentFeature latent_from_tokens(const Tensor& tokens, const TokenGrid& grid) {
  if (tokens.rank() != 2 || tokens.dim(0) != grid.count())
    throw ShapeError("token matrix " + shape_str(tokens.dims()) + " does not fit the grid");
  const std::size_t c = tokens.dim(1);
  return {kernels::transpose(tokens).reshaped({c, grid.h, grid.w, grid.d, grid.t})};
}

inline Tensor tokens_from_latent(const LatentFeature& lf) {
  const std::size_t c = lf.channels();
  return kernels::transpose(lf.data.reshaped({c, lf.grid().count()}));
}

// Exact arithmetic means over t (spatial part) and over (h, w, d) (temporal part).
inline DecomposedLatent decompose_spatiotemporal(const LatentFeature& lf) {
  const TokenGrid g = lf.grid();
  const std::size_t c = lf.channels(), n = g.spatial();
  if (g.t == 0) throw ShapeError("latent feature has an empty time axis");
  Tensor spatial({c, g.h, g.w, g.d});
  Tensor temporal({c, g.t});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < g.t; ++t) s += lf.at(ch, i, t);
      spatial[ch * n + i] = s / static_cast<double>(g.t);
    }
    for (std::size_t t = 0; t < g.t; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += lf.at(ch, i, t);
      temporal[ch * g.t + t] = s / static_cast<double>(n);
    }
  }
  return {std::move(spatial), std::move(temporal)};
}

namespace encoder_detail {

inline std::size_t effective_time_patch(const EncoderConfig& cfg, std::size_t T) {
  // A single-frame (structural) volume is embedded as a static clip.
  return T == 1 ? 1 : cfg.patch[3];
}

inline TokenGrid first_stage_grid(const EncoderConfig& cfg, const Shape& dims) {
  if (dims.size() != 5 || dims[0] != 1)
    throw ShapeError("volume must have dims (1,H,W,D,T), got " + shape_str(dims));
  static const char* kAxis[] = {"H", "W", "D", "T"};
  const std::size_t S = cfg.stage_channels.size();
  std::size_t merge_span = 1;
  for (std::size_t s = 1; s < S; ++s) merge_span *= cfg.merge;
  for (std::size_t a = 0; a < 3; ++a) {
    if (dims[a + 1] % (cfg.patch[a] * merge_span) != 0)
      throw ShapeError("axis " + std::string(kAxis[a]) + " of extent " +
                       std::to_string(dims[a + 1]) + " is not divisible by patch*merge " +
                       std::to_string(cfg.patch[a] * merge_span));
  }
  const std::size_t T = dims[4];
  const std::size_t pt = effective_time_patch(cfg, T);
  if (T == 0 || T % pt != 0)
    throw ShapeError("axis T of extent " + std::to_string(T) +
                     " is not divisible by the temporal patch " + std::to_string(pt));
  return {dims[1] / cfg.patch[0], dims[2] / cfg.patch[1], dims[3] / cfg.patch[2], T / pt};
}

inline std::size_t patch_volume(const EncoderConfig& cfg) {
  return cfg.patch[0] * cfg.patch[1] * cfg.patch[2] * cfg.patch[3];
}

// Index map from the flat (1,H,W,D,T) volume into (tokens, patch_volume).
inline std::shared_ptr<const std::vector<std::size_t>> patch_index(const EncoderConfig& cfg,
                                                                   const Shape& dims,
                                                                   const TokenGrid& g) {
  const std::size_t W = dims[2], D = dims[3], T = dims[4];
  const auto& p = cfg.patch;
  const std::size_t pt = effective_time_patch(cfg, T);
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(g.count() * patch_volume(cfg));
  for (std::size_t a = 0; a < g.h; ++a)
    for (std::size_t b = 0; b < g.w; ++b)
      for (std::size_t c = 0; c < g.d; ++c)
        for (std::size_t t = 0; t < g.t; ++t)
          for (std::size_t x = 0; x < p[0]; ++x)
            for (std::size_t y = 0; y < p[1]; ++y)
              for (std::size_t z = 0; z < p[2]; ++z)
                for (std::size_t u = 0; u < p[3]; ++u) {
                  // Frames beyond a static clip repeat frame 0.
                  const std::size_t tt = pt == 1 ? t : t * pt + u;
                  const std::size_t vx = a * p[0] + x, vy = b * p[1] + y, vz = c * p[2] + z;
                  idx->push_back(((vx * W + vy) * D + vz) * T + tt);
                }
  return idx;
}

// Merges m x m x m spatial neighbours: (h*w*d*t, c) -> (h/m*w/m*d/m*t, m^3*c).
inline std::shared_ptr<const std::vector<std::size_t>> merge_index(const TokenGrid& g,
                                                                   std::size_t m,
                                                                   std::size_t c) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  const TokenGrid o{g.h / m, g.w / m, g.d / m, g.t};
  idx->reserve(g.count() * c);
  for (std::size_t a = 0; a < o.h; ++a)
    for (std::size_t b = 0; b < o.w; ++b)
      for (std::size_t e = 0; e < o.d; ++e)
        for (std::size_t t = 0; t < o.t; ++t)
          for (std::size_t x = 0; x < m; ++x)
            for (std::size_t y = 0; y < m; ++y)
              for (std::size_t z = 0; z < m; ++z) {
                const std::size_t src =
                    (((a * m + x) * g.w + (b * m + y)) * g.d + (e * m + z)) * g.t + t;
                for (std::size_t k = 0; k < c; ++k) idx->push_back(src * c + k);
              }
  return idx;
}

inline Var linear(Binder& bind, const Var& x, const std::string& w, const std::string& b) {
  return add_rowvec(matmul(x, bind(w)), bind(b));
}

inline Var layer_norm(Binder& bind, const Var& x, const std::string& prefix) {
  return layer_norm_rows(x, bind(prefix + ".g"), bind(prefix + ".b"));
}

inline Var multi_head_self_attention(Binder& bind, const Var& x, const std::string& p,
                                     std::size_t heads) {
  const std::size_t c = x.dims()[1];
  const std::size_t dh = c / heads;
  Var q = linear(bind, x, p + ".wq", p + ".bq");
  Var k = matmul(x, bind(p + ".wk"));  // a key bias cancels in the softmax
  Var v = linear(bind, x, p + ".wv", p + ".bv");
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var a = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))));
    outs.push_back(matmul(a, vh));
  }
  Var cat = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(bind, cat, p + ".wo", p + ".bo");
}

inline void add_layer_norm(ParamStore& store, const std::string& p, std::size_t c) {
  store.add_constant(p + ".g", {c}, 1.0);
  store.add_constant(p + ".b", {c}, 0.0);
}

inline void add_linear(ParamStore& store, const std::string& w, const std::string& b,
                       std::size_t in, std::size_t out, Rng& rng, double std) {
  store.add_normal(w, {in, out}, rng, std);
  store.add_constant(b, {out}, 0.0);
}

}  // namespace encoder_detail

// Output grid of encode_volume for an input of the given dims.
inline TokenGrid encoder_output_grid(const EncoderConfig& cfg, const Shape& dims) {
  cfg.validate();
  TokenGrid g = encoder_detail::first_stage_grid(cfg, dims);
  for (std::size_t s = 1; s < cfg.stage_channels.size(); ++s)
    g = {g.h / cfg.merge, g.w / cfg.merge, g.d / cfg.merge, g.t};
  return g;
}

// Creates the parameters of one volume encoder under `prefix`. `spatial` is
// (H, W, D) of the inputs it will see and `max_time` the largest frame count.
inline void init_volume_encoder(ParamStore& store, const std::string& prefix,
                                const EncoderConfig& cfg, std::array<std::size_t, 3> spatial,
                                std::size_t max_time, Rng& rng, double init_std = 0.02) {
  using namespace encoder_detail;
  cfg.validate();
  const TokenGrid g0 = first_stage_grid(cfg, {1, spatial[0], spatial[1], spatial[2], max_time});
  const std::size_t c0 = cfg.stage_channels.front();
  add_linear(store, prefix + ".patch.w", prefix + ".patch.b", patch_volume(cfg), c0, rng,
             init_std);
  store.add_normal(prefix + ".pos_sp", {g0.spatial(), c0}, rng, init_std);
  store.add_normal(prefix + ".pos_te", {g0.t, c0}, rng, init_std);
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    const std::string b = prefix + ".s" + std::to_string(s);
    add_layer_norm(store, b + ".ln1", c);
    for (const char* m : {"q", "v", "o"})
      add_linear(store, b + ".attn.w" + m, b + ".attn.b" + m, c, c, rng, init_std);
    store.add_normal(b + ".attn.wk", {c, c}, rng, init_std);
    add_layer_norm(store, b + ".ln2", c);
    add_linear(store, b + ".mlp.w1", b + ".mlp.b1", c, c * cfg.mlp_ratio, rng, init_std);
    add_linear(store, b + ".mlp.w2", b + ".mlp.b2", c * cfg.mlp_ratio, c, rng, init_std);
    if (s + 1 < cfg.stage_channels.size()) {
      const std::size_t cat = cfg.merge * cfg.merge * cfg.merge * c;
      add_layer_norm(store, b + ".merge.ln", cat);
      store.add_normal(b + ".merge.w", {cat, cfg.stage_channels[s + 1]}, rng, init_std);
    }
  }
  add_layer_norm(store, prefix + ".norm", cfg.channels());
}

struct EncodedTokens {
  Var tokens;  // (grid.count(), c), row-major over (h, w, d, t)
  TokenGrid grid;
};

// Linear patch embedding without positional terms: (tokens, c0).
inline Var patch_embed(Binder& bind, const std::string& prefix, const EncoderConfig& cfg,
                       const Tensor& volume) {
  using namespace encoder_detail;
  const TokenGrid g0 = first_stage_grid(cfg, volume.dims());
  Var vol = bind.constant(volume);
  Var patches = gather(vol, patch_index(cfg, volume.dims(), g0), {g0.count(), patch_volume(cfg)});
  return linear(bind, patches, prefix + ".patch.w", prefix + ".patch.b");
}

// Hierarchical encoder: patch embedding + learned positions, one transformer
// block per stage with full self-attention over all tokens, and spatial-only
// patch merging between stages. The time axis is never merged.
inline EncodedTokens encode_volume(Binder& bind, const std::string& prefix,
                                   const EncoderConfig& cfg, const Tensor& volume) {
  using namespace encoder_detail;
  cfg.validate();
  TokenGrid g = first_stage_grid(cfg, volume.dims());
  Var x = patch_embed(bind, prefix, cfg, volume);

  Var pos_sp = bind(prefix + ".pos_sp");
  Var pos_te = bind(prefix + ".pos_te");
  if (pos_sp.dims()[0] != g.spatial())
    throw ShapeError("encoder '" + prefix + "' was built for " +
                     std::to_string(pos_sp.dims()[0]) + " spatial patches, input has " +
                     std::to_string(g.spatial()));
  if (pos_te.dims()[0] < g.t)
    throw ShapeError("encoder '" + prefix + "' supports at most " +
                     std::to_string(pos_te.dims()[0]) + " time tokens, input has " +
                     std::to_string(g.t));
  const std::size_t c0 = cfg.stage_channels.front();
  auto sp_idx = std::make_shared<std::vector<std::size_t>>();
  auto te_idx = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t s = 0; s < g.spatial(); ++s)
    for (std::size_t t = 0; t < g.t; ++t)
      for (std::size_t k = 0; k < c0; ++k) {
        sp_idx->push_back(s * c0 + k);
        te_idx->push_back(t * c0 + k);
      }
  x = x + gather(pos_sp, sp_idx, {g.count(), c0});
  x = x + gather(pos_te, te_idx, {g.count(), c0});

  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const std::string b = prefix + ".s" + std::to_string(s);
    x = x + multi_head_self_attention(bind, layer_norm(bind, x, b + ".ln1"), b + ".attn",
                                      cfg.heads[s]);
    Var hmid = gelu(linear(bind, layer_norm(bind, x, b + ".ln2"), b + ".mlp.w1", b + ".mlp.b1"));
    x = x + linear(bind, hmid, b + ".mlp.w2", b + ".mlp.b2");
    if (s + 1 < cfg.stage_channels.size()) {
      const std::size_t c = cfg.stage_channels[s];
      const std::size_t m = cfg.merge;
      const TokenGrid next{g.h / m, g.w / m, g.d / m, g.t};
      Var merged = gather(x, merge_index(g, m, c), {next.count(), m * m * m * c});
      x = matmul(layer_norm(bind, merged, b + ".merge.ln"), bind(b + ".merge.w"));
      g = next;
    }
  }
  x = layer_norm(bind, x, prefix + ".norm");
  return {x, g};
}

// Untaped convenience form returning the channel-major latent.
inline LatentFeature encode_volume(const Tensor& volume, const EncoderConfig& cfg,
                                   const ParamStore& params, const std::string& prefix = "enc") {
  Tape tape;
  Binder bind(tape, params);
  EncodedTokens e = encode_volume(bind, prefix, cfg, volume);
  return latent_from_tokens(e.tokens.value(), e.grid);
}

// Row groups for time-mean (one group per spatial patch) and space-mean (one per frame).
inline std::shared_ptr<const std::vector<std::vector<std::size_t>>> time_mean_groups(
    const TokenGrid& g) {
  auto groups = std::make_shared<std::vector<std::vector<std::size_t>>>(g.spatial());
  for (std::size_t s = 0; s < g.spatial(); ++s)
    for (std::size_t t = 0; t < g.t; ++t) (*groups)[s].push_back(s * g.t + t);
  return groups;
}

inline std::shared_ptr<const std::vector<std::vector<std::size_t>>> space_mean_groups(
    const TokenGrid& g) {
  auto groups = std::make_shared<std::vector<std::vector<std::size_t>>>(g.t);
  for (std::size_t s = 0; s < g.spatial(); ++s)
    for (std::size_t t = 0; t < g.t; ++t) (*groups)[t].push_back(s * g.t + t);
  return groups;
}

// Taped decomposition: spatial tokens (h*w*d, c) and temporal tokens (t, c).
struct DecomposedTokens {
  Var spatial;
  Var temporal;
};

inline DecomposedTokens decompose_spatiotemporal(const EncodedTokens& e) {
  return {mean_row_groups(e.tokens, time_mean_groups(e.grid)),
          mean_row_groups(e.tokens, space_mean_groups(e.grid))};
}

// Tabular MLP: F -> c (GELU) -> c*l, returned as l tokens of width c.
struct TabularConfig {
  std::size_t features = 6;
  std::size_t channels = 16;
  std::size_t tokens = 1;
};

inline void init_tabular_encoder(ParamStore& store, const std::string& prefix,
                                 const TabularConfig& cfg, Rng& rng, double init_std = 0.02) {
  encoder_detail::add_linear(store, prefix + ".w1", prefix + ".b1", cfg.features, cfg.channels,
                             rng, init_std);
  encoder_detail::add_linear(store, prefix + ".w2", prefix + ".b2", cfg.channels,
                             cfg.channels * cfg.tokens, rng, init_std);
}

inline Var encode_tabular(Binder& bind, const std::string& prefix, const TabularConfig& cfg,
                          const std::vector<double>& x) {
  if (x.size() != cfg.features)
    throw ShapeError("tabular row has " + std::to_string(x.size()) + " features, encoder expects " +
                     std::to_string(cfg.features));
  Var in = bind.constant(Tensor({1, x.size()}, x));
  Var h = gelu(encoder_detail::linear(bind, in, prefix + ".w1", prefix + ".b1"));
  Var out = encoder_detail::linear(bind, h, prefix + ".w2", prefix + ".b2");
  return reshape(out, {cfg.tokens, cfg.channels});
}

inline TabularLatent encode_tabular(const std::vector<double>& x, const TabularConfig& cfg,
                                    const ParamStore& params, const std::string& prefix = "tab") {
  Tape tape;
  Binder bind(tape, params);
  return {kernels::transpose(encode_tabular(bind, prefix, cfg, x).value())};
}

}  // namespace m2m
