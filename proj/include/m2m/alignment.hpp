#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2m/autograd.hpp"
#include "m2m/encoders.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

enum class Measure { kDot, kCosine, kKl, kJsd, kMmd };
enum class DenominatorMode { kStandard, kLiteral };

inline const char* measure_name(Measure m) {
  switch (m) {
    case Measure::kDot: return "dot";
    case Measure::kCosine: return "cosine";
    case Measure::kKl: return "kl";
    case Measure::kJsd: return "jsd";
    case Measure::kMmd: return "mmd";
  }
  return "?";
}

inline Measure parse_measure(const std::string& s) {
  if (s == "dot") return Measure::kDot;
  if (s == "cosine") return Measure::kCosine;
  if (s == "kl") return Measure::kKl;
  if (s == "jsd") return Measure::kJsd;
  if (s == "mmd") return Measure::kMmd;
  throw ConfigError("unknown discrepancy measure '" + s + "'");
}

inline constexpr Measure kAllMeasures[] = {Measure::kDot, Measure::kCosine, Measure::kKl,
                                           Measure::kJsd, Measure::kMmd};

struct M2MConfig {
  double tau = 0.5;
  Measure measure = Measure::kDot;
  bool weighting = true;
  DenominatorMode denominator = DenominatorMode::kStandard;
  double lambda = 0.1;
  bool symmetric = false;
  double epsilon_floor = 0.1;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("m2m tau must be positive");
    if (!(epsilon_floor >= 0.0 && epsilon_floor < 1.0))
      throw ConfigError("m2m epsilon_floor must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw ConfigError("m2m lambda must be nonnegative");
  }
};

// S[t][i][j] = <fMRI patch i at time t, sMRI patch j>; dims (T, N, N).
struct SimilarityMatrix {
  Tensor S;

  std::size_t steps() const { return S.dim(0); }
  std::size_t patches() const { return S.dim(1); }
  Tensor slice(std::size_t t) const {
    const std::size_t n = patches();
    auto d = S.data().subspan(t * n * n, n * n);
    return Tensor({n, n}, std::vector<double>(d.begin(), d.end()));
  }
};

// Per-pair negative weights in [ε, 1], dims (T, N, N). `transposed` holds the
// sMRI-anchored weights and is filled only for symmetric losses.
struct WeightMatrix {
  Tensor w;
  std::optional<Tensor> transposed;

  Tensor slice(std::size_t t) const { return slice_of(w, t); }
  Tensor transposed_slice(std::size_t t) const { return slice_of(*transposed, t); }

 private:
  static Tensor slice_of(const Tensor& src, std::size_t t) {
    const std::size_t n = src.dim(1);
    auto d = src.data().subspan(t * n * n, n * n);
    return Tensor({n, n}, std::vector<double>(d.begin(), d.end()));
  }
};

// Patch vectors of a latent at time t: (N, c), patches row-major over (h, w, d).
inline Tensor patches_at(const LatentFeature& lf, std::size_t t) {
  const std::size_t n = lf.spatial_count(), c = lf.channels();
  if (t >= lf.time_count()) throw ShapeError("time index out of range");
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out.at(i, ch) = lf.at(ch, i, t);
  return out;
}

inline SimilarityMatrix similarity_matrix(const LatentFeature& lf, const LatentFeature& ls) {
  const TokenGrid gf = lf.grid(), gs = ls.grid();
  if (lf.channels() != ls.channels() || gf.h != gs.h || gf.w != gs.w || gf.d != gs.d)
    throw ShapeError("similarity_matrix: fMRI latent " + shape_str(lf.data.dims()) +
                     " and sMRI latent " + shape_str(ls.data.dims()) + " disagree on the grid");
  if (gs.t != 1) throw ShapeError("similarity_matrix: sMRI latent must have t == 1");
  const Tensor s_patches = patches_at(ls, 0);
  const std::size_t n = gf.spatial();
  Tensor S({gf.t, n, n});
  for (std::size_t t = 0; t < gf.t; ++t) {
    const Tensor st = kernels::matmul_nt(patches_at(lf, t), s_patches);
    std::copy(st.data().begin(), st.data().end(), S.data().begin() + static_cast<long>(t * n * n));
  }
  return {std::move(S)};
}

namespace align_detail {

inline void log_softmax(std::span<const double> a, std::vector<double>& out) {
  const double mx = *std::max_element(a.begin(), a.end());
  double z = 0.0;
  for (double v : a) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - lz;
}

inline double kl_from_logs(const std::vector<double>& lp, const std::vector<double>& lq) {
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) s += std::exp(lp[i]) * (lp[i] - lq[i]);
  return std::max(0.0, s);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Biased (V-statistic) Gaussian-kernel MMD² between the channel values of a
// and b taken as scalar samples; bandwidth = median pairwise distance of the
// pooled samples (1 when that median is 0).
inline double mmd2(std::span<const double> a, std::span<const double> b) {
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<double> dists;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j)
      dists.push_back(std::abs(pooled[i] - pooled[j]));
  double sigma = dists.empty() ? 1.0 : median(std::move(dists));
  if (sigma <= 0.0) sigma = 1.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  auto kernel_mean = [inv](std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (double u : x)
      for (double v : y) s += std::exp(-(u - v) * (u - v) * inv);
    return s / static_cast<double>(x.size() * y.size());
  };
  return std::max(0.0, kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b));
}

}  // namespace align_detail

// Higher = more discrepant for every measure; the similarity measures are negated.
inline double discrepancy(std::span<const double> a, std::span<const double> b, Measure m) {
  if (a.empty() || a.size() != b.size())
    throw ShapeError("discrepancy needs two nonempty vectors of equal length");
  switch (m) {
    case Measure::kDot: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return -s;
    }
    case Measure::kCosine: {
      double s = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
      }
      return -s / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    }
    case Measure::kKl: {
      std::vector<double> lp, lq;
      align_detail::log_softmax(a, lp);
      align_detail::log_softmax(b, lq);
      return align_detail::kl_from_logs(lp, lq);
    }
    case Measure::kJsd: {
      std::vector<double> lp, lq;
      align_detail::log_softmax(a, lp);
      align_detail::log_softmax(b, lq);
      std::vector<double> lm(a.size());
      for (std::size_t i = 0; i < a.size(); ++i)
        lm[i] = std::log(0.5 * (std::exp(lp[i]) + std::exp(lq[i])));
      const double v =
          0.5 * align_detail::kl_from_logs(lp, lm) + 0.5 * align_detail::kl_from_logs(lq, lm);
      return std::clamp(v, 0.0, std::numbers::ln2);
    }
    case Measure::kMmd: return align_detail::mmd2(a, b);
  }
  throw ConfigError("unknown measure");
}

// Min-max normalizes each anchor row's discrepancies over its negatives and
// maps them to ε + (1-ε)·d. Rows whose negatives are all equally discrepant get
// weight 1. The diagonal (the positive) is set to 1 and never used as a
// negative weight. With weighting disabled every entry is 1.
inline Tensor weights_from_discrepancy(const Tensor& anchors, const Tensor& others,
                                       const M2MConfig& cfg) {
  if (anchors.rank() != 2 || anchors.dims() != others.dims())
    throw ShapeError("weights_from_discrepancy: patch matrices must share dims (N, c)");
  const std::size_t n = anchors.dim(0);
  if (n < 2) throw ContractError("weights_from_discrepancy needs N >= 2 (no negatives otherwise)");
  Tensor w = Tensor::filled({n, n}, 1.0);
  if (!cfg.weighting) return w;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      d[k] = discrepancy(anchors.row(i), others.row(k), cfg.measure);
      lo = std::min(lo, d[k]);
      hi = std::max(hi, d[k]);
    }
    if (!(hi > lo)) continue;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      w.at(i, k) = std::min(1.0, cfg.epsilon_floor + (1.0 - cfg.epsilon_floor) * (d[k] - lo) / (hi - lo));
    }
  }
  return w;
}

inline WeightMatrix m2m_weights(const LatentFeature& lf, const LatentFeature& ls,
                                const M2MConfig& cfg) {
  const std::size_t T = lf.time_count(), n = lf.spatial_count();
  const Tensor sp = patches_at(ls, 0);
  WeightMatrix out{Tensor({T, n, n}), std::nullopt};
  if (cfg.symmetric) out.transposed = Tensor({T, n, n});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor fp = patches_at(lf, t);
    const Tensor wt = weights_from_discrepancy(fp, sp, cfg);
    std::copy(wt.data().begin(), wt.data().end(), out.w.data().begin() + static_cast<long>(t * n * n));
    if (cfg.symmetric) {
      const Tensor wb = weights_from_discrepancy(sp, fp, cfg);
      std::copy(wb.data().begin(), wb.data().end(),
                out.transposed->data().begin() + static_cast<long>(t * n * n));
    }
  }
  return out;
}

namespace align_detail {

// -log(exp(S_ii/τ) / Z_i) for one anchor row, via log-sum-exp. Standard mode
// includes the positive in Z_i with weight 1; literal mode drops k == i.
// An empty `weights` span means all negatives carry weight 1.
inline double anchor_loss(std::span<const double> row, std::size_t i,
                          std::span<const double> weights, double tau, DenominatorMode mode) {
  const std::size_t n = row.size();
  double mx = -INFINITY;
  for (std::size_t k = 0; k < n; ++k) {
    if (mode == DenominatorMode::kLiteral && k == i) continue;
    mx = std::max(mx, row[k] / tau);
  }
  double z = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == i) {
      if (mode == DenominatorMode::kStandard) z += std::exp(row[k] / tau - mx);
      continue;
    }
    const double w = weights.empty() ? 1.0 : weights[k];
    z += w * std::exp(row[k] / tau - mx);
  }
  return mx + std::log(z) - row[i] / tau;
}

inline double mean_anchor_loss(const Tensor& S, const Tensor* W, double tau,
                               DenominatorMode mode) {
  const std::size_t n = S.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    total += anchor_loss(S.row(i), i, W ? W->row(i) : std::span<const double>{}, tau, mode);
  return total / static_cast<double>(n);
}

}  // namespace align_detail

// Diagonal-positive InfoNCE on one similarity slice, mean over anchors.
inline double info_nce_loss(const Tensor& S_t, const M2MConfig& cfg) {
  if (S_t.rank() != 2 || S_t.dim(0) != S_t.dim(1))
    throw ShapeError("info_nce_loss expects a square matrix");
  if (!(cfg.tau > 0.0)) throw ConfigError("m2m tau must be positive");
  return align_detail::mean_anchor_loss(S_t, nullptr, cfg.tau, cfg.denominator);
}

// Discrepancy-weighted loss: per-step anchor mean, summed over time steps.
// Symmetric mode averages with the sMRI-anchored (transposed) loss.
inline double m2m_loss(const SimilarityMatrix& S, const WeightMatrix& W, const M2MConfig& cfg) {
  if (S.S.dims() != W.w.dims()) throw ShapeError("m2m_loss: similarity and weight dims differ");
  if (cfg.symmetric && cfg.weighting && !W.transposed)
    throw ContractError("symmetric m2m_loss needs sMRI-anchored weights");
  double total = 0.0;
  for (std::size_t t = 0; t < S.steps(); ++t) {
    const Tensor st = S.slice(t);
    const Tensor wt = W.slice(t);
    const Tensor ones = Tensor::filled(wt.dims(), 1.0);
    const Tensor& wf = cfg.weighting ? wt : ones;
    double lt = align_detail::mean_anchor_loss(st, &wf, cfg.tau, cfg.denominator);
    if (cfg.symmetric) {
      const Tensor wb = cfg.weighting ? W.transposed_slice(t) : ones;
      lt = 0.5 * (lt + align_detail::mean_anchor_loss(kernels::transpose(st), &wb, cfg.tau,
                                                       cfg.denominator));
    }
    total += lt;
  }
  return total;
}

inline double total_loss(double ce, double m2m, const M2MConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw ConfigError("m2m lambda must be nonnegative");
  return ce + cfg.lambda * m2m;
}

// ---------------------------------------------------------------------------
// Taped forms used in training. Weights are computed from detached values and
// enter the graph as constants.

// Mean over anchors of the weighted diagonal-positive InfoNCE on S (N, N).
inline Var weighted_info_nce(const Var& S, std::shared_ptr<const Tensor> weights, double tau,
                             DenominatorMode mode) {
  Tape& tape = *S.tape();
  const Tensor& s = S.value();
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) throw ShapeError("weighted_info_nce expects (N, N)");
  const double value = align_detail::mean_anchor_loss(s, weights.get(), tau, mode);
  const std::size_t is = S.id();
  return tape.record(Tensor::scalar(value), {S}, [is, weights, tau, mode](Tape& tp, const Tensor& g) {
    const Tensor& sv = tp.value(is);
    const std::size_t n = sv.dim(0);
    Tensor gs({n, n});
    const double coef = g[0] / (static_cast<double>(n) * tau);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) {
        if (mode == DenominatorMode::kLiteral && k == i) continue;
        mx = std::max(mx, sv.at(i, k) / tau);
      }
      std::vector<double> e(n, 0.0);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i && mode == DenominatorMode::kLiteral) continue;
        const double w = (k == i || !weights) ? 1.0 : weights->at(i, k);
        e[k] = w * std::exp(sv.at(i, k) / tau - mx);
        z += e[k];
      }
      for (std::size_t k = 0; k < n; ++k)
        gs.at(i, k) = coef * (e[k] / z - (k == i ? 1.0 : 0.0));
    }
    tp.accumulate(is, gs);
  });
}

namespace align_detail {
// Rows of time step t from (N*T, c) tokens ordered (patch, time).
inline std::shared_ptr<const std::vector<std::size_t>> time_rows(std::size_t n, std::size_t T,
                                                                 std::size_t t, std::size_t c) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) idx->push_back((i * T + t) * c + k);
  return idx;
}
}  // namespace align_detail

// Negative weights for token matrices: fmri (N*T, c) ordered (patch, time), smri (N, c).
inline WeightMatrix token_weights(const Tensor& fmri_tokens, const TokenGrid& fmri_grid,
                                  const Tensor& smri_tokens, const M2MConfig& cfg) {
  const std::size_t n = fmri_grid.spatial(), T = fmri_grid.t, c = fmri_tokens.dim(1);
  if (fmri_tokens.dim(0) != n * T || smri_tokens.dims() != Shape{n, c})
    throw ShapeError("token_weights: sMRI tokens " + shape_str(smri_tokens.dims()) +
                     " do not match the fMRI grid");
  WeightMatrix out{Tensor({T, n, n}), std::nullopt};
  if (cfg.symmetric) out.transposed = Tensor({T, n, n});
  for (std::size_t t = 0; t < T; ++t) {
    Tensor ft({n, c});
    const auto idx = align_detail::time_rows(n, T, t, c);
    for (std::size_t j = 0; j < idx->size(); ++j) ft[j] = fmri_tokens[(*idx)[j]];
    const Tensor wf = weights_from_discrepancy(ft, smri_tokens, cfg);
    std::copy(wf.data().begin(), wf.data().end(), out.w.data().begin() + static_cast<long>(t * n * n));
    if (cfg.symmetric) {
      const Tensor wb = weights_from_discrepancy(smri_tokens, ft, cfg);
      std::copy(wb.data().begin(), wb.data().end(),
                out.transposed->data().begin() + static_cast<long>(t * n * n));
    }
  }
  return out;
}

// M2M loss on encoder tokens with the given (detached) weights: per-step
// anchor mean, summed over time steps.
inline Var m2m_loss(const Var& fmri_tokens, const TokenGrid& fmri_grid, const Var& smri_tokens,
                    const WeightMatrix& weights, const M2MConfig& cfg) {
  cfg.validate();
  const std::size_t n = fmri_grid.spatial(), T = fmri_grid.t;
  if (smri_tokens.dims()[0] != n || smri_tokens.dims()[1] != fmri_tokens.dims()[1])
    throw ShapeError("m2m_loss: sMRI tokens " + shape_str(smri_tokens.dims()) +
                     " do not match the fMRI grid");
  if (weights.w.dims() != Shape{T, n, n}) throw ShapeError("m2m_loss: weight dims differ");
  if (cfg.symmetric && !weights.transposed)
    throw ContractError("symmetric m2m_loss needs sMRI-anchored weights");
  const std::size_t c = fmri_tokens.dims()[1];
  Var total;
  for (std::size_t t = 0; t < T; ++t) {
    Var ft = gather(fmri_tokens, align_detail::time_rows(n, T, t, c), {n, c});
    Var st = matmul_nt(ft, smri_tokens);
    Var lt = weighted_info_nce(st, std::make_shared<const Tensor>(weights.slice(t)), cfg.tau,
                               cfg.denominator);
    if (cfg.symmetric) {
      Var back = weighted_info_nce(transpose(st),
                                   std::make_shared<const Tensor>(weights.transposed_slice(t)),
                                   cfg.tau, cfg.denominator);
      lt = scale(lt + back, 0.5);
    }
    total = total.valid() ? total + lt : lt;
  }
  return total;
}

// Same, with weights derived from the current token values.
inline Var m2m_loss(const Var& fmri_tokens, const TokenGrid& fmri_grid, const Var& smri_tokens,
                    const M2MConfig& cfg) {
  return m2m_loss(fmri_tokens, fmri_grid, smri_tokens,
                  token_weights(fmri_tokens.value(), fmri_grid, smri_tokens.value(), cfg), cfg);
}

}  // namespace m2m
