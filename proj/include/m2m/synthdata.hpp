#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "m2m/encoders.hpp"
#include "m2m/errors.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

using Correspondence = std::vector<std::vector<int>>;  // K_f rows × K_s columns, entries 0/1

inline Correspondence identity_correspondence(std::size_t k) {
  Correspondence c(k, std::vector<int>(k, 0));
  for (std::size_t i = 0; i < k; ++i) c[i][i] = 1;
  return c;
}

// Block-diagonal all-ones blocks: components inside one block all correspond.
inline Correspondence block_correspondence(std::size_t k, std::size_t block) {
  if (block == 0 || k % block != 0) throw SpecError("block size must divide the component count");
  Correspondence c(k, std::vector<int>(k, 0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) c[i][j] = (i / block == j / block) ? 1 : 0;
  return c;
}

struct SynthSpec {
  std::size_t n_subjects = 80;
  std::optional<std::size_t> n_positive;  // default: half, rounded down
  std::array<std::size_t, 4> grid{8, 8, 8, 4};  // (H, W, D, T)
  std::size_t k_f = 4;
  std::size_t k_s = 4;
  Correspondence correspondence;  // empty means identity (requires k_f == k_s)
  double class_effect = 0.5;
  std::vector<std::size_t> class_components{0};  // functional components shifted for label 1
  double noise_sigma = 0.1;
  std::size_t tabular_dim = 6;
  double tabular_signal = 0.5;
  double blob_sigma = 0.0;      // voxels; 0 picks min(H, W, D) / 8
  double center_jitter = 0.5;   // per-subject std of blob centres, voxels
  double temporal_amplitude = 0.5;
  bool zscore = true;
  std::uint64_t seed = 0;

  std::size_t positives() const { return n_positive.value_or(n_subjects / 2); }

  double resolved_sigma() const {
    if (blob_sigma > 0.0) return blob_sigma;
    return static_cast<double>(std::min({grid[0], grid[1], grid[2]})) / 8.0;
  }

  Correspondence resolved_correspondence() const {
    return correspondence.empty() ? identity_correspondence(k_f) : correspondence;
  }

  void validate() const {
    if (k_f < 2 || k_s < 2) throw SpecError("need at least two functional and two structural components");
    for (std::size_t g : grid)
      if (g == 0) throw SpecError("grid extents must be positive");
    if (n_subjects == 0) throw SpecError("n_subjects must be positive");
    if (positives() > n_subjects) throw SpecError("n_positive exceeds n_subjects");
    if (noise_sigma < 0.0) throw SpecError("noise_sigma must be non-negative");
    if (correspondence.empty() && k_f != k_s)
      throw SpecError("an explicit correspondence is required when k_f != k_s");
    const Correspondence c = resolved_correspondence();
    if (c.size() != k_f) throw SpecError("correspondence must have k_f rows");
    std::vector<int> col_hits(k_s, 0);
    for (std::size_t i = 0; i < k_f; ++i) {
      if (c[i].size() != k_s) throw SpecError("correspondence must have k_s columns");
      int row_hits = 0;
      for (std::size_t j = 0; j < k_s; ++j) {
        if (c[i][j] != 0 && c[i][j] != 1) throw SpecError("correspondence entries must be 0 or 1");
        row_hits += c[i][j];
        col_hits[j] += c[i][j];
      }
      if (row_hits == 0)
        throw SpecError("functional component " + std::to_string(i) + " has no structural partner");
    }
    for (std::size_t j = 0; j < k_s; ++j)
      if (col_hits[j] == 0)
        throw SpecError("structural component " + std::to_string(j) + " has no functional partner");
    for (std::size_t k : class_components)
      if (k >= k_f) throw SpecError("class component index out of range");
  }
};

using Point3 = std::array<double, 3>;

struct GroundTruth {
  Correspondence correspondence;
  std::vector<Point3> f_centers;  // dataset-level centres before jitter
  std::vector<Point3> s_centers;
  std::vector<Tensor> f_maps;     // per subject, (K_f, H, W, D)
  std::vector<Tensor> s_maps;     // per subject, (K_s, H, W, D)
};

struct SyntheticDataset {
  std::vector<VolumeSample> samples;
  GroundTruth truth;
};

namespace synth_detail {

// RNG stream purposes.
enum Purpose : std::uint64_t { kLayout = 1, kLabels = 2, kMaps = 3, kTime = 4, kNoise = 5, kTabular = 6 };

inline constexpr std::uint64_t kDatasetStream = 0xffffffffu;

inline std::vector<Point3> place_centers(std::size_t k, const std::array<std::size_t, 4>& grid,
                                         double min_dist, Rng& rng) {
  std::vector<Point3> out;
  for (std::size_t i = 0; i < k; ++i) {
    Point3 best{};
    double best_gap = -1.0;
    // Keep the candidate farthest from existing centres among a few draws.
    for (int attempt = 0; attempt < 64; ++attempt) {
      Point3 p;
      for (int a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(grid[a]);
        p[a] = rng.uniform(0.2 * ext, 0.8 * ext) - 0.5;
      }
      double gap = 1e300;
      for (const Point3& q : out) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (p[a] - q[a]) * (p[a] - q[a]);
        gap = std::min(gap, std::sqrt(d2));
      }
      if (gap > best_gap) best_gap = gap, best = p;
      if (gap >= min_dist) break;
    }
    out.push_back(best);
  }
  return out;
}

inline void fill_blob(double* out, const std::array<std::size_t, 4>& grid, const Point3& c, double sigma) {
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::size_t v = 0;
  for (std::size_t h = 0; h < grid[0]; ++h)
    for (std::size_t w = 0; w < grid[1]; ++w)
      for (std::size_t d = 0; d < grid[2]; ++d, ++v) {
        const double dh = static_cast<double>(h) - c[0];
        const double dw = static_cast<double>(w) - c[1];
        const double dd = static_cast<double>(d) - c[2];
        out[v] = std::exp(-(dh * dh + dw * dw + dd * dd) * inv);
      }
}

inline void zscore(Tensor& t) {
  const double n = static_cast<double>(t.size());
  double mean = 0.0;
  for (double v : t.data()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double& v : t.data()) {
    v -= mean;
    var += v * v;
  }
  const double sd = std::sqrt(var / n);
  if (sd > 0.0)
    for (double& v : t.data()) v /= sd;
}

}  // namespace synth_detail

// Structural centre j sits halfway between its primary partner (functional
// component j when they correspond, else its first partner) and the mean of
// all its partners. Overlapping support then follows the correspondence while
// components sharing the same partners stay distinct.
inline std::vector<Point3> structural_centers(const std::vector<Point3>& f_centers, const Correspondence& c) {
  const std::size_t ks = c.empty() ? 0 : c[0].size();
  std::vector<Point3> out(ks, Point3{0.0, 0.0, 0.0});
  for (std::size_t j = 0; j < ks; ++j) {
    Point3 mean{0.0, 0.0, 0.0};
    double n = 0.0;
    std::size_t primary = f_centers.size();
    for (std::size_t i = 0; i < f_centers.size(); ++i)
      if (c[i][j]) {
        for (int a = 0; a < 3; ++a) mean[a] += f_centers[i][a];
        n += 1.0;
        if (primary == f_centers.size() || i == j) primary = i;
      }
    for (int a = 0; a < 3; ++a) out[j][a] = 0.5 * f_centers[primary][a] + 0.5 * mean[a] / n;
  }
  return out;
}

// Labels for the whole dataset: exactly positives() ones, order shuffled.
inline std::vector<int> synth_labels(const SynthSpec& spec) {
  std::vector<int> labels(spec.n_subjects, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(spec.positives()), 1);
  Rng rng({spec.seed, synth_detail::kDatasetStream, synth_detail::kLabels});
  rng.shuffle(labels);
  return labels;
}

struct SubjectData {
  VolumeSample sample;
  Tensor f_maps;
  Tensor s_maps;
};

// One subject, regenerated independently of every other subject.
inline SubjectData generate_subject(const SynthSpec& spec, std::size_t subject, int label,
                                    const std::vector<Point3>& f_centers,
                                    const std::vector<Point3>& s_centers) {
  using namespace synth_detail;
  const auto& g = spec.grid;
  const std::size_t nvox = g[0] * g[1] * g[2];
  const std::size_t T = g[3];
  const double sigma = spec.resolved_sigma();

  Rng map_rng({spec.seed, subject, kMaps});
  auto jittered = [&](const Point3& c) {
    Point3 p = c;
    for (double& v : p) v += map_rng.normal(0.0, spec.center_jitter);
    return p;
  };
  Tensor f_maps({spec.k_f, g[0], g[1], g[2]});
  for (std::size_t k = 0; k < spec.k_f; ++k) fill_blob(f_maps.data().data() + k * nvox, g, jittered(f_centers[k]), sigma);
  Tensor s_maps({spec.k_s, g[0], g[1], g[2]});
  for (std::size_t j = 0; j < spec.k_s; ++j) fill_blob(s_maps.data().data() + j * nvox, g, jittered(s_centers[j]), sigma);

  // Time courses: baseline amplitude (shifted for label 1 on designated
  // components) plus a two-sinusoid mixture with random phases.
  Rng time_rng({spec.seed, subject, kTime});
  std::vector<double> tc(spec.k_f * T);
  for (std::size_t k = 0; k < spec.k_f; ++k) {
    double base = 1.0;
    if (label == 1 &&
        std::find(spec.class_components.begin(), spec.class_components.end(), k) != spec.class_components.end())
      base += spec.class_effect;
    const double f1 = 1.0 + static_cast<double>(time_rng.below(std::max<std::size_t>(1, T / 2)));
    const double f2 = 1.0 + static_cast<double>(time_rng.below(std::max<std::size_t>(1, T / 2)));
    const double p1 = time_rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double p2 = time_rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t t = 0; t < T; ++t) {
      const double x = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(T);
      tc[k * T + t] = base + spec.temporal_amplitude * (std::sin(f1 * x + p1) + 0.5 * std::sin(f2 * x + p2));
    }
  }

  Rng noise_rng({spec.seed, subject, kNoise});
  Tensor fmri({1, g[0], g[1], g[2], T});
  for (std::size_t v = 0; v < nvox; ++v)
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < spec.k_f; ++k) s += f_maps[k * nvox + v] * tc[k * T + t];
      fmri[v * T + t] = s;
    }
  Tensor smri({1, g[0], g[1], g[2], 1});
  for (std::size_t v = 0; v < nvox; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < spec.k_s; ++j) s += s_maps[j * nvox + v];
    smri[v] = s;
  }
  if (spec.noise_sigma > 0.0) {
    for (double& v : fmri.data()) v += noise_rng.normal(0.0, spec.noise_sigma);
    for (double& v : smri.data()) v += noise_rng.normal(0.0, spec.noise_sigma);
  }
  if (spec.zscore) {
    zscore(fmri);
    zscore(smri);
  }

  Rng tab_rng({spec.seed, subject, kTabular});
  std::vector<double> tab(spec.tabular_dim);
  for (std::size_t f = 0; f < spec.tabular_dim; ++f) {
    const double direction = f % 2 == 0 ? 1.0 : -1.0;
    tab[f] = tab_rng.normal() + (label == 1 ? direction * spec.tabular_signal : 0.0);
  }

  return {VolumeSample{std::move(fmri), std::move(smri), std::move(tab), label}, std::move(f_maps),
          std::move(s_maps)};
}

inline SyntheticDataset generate_dataset(const SynthSpec& spec) {
  using namespace synth_detail;
  spec.validate();
  SyntheticDataset out;
  out.truth.correspondence = spec.resolved_correspondence();
  Rng layout({spec.seed, kDatasetStream, kLayout});
  out.truth.f_centers = place_centers(spec.k_f, spec.grid, 3.0 * spec.resolved_sigma(), layout);
  out.truth.s_centers = structural_centers(out.truth.f_centers, out.truth.correspondence);

  const std::vector<int> labels = synth_labels(spec);
  out.samples.reserve(spec.n_subjects);
  for (std::size_t i = 0; i < spec.n_subjects; ++i) {
    SubjectData s = generate_subject(spec, i, labels[i], out.truth.f_centers, out.truth.s_centers);
    out.samples.push_back(std::move(s.sample));
    out.truth.f_maps.push_back(std::move(s.f_maps));
    out.truth.s_maps.push_back(std::move(s.s_maps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth evaluation helpers.

// Component mass per spatial patch: (N, K), patches row-major over the patch grid.
inline Tensor patch_mass(const Tensor& maps, const std::array<std::size_t, 3>& patch) {
  if (maps.rank() != 4) throw ShapeError("component maps must be (K, H, W, D)");
  const std::size_t K = maps.dim(0), H = maps.dim(1), W = maps.dim(2), D = maps.dim(3);
  if (H % patch[0] || W % patch[1] || D % patch[2])
    throw ShapeError("grid is not divisible by the patch size");
  const std::size_t gh = H / patch[0], gw = W / patch[1], gd = D / patch[2];
  Tensor out({gh * gw * gd, K});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t p = ((h / patch[0]) * gw + w / patch[1]) * gd + d / patch[2];
          out[p * K + k] += maps[((k * H + h) * W + w) * D + d];
        }
  return out;
}

// Per-patch composition: component mass divided by the patch's total mass.
// These are the ground-truth patch features used for retrieval checks.
inline Tensor patch_composition(const Tensor& maps, const std::array<std::size_t, 3>& patch) {
  Tensor m = patch_mass(maps, patch);
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    double total = 0.0;
    for (double v : m.row(i)) total += v;
    if (total > 0.0)
      for (double& v : m.row(i)) v /= total;
  }
  return m;
}

// Index of the largest entry per row (first on ties).
inline std::vector<std::size_t> dominant_component(const Tensor& mass) {
  std::vector<std::size_t> out(mass.dim(0));
  const std::size_t K = mass.dim(1);
  for (std::size_t i = 0; i < mass.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (mass[i * K + k] > mass[i * K + best]) best = k;
    out[i] = best;
  }
  return out;
}

// Voxel-to-component ownership: dominant component per voxel, row-major (h, w, d).
inline std::vector<std::size_t> voxel_ownership(const Tensor& maps) {
  const std::size_t K = maps.dim(0), nvox = maps.size() / K;
  std::vector<std::size_t> out(nvox, 0);
  for (std::size_t v = 0; v < nvox; ++v)
    for (std::size_t k = 1; k < K; ++k)
      if (maps[k * nvox + v] > maps[out[v] * nvox + v]) out[v] = k;
  return out;
}

// Cross-modal similarity of ground-truth patch features: fMRI features routed
// through the correspondence, dotted with sMRI features. (N_f, N_s).
inline Tensor truth_similarity(const Tensor& f_feat, const Correspondence& c, const Tensor& s_feat) {
  const std::size_t nf = f_feat.dim(0), ns = s_feat.dim(0), kf = f_feat.dim(1), ks = s_feat.dim(1);
  Tensor out({nf, ns});
  for (std::size_t i = 0; i < nf; ++i)
    for (std::size_t j = 0; j < ns; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < kf; ++a)
        for (std::size_t b = 0; b < ks; ++b)
          if (c[a][b]) s += f_feat[i * kf + a] * s_feat[j * ks + b];
      out[i * ns + j] = s;
    }
  return out;
}

// Fraction of rows whose argmax column satisfies `positive(row, col)`.
template <typename Pred>
double recall_at_1(const Tensor& sim, Pred positive) {
  const std::size_t n = sim.dim(0), m = sim.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (sim[i * m + j] > sim[i * m + best]) best = j;
    hits += positive(i, best) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// A patch pair is a correspondence-level positive when the dominant functional
// component of one corresponds to the dominant structural component of the other.
inline double correspondence_recall(const Tensor& sim, const std::vector<std::size_t>& f_dom,
                                    const std::vector<std::size_t>& s_dom, const Correspondence& c) {
  return recall_at_1(sim, [&](std::size_t i, std::size_t j) { return c[f_dom[i]][s_dom[j]] == 1; });
}

}  // namespace m2m
