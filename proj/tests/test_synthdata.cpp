#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "m2m/synthdata.hpp"

using namespace m2m;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.n_subjects = 6;
  s.grid = {8, 8, 8, 4};
  s.seed = 11;
  return s;
}

// Second-opinion generator for one noiseless subject: explicit blobs from the
// jittered centres the generator reports, summed the long way.
double blob(double h, double w, double d, const Point3& c, double sigma) {
  const double r2 = (h - c[0]) * (h - c[0]) + (w - c[1]) * (w - c[1]) + (d - c[2]) * (d - c[2]);
  return std::exp(-r2 / (2.0 * sigma * sigma));
}

}  // namespace

TEST(SynthSpec, RejectsOrphansAndBadShapes) {
  SynthSpec s = small_spec();
  s.correspondence = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 0}};
  EXPECT_THROW(s.validate(), SpecError);
  s.correspondence = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 1, 0}};
  EXPECT_THROW(s.validate(), SpecError);  // structural component 3 orphaned
  s.correspondence = block_correspondence(4, 2);
  EXPECT_NO_THROW(s.validate());
  s.k_f = 1;
  EXPECT_THROW(s.validate(), SpecError);
  s = small_spec();
  s.k_s = 3;
  EXPECT_THROW(s.validate(), SpecError);  // identity needs k_f == k_s
  s.correspondence = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 1}};
  EXPECT_NO_THROW(s.validate());
  s = small_spec();
  s.n_positive = 7;
  EXPECT_THROW(s.validate(), SpecError);
  EXPECT_THROW(generate_dataset(s), SpecError);
}

TEST(SynthSpec, ImbalancedRatioAccepted) {
  SynthSpec s;
  s.n_subjects = 545 + 97;
  s.n_positive = 97;
  EXPECT_NO_THROW(s.validate());
  const std::vector<int> labels = synth_labels(s);
  EXPECT_EQ(std::accumulate(labels.begin(), labels.end(), 0), 97);
  EXPECT_EQ(labels.size(), 642u);
}

TEST(Generate, ShapesLabelsAndZScore) {
  SynthSpec s = small_spec();
  SyntheticDataset d = generate_dataset(s);
  ASSERT_EQ(d.samples.size(), 6u);
  int pos = 0;
  for (const auto& v : d.samples) {
    EXPECT_EQ(v.fmri.dims(), (Shape{1, 8, 8, 8, 4}));
    EXPECT_EQ(v.smri.dims(), (Shape{1, 8, 8, 8, 1}));
    EXPECT_EQ(v.tabular.size(), 6u);
    pos += v.label;
    for (const Tensor* t : {&v.fmri, &v.smri}) {
      double mean = 0.0, var = 0.0;
      for (double x : t->data()) mean += x;
      mean /= static_cast<double>(t->size());
      for (double x : t->data()) var += (x - mean) * (x - mean);
      EXPECT_NEAR(mean, 0.0, 1e-9);
      EXPECT_NEAR(std::sqrt(var / static_cast<double>(t->size())), 1.0, 1e-6);
    }
  }
  EXPECT_EQ(pos, 3);
  EXPECT_EQ(d.truth.f_maps[0].dims(), (Shape{4, 8, 8, 8}));
}

TEST(Generate, BitIdenticalAcrossRuns) {
  SynthSpec s = small_spec();
  SyntheticDataset a = generate_dataset(s), b = generate_dataset(s);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].fmri, b.samples[i].fmri);
    EXPECT_EQ(a.samples[i].smri, b.samples[i].smri);
    EXPECT_EQ(a.samples[i].tabular, b.samples[i].tabular);
    EXPECT_EQ(a.truth.f_maps[i], b.truth.f_maps[i]);
  }
  s.seed = 12;
  EXPECT_NE(generate_dataset(s).samples[0].fmri, a.samples[0].fmri);
}

TEST(Generate, SubjectRegeneratesIndependently) {
  SynthSpec s = small_spec();
  SyntheticDataset d = generate_dataset(s);
  const std::vector<int> labels = synth_labels(s);
  SubjectData one = generate_subject(s, 4, labels[4], d.truth.f_centers, d.truth.s_centers);
  EXPECT_EQ(one.sample.fmri, d.samples[4].fmri);
  EXPECT_EQ(one.f_maps, d.truth.f_maps[4]);
  // A larger cohort leaves the shared subjects untouched apart from labels.
  s.n_subjects = 10;
  s.n_positive = 3;
  SubjectData again = generate_subject(s, 4, labels[4], d.truth.f_centers, d.truth.s_centers);
  EXPECT_EQ(again.sample.smri, d.samples[4].smri);
}

TEST(Generate, NoiselessRawMatchesComponentSum) {
  SynthSpec s = small_spec();
  s.noise_sigma = 0.0;
  s.zscore = false;
  s.n_subjects = 2;
  s.n_positive = 1;
  SyntheticDataset d = generate_dataset(s);
  // sMRI is the plain sum of structural maps.
  const VolumeSample& v = d.samples[0];
  const Tensor& sm = d.truth.s_maps[0];
  for (std::size_t vox = 0; vox < 512; ++vox) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) sum += sm[j * 512 + vox];
    ASSERT_NEAR(v.smri[vox], sum, 1e-12);
  }
  // Every fMRI frame lies in the span of the functional maps: the residual of
  // a least-squares fit on the maps is zero. Checked on frame 0 via the normal
  // equations solved by Gaussian elimination.
  const Tensor& fm = d.truth.f_maps[0];
  double A[4][5] = {};
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t vox = 0; vox < 512; ++vox) A[a][b] += fm[a * 512 + vox] * fm[b * 512 + vox];
    for (std::size_t vox = 0; vox < 512; ++vox) A[a][4] += fm[a * 512 + vox] * v.fmri[vox * 4];
  }
  for (int p = 0; p < 4; ++p)
    for (int r = p + 1; r < 4; ++r) {
      const double f = A[r][p] / A[p][p];
      for (int c = p; c < 5; ++c) A[r][c] -= f * A[p][c];
    }
  double coef[4];
  for (int r = 3; r >= 0; --r) {
    double x = A[r][4];
    for (int c = r + 1; c < 4; ++c) x -= A[r][c] * coef[c];
    coef[r] = x / A[r][r];
  }
  for (std::size_t vox = 0; vox < 512; ++vox) {
    double fit = 0.0;
    for (std::size_t k = 0; k < 4; ++k) fit += coef[k] * fm[k * 512 + vox];
    ASSERT_NEAR(v.fmri[vox * 4], fit, 1e-8);
  }
}

TEST(Generate, MapsAreGaussianBlobs) {
  SynthSpec s = small_spec();
  s.center_jitter = 0.0;
  SyntheticDataset d = generate_dataset(s);
  const double sigma = s.resolved_sigma();
  EXPECT_EQ(sigma, 1.0);
  const Tensor& fm = d.truth.f_maps[2];
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t w = 0; w < 8; ++w)
        for (std::size_t z = 0; z < 8; ++z)
          ASSERT_NEAR(fm[((k * 8 + h) * 8 + w) * 8 + z],
                      blob(static_cast<double>(h), static_cast<double>(w), static_cast<double>(z), d.truth.f_centers[k],
                           sigma),
                      1e-15);
}

TEST(Generate, StructuralCentresFollowCorrespondence) {
  std::vector<Point3> f{{0, 0, 0}, {2, 4, 6}, {4, 4, 4}};
  Correspondence c{{1, 0}, {1, 0}, {0, 1}};
  auto s = structural_centers(f, c);
  EXPECT_EQ(s[0], (Point3{0.5, 1, 1.5}));  // primary partner 0
  EXPECT_EQ(s[1], (Point3{4, 4, 4}));  // sole partner 2
  auto id = structural_centers(f, Correspondence{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  EXPECT_EQ(id, f);
}

TEST(Generate, ClassEffectRaisesDesignatedAmplitude) {
  SynthSpec s = small_spec();
  s.noise_sigma = 0.0;
  s.zscore = false;
  s.center_jitter = 0.0;
  s.temporal_amplitude = 0.0;
  s.class_effect = 0.5;
  s.n_subjects = 2;
  s.n_positive = 1;
  SyntheticDataset d = generate_dataset(s);
  const VolumeSample& pos = d.samples[0].label ? d.samples[0] : d.samples[1];
  const VolumeSample& neg = d.samples[0].label ? d.samples[1] : d.samples[0];
  // Without jitter the maps agree; the difference is 0.5 × map 0 in every frame.
  const Tensor& m0 = d.truth.f_maps[0];
  for (std::size_t vox = 0; vox < 512; ++vox)
    for (std::size_t t = 0; t < 4; ++t)
      ASSERT_NEAR(pos.fmri[vox * 4 + t] - neg.fmri[vox * 4 + t], 0.5 * m0[vox], 1e-12);
  EXPECT_EQ(pos.smri, neg.smri);
}

TEST(Generate, TabularMeanShift) {
  SynthSpec s = small_spec();
  s.n_subjects = 400;
  s.tabular_signal = 1.0;
  s.grid = {2, 2, 2, 2};
  SyntheticDataset d = generate_dataset(s);
  double diff0 = 0.0, diff1 = 0.0;
  for (const auto& v : d.samples) {
    const double sign = v.label ? 1.0 : -1.0;
    diff0 += sign * v.tabular[0] / 200.0;
    diff1 += sign * v.tabular[1] / 200.0;
  }
  EXPECT_NEAR(diff0, 1.0, 0.25);
  EXPECT_NEAR(diff1, -1.0, 0.25);
}

TEST(Generate, NoSignalClassesIdenticalInDistribution) {
  SynthSpec s = small_spec();
  s.noise_sigma = 0.0;
  s.class_effect = 0.0;
  s.tabular_signal = 0.0;
  s.n_subjects = 2;
  s.n_positive = 1;
  SyntheticDataset d = generate_dataset(s);
  // The generator never reads the label beyond the class and tabular shifts,
  // so regenerating a subject under the other label changes nothing.
  SubjectData flipped = generate_subject(s, 0, 1 - d.samples[0].label, d.truth.f_centers, d.truth.s_centers);
  EXPECT_EQ(flipped.sample.fmri, d.samples[0].fmri);
  EXPECT_EQ(flipped.sample.tabular, d.samples[0].tabular);
}

TEST(GroundTruth, PatchMassAndOwnership) {
  Tensor maps({2, 2, 2, 2});
  for (std::size_t v = 0; v < 8; ++v) {
    maps[v] = v < 4 ? 1.0 : 0.25;    // component 0 strong in h = 0
    maps[8 + v] = v < 4 ? 0.5 : 1.0;  // component 1 strong in h = 1
  }
  Tensor m = patch_mass(maps, {1, 2, 2});
  EXPECT_EQ(m, Tensor::matrix({{4.0, 2.0}, {1.0, 4.0}}));
  EXPECT_EQ(dominant_component(m), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(voxel_ownership(maps), (std::vector<std::size_t>{0, 0, 0, 0, 1, 1, 1, 1}));
  EXPECT_THROW(patch_mass(maps, {3, 1, 1}), ShapeError);
}

TEST(GroundTruth, TruthSimilarityRoutesThroughCorrespondence) {
  Tensor f = Tensor::matrix({{1, 0}, {0, 2}});
  Tensor s = Tensor::matrix({{0, 3}, {5, 0}});
  Correspondence swap{{0, 1}, {1, 0}};
  EXPECT_EQ(truth_similarity(f, swap, s), Tensor::matrix({{3, 0}, {0, 10}}));
  EXPECT_EQ(truth_similarity(f, identity_correspondence(2), s), Tensor::matrix({{0, 5}, {6, 0}}));
}

TEST(GroundTruth, CompositionRowsSumToOne) {
  SynthSpec s = small_spec();
  SyntheticDataset d = generate_dataset(s);
  const Tensor c = patch_composition(d.truth.f_maps[1], {2, 2, 2});
  const Tensor m = patch_mass(d.truth.f_maps[1], {2, 2, 2});
  EXPECT_EQ(dominant_component(c), dominant_component(m));
  for (std::size_t i = 0; i < c.dim(0); ++i) {
    double total = 0.0;
    for (double v : c.row(i)) total += v;
    ASSERT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(GroundTruth, IdentityNoiselessRowMaximumIsSameComponent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthSpec s = small_spec();
    s.noise_sigma = 0.0;
    s.seed = seed;
    s.n_subjects = 2;
    s.n_positive = 1;
    SyntheticDataset d = generate_dataset(s);
    for (std::size_t subj = 0; subj < 2; ++subj) {
      const Tensor fc = patch_composition(d.truth.f_maps[subj], {2, 2, 2});
      const Tensor sc = patch_composition(d.truth.s_maps[subj], {2, 2, 2});
      const auto fd = dominant_component(fc), sd = dominant_component(sc);
      const Tensor S = truth_similarity(fc, d.truth.correspondence, sc);
      const std::size_t n = S.dim(0);
      for (std::size_t i = 0; i < n; ++i) {
        double best_same = -1.0, best_other = -1.0;
        for (std::size_t j = 0; j < n; ++j) {
          double& slot = sd[j] == fd[i] ? best_same : best_other;
          slot = std::max(slot, S.at(i, j));
        }
        ASSERT_GT(best_same, best_other) << "seed " << seed << " subject " << subj << " anchor " << i;
      }
    }
  }
}

// Planted recall against the mean recall over random non-identity column
// permutations of the same correspondence.
TEST(GroundTruth, PlantedCorrespondenceBeatsPermutedProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::size_t block : {1u, 2u}) {
      SynthSpec s = small_spec();
      s.noise_sigma = 0.0;
      s.seed = seed;
      s.n_subjects = 1;
      s.n_positive = 0;
      s.correspondence = block_correspondence(4, block);
      SyntheticDataset d = generate_dataset(s);
      const Tensor fc = patch_composition(d.truth.f_maps[0], {2, 2, 2});
      const Tensor sc = patch_composition(d.truth.s_maps[0], {2, 2, 2});
      const auto fd = dominant_component(fc), sd = dominant_component(sc);
      const Tensor S = truth_similarity(fc, d.truth.correspondence, sc);
      const double planted = correspondence_recall(S, fd, sd, d.truth.correspondence);
      Rng rng({seed, block});
      double permuted_sum = 0.0;
      const int trials = 10;
      for (int trial = 0; trial < trials; ++trial) {
        std::vector<std::size_t> perm{0, 1, 2, 3};
        Correspondence permuted;
        do {
          rng.shuffle(perm);
          permuted = d.truth.correspondence;
          for (std::size_t a = 0; a < 4; ++a)
            for (std::size_t b = 0; b < 4; ++b) permuted[a][b] = d.truth.correspondence[a][perm[b]];
        } while (permuted == d.truth.correspondence);
        const double r = correspondence_recall(S, fd, sd, permuted);
        if (block == 1) ASSERT_GT(planted, r) << "seed " << seed;
        permuted_sum += r;
      }
      ASSERT_GT(planted, permuted_sum / trials) << "seed " << seed << " block " << block;
    }
}
