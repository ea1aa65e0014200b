#include <cardiofib/features.hpp>
#include <cardiofib/phantom.hpp>

#include <gtest/gtest.h>

#include "support/geometry_oracles.hpp"

#include <filesystem>
#include <random>

using namespace cardiofib;
using namespace cftest;

namespace {

// Slab along x: endo plane at i = 0, epi plane at i = n - 1.
MaskVolume slab_mask(int n, double spacing) {
  Grid g;
  g.dims = {n, 4, 3};
  g.spacing = Vec3(spacing, 1.3, 0.7);
  MaskVolume m(g);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    const auto v = g.ijk(i);
    m.labels[i] = v[0] == 0 ? kEndo : v[0] == n - 1 ? kEpi : kInterior;
  }
  return m;
}

}  // namespace

TEST(TransmuralDepth, SlabGivesLinearProfile) {
  const int n = 21;
  const auto mask = slab_mask(n, 0.5);
  const auto td = solve_transmural_depth(mask, 1e-10);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto v = mask.grid.ijk(i);
    EXPECT_NEAR(td.depth.data[i], static_cast<double>(v[0]) / (n - 1), 1e-8);
  }
}

TEST(TransmuralDepth, EqualBoundaryValuesGiveConstantField) {
  const auto mask = slab_mask(9, 1.0);
  const auto td = solve_transmural_depth(mask, 1e-10, 1000, 0.37, 0.37);
  for (double v : td.depth.data) EXPECT_DOUBLE_EQ(v, 0.37);
}

TEST(TransmuralDepth, MissingBoundaryCodesAndIsolatedRegionsAreErrors) {
  auto mask = slab_mask(9, 1.0);
  for (auto& l : mask.labels)
    if (l == kEpi) l = kInterior;
  EXPECT_THROW(solve_transmural_depth(mask), DataError);

  Grid g;
  g.dims = {7, 1, 1};
  MaskVolume m(g);
  m.labels = {kEndo, kInterior, kEpi, kOutside, kInterior, kInterior, kOutside};
  EXPECT_THROW(solve_transmural_depth(m), DataError);
}

TEST(TransmuralDepth, NonConvergenceReportsResidual) {
  const auto mask = slab_mask(40, 1.0);
  try {
    solve_transmural_depth(mask, 1e-14, 2);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("residual"), std::string::npos);
  }
}

TEST(TransmuralDepth, AnnulusMatchesLogProfileAndObeysMaximumPrinciple) {
  const auto spec = annulus_on_grid(48);
  const auto ph = generate_annulus_phantom(spec);
  const auto td = solve_transmural_depth(ph.mask);
  double lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < td.depth.data.size(); ++i) {
    if (ph.mask.labels[i] == kOutside) {
      EXPECT_TRUE(std::isnan(td.depth.data[i]));
      continue;
    }
    lo = std::min(lo, td.depth.data[i]);
    hi = std::max(hi, td.depth.data[i]);
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  const Vec3 p = spec.center() + Vec3(std::sqrt(200.0), 0, 0);
  EXPECT_NEAR(*sample_trilinear(td.depth, p), 0.5, 0.03);
  EXPECT_LT(max_td_error(48), 0.05);
}

TEST(LocalFrame, CanonicalCases) {
  const LVAxis axis;
  auto f = local_frame(Vec3(1, 0, 5), axis);
  EXPECT_NEAR((f.radial - Vec3(1, 0, 0)).norm(), 0, 1e-15);
  EXPECT_NEAR((f.circumferential - Vec3(0, 1, 0)).norm(), 0, 1e-15);
  f = local_frame(Vec3(0, 2, -3), axis);
  EXPECT_NEAR((f.radial - Vec3(0, 1, 0)).norm(), 0, 1e-15);
  EXPECT_NEAR((f.circumferential - Vec3(-1, 0, 0)).norm(), 0, 1e-15);
  EXPECT_THROW(local_frame(Vec3(0, 0, 7), axis), NumericError);
}

TEST(LocalFrame, RightHandedOrthonormalForRandomAxes) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 1000; ++t) {
    const LVAxis axis(Vec3(n(rng), n(rng), n(rng)), Vec3(n(rng), n(rng), n(rng)));
    const Vec3 p(n(rng) * 10, n(rng) * 10, n(rng) * 10);
    const auto f = local_frame(p, axis);
    EXPECT_LT(std::abs(f.radial.dot(f.circumferential)), 1e-12);
    EXPECT_LT(std::abs(f.radial.dot(axis.direction)), 1e-12);
    EXPECT_LT(std::abs(f.circumferential.dot(axis.direction)), 1e-12);
    Eigen::Matrix3d m;
    m << f.radial, f.circumferential, axis.direction;
    EXPECT_NEAR(m.determinant(), 1.0, 1e-12);
  }
}

TEST(HelicalAngle, CircumferentialAndLongitudinalTangents) {
  const LVAxis axis;
  std::vector<Vec3> ring;
  for (int i = 0; i < 10; ++i) ring.emplace_back(15 * std::cos(0.05 * i), 15 * std::sin(0.05 * i), 2.0);
  for (double v : helical_angle(ring, axis)) EXPECT_NEAR(v, 0.0, 1e-9);

  std::vector<Vec3> line;
  for (int i = 0; i < 10; ++i) line.emplace_back(12, 3, 0.1 * i);
  for (double v : helical_angle(line, axis)) EXPECT_DOUBLE_EQ(v, 90.0);
  std::reverse(line.begin(), line.end());
  for (double v : helical_angle(line, axis)) EXPECT_DOUBLE_EQ(v, 90.0);
}

TEST(HelicalAngle, RightHandedHelixIsNegative) {
  const LVAxis axis;
  std::vector<Vec3> helix;
  for (int i = 0; i < 30; ++i) {
    const double s = 0.1 * i;
    helix.emplace_back(15 * std::cos(s / 15 * std::cos(deg2rad(-40))), 15 * std::sin(s / 15 * std::cos(deg2rad(-40))),
                       s * std::sin(deg2rad(-40)));
  }
  for (double v : helical_angle(helix, axis)) EXPECT_NEAR(v, -40.0, 0.01);
}

TEST(HelicalAngle, RadialTangentCarriesPreviousValue) {
  const LVAxis axis;
  const std::vector<Vec3> pts{Vec3(10, 0, 0), Vec3(11, 0, 0), Vec3(12, 0, 0)};
  for (double v : helical_angle(pts, axis)) EXPECT_EQ(v, 0.0);
  const std::vector<Vec3> bent{Vec3(10, 0, 0), Vec3(10, 0.1, 0.1), Vec3(10, 0.2, 0.2), Vec3(11, 0.2, 0.2), Vec3(12, 0.2, 0.2)};
  const auto ha = helical_angle(bent, axis);
  EXPECT_NEAR(ha[1], 45.0, 1.0);
  EXPECT_EQ(ha[4], ha[3]);
}

TEST(HelicalAngle, InvariantToPointOrder) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 0.05);
  const LVAxis axis;
  for (int t = 0; t < 50; ++t) {
    std::vector<Vec3> pts;
    Vec3 p(14, 0, 0);
    Vec3 d(0.02, 0.1, 0.05);
    for (int i = 0; i < 40; ++i) {
      pts.push_back(p);
      d += Vec3(n(rng), n(rng), n(rng)) * 0.1;
      p += d;
    }
    const auto fwd = helical_angle(pts, axis);
    std::reverse(pts.begin(), pts.end());
    const auto bwd = helical_angle(pts, axis);
    for (std::size_t i = 1; i + 1 < fwd.size(); ++i) EXPECT_NEAR(fwd[i], bwd[bwd.size() - 1 - i], 1e-9);
  }
}

TEST(FeatureDataset, SplitSizesAndDeterminism) {
  std::vector<FeatureSequence> seqs;
  for (int f = 0; f < 100; ++f) {
    Matrix v = Matrix::Constant(30, kFeatureCount, f);
    seqs.emplace_back(v);
  }
  const auto a = dataset_from_sequences(seqs, 123);
  EXPECT_EQ(a.train.size(), 72u);
  EXPECT_EQ(a.val.size(), 8u);
  EXPECT_EQ(a.test.size(), 20u);
  const auto b = dataset_from_sequences(seqs, 123);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.val_ids, b.val_ids);
  EXPECT_EQ(a.test_ids, b.test_ids);
  const auto c = dataset_from_sequences(seqs, 124);
  EXPECT_NE(a.train_ids, c.train_ids);
  // Stats come from train only.
  double mean = 0;
  for (auto i : a.train_ids) mean += static_cast<double>(i);
  EXPECT_NEAR(a.stats.mean[0], mean / 72.0, 1e-12);
}

TEST(FeatureDataset, ShortFibersAreDropped) {
  std::vector<FeatureSequence> seqs(5, FeatureSequence(Matrix::Zero(10, kFeatureCount)));
  EXPECT_THROW(dataset_from_sequences(seqs, 1), DataError);
  seqs.emplace_back(Matrix::Zero(26, kFeatureCount));
  const auto ds = dataset_from_sequences(seqs, 1);
  EXPECT_EQ(ds.all.size(), 1u);
  EXPECT_EQ(ds.dropped_short, 5u);
  EXPECT_THROW(dataset_from_sequences({}, 1), DataError);
}

TEST(FeatureDataset, StreamlinesFromPhantomCarryOracleValues) {
  PhantomSpec spec;
  spec.dims = {64, 64, 24};
  spec.spacing = Vec3(0.75, 0.75, 1.0);
  const auto ph = generate_annulus_phantom(spec);
  const auto td = solve_transmural_depth(ph.mask);
  const LVAxis axis(spec.center(), spec.axis());
  std::vector<Streamline> lines;
  for (int f = 0; f < 3; ++f) {
    Streamline s;
    const double r = 12.0 + 3.0 * f;
    const double ha = deg2rad(phantom_helix_angle(spec, r));
    for (int i = 0; i < 60; ++i) {
      const double arc = 0.1 * i;
      const double phi = arc * std::cos(ha) / r;
      s.points.push_back(spec.center() + Vec3(r * std::cos(phi), r * std::sin(phi), arc * std::sin(ha)));
    }
    lines.push_back(s);
  }
  Streamline off;
  off.points.assign(30, spec.center() + Vec3(0, 0, 0.5));
  lines.push_back(off);
  const auto ds = build_feature_dataset(lines, td.depth, axis, 3);
  EXPECT_EQ(ds.all.size(), 3u);
  EXPECT_EQ(ds.dropped_td, 1u);
  for (std::size_t k = 0; k < ds.all.size(); ++k) {
    const auto& v = ds.all[k].values;
    const double r = 12.0 + 3.0 * ds.source_index[k];
    for (Eigen::Index i = 1; i + 1 < v.rows(); ++i) {
      EXPECT_NEAR(v(i, kHA), phantom_helix_angle(spec, r), 0.05);
      EXPECT_NEAR(v(i, kTD), std::log(r / 10.0) / std::log(2.0), 0.05);
    }
  }
}

TEST(FeatureFile, RoundTripWithStats) {
  std::vector<FeatureSequence> seqs;
  seqs.emplace_back(Matrix::Constant(27, 5, 0.5));
  seqs.emplace_back(Matrix::Constant(30, 5, -1.25));
  FeatureStats st;
  st.mean = {1, 2, 3, 4, 0.5};
  st.stddev = {0.1, 0.2, 0.3, 40, 0.25};
  const auto path = (std::filesystem::temp_directory_path() / "cardiofib_seq.fft").string();
  write_feature_sequences(path, seqs, st);
  const auto back = read_feature_sequences(path);
  ASSERT_EQ(back.sequences.size(), 2u);
  EXPECT_TRUE(back.sequences[1].values == seqs[1].values);
  ASSERT_TRUE(back.stats);
  EXPECT_EQ(back.stats->stddev, st.stddev);
}
