#include <cardiofib/volume.hpp>

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

using namespace cardiofib;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cardiofib_" + name)).string();
}

SymmetricTensor3 random_tensor(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  SymmetricTensor3 t;
  for (auto& c : t.c) c = u(rng);
  return t;
}

// Real roots of the characteristic cubic by sign scanning plus bisection.
std::vector<double> cubic_roots_oracle(const SymmetricTensor3& t) {
  const Eigen::Matrix3d m = t.matrix();
  const double tr = m.trace();
  const double c2 = m(0, 0) * m(1, 1) + m(0, 0) * m(2, 2) + m(1, 1) * m(2, 2) - m(0, 1) * m(0, 1) -
                    m(0, 2) * m(0, 2) - m(1, 2) * m(1, 2);
  const double det = m.determinant();
  auto poly = [&](double x) { return ((x - tr) * x + c2) * x - det; };
  double bound = 0.0;
  for (int r = 0; r < 3; ++r) bound = std::max(bound, m.row(r).cwiseAbs().sum());
  std::vector<double> roots;
  const int steps = 200000;
  double prev_x = -bound - 1.0, prev_f = poly(prev_x);
  for (int s = 1; s <= steps; ++s) {
    const double x = -bound - 1.0 + (2.0 * bound + 2.0) * s / steps;
    const double f = poly(x);
    if (f == 0.0) {
      roots.push_back(x);
    } else if ((f > 0) != (prev_f > 0) && prev_f != 0.0) {
      double lo = prev_x, hi = x;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if ((poly(mid) > 0) == (poly(lo) > 0)) lo = mid; else hi = mid;
      }
      roots.push_back(0.5 * (lo + hi));
    }
    prev_x = x;
    prev_f = f;
  }
  std::sort(roots.rbegin(), roots.rend());
  return roots;
}

}  // namespace

TEST(VolumeIo, RoundTripIsBitExact) {
  Grid g;
  g.dims = {2, 2, 2};
  g.spacing = Vec3(0.3, 0.3, 0.9);
  g.origin = Vec3(-1.25, 0.1, 3.0);
  TensorVolume vol(g);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-1e-3f, 1e-3f);
  for (auto& v : vol.data) v = u(rng);
  const auto path = temp_path("roundtrip.dtv");
  write_tensor_volume(path, vol);
  const auto back = read_tensor_volume(path);
  EXPECT_EQ(back.grid, g);
  ASSERT_EQ(back.data.size(), 48u);
  for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(back.data[i]), std::bit_cast<std::uint32_t>(vol.data[i]));
}

TEST(VolumeIo, PayloadSizeMismatchIsRejected) {
  const auto path = temp_path("short.dtv");
  std::string payload;
  for (int i = 0; i < 40; ++i) io::put_f32(payload, 1.0f);
  io::write_container(path,
                      {{"dims", {2, 2, 2}}, {"spacing", {1, 1, 1}}, {"origin", {0, 0, 0}}, {"dtype", "f32"}, {"components", 6}},
                      payload);
  try {
    read_tensor_volume(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
}

TEST(VolumeIo, MalformedHeaderAndNonFiniteAreRejected) {
  const auto path = temp_path("bad.dtv");
  io::write_file(path, "{\"dims\": [2,2\n");
  EXPECT_THROW(read_tensor_volume(path), DataError);

  io::write_container(path, {{"dims", {1, 1, 1}}, {"spacing", {1, 1, 1}}, {"origin", {0, 0, 0}}, {"dtype", "u8"}, {"components", 6}}, "");
  EXPECT_THROW(read_tensor_volume(path), DataError);

  std::string payload;
  for (int i = 0; i < 6; ++i) io::put_f32(payload, i == 4 ? std::numeric_limits<float>::quiet_NaN() : 1.0f);
  io::write_container(path, {{"dims", {1, 1, 1}}, {"spacing", {1, 1, 1}}, {"origin", {0, 0, 0}}, {"dtype", "f32"}, {"components", 6}}, payload);
  try {
    read_tensor_volume(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("element 4"), std::string::npos);
  }
}

TEST(VolumeIo, MaskRoundTripAndCodeValidation) {
  Grid g;
  g.dims = {3, 2, 1};
  MaskVolume m(g);
  m.labels = {0, 1, 2, 3, 1, 0};
  const auto path = temp_path("mask.msk");
  write_mask_volume(path, m);
  EXPECT_EQ(read_mask_volume(path).labels, m.labels);

  io::write_container(path, {{"dims", {1, 1, 1}}, {"spacing", {1, 1, 1}}, {"origin", {0, 0, 0}}, {"dtype", "u8"}, {"components", 1}},
                      std::string(1, '\x07'));
  EXPECT_THROW(read_mask_volume(path), DataError);
}

TEST(SampleTrilinear, ExactAtVoxelCenters) {
  Grid g;
  g.dims = {3, 4, 2};
  g.spacing = Vec3(0.5, 0.25, 2.0);
  g.origin = Vec3(1, -2, 0.5);
  TensorVolume vol(g);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : vol.data) v = u(rng);
  for (std::size_t idx = 0; idx < g.voxel_count(); ++idx) {
    const auto t = sample_trilinear(vol, g.center(idx));
    ASSERT_TRUE(t);
    for (int q = 0; q < 6; ++q) EXPECT_EQ(t->c[q], static_cast<double>(vol.data[idx * 6 + q]));
  }
}

TEST(SampleTrilinear, RampMidpointAndConstantField) {
  Grid g;
  g.dims = {2, 1, 1};
  ScalarVolume ramp(g, 0.0);
  ramp.data = {0.0, 1.0};
  EXPECT_DOUBLE_EQ(*sample_trilinear(ramp, Vec3(0.5, 0, 0)), 0.5);

  Grid g3;
  g3.dims = {4, 4, 4};
  TensorVolume vol(g3);
  const SymmetricTensor3 c{{1.0e-3, 1e-5, -2e-5, 4e-4, 3e-6, 2e-4}};
  for (std::size_t i = 0; i < g3.voxel_count(); ++i) vol.set(i, c);
  const auto t = sample_trilinear(vol, Vec3(1.3, 2.71, 0.2));
  ASSERT_TRUE(t);
  for (int q = 0; q < 6; ++q) EXPECT_NEAR(t->c[q], static_cast<float>(c.c[q]), 1e-18);
}

TEST(SampleTrilinear, OutOfBoundsIsASignal) {
  Grid g;
  g.dims = {3, 3, 3};
  TensorVolume vol(g);
  EXPECT_FALSE(sample_trilinear(vol, Vec3(-0.01, 1, 1)));
  EXPECT_FALSE(sample_trilinear(vol, Vec3(1, 2.0001, 1)));
  EXPECT_TRUE(sample_trilinear(vol, Vec3(2, 2, 2)));
}

TEST(SampleTrilinear, AffineFieldsAreReproducedExactly) {
  Grid g;
  g.dims = {5, 6, 7};
  g.spacing = Vec3(0.3, 0.3, 0.9);
  g.origin = Vec3(-1, 2, 0.25);
  const Vec3 a(0.7, -1.3, 2.1);
  const double b = 0.4;
  ScalarVolume f(g, 0.0);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) f.data[i] = a.dot(g.center(i)) + b;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 2000; ++trial) {
    Vec3 u;
    for (int k = 0; k < 3; ++k) u[k] = std::uniform_real_distribution<double>(0, g.dims[k] - 1)(rng);
    const Vec3 p = g.origin + g.spacing.cwiseProduct(u);
    const double expect = a.dot(p) + b;
    const auto got = sample_trilinear(f, p);
    ASSERT_TRUE(got);
    EXPECT_NEAR(*got, expect, 1e-12 * std::max(1.0, std::abs(expect)));
  }
}

TEST(SampleTrilinear, ScalarSamplingSkipsMissingCorners) {
  Grid g;
  g.dims = {2, 1, 1};
  ScalarVolume f(g, 0.0);
  f.data = {0.25, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_DOUBLE_EQ(*sample_trilinear(f, Vec3(0.7, 0, 0)), 0.25);
  EXPECT_FALSE(sample_trilinear(f, Vec3(1.0, 0, 0)));
}

TEST(EigenPrincipal, DiagonalTensor) {
  const auto es = eigen_principal({{1.0e-3, 0, 0, 0.4e-3, 0, 0.2e-3}});
  EXPECT_NEAR(es.values[0], 1e-3, 1e-18);
  EXPECT_NEAR(es.values[1], 0.4e-3, 1e-18);
  EXPECT_NEAR(es.values[2], 0.2e-3, 1e-18);
  EXPECT_NEAR((es.e1() - Vec3::UnitX()).norm(), 0.0, 1e-15);
}

TEST(EigenPrincipal, IsotropicTensorResidualOnly) {
  const auto es = eigen_principal({{1, 0, 0, 1, 0, 1}});
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(es.values[k], 1.0);
  EXPECT_NEAR(es.e1().norm(), 1.0, 1e-12);
  EXPECT_NEAR((Eigen::Matrix3d::Identity() * es.e1() - es.e1()).norm(), 0.0, 1e-12);
}

TEST(EigenPrincipal, MatchesCharacteristicPolynomialRoots) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_tensor(rng);
    const auto roots = cubic_roots_oracle(t);
    ASSERT_EQ(roots.size(), 3u);
    const auto es = eigen_principal(t);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(es.values[k], roots[k], 1e-9);
  }
}

TEST(EigenPrincipal, ResidualPropertyOverManyTensors) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10000; ++trial) {
    const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-4, 2)(rng));
    const auto t = random_tensor(rng, scale);
    const auto es = eigen_principal(t);
    const Vec3 e1 = es.e1();
    ASSERT_NEAR(e1.norm(), 1.0, 1e-12);
    const double resid = (t.matrix() * e1 - es.values[0] * e1).norm();
    ASSERT_LE(resid, 1e-9 * std::max(1.0, std::abs(es.values[0])));
    ASSERT_GE(es.values[0], es.values[1]);
    ASSERT_GE(es.values[1], es.values[2]);
    int big = 0;
    for (int k = 1; k < 3; ++k)
      if (std::abs(e1[k]) > std::abs(e1[big])) big = k;
    ASSERT_GT(e1[big], 0.0);
  }
}

TEST(EigenPrincipal, NanIsAnError) {
  EXPECT_THROW(eigen_principal({{std::numeric_limits<double>::quiet_NaN(), 0, 0, 1, 0, 1}}), NumericError);
}

TEST(FractionalAnisotropy, ClosedFormCases) {
  EXPECT_DOUBLE_EQ(fractional_anisotropy(1, 1, 1), 0.0);
  EXPECT_DOUBLE_EQ(fractional_anisotropy(1, 0, 0), 1.0);
  // Direct evaluation: mean 1.6/3, deviations squared sum 0.34667, norm^2 1.2.
  const double mean = 1.6 / 3.0;
  const double dev2 = (1.0 - mean) * (1.0 - mean) + (0.4 - mean) * (0.4 - mean) + (0.2 - mean) * (0.2 - mean);
  const double oracle = std::sqrt(1.5 * dev2 / 1.2);
  EXPECT_NEAR(fractional_anisotropy(1.0, 0.4, 0.2), oracle, 1e-15);
  EXPECT_NEAR(fractional_anisotropy(1.0, 0.4, 0.2), 0.6583, 1e-4);
}

TEST(FractionalAnisotropy, ScaleInvariantAndZeroIsError) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 1.0), s(1e-6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng), k = s(rng);
    EXPECT_NEAR(fractional_anisotropy(a, b, c), fractional_anisotropy(k * a, k * b, k * c), 1e-12);
  }
  EXPECT_THROW(fractional_anisotropy(0, 0, 0), NumericError);
}
