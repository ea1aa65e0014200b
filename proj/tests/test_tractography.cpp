#include <cardiofib/features.hpp>
#include <cardiofib/phantom.hpp>
#include <cardiofib/tractography.hpp>

#include <gtest/gtest.h>

#include "support/geometry_oracles.hpp"

#include <filesystem>

using namespace cardiofib;
using namespace cftest;

namespace {

struct ConstantField {
  Vec3 dir;
  std::optional<Vec3> principal(const Vec3&) const { return dir; }
  bool inside(const Vec3&) const { return true; }
};

// (1,0,0) for x < 0, (0,1,0) beyond.
struct KinkedField {
  std::optional<Vec3> principal(const Vec3& p) const { return p[0] < 0 ? Vec3::UnitX() : Vec3::UnitY(); }
  bool inside(const Vec3& p) const { return std::abs(p[0]) < 10 && std::abs(p[1]) < 10; }
};

PhantomSpec tracking_spec(double ha_endo, double ha_epi) {
  PhantomSpec s;
  s.ha_endo = ha_endo;
  s.ha_epi = ha_epi;
  s.dims = {64, 64, 24};
  s.spacing = Vec3(0.75, 0.75, 1.0);
  s.height = 20.0;
  return s;
}

}  // namespace

TEST(DirectionAt, SignAlignsWithPreviousDirection) {
  const ConstantField f{Vec3::UnitX()};
  EXPECT_EQ(*direction_at(f, Vec3::Zero(), Vec3(-1, 0, 0)), Vec3(-1, 0, 0));
  EXPECT_EQ(*direction_at(f, Vec3::Zero(), Vec3(0.2, 1, 0)), Vec3(1, 0, 0));
  EXPECT_EQ(*direction_at(f, Vec3::Zero()), Vec3(1, 0, 0));
}

TEST(DirectionAt, LowAnisotropyTerminates) {
  Grid g;
  g.dims = {3, 3, 3};
  TensorVolume vol(g);
  MaskVolume mask(g);
  // eigenvalues (1.0, 0.85, 0.8) have FA ~ 0.1
  const double fa = fractional_anisotropy(1.0, 0.85, 0.8);
  ASSERT_LT(fa, 0.2);
  ASSERT_GT(fa, 0.05);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    vol.set(i, {{1.0e-3, 0, 0, 0.85e-3, 0, 0.8e-3}});
    mask.labels[i] = kInterior;
  }
  const TensorField field(vol, mask, 0.2);
  EXPECT_FALSE(direction_at(field, Vec3(1, 1, 1)));
  const TensorField permissive(vol, mask, 0.05);
  EXPECT_TRUE(direction_at(permissive, Vec3(1, 1, 1)));
}

TEST(DirectionAt, PhantomMidWallMatchesHelixTangent) {
  const auto spec = tracking_spec(60, -60);
  const auto ph = generate_annulus_phantom(spec);
  const TensorField field(ph.tensors, ph.mask, 0.2);
  for (double phi : {0.1, 1.0, 2.5, 4.0}) {
    const Vec3 p = spec.center() + 15.0 * Vec3(std::cos(phi), std::sin(phi), 0.0) + Vec3(0, 0, 1.3);
    const auto d = direction_at(field, p);
    ASSERT_TRUE(d);
    const Vec3 truth = phantom_fiber_direction(spec, p);
    EXPECT_LT(std::min(angle_deg(*d, truth), angle_deg(*d, -truth)), 0.5);
  }
}

TEST(Rk4Step, ConstantFieldIsExact) {
  const ConstantField f{Vec3::UnitX()};
  const Vec3 p(0.3, -2, 5);
  EXPECT_EQ(*rk4_step(f, p, Vec3::UnitX(), 0.1), p + Vec3(0.1, 0, 0));
}

TEST(Rk4Step, CircularFieldClosesAfterOneRevolution) {
  const double radius = 10.0;
  EXPECT_LT(closure_error(628, radius), 1e-6 * radius);
}

TEST(Rk4Step, FourthOrderConvergence) {
  const double e1 = closure_error(100, 10.0);
  const double e2 = closure_error(200, 10.0);
  const double ratio = e1 / e2;
  EXPECT_GE(std::log2(ratio), 3.7);
  EXPECT_LE(std::log2(ratio), 4.3);
}

TEST(TraceStreamline, ZeroHelixMidWallLoopHasCircumferenceLength) {
  const auto spec = tracking_spec(0, 0);
  const auto ph = generate_annulus_phantom(spec);
  const TensorField field(ph.tensors, ph.mask, 0.2);
  TrackingParams prm;
  const double r = 15.0;
  prm.max_steps = static_cast<int>(std::lround(kPi * r / prm.step));
  const Vec3 seed = spec.center() + Vec3(r, 0, 0.5);
  const auto res = trace_streamline(field, seed, prm, 0.0);
  ASSERT_TRUE(res.streamline) << res.reason;
  const auto& pts = res.streamline->points;
  EXPECT_NEAR(res.streamline->arc_length(), 2 * kPi * r, 0.01 * 2 * kPi * r);
  EXPECT_LT((pts.front() - pts.back()).norm(), 0.05 * r);
  for (const auto& p : pts) EXPECT_NEAR(annulus_coords(spec, p).radius, r, 0.1);
}

TEST(TraceStreamline, ZeroHelixRk4ReturnsToStartAfterOneCircumference) {
  const auto spec = tracking_spec(0, 0);
  const auto ph = generate_annulus_phantom(spec);
  const TensorField field(ph.tensors, ph.mask, 0.2);
  const double r = 15.0;
  const Vec3 seed = spec.center() + Vec3(r, 0, 0.5);
  Vec3 p = seed;
  std::optional<Vec3> prev;
  double arc = 0.0;
  double best_gap = 1e9;
  const double h = 0.1;
  while (arc < 2 * kPi * r + 2 * h) {
    const auto next = rk4_step(field, p, prev, h);
    ASSERT_TRUE(next);
    arc += (*next - p).norm();
    prev = (*next - p).normalized();
    p = *next;
    if (arc > 2 * kPi * r - 2 * h) best_gap = std::min(best_gap, (p - seed).norm());
  }
  EXPECT_LT(best_gap, 2 * h);
}

TEST(TraceStreamline, SeedBelowFaIsRejected) {
  Grid g;
  g.dims = {5, 5, 5};
  TensorVolume vol(g);
  MaskVolume mask(g);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    vol.set(i, {{1.0e-3, 0, 0, 1.0e-3, 0, 0.95e-3}});
    mask.labels[i] = kInterior;
  }
  const TensorField field(vol, mask, 0.2);
  const auto res = trace_streamline(field, Vec3(2, 2, 2), TrackingParams{}, 0.0);
  EXPECT_FALSE(res.streamline);
  EXPECT_EQ(res.reason, "terminated at seed");
  mask.labels[g.index(0, 0, 0)] = kOutside;
  EXPECT_EQ(trace_streamline(field, Vec3(0, 0, 0), TrackingParams{}, 0.0).reason, "seed outside mask");
}

TEST(TraceStreamline, StopsAtRightAngleDiscontinuity) {
  const KinkedField f;
  TrackingParams prm;
  const auto res = trace_streamline(f, Vec3(-2, 0, 0), prm, 0.0);
  ASSERT_TRUE(res.streamline);
  const auto& pts = res.streamline->points;
  EXPECT_LT(pts.back()[0], 0.2);
  EXPECT_GT(pts.back()[0], -0.2);
  for (std::size_t i = 2; i < pts.size(); ++i)
    EXPECT_LE(angle_deg((pts[i] - pts[i - 1]).normalized(), (pts[i - 1] - pts[i - 2]).normalized()), 45.0);
}

TEST(TraceStreamline, ReversedInitialDirectionReversesPoints) {
  const auto spec = tracking_spec(60, -60);
  const auto ph = generate_annulus_phantom(spec);
  const TensorField field(ph.tensors, ph.mask, 0.2);
  TrackingParams prm;
  prm.max_steps = 400;
  for (double r : {12.0, 15.0, 18.0}) {
    const Vec3 seed = spec.center() + Vec3(0, r, -2);
    const auto d = direction_at(field, seed);
    ASSERT_TRUE(d);
    const auto a = trace_streamline(field, seed, prm, 0.0, *d);
    const auto b = trace_streamline(field, seed, prm, 0.0, Vec3(-*d));
    ASSERT_TRUE(a.streamline && b.streamline);
    const auto& pa = a.streamline->points;
    const auto& pb = b.streamline->points;
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_LT((pa[i] - pb[pb.size() - 1 - i]).norm(), 1e-9);
  }
}

TEST(TrackVolume, EmptyMaskGivesNoStreamlinesAndAWarning) {
  const auto spec = tracking_spec(0, 0);
  auto ph = generate_annulus_phantom(spec);
  std::fill(ph.mask.labels.begin(), ph.mask.labels.end(), kOutside);
  const auto res = track_volume(ph.tensors, ph.mask, TrackingParams{});
  EXPECT_TRUE(res.streamlines.empty());
  EXPECT_FALSE(res.warning.empty());
}

TEST(TrackVolume, RulesHoldAndOutputIsDeterministic) {
  const auto spec = tracking_spec(60, -60);
  const auto ph = generate_annulus_phantom(spec);
  TrackingParams prm;
  prm.seed_stride = 5;
  prm.max_steps = 1500;
  const auto a = track_volume(ph.tensors, ph.mask, prm);
  ASSERT_GT(a.streamlines.size(), 20u);
  const double min_len = prm.min_length_for(ph.tensors.grid);
  EXPECT_DOUBLE_EQ(min_len, 30.0);
  for (const auto& s : a.streamlines) {
    ASSERT_GE(s.arc_length(), min_len);
    for (std::size_t i = 1; i < s.points.size(); ++i) {
      const double step = (s.points[i] - s.points[i - 1]).norm();
      ASSERT_GE(step, 0.5 * prm.step);
      ASSERT_LE(step, 1.5 * prm.step);
      ASSERT_NE(ph.mask.label_at(s.points[i]), kOutside);
      if (i >= 2) {
        ASSERT_LE(angle_deg((s.points[i] - s.points[i - 1]).normalized(),
                            (s.points[i - 1] - s.points[i - 2]).normalized()),
                  prm.max_angle);
      }
    }
  }
  const auto b = track_volume(ph.tensors, ph.mask, prm);
  ASSERT_EQ(a.streamlines.size(), b.streamlines.size());
  for (std::size_t i = 0; i < a.streamlines.size(); ++i) {
    EXPECT_EQ(a.streamlines[i].seed_index, b.streamlines[i].seed_index);
    EXPECT_EQ(a.streamlines[i].points, b.streamlines[i].points);
    if (i > 0) {
      EXPECT_LT(a.streamlines[i - 1].seed_index, a.streamlines[i].seed_index);
    }
  }
}

TEST(TrackVolume, ZeroHelixFibersHaveNearZeroHelixAngle) {
  const auto spec = tracking_spec(0, 0);
  const auto ph = generate_annulus_phantom(spec);
  TrackingParams prm;
  prm.seed_stride = 6;
  prm.max_steps = 500;
  const auto res = track_volume(ph.tensors, ph.mask, prm);
  ASSERT_GT(res.streamlines.size(), 10u);
  const LVAxis axis(spec.center(), spec.axis());
  for (const auto& s : res.streamlines) {
    const auto ha = helical_angle(s.points, axis);
    double mean = 0.0;
    for (double v : ha) mean += std::abs(v);
    EXPECT_LT(mean / ha.size(), 2.0);
  }
}

TEST(StreamlineIo, RoundTrip) {
  std::vector<Streamline> lines(2);
  lines[0].points = {Vec3(0.5, 1, 2), Vec3(0.25, 1.5, 2)};
  lines[0].seed_index = 17;
  lines[1].points = {Vec3(-1, -2, -3), Vec3(4, 5, 6), Vec3(7, 8, 9)};
  lines[1].seed_index = 40;
  const auto path = (std::filesystem::temp_directory_path() / "cardiofib_lines.fib").string();
  write_streamlines(path, lines);
  const auto back = read_streamlines(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].points, lines[0].points);
  EXPECT_EQ(back[1].points, lines[1].points);
  EXPECT_EQ(back[1].seed_index, 40u);
}
