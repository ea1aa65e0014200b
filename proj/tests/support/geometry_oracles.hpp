#ifndef CARDIOFIB_TESTS_GEOMETRY_ORACLES_HPP
#define CARDIOFIB_TESTS_GEOMETRY_ORACLES_HPP

// Closed-form geometry checks for the integrator and the transmural-depth
// solver, shared by the unit tests and the acceptance suite.

#include <cardiofib/features.hpp>
#include <cardiofib/phantom.hpp>
#include <cardiofib/tractography.hpp>

#include <algorithm>
#include <cmath>

namespace cftest {

using namespace cardiofib;

// Unit circumferential field about the z axis.
struct CircularField {
  std::optional<Vec3> principal(const Vec3& p) const {
    const Vec3 d(-p[1], p[0], 0.0);
    if (d.norm() < 1e-12) return std::nullopt;
    return d.normalized();
  }
  bool inside(const Vec3&) const { return true; }
};

inline double closure_error(int steps_per_revolution, double radius) {
  const CircularField field;
  const double h = 2.0 * kPi * radius / steps_per_revolution;
  Vec3 p(radius, 0, 0);
  std::optional<Vec3> prev = Vec3::UnitY();
  for (int s = 0; s < steps_per_revolution; ++s) {
    const auto next = rk4_step(field, p, prev, h);
    prev = (*next - p).normalized();
    p = *next;
  }
  return (p - Vec3(radius, 0, 0)).norm();
}

inline PhantomSpec annulus_on_grid(int n) {
  PhantomSpec s;
  s.dims = {n, n, n};
  const double extent = 44.0;
  s.spacing = Vec3::Constant(extent / (n - 1));
  s.height = 40.0;
  return s;
}

inline double max_td_error(int n) {
  const auto spec = annulus_on_grid(n);
  const auto ph = generate_annulus_phantom(spec);
  const auto td = solve_transmural_depth(ph.mask, 1e-7);
  double worst = 0.0;
  const Grid& g = ph.mask.grid;
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    if (ph.mask.labels[i] != kInterior) continue;
    const auto v = g.ijk(i);
    bool near_boundary = false;
    for (int dz = -1; dz <= 1 && !near_boundary; ++dz)
      for (int dy = -1; dy <= 1 && !near_boundary; ++dy)
        for (int dx = -1; dx <= 1 && !near_boundary; ++dx)
          if (ph.mask.labels[g.index(v[0] + dx, v[1] + dy, v[2] + dz)] != kInterior) near_boundary = true;
    if (near_boundary) continue;
    const double r = annulus_coords(spec, g.center(i)).radius;
    worst = std::max(worst, std::abs(td.depth.data[i] - std::log(r / 10.0) / std::log(2.0)));
  }
  return worst;
}

}  // namespace cftest

#endif  // CARDIOFIB_TESTS_GEOMETRY_ORACLES_HPP
