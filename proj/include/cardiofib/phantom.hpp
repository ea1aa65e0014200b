#ifndef CARDIOFIB_PHANTOM_HPP
#define CARDIOFIB_PHANTOM_HPP

// Synthetic left-ventricle-like annulus phantoms with closed-form orientation
// and depth fields, plus labeled helical fiber bundles for clustering tests.

#include "binary_format.hpp"
#include "core.hpp"
#include "sequence.hpp"
#include "volume.hpp"

#include <array>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

namespace cardiofib {

struct PhantomSpec {
  double inner_radius = 10.0;  // a, mm
  double outer_radius = 20.0;  // b, mm
  double height = 20.0;        // mm, centered on the axis point
  double ha_endo = 60.0;       // degrees
  double ha_epi = -60.0;
  Vec3 eigenvalues{1.0e-3, 0.4e-3, 0.2e-3};  // mm^2/s
  std::array<int, 3> dims{64, 64, 24};
  Vec3 spacing{0.75, 0.75, 1.0};
  std::optional<Vec3> origin;  // default centers the grid on (0, 0, 0)
  std::optional<Vec3> axis_center;  // default grid center
  Vec3 axis_direction{0.0, 0.0, 1.0};

  Grid grid() const {
    Grid g;
    g.dims = dims;
    g.spacing = spacing;
    g.origin = origin ? *origin
                      : Vec3(-0.5 * spacing[0] * (dims[0] - 1), -0.5 * spacing[1] * (dims[1] - 1),
                             -0.5 * spacing[2] * (dims[2] - 1));
    return g;
  }

  Vec3 center() const {
    if (axis_center) return *axis_center;
    const Grid g = grid();
    return g.origin + 0.5 * g.spacing.cwiseProduct(Vec3(dims[0] - 1, dims[1] - 1, dims[2] - 1));
  }

  Vec3 axis() const { return axis_direction.normalized(); }

  /// Radial thickness of the endo/epi boundary shells.
  double shell_thickness() const { return spacing.maxCoeff(); }

  void validate(double fa_min = 0.2) const {
    grid().validate();
    if (!(inner_radius > 0.0 && inner_radius < outer_radius))
      throw ConfigError("phantom: need 0 < inner_radius < outer_radius");
    if (!(height > 0.0)) throw ConfigError("phantom: height must be positive");
    if (outer_radius - inner_radius <= 2.0 * shell_thickness())
      throw ConfigError("phantom: wall thinner than two boundary shells");
    if (!(eigenvalues[0] > eigenvalues[1] && eigenvalues[1] >= eigenvalues[2] && eigenvalues[2] > 0.0))
      throw ConfigError("phantom: eigenvalues must satisfy l1 > l2 >= l3 > 0");
    if (fractional_anisotropy(eigenvalues) <= fa_min)
      throw ConfigError("phantom: eigenvalue FA does not exceed the tracking threshold");
    if (!(axis_direction.norm() > 0.0)) throw ConfigError("phantom: zero axis direction");
  }

  io::Json to_json() const {
    io::Json j{{"inner_radius", inner_radius},
               {"outer_radius", outer_radius},
               {"height", height},
               {"ha_endo", ha_endo},
               {"ha_epi", ha_epi},
               {"eigenvalues", {eigenvalues[0], eigenvalues[1], eigenvalues[2]}},
               {"dims", dims},
               {"spacing", {spacing[0], spacing[1], spacing[2]}},
               {"axis_direction", {axis_direction[0], axis_direction[1], axis_direction[2]}}};
    if (origin) j["origin"] = {(*origin)[0], (*origin)[1], (*origin)[2]};
    if (axis_center) j["axis_center"] = {(*axis_center)[0], (*axis_center)[1], (*axis_center)[2]};
    return j;
  }

  static PhantomSpec from_json(const io::Json& j) {
    PhantomSpec s;
    auto vec3 = [](const io::Json& v) {
      const auto a = v.get<std::array<double, 3>>();
      return Vec3(a[0], a[1], a[2]);
    };
    try {
      s.inner_radius = j.value("inner_radius", s.inner_radius);
      s.outer_radius = j.value("outer_radius", s.outer_radius);
      s.height = j.value("height", s.height);
      s.ha_endo = j.value("ha_endo", s.ha_endo);
      s.ha_epi = j.value("ha_epi", s.ha_epi);
      if (j.contains("eigenvalues")) s.eigenvalues = vec3(j["eigenvalues"]);
      if (j.contains("dims")) s.dims = j["dims"].get<std::array<int, 3>>();
      if (j.contains("spacing")) s.spacing = vec3(j["spacing"]);
      if (j.contains("origin")) s.origin = vec3(j["origin"]);
      if (j.contains("axis_center")) s.axis_center = vec3(j["axis_center"]);
      if (j.contains("axis_direction")) s.axis_direction = vec3(j["axis_direction"]);
    } catch (const io::Json::exception& e) {
      throw ConfigError(std::string("phantom spec: ") + e.what());
    }
    return s;
  }
};

/// Cylindrical coordinates of p about the phantom axis.
struct AnnulusCoords {
  double radius;
  double axial;
  Vec3 radial_dir;  // unit, zero when on axis
};

inline AnnulusCoords annulus_coords(const PhantomSpec& spec, const Vec3& p) {
  const Vec3 z = spec.axis();
  const Vec3 rel = p - spec.center();
  const double axial = rel.dot(z);
  const Vec3 radial = rel - axial * z;
  const double r = radial.norm();
  return {r, axial, r > 1e-12 ? Vec3(radial / r) : Vec3::Zero()};
}

/// Linear helix-angle rule in degrees at radius r (depth clamped to [0, 1]).
inline double phantom_helix_angle(const PhantomSpec& spec, double r) {
  const double d = std::clamp((r - spec.inner_radius) / (spec.outer_radius - spec.inner_radius), 0.0, 1.0);
  return spec.ha_endo + (spec.ha_epi - spec.ha_endo) * d;
}

/// Prescribed fiber direction (e1) at p.
inline Vec3 phantom_fiber_direction(const PhantomSpec& spec, const Vec3& p) {
  const auto cc = annulus_coords(spec, p);
  const Vec3 circ = spec.axis().cross(cc.radial_dir);
  const double ha = deg2rad(phantom_helix_angle(spec, cc.radius));
  return std::cos(ha) * circ + std::sin(ha) * spec.axis();
}

struct PhantomVolumes {
  TensorVolume tensors;
  MaskVolume mask;
};

inline PhantomVolumes generate_annulus_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Grid g = spec.grid();
  const Vec3 z = spec.axis();
  const Vec3 c = spec.center();

  // Every extreme point of the cylinder must be sampleable.
  {
    const Vec3 helper = std::abs(z[0]) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 u = z.cross(helper).normalized();
    const Vec3 v = z.cross(u);
    const double reach = spec.outer_radius + 0.5 * spec.shell_thickness();
    for (int s = 0; s < 360; ++s) {
      const double t = deg2rad(s);
      for (double h : {-0.5 * spec.height, 0.5 * spec.height}) {
        const Vec3 p = c + reach * (std::cos(t) * u + std::sin(t) * v) + h * z;
        if (!g.sampleable(p)) throw ConfigError("phantom: annulus exceeds grid bounds");
      }
    }
  }

  PhantomVolumes out{TensorVolume(g), MaskVolume(g)};
  const double half = 0.5 * spec.shell_thickness();
  const Vec3& lam = spec.eigenvalues;
  for (std::size_t idx = 0; idx < g.voxel_count(); ++idx) {
    const Vec3 p = g.center(idx);
    const auto cc = annulus_coords(spec, p);
    if (std::abs(cc.axial) > 0.5 * spec.height) continue;
    if (cc.radius < spec.inner_radius - half || cc.radius > spec.outer_radius + half) continue;
    std::uint8_t code = kInterior;
    if (cc.radius < spec.inner_radius + half)
      code = kEndo;
    else if (cc.radius > spec.outer_radius - half)
      code = kEpi;
    out.mask.labels[idx] = code;

    const Vec3 e1 = phantom_fiber_direction(spec, p);
    const Vec3 e2 = cc.radial_dir;
    const Vec3 e3 = e1.cross(e2);
    const Eigen::Matrix3d d = lam[0] * e1 * e1.transpose() + lam[1] * e2 * e2.transpose() +
                              lam[2] * e3 * e3.transpose();
    out.tensors.set(idx, SymmetricTensor3::from_matrix(d));
  }
  return out;
}

struct AnalyticOracle {
  double helix_angle;       // degrees
  double transmural_depth;  // [0, 1]
};

/// Closed-form HA (linear rule) and TD (axisymmetric Laplace solution
/// ln(r/a) / ln(b/a)) at p.
inline AnalyticOracle analytic_oracles(const PhantomSpec& spec, const Vec3& p) {
  const auto cc = annulus_coords(spec, p);
  const double a = spec.inner_radius;
  const double b = spec.outer_radius;
  const double eps = 1e-9 * b;
  if (cc.radius < a - eps || cc.radius > b + eps || std::abs(cc.axial) > 0.5 * spec.height + eps)
    throw DataError("analytic_oracles: point outside annulus");
  const double r = std::clamp(cc.radius, a, b);
  return {phantom_helix_angle(spec, r), std::log(r / a) / std::log(b / a)};
}

// ---------------------------------------------------------------------------
// Labeled helical bundles

struct Band {
  double lo = 0.0;
  double hi = 1.0;
  bool valid() const { return hi > lo; }
};

struct FamilySpec {
  Band helix_angle;      // degrees
  Band transmural;       // TD in [0, 1]
  Band z_start;          // mm along the axis
  Band azimuth{0.0, 40.0};  // degrees, start angle
};

struct BundleSpec {
  std::vector<FamilySpec> families;
  int fibers_per_family = 60;
  double point_noise = 0.05;  // mm, Gaussian sigma per coordinate
  std::uint64_t seed = 7;
  double inner_radius = 10.0;
  double outer_radius = 20.0;
  double point_spacing = 0.5;  // mm
  Band length{25.0, 35.0};     // mm

  void validate() const {
    if (families.size() < 2) throw ConfigError("bundles: need at least two families");
    if (fibers_per_family < 1) throw ConfigError("bundles: empty family");
    if (!(inner_radius > 0 && inner_radius < outer_radius)) throw ConfigError("bundles: bad radii");
    if (!(point_spacing > 0)) throw ConfigError("bundles: point spacing must be positive");
    if (!(point_noise >= 0)) throw ConfigError("bundles: negative noise");
    if (!length.valid() || length.lo / point_spacing < 25.0)
      throw ConfigError("bundles: length band must be non-degenerate and hold at least 26 points");
    for (const auto& f : families) {
      if (!f.helix_angle.valid() || !f.transmural.valid() || !f.z_start.valid() || !f.azimuth.valid())
        throw ConfigError("bundles: degenerate band");
      if (f.helix_angle.lo <= -90.0 || f.helix_angle.hi >= 90.0)
        throw ConfigError("bundles: helix angle band must lie inside (-90, 90)");
      if (f.transmural.lo < 0.0 || f.transmural.hi > 1.0)
        throw ConfigError("bundles: transmural band must lie inside [0, 1]");
    }
  }

  /// Four families with separated helix-angle, depth and height bands.
  static BundleSpec four_family_default() {
    BundleSpec s;
    s.families = {
        {{50.0, 65.0}, {0.05, 0.25}, {-8.0, -5.0}, {0.0, 40.0}},
        {{15.0, 30.0}, {0.30, 0.45}, {-2.0, 1.0}, {0.0, 40.0}},
        {{-30.0, -15.0}, {0.55, 0.70}, {2.0, 5.0}, {0.0, 40.0}},
        {{-65.0, -50.0}, {0.75, 0.95}, {7.0, 10.0}, {0.0, 40.0}},
    };
    return s;
  }

  io::Json to_json() const {
    io::Json fam = io::Json::array();
    for (const auto& f : families)
      fam.push_back({{"helix_angle", {f.helix_angle.lo, f.helix_angle.hi}},
                     {"transmural", {f.transmural.lo, f.transmural.hi}},
                     {"z_start", {f.z_start.lo, f.z_start.hi}},
                     {"azimuth", {f.azimuth.lo, f.azimuth.hi}}});
    return {{"families", fam},
            {"fibers_per_family", fibers_per_family},
            {"point_noise", point_noise},
            {"seed", seed},
            {"inner_radius", inner_radius},
            {"outer_radius", outer_radius},
            {"point_spacing", point_spacing},
            {"length", {length.lo, length.hi}}};
  }

  static BundleSpec from_json(const io::Json& j) {
    BundleSpec s = four_family_default();
    auto band = [](const io::Json& v) {
      const auto a = v.get<std::array<double, 2>>();
      return Band{a[0], a[1]};
    };
    try {
      if (j.contains("families")) {
        s.families.clear();
        for (const auto& f : j["families"]) {
          FamilySpec fs;
          fs.helix_angle = band(f.at("helix_angle"));
          fs.transmural = band(f.at("transmural"));
          fs.z_start = band(f.at("z_start"));
          if (f.contains("azimuth")) fs.azimuth = band(f["azimuth"]);
          s.families.push_back(fs);
        }
      }
      s.fibers_per_family = j.value("fibers_per_family", s.fibers_per_family);
      s.point_noise = j.value("point_noise", s.point_noise);
      s.seed = j.value("seed", s.seed);
      s.inner_radius = j.value("inner_radius", s.inner_radius);
      s.outer_radius = j.value("outer_radius", s.outer_radius);
      s.point_spacing = j.value("point_spacing", s.point_spacing);
      if (j.contains("length")) s.length = band(j["length"]);
    } catch (const io::Json::exception& e) {
      throw ConfigError(std::string("bundle spec: ") + e.what());
    }
    return s;
  }
};

struct LabeledBundles {
  std::vector<FeatureSequence> sequences;
  std::vector<int> labels;
};

/// Helices of constant radius and pitch about +z through the origin. Each
/// fiber draws (HA, TD, z0, phi0, length) uniformly from its family's bands;
/// TD maps to radius through the Laplace profile r = a (b/a)^TD. Attached HA/TD
/// are the analytic values of the noiseless curve.
inline LabeledBundles generate_labeled_bundles(const BundleSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto uniform = [&](const Band& b) {
    return b.lo + (b.hi - b.lo) * std::generate_canonical<double, 53>(rng);
  };

  LabeledBundles out;
  const double a = spec.inner_radius;
  const double b = spec.outer_radius;
  for (std::size_t k = 0; k < spec.families.size(); ++k) {
    const auto& fam = spec.families[k];
    for (int f = 0; f < spec.fibers_per_family; ++f) {
      const double ha = uniform(fam.helix_angle);
      const double td = uniform(fam.transmural);
      const double z0 = uniform(fam.z_start);
      const double phi0 = deg2rad(uniform(fam.azimuth));
      const double len = uniform(spec.length);
      const double r = a * std::pow(b / a, td);
      const int m = static_cast<int>(std::floor(len / spec.point_spacing)) + 1;
      const double cos_ha = std::cos(deg2rad(ha));
      const double sin_ha = std::sin(deg2rad(ha));

      Matrix v(m, kFeatureCount);
      for (int i = 0; i < m; ++i) {
        const double s = i * spec.point_spacing;
        const double phi = phi0 + s * cos_ha / r;
        v(i, kX) = r * std::cos(phi);
        v(i, kY) = r * std::sin(phi);
        v(i, kZ) = z0 + s * sin_ha;
        v(i, kHA) = ha;
        v(i, kTD) = td;
      }
      if (spec.point_noise > 0.0)
        for (int i = 0; i < m; ++i)
          for (int c = 0; c < 3; ++c) v(i, c) += spec.point_noise * noise(rng);
      out.sequences.emplace_back(std::move(v));
      out.labels.push_back(static_cast<int>(k));
    }
  }
  return out;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_PHANTOM_HPP
