#ifndef CARDIOFIB_VOLUME_HPP
#define CARDIOFIB_VOLUME_HPP

#include "binary_format.hpp"
#include "core.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cardiofib {

/// Regular voxel grid. Voxel (i, j, k) has its center at origin + spacing * (i, j, k);
/// linear addressing is x-fastest.
struct Grid {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                                static_cast<std::size_t>(dims[1]) * k);
  }

  std::array<int, 3> ijk(std::size_t idx) const {
    const int i = static_cast<int>(idx % dims[0]);
    const int j = static_cast<int>((idx / dims[0]) % dims[1]);
    const int k = static_cast<int>(idx / (static_cast<std::size_t>(dims[0]) * dims[1]));
    return {i, j, k};
  }

  Vec3 center(int i, int j, int k) const {
    return origin + spacing.cwiseProduct(Vec3(i, j, k));
  }

  Vec3 center(std::size_t idx) const {
    const auto v = ijk(idx);
    return center(v[0], v[1], v[2]);
  }

  /// Continuous voxel coordinates of a physical point.
  Vec3 to_voxel(const Vec3& p) const { return (p - origin).cwiseQuotient(spacing); }

  bool contains_voxel(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }

  /// True when p lies within the box spanned by the outermost voxel centers.
  bool sampleable(const Vec3& p) const {
    const Vec3 u = to_voxel(p);
    for (int a = 0; a < 3; ++a)
      if (!(u[a] >= 0.0 && u[a] <= dims[a] - 1)) return false;
    return true;
  }

  /// Nearest voxel to p, or nullopt when p is not sampleable.
  std::optional<std::size_t> nearest(const Vec3& p) const {
    if (!sampleable(p)) return std::nullopt;
    const Vec3 u = to_voxel(p);
    return index(static_cast<int>(std::lround(u[0])), static_cast<int>(std::lround(u[1])),
                 static_cast<int>(std::lround(u[2])));
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw ConfigError("grid dims must be positive");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw ConfigError("grid spacing must be positive");
      if (!std::isfinite(origin[a])) throw ConfigError("grid origin must be finite");
    }
  }

  bool operator==(const Grid& o) const {
    return dims == o.dims && spacing == o.spacing && origin == o.origin;
  }
};

/// Symmetric 3x3 tensor stored as (xx, xy, xz, yy, yz, zz).
struct SymmetricTensor3 {
  std::array<double, 6> c{};

  static SymmetricTensor3 from_matrix(const Eigen::Matrix3d& m) {
    return {{m(0, 0), m(0, 1), m(0, 2), m(1, 1), m(1, 2), m(2, 2)}};
  }

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d m;
    m << c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5];
    return m;
  }

  bool finite() const {
    for (double v : c)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct TensorVolume {
  Grid grid;
  std::vector<float> data;  // 6 per voxel

  TensorVolume() = default;
  explicit TensorVolume(const Grid& g) : grid(g), data(g.voxel_count() * 6, 0.0f) {}

  SymmetricTensor3 at(std::size_t idx) const {
    SymmetricTensor3 t;
    for (int q = 0; q < 6; ++q) t.c[q] = data[idx * 6 + q];
    return t;
  }

  void set(std::size_t idx, const SymmetricTensor3& t) {
    for (int q = 0; q < 6; ++q) data[idx * 6 + q] = static_cast<float>(t.c[q]);
  }
};

enum MaskCode : std::uint8_t { kOutside = 0, kInterior = 1, kEndo = 2, kEpi = 3 };

struct MaskVolume {
  Grid grid;
  std::vector<std::uint8_t> labels;

  MaskVolume() = default;
  explicit MaskVolume(const Grid& g) : grid(g), labels(g.voxel_count(), kOutside) {}

  /// Myocardium code at the voxel nearest p; kOutside when p is off-grid.
  std::uint8_t label_at(const Vec3& p) const {
    const auto idx = grid.nearest(p);
    return idx ? labels[*idx] : static_cast<std::uint8_t>(kOutside);
  }
};

/// One double per voxel. Non-finite entries mark voxels without a value.
struct ScalarVolume {
  Grid grid;
  std::vector<double> data;

  ScalarVolume() = default;
  ScalarVolume(const Grid& g, double fill) : grid(g), data(g.voxel_count(), fill) {}
};

namespace detail {

struct Corners {
  std::array<std::size_t, 8> idx{};
  std::array<double, 8> w{};
};

inline std::optional<Corners> corners(const Grid& g, const Vec3& p) {
  if (!g.sampleable(p)) return std::nullopt;
  const Vec3 u = g.to_voxel(p);
  std::array<int, 3> lo{};
  std::array<double, 3> f{};
  std::array<int, 3> hi{};
  for (int a = 0; a < 3; ++a) {
    if (g.dims[a] == 1) {
      lo[a] = hi[a] = 0;
      f[a] = 0.0;
      continue;
    }
    lo[a] = std::min(static_cast<int>(std::floor(u[a])), g.dims[a] - 2);
    hi[a] = lo[a] + 1;
    f[a] = u[a] - lo[a];
  }
  Corners c;
  int n = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        c.idx[n] = g.index(dx ? hi[0] : lo[0], dy ? hi[1] : lo[1], dz ? hi[2] : lo[2]);
        c.w[n] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
        ++n;
      }
  return c;
}

}  // namespace detail

/// Component-wise trilinear interpolation; nullopt outside the sampleable box.
inline std::optional<SymmetricTensor3> sample_trilinear(const TensorVolume& vol, const Vec3& p) {
  const auto c = detail::corners(vol.grid, p);
  if (!c) return std::nullopt;
  SymmetricTensor3 t;
  for (int n = 0; n < 8; ++n) {
    if (c->w[n] == 0.0) continue;
    for (int q = 0; q < 6; ++q) t.c[q] += c->w[n] * vol.data[c->idx[n] * 6 + q];
  }
  return t;
}

/// Trilinear interpolation over the finite corners only, with weights
/// renormalized. nullopt when off-grid or when no corner with positive weight
/// carries a value.
inline std::optional<double> sample_trilinear(const ScalarVolume& vol, const Vec3& p) {
  const auto c = detail::corners(vol.grid, p);
  if (!c) return std::nullopt;
  double acc = 0.0;
  double wsum = 0.0;
  for (int n = 0; n < 8; ++n) {
    if (c->w[n] == 0.0) continue;
    const double v = vol.data[c->idx[n]];
    if (!std::isfinite(v)) continue;
    acc += c->w[n] * v;
    wsum += c->w[n];
  }
  if (wsum <= 0.0) return std::nullopt;
  return wsum == 1.0 ? acc : acc / wsum;
}

struct EigenSystem {
  Vec3 values;              // descending
  Eigen::Matrix3d vectors;  // column k pairs with values[k]
  Vec3 e1() const { return vectors.col(0); }
};

/// Symmetric 3x3 eigendecomposition by cyclic Jacobi rotations. The principal
/// eigenvector is sign-canonicalized so its largest-magnitude component is positive.
inline EigenSystem eigen_principal(const SymmetricTensor3& t) {
  if (!t.finite()) throw NumericError("eigen_principal: non-finite tensor component");
  Eigen::Matrix3d a = t.matrix();
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();

  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
    const double diag = a(0, 0) * a(0, 0) + a(1, 1) * a(1, 1) + a(2, 2) * a(2, 2);
    if (off == 0.0 || off <= 1e-36 * diag) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double tt = (theta >= 0.0 ? 1.0 : -1.0) /
                          (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(tt * tt + 1.0);
        const double sn = tt * cs;
        Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
        rot(p, p) = cs;
        rot(q, q) = cs;
        rot(p, q) = sn;
        rot(q, p) = -sn;
        a = rot.transpose() * a * rot;
        a(p, q) = a(q, p) = 0.0;
        v = v * rot;
      }
    }
  }

  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });
  EigenSystem es;
  for (int k = 0; k < 3; ++k) {
    es.values[k] = a(order[k], order[k]);
    es.vectors.col(k) = v.col(order[k]).normalized();
  }
  Vec3 e1 = es.vectors.col(0);
  int big = 0;
  for (int k = 1; k < 3; ++k)
    if (std::abs(e1[k]) > std::abs(e1[big])) big = k;
  if (e1[big] < 0.0) es.vectors.col(0) = -e1;
  return es;
}

/// FA = sqrt(3/2) * |lambda - mean| / |lambda|, clamped to [0, 1].
inline double fractional_anisotropy(double l1, double l2, double l3) {
  const double norm2 = l1 * l1 + l2 * l2 + l3 * l3;
  if (!(norm2 > 0.0)) throw NumericError("fractional_anisotropy: all eigenvalues zero");
  const double mean = (l1 + l2 + l3) / 3.0;
  const double dev2 = (l1 - mean) * (l1 - mean) + (l2 - mean) * (l2 - mean) + (l3 - mean) * (l3 - mean);
  return std::clamp(std::sqrt(1.5 * dev2 / norm2), 0.0, 1.0);
}

inline double fractional_anisotropy(const Vec3& lambda) {
  return fractional_anisotropy(lambda[0], lambda[1], lambda[2]);
}

// ---------------------------------------------------------------------------
// .dtv / .msk files

namespace detail {

inline io::Json grid_header(const Grid& g, const char* dtype, int components) {
  return io::Json{{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
                  {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
                  {"origin", {g.origin[0], g.origin[1], g.origin[2]}},
                  {"dtype", dtype},
                  {"components", components}};
}

inline Grid parse_grid_header(const io::Json& h, const std::string& path, const char* dtype,
                              int components) {
  Grid g;
  const auto dims = io::header_field<std::vector<int>>(h, "dims", path);
  const auto spacing = io::header_field<std::vector<double>>(h, "spacing", path);
  const auto origin = io::header_field<std::vector<double>>(h, "origin", path);
  if (dims.size() != 3 || spacing.size() != 3 || origin.size() != 3)
    throw DataError(path + ": malformed header (dims/spacing/origin need 3 entries)");
  if (io::header_field<std::string>(h, "dtype", path) != dtype)
    throw DataError(path + ": malformed header (dtype must be " + dtype + ")");
  if (io::header_field<int>(h, "components", path) != components)
    throw DataError(path + ": malformed header (components must be " +
                    std::to_string(components) + ")");
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = dims[a];
    g.spacing[a] = spacing[a];
    g.origin[a] = origin[a];
  }
  try {
    g.validate();
  } catch (const ConfigError& e) {
    throw DataError(path + ": malformed header (" + e.what() + ")");
  }
  return g;
}

}  // namespace detail

inline void write_tensor_volume(const std::string& path, const TensorVolume& vol) {
  if (vol.data.size() != vol.grid.voxel_count() * 6)
    throw DataError("write_tensor_volume: data length does not match grid");
  std::string payload;
  payload.reserve(vol.data.size() * 4);
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    if (!std::isfinite(vol.data[i]))
      throw DataError("write_tensor_volume: non-finite value at element " + std::to_string(i));
    io::put_f32(payload, vol.data[i]);
  }
  io::write_container(path, detail::grid_header(vol.grid, "f32", 6), payload);
}

inline TensorVolume read_tensor_volume(const std::string& path) {
  auto [header, reader] = io::read_container(path);
  TensorVolume vol(detail::parse_grid_header(header, path, "f32", 6));
  if (reader.remaining() != vol.data.size() * 4)
    throw DataError(path + ": payload size mismatch (expected " +
                    std::to_string(vol.data.size() * 4) + " bytes, found " +
                    std::to_string(reader.remaining()) + ")");
  for (std::size_t i = 0; i < vol.data.size(); ++i) vol.data[i] = reader.finite_f32(i);
  return vol;
}

inline void write_mask_volume(const std::string& path, const MaskVolume& mask) {
  if (mask.labels.size() != mask.grid.voxel_count())
    throw DataError("write_mask_volume: label count does not match grid");
  std::string payload(mask.labels.begin(), mask.labels.end());
  io::write_container(path, detail::grid_header(mask.grid, "u8", 1), payload);
}

inline MaskVolume read_mask_volume(const std::string& path) {
  auto [header, reader] = io::read_container(path);
  MaskVolume mask(detail::parse_grid_header(header, path, "u8", 1));
  if (reader.remaining() != mask.labels.size())
    throw DataError(path + ": payload size mismatch (expected " +
                    std::to_string(mask.labels.size()) + " bytes, found " +
                    std::to_string(reader.remaining()) + ")");
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    const auto v = reader.u8();
    if (v > kEpi) throw DataError(path + ": invalid mask code at voxel " + std::to_string(i));
    mask.labels[i] = v;
  }
  return mask;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_VOLUME_HPP
