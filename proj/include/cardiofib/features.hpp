#ifndef CARDIOFIB_FEATURES_HPP
#define CARDIOFIB_FEATURES_HPP

#include "core.hpp"
#include "sequence.hpp"
#include "volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace cardiofib {

/// Left-ventricle long axis.
struct LVAxis {
  Vec3 center = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  LVAxis() = default;
  LVAxis(const Vec3& c, const Vec3& d) : center(c), direction(d.normalized()) {
    if (!(d.norm() > 0.0)) throw ConfigError("LVAxis: zero direction");
  }
};

// ---------------------------------------------------------------------------
// Transmural depth

struct LaplaceReport {
  int cg_iterations = 0;
  int smoothing_sweeps = 0;
  double residual = 0.0;  // max |u_i - weighted neighbor mean|
};

struct TransmuralDepth {
  ScalarVolume depth;  // NaN outside the myocardium
  LaplaceReport report;
};

/// Solves the 7-point anisotropic Laplace problem on the interior myocardium
/// (code 1) with u = 0 on endocardial voxels (code 2) and u = 1 on epicardial
/// voxels (code 3). Non-myocardium neighbors impose zero flux.
///
/// Jacobi-preconditioned conjugate gradients bring the residual near tol; the
/// iterate is then projected onto the boundary-value range and polished with
/// Gauss-Seidel sweeps. Each sweep replaces a value by a convex combination of
/// its neighbors, so the returned field obeys the discrete maximum principle
/// exactly.
inline TransmuralDepth solve_transmural_depth(const MaskVolume& mask, double tol = 1e-6, int max_iter = 20000,
                                              double endo_value = 0.0, double epi_value = 1.0) {
  const Grid& g = mask.grid;
  const std::size_t nvox = g.voxel_count();
  if (mask.labels.size() != nvox) throw DataError("solve_transmural_depth: mask size mismatch");
  if (!(tol > 0.0) || max_iter < 1) throw ConfigError("solve_transmural_depth: bad tolerance or iteration cap");

  bool has_endo = false, has_epi = false;
  std::vector<std::int64_t> unknown(nvox, -1);
  std::vector<std::size_t> voxel_of;
  for (std::size_t v = 0; v < nvox; ++v) {
    has_endo |= mask.labels[v] == kEndo;
    has_epi |= mask.labels[v] == kEpi;
    if (mask.labels[v] == kInterior) {
      unknown[v] = static_cast<std::int64_t>(voxel_of.size());
      voxel_of.push_back(v);
    }
  }
  if (!has_endo || !has_epi) throw DataError("solve_transmural_depth: mask lacks endocardial or epicardial voxels");

  const std::size_t n = voxel_of.size();
  const std::array<double, 3> w{1.0 / (g.spacing[0] * g.spacing[0]), 1.0 / (g.spacing[1] * g.spacing[1]),
                                1.0 / (g.spacing[2] * g.spacing[2])};
  // Per unknown: up to six coupled unknowns, diagonal and right-hand side.
  std::vector<std::array<std::int64_t, 6>> nbr(n);
  std::vector<std::array<double, 6>> nbr_w(n);
  std::vector<double> diag(n, 0.0), rhs(n, 0.0);
  std::vector<bool> anchored(n, false);
  for (std::size_t u = 0; u < n; ++u) {
    const auto c = g.ijk(voxel_of[u]);
    int slot = 0;
    nbr[u].fill(-1);
    nbr_w[u].fill(0.0);
    for (int axis = 0; axis < 3; ++axis)
      for (int sgn : {-1, 1}) {
        auto q = c;
        q[axis] += sgn;
        if (!g.contains_voxel(q[0], q[1], q[2])) continue;
        const std::size_t qi = g.index(q[0], q[1], q[2]);
        const auto code = mask.labels[qi];
        if (code == kOutside) continue;
        diag[u] += w[axis];
        if (code == kInterior) {
          nbr[u][slot] = unknown[qi];
          nbr_w[u][slot] = w[axis];
          ++slot;
        } else {
          anchored[u] = true;
          rhs[u] += w[axis] * (code == kEpi ? epi_value : endo_value);
        }
      }
  }

  // Every interior component must touch a Dirichlet voxel.
  {
    std::vector<bool> reached(n, false);
    std::vector<std::size_t> stack;
    for (std::size_t u = 0; u < n; ++u)
      if (anchored[u]) {
        reached[u] = true;
        stack.push_back(u);
      }
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto q : nbr[u])
        if (q >= 0 && !reached[q]) {
          reached[q] = true;
          stack.push_back(static_cast<std::size_t>(q));
        }
    }
    if (std::find(reached.begin(), reached.end(), false) != reached.end())
      throw DataError("solve_transmural_depth: myocardium region not connected to a boundary");
  }

  auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t u = 0; u < n; ++u) {
      double acc = diag[u] * x[u];
      for (int s = 0; s < 6; ++s)
        if (nbr[u][s] >= 0) acc -= nbr_w[u][s] * x[nbr[u][s]];
      y[u] = acc;
    }
  };
  auto scaled_residual = [&](const std::vector<double>& x) {
    double worst = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      double acc = rhs[u];
      for (int s = 0; s < 6; ++s)
        if (nbr[u][s] >= 0) acc += nbr_w[u][s] * x[nbr[u][s]];
      worst = std::max(worst, std::abs(x[u] - acc / diag[u]));
    }
    return worst;
  };

  TransmuralDepth out{ScalarVolume(g, std::numeric_limits<double>::quiet_NaN()), {}};
  const double lo = std::min(endo_value, epi_value);
  const double hi = std::max(endo_value, epi_value);
  std::vector<double> x(n, 0.5 * (lo + hi));
  if (n > 0) {
    std::vector<double> r(n), z(n), p(n), ap(n);
    apply(x, ap);
    for (std::size_t u = 0; u < n; ++u) {
      r[u] = rhs[u] - ap[u];
      z[u] = r[u] / diag[u];
    }
    p = z;
    double rz = 0.0;
    for (std::size_t u = 0; u < n; ++u) rz += r[u] * z[u];
    int it = 0;
    for (; it < max_iter; ++it) {
      double scaled = 0.0;
      for (std::size_t u = 0; u < n; ++u) scaled = std::max(scaled, std::abs(z[u]));
      if (scaled < 0.1 * tol) break;
      apply(p, ap);
      double pap = 0.0;
      for (std::size_t u = 0; u < n; ++u) pap += p[u] * ap[u];
      if (!(pap > 0.0)) break;
      const double alpha = rz / pap;
      for (std::size_t u = 0; u < n; ++u) {
        x[u] += alpha * p[u];
        r[u] -= alpha * ap[u];
        z[u] = r[u] / diag[u];
      }
      double rz_new = 0.0;
      for (std::size_t u = 0; u < n; ++u) rz_new += r[u] * z[u];
      const double beta = rz_new / rz;
      rz = rz_new;
      for (std::size_t u = 0; u < n; ++u) p[u] = z[u] + beta * p[u];
    }
    out.report.cg_iterations = it;

    for (auto& v : x) v = std::clamp(v, lo, hi);
    double res = scaled_residual(x);
    int sweeps = 0;
    while (res >= tol && sweeps < max_iter) {
      for (std::size_t u = 0; u < n; ++u) {
        double acc = rhs[u];
        for (int s = 0; s < 6; ++s)
          if (nbr[u][s] >= 0) acc += nbr_w[u][s] * x[nbr[u][s]];
        x[u] = acc / diag[u];
      }
      ++sweeps;
      res = scaled_residual(x);
    }
    out.report.smoothing_sweeps = sweeps;
    out.report.residual = res;
    if (res >= tol)
      throw NumericError("solve_transmural_depth: no convergence, residual " + std::to_string(res));
  }

  for (std::size_t v = 0; v < nvox; ++v) {
    if (mask.labels[v] == kEndo) out.depth.data[v] = endo_value;
    if (mask.labels[v] == kEpi) out.depth.data[v] = epi_value;
  }
  for (std::size_t u = 0; u < n; ++u) out.depth.data[voxel_of[u]] = x[u];
  return out;
}

// ---------------------------------------------------------------------------
// Helical angle

struct LocalFrame {
  Vec3 radial;
  Vec3 circumferential;
};

/// Radial and circumferential unit vectors at p; {radial, circumferential,
/// axis} is right-handed.
inline LocalFrame local_frame(const Vec3& p, const LVAxis& axis) {
  const Vec3& z = axis.direction;
  const Vec3 rel = p - axis.center;
  const Vec3 radial = rel - rel.dot(z) * z;
  const double r = radial.norm();
  if (r < 1e-9) throw NumericError("local_frame: point lies on the long axis");
  const Vec3 rhat = radial / r;
  return {rhat, z.cross(rhat).normalized()};
}

/// Per-point helical angle in degrees from central-difference tangents. The
/// tangent is stripped of its radial part and oriented so its circumferential
/// component is non-negative, which makes the angle independent of point
/// order. Points with an undefined angle (radial tangent or on-axis point)
/// inherit the previous defined value, or 0 if none exists yet.
inline std::vector<double> helical_angle(const std::vector<Vec3>& pts, const LVAxis& axis) {
  const std::size_t m = pts.size();
  if (m < 2) throw DataError("helical_angle: need at least two points");
  std::vector<double> ha(m, 0.0);
  std::optional<double> last;
  for (std::size_t i = 0; i < m; ++i) {
    const Vec3 t = i == 0 ? Vec3(pts[1] - pts[0]) : i + 1 == m ? Vec3(pts[m - 1] - pts[m - 2])
                                                               : Vec3(pts[i + 1] - pts[i - 1]);
    std::optional<double> value;
    if (Vec3(pts[i] - axis.center - (pts[i] - axis.center).dot(axis.direction) * axis.direction).norm() >= 1e-9) {
      const auto fr = local_frame(pts[i], axis);
      Vec3 tp = t - t.dot(fr.radial) * fr.radial;
      if (tp.norm() >= 1e-9) {
        double c = tp.dot(fr.circumferential);
        double z = tp.dot(axis.direction);
        if (c < 0.0 || (c == 0.0 && z < 0.0)) {
          c = -c;
          z = -z;
        }
        value = rad2deg(std::atan2(z, c));
      }
    }
    if (value) last = value;
    ha[i] = value ? *value : last.value_or(0.0);
  }
  return ha;
}

// ---------------------------------------------------------------------------
// Dataset assembly

inline constexpr int kPredictionHorizon = 25;
inline constexpr std::size_t kMinSequencePoints = kPredictionHorizon + 1;

/// x, y, z, HA, TD for one streamline; nullopt when any TD sample fails.
inline std::optional<FeatureSequence> streamline_features(const Streamline& s, const ScalarVolume& td,
                                                          const LVAxis& axis) {
  const auto ha = helical_angle(s.points, axis);
  Matrix v(static_cast<Eigen::Index>(s.points.size()), kFeatureCount);
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    const auto d = sample_trilinear(td, s.points[i]);
    if (!d) return std::nullopt;
    v(i, kX) = s.points[i][0];
    v(i, kY) = s.points[i][1];
    v(i, kZ) = s.points[i][2];
    v(i, kHA) = ha[i];
    v(i, kTD) = std::clamp(*d, 0.0, 1.0);
  }
  return FeatureSequence(std::move(v));
}

struct SplitFractions {
  double train = 0.72;
  double val = 0.08;
};

struct FeatureDataset {
  std::vector<FeatureSequence> train, val, test;
  std::vector<std::size_t> train_ids, val_ids, test_ids;  // positions in the kept list
  std::vector<FeatureSequence> all;                       // kept fibers, input order
  std::vector<std::size_t> source_index;                  // kept fiber -> input streamline
  FeatureStats stats;
  std::size_t dropped_short = 0;
  std::size_t dropped_td = 0;
};

/// Random split by fiber. Sizes are round(train * n) and round(val * n); the
/// test split takes the rest.
inline void split_dataset(FeatureDataset& ds, std::uint64_t split_seed, SplitFractions frac = {}) {
  const std::size_t n = ds.all.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(split_seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(frac.train * n));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(frac.val * n)));
  ds.train_ids.assign(order.begin(), order.begin() + n_train);
  ds.val_ids.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  ds.test_ids.assign(order.begin() + n_train + n_val, order.end());
  auto gather = [&](const std::vector<std::size_t>& ids) {
    std::vector<FeatureSequence> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(ds.all[i]);
    return out;
  };
  ds.train = gather(ds.train_ids);
  ds.val = gather(ds.val_ids);
  ds.test = gather(ds.test_ids);
  ds.stats = FeatureStats::estimate(ds.train.empty() ? ds.all : ds.train);
}

/// Drops fibers with fewer than min_points points and fibers whose TD
/// sampling fails, then splits what is left.
inline FeatureDataset dataset_from_sequences(std::vector<FeatureSequence> seqs, std::uint64_t split_seed,
                                             std::size_t min_points = kMinSequencePoints) {
  if (seqs.empty()) throw DataError("build_feature_dataset: empty input");
  FeatureDataset ds;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].size() < min_points) {
      ++ds.dropped_short;
      continue;
    }
    ds.all.push_back(std::move(seqs[i]));
    ds.source_index.push_back(i);
  }
  if (ds.all.empty())
    throw DataError("build_feature_dataset: empty dataset (" + std::to_string(ds.dropped_short) +
                    " fibers shorter than " + std::to_string(min_points) + " points)");
  split_dataset(ds, split_seed);
  return ds;
}

inline FeatureDataset build_feature_dataset(const std::vector<Streamline>& lines, const ScalarVolume& td,
                                            const LVAxis& axis, std::uint64_t split_seed,
                                            std::size_t min_points = kMinSequencePoints) {
  if (lines.empty()) throw DataError("build_feature_dataset: empty input");
  std::vector<FeatureSequence> seqs;
  std::vector<std::size_t> origin;
  std::size_t dropped_td = 0, dropped_short = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].points.size() < min_points) {
      ++dropped_short;
      continue;
    }
    auto f = streamline_features(lines[i], td, axis);
    if (!f) {
      ++dropped_td;
      continue;
    }
    seqs.push_back(std::move(*f));
    origin.push_back(i);
  }
  if (seqs.empty())
    throw DataError("build_feature_dataset: empty dataset (" + std::to_string(dropped_short) + " too short, " +
                    std::to_string(dropped_td) + " failed TD sampling)");
  FeatureDataset ds = dataset_from_sequences(std::move(seqs), split_seed, min_points);
  for (auto& s : ds.source_index) s = origin[s];
  ds.dropped_short += dropped_short;
  ds.dropped_td = dropped_td;
  return ds;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_FEATURES_HPP
