#ifndef CARDIOFIB_TRACTOGRAPHY_HPP
#define CARDIOFIB_TRACTOGRAPHY_HPP

// Deterministic streamline tractography through a principal-eigenvector field.

#include "core.hpp"
#include "sequence.hpp"
#include "volume.hpp"

#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <vector>

namespace cardiofib {

struct TrackingParams {
  double step = 0.1;        // mm
  double fa_min = 0.2;
  double max_angle = 45.0;  // degrees between consecutive steps
  std::optional<double> min_length;  // mm; default 40 * min(spacing)
  int max_steps = 10000;    // per direction
  int seed_stride = 1;      // voxels

  void validate() const {
    if (!(step > 0.0)) throw ConfigError("tracking: step must be positive");
    if (!(fa_min >= 0.0 && fa_min < 1.0)) throw ConfigError("tracking: fa_min must be in [0, 1)");
    if (!(max_angle > 0.0 && max_angle < 90.0)) throw ConfigError("tracking: max_angle must be in (0, 90)");
    if (min_length && !(*min_length >= 0.0)) throw ConfigError("tracking: negative min_length");
    if (max_steps < 1) throw ConfigError("tracking: max_steps must be >= 1");
    if (seed_stride < 1) throw ConfigError("tracking: seed_stride must be >= 1");
  }

  double min_length_for(const Grid& g) const { return min_length ? *min_length : 40.0 * g.spacing.minCoeff(); }
};

/// Anything that yields an (unsigned) fiber direction at a point, or nullopt
/// to terminate.
template <typename F>
concept DirectionField = requires(const F& f, const Vec3& p) {
  { f.principal(p) } -> std::same_as<std::optional<Vec3>>;
  { f.inside(p) } -> std::same_as<bool>;
};

/// Principal eigenvector of the trilinearly interpolated tensor, gated by the
/// myocardium mask and the FA threshold.
class TensorField {
 public:
  TensorField(const TensorVolume& vol, const MaskVolume& mask, double fa_min)
      : vol_(vol), mask_(mask), fa_min_(fa_min) {
    if (!(vol.grid == mask.grid)) throw DataError("tensor and mask grids differ");
  }

  bool inside(const Vec3& p) const { return mask_.label_at(p) != kOutside; }

  std::optional<Vec3> principal(const Vec3& p) const {
    if (!inside(p)) return std::nullopt;
    const auto t = sample_trilinear(vol_, p);
    if (!t || !t->finite()) return std::nullopt;
    const auto es = eigen_principal(*t);
    if (!(es.values.squaredNorm() > 0.0)) return std::nullopt;
    if (fractional_anisotropy(es.values) < fa_min_) return std::nullopt;
    return es.e1();
  }

 private:
  const TensorVolume& vol_;
  const MaskVolume& mask_;
  double fa_min_;
};

/// Principal direction, flipped to agree with prev_dir when one is given.
template <DirectionField F>
std::optional<Vec3> direction_at(const F& field, const Vec3& p, const std::optional<Vec3>& prev_dir = std::nullopt) {
  auto d = field.principal(p);
  if (!d) return std::nullopt;
  if (prev_dir && d->dot(*prev_dir) < 0.0) *d = -*d;
  return d;
}

/// Classic four-stage Runge-Kutta step along the direction field; every stage
/// is sign-aligned to the first.
template <DirectionField F>
std::optional<Vec3> rk4_step(const F& field, const Vec3& p, const std::optional<Vec3>& prev_dir, double h) {
  const auto k1 = direction_at(field, p, prev_dir);
  if (!k1) return std::nullopt;
  const auto k2 = direction_at(field, p + 0.5 * h * *k1, k1);
  if (!k2) return std::nullopt;
  const auto k3 = direction_at(field, p + 0.5 * h * *k2, k1);
  if (!k3) return std::nullopt;
  const auto k4 = direction_at(field, p + h * *k3, k1);
  if (!k4) return std::nullopt;
  return Vec3(p + (h / 6.0) * (*k1 + 2.0 * *k2 + 2.0 * *k3 + *k4));
}

struct TraceResult {
  std::optional<Streamline> streamline;
  std::string reason;  // why the seed was rejected; empty when accepted
};

namespace detail {

/// Points after the seed, following initial direction d0.
template <DirectionField F>
std::vector<Vec3> trace_half(const F& field, const Vec3& seed, const Vec3& d0, const TrackingParams& prm) {
  std::vector<Vec3> pts;
  Vec3 p = seed;
  Vec3 prev = d0;
  std::optional<Vec3> last_step_dir;
  const double h = prm.step;
  for (int s = 0; s < prm.max_steps; ++s) {
    const auto next = rk4_step(field, p, prev, h);
    if (!next) break;
    const Vec3 delta = *next - p;
    const double len = delta.norm();
    if (!(len >= 0.5 * h && len <= 1.5 * h)) break;
    const Vec3 dir = delta / len;
    if (last_step_dir && angle_deg(dir, *last_step_dir) > prm.max_angle) break;
    if (!field.inside(*next)) break;
    pts.push_back(*next);
    p = *next;
    prev = dir;
    last_step_dir = dir;
  }
  return pts;
}

}  // namespace detail

/// Bidirectional trace from seed: the backward half (started along -d0) is
/// reversed and prepended, so output order follows d0. d0 defaults to the
/// canonical principal direction at the seed.
template <DirectionField F>
TraceResult trace_streamline(const F& field, const Vec3& seed, const TrackingParams& prm, double min_length,
                             const std::optional<Vec3>& initial_dir = std::nullopt) {
  if (!field.inside(seed)) return {std::nullopt, "seed outside mask"};
  const auto d0 = direction_at(field, seed, initial_dir);
  if (!d0) return {std::nullopt, "terminated at seed"};

  const auto fwd = detail::trace_half(field, seed, *d0, prm);
  auto bwd = detail::trace_half(field, seed, Vec3(-*d0), prm);

  // The join at the seed obeys the same angle rule as every other vertex.
  if (!fwd.empty() && !bwd.empty()) {
    const Vec3 in = (seed - bwd.front()).normalized();
    const Vec3 out = (fwd.front() - seed).normalized();
    if (angle_deg(in, out) > prm.max_angle) bwd.clear();
  }

  Streamline s;
  s.points.reserve(fwd.size() + bwd.size() + 1);
  s.points.assign(bwd.rbegin(), bwd.rend());
  s.points.push_back(seed);
  s.points.insert(s.points.end(), fwd.begin(), fwd.end());
  if (s.points.size() < 2) return {std::nullopt, "zero length"};
  if (s.arc_length() < min_length) return {std::nullopt, "shorter than min_length"};
  return {std::move(s), {}};
}

struct TrackingResult {
  std::vector<Streamline> streamlines;
  std::size_t seeds = 0;
  std::string warning;  // non-empty for degenerate inputs such as an empty mask
};

/// One seed per myocardium voxel center on the stride lattice. Output is
/// ordered by seed voxel index regardless of thread count.
inline TrackingResult track_volume(const TensorVolume& vol, const MaskVolume& mask, const TrackingParams& prm) {
  prm.validate();
  const TensorField field(vol, mask, prm.fa_min);
  const Grid& g = vol.grid;
  std::vector<std::size_t> seeds;
  for (std::size_t idx = 0; idx < g.voxel_count(); ++idx) {
    if (mask.labels[idx] == kOutside) continue;
    const auto v = g.ijk(idx);
    if (v[0] % prm.seed_stride || v[1] % prm.seed_stride || v[2] % prm.seed_stride) continue;
    seeds.push_back(idx);
  }
  TrackingResult out;
  out.seeds = seeds.size();
  if (seeds.empty()) {
    out.warning = "empty mask: no seeds";
    return out;
  }
  const double min_len = prm.min_length_for(g);
  std::vector<std::optional<Streamline>> slots(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    auto r = trace_streamline(field, g.center(seeds[i]), prm, min_len);
    if (r.streamline) {
      r.streamline->seed_index = seeds[i];
      slots[i] = std::move(r.streamline);
    }
  });
  for (auto& s : slots)
    if (s) out.streamlines.push_back(std::move(*s));
  if (out.streamlines.empty()) out.warning = "no streamline survived termination and length rules";
  return out;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_TRACTOGRAPHY_HPP
