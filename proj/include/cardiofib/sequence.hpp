#ifndef CARDIOFIB_SEQUENCE_HPP
#define CARDIOFIB_SEQUENCE_HPP

// Fiber containers shared across stages and their on-disk formats:
//   .fib  streamline polylines
//   .fft  per-point (x, y, z, HA, TD) feature sequences

#include "binary_format.hpp"
#include "core.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace cardiofib {

struct Streamline {
  std::vector<Vec3> points;  // mm
  std::size_t seed_index = 0;

  double arc_length() const {
    double len = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) len += (points[i] - points[i - 1]).norm();
    return len;
  }
};

inline constexpr int kFeatureCount = 5;
enum Feature : int { kX = 0, kY = 1, kZ = 2, kHA = 3, kTD = 4 };

/// m x 5 rows of (x, y, z [mm], HA [deg], TD [0..1]).
struct FeatureSequence {
  Matrix values = Matrix(0, kFeatureCount);

  FeatureSequence() = default;
  explicit FeatureSequence(Matrix v) : values(std::move(v)) {}

  std::size_t size() const { return static_cast<std::size_t>(values.rows()); }
};

/// Per-feature z-score parameters, estimated on the training split.
struct FeatureStats {
  std::array<double, kFeatureCount> mean{0, 0, 0, 0, 0};
  std::array<double, kFeatureCount> stddev{1, 1, 1, 1, 1};

  static FeatureStats identity() { return {}; }

  /// Pooled over every point of every sequence; stddev floored at 1e-12.
  static FeatureStats estimate(const std::vector<FeatureSequence>& seqs) {
    FeatureStats s;
    double count = 0.0;
    std::array<double, kFeatureCount> sum{}, sq{};
    for (const auto& f : seqs)
      for (Eigen::Index i = 0; i < f.values.rows(); ++i) {
        count += 1.0;
        for (int c = 0; c < kFeatureCount; ++c) sum[c] += f.values(i, c);
      }
    if (count == 0.0) throw DataError("FeatureStats: no points");
    for (int c = 0; c < kFeatureCount; ++c) s.mean[c] = sum[c] / count;
    for (const auto& f : seqs)
      for (Eigen::Index i = 0; i < f.values.rows(); ++i)
        for (int c = 0; c < kFeatureCount; ++c) {
          const double d = f.values(i, c) - s.mean[c];
          sq[c] += d * d;
        }
    for (int c = 0; c < kFeatureCount; ++c) s.stddev[c] = std::max(std::sqrt(sq[c] / count), 1e-12);
    return s;
  }

  Matrix apply(const Matrix& raw) const {
    Matrix out = raw;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (int c = 0; c < kFeatureCount; ++c) out(i, c) = (raw(i, c) - mean[c]) / stddev[c];
    return out;
  }

  io::Json to_json() const { return io::Json{{"mean", mean}, {"std", stddev}}; }

  static FeatureStats from_json(const io::Json& j) {
    FeatureStats s;
    s.mean = j.at("mean").get<std::array<double, kFeatureCount>>();
    s.stddev = j.at("std").get<std::array<double, kFeatureCount>>();
    return s;
  }
};

// ---------------------------------------------------------------------------
// .fib

inline void write_streamlines(const std::string& path, const std::vector<Streamline>& lines) {
  std::string payload;
  std::vector<std::size_t> seeds;
  for (const auto& s : lines) {
    io::put_u32(payload, static_cast<std::uint32_t>(s.points.size()));
    for (const auto& p : s.points)
      for (int a = 0; a < 3; ++a) io::put_f32(payload, static_cast<float>(p[a]));
    seeds.push_back(s.seed_index);
  }
  io::write_container(path, io::Json{{"count", lines.size()}, {"dtype", "f32"}, {"seed_index", seeds}},
                      payload);
}

inline std::vector<Streamline> read_streamlines(const std::string& path) {
  auto [header, reader] = io::read_container(path);
  const auto count = io::header_field<std::size_t>(header, "count", path);
  if (io::header_field<std::string>(header, "dtype", path) != "f32")
    throw DataError(path + ": malformed header (dtype must be f32)");
  std::vector<std::size_t> seeds;
  if (header.contains("seed_index")) seeds = header.at("seed_index").get<std::vector<std::size_t>>();
  std::vector<Streamline> out(count);
  std::size_t element = 0;
  for (std::size_t f = 0; f < count; ++f) {
    const auto n = reader.u32();
    out[f].points.resize(n);
    for (auto& p : out[f].points)
      for (int a = 0; a < 3; ++a) p[a] = reader.finite_f32(element++);
    out[f].seed_index = f < seeds.size() ? seeds[f] : f;
  }
  reader.expect_end();
  return out;
}

// ---------------------------------------------------------------------------
// .fft

inline void write_feature_sequences(const std::string& path, const std::vector<FeatureSequence>& seqs,
                                    const std::optional<FeatureStats>& stats = std::nullopt) {
  std::string payload;
  for (const auto& f : seqs) {
    io::put_u32(payload, static_cast<std::uint32_t>(f.values.rows()));
    for (Eigen::Index i = 0; i < f.values.rows(); ++i)
      for (int c = 0; c < kFeatureCount; ++c) io::put_f32(payload, static_cast<float>(f.values(i, c)));
  }
  io::Json header{{"count", seqs.size()}, {"features", kFeatureCount}, {"dtype", "f32"}};
  header["normalization"] = stats ? stats->to_json() : io::Json(nullptr);
  io::write_container(path, header, payload);
}

struct FeatureFile {
  std::vector<FeatureSequence> sequences;
  std::optional<FeatureStats> stats;
};

inline FeatureFile read_feature_sequences(const std::string& path) {
  auto [header, reader] = io::read_container(path);
  const auto count = io::header_field<std::size_t>(header, "count", path);
  if (io::header_field<int>(header, "features", path) != kFeatureCount)
    throw DataError(path + ": malformed header (features must be 5)");
  FeatureFile out;
  if (header.contains("normalization") && !header["normalization"].is_null()) {
    try {
      out.stats = FeatureStats::from_json(header["normalization"]);
    } catch (const io::Json::exception&) {
      throw DataError(path + ": malformed header (normalization)");
    }
  }
  out.sequences.resize(count);
  std::size_t element = 0;
  for (auto& f : out.sequences) {
    const auto m = reader.u32();
    f.values.resize(m, kFeatureCount);
    for (std::uint32_t i = 0; i < m; ++i)
      for (int c = 0; c < kFeatureCount; ++c) f.values(i, c) = reader.finite_f32(element++);
  }
  reader.expect_end();
  return out;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_SEQUENCE_HPP
