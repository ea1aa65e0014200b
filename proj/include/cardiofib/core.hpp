#ifndef CARDIOFIB_CORE_HPP
#define CARDIOFIB_CORE_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cardiofib {

using Vec3 = Eigen::Vector3d;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Base of every error raised by the library. The CLI maps the three
/// subclasses onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration / parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: non-convergence, non-finite values, degenerate geometry.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::size_t& thread_cap() {
  static std::size_t cap = 1;
  return cap;
}

}  // namespace detail

/// Caps the number of worker threads used by parallel_for. 0 means hardware
/// concurrency.
inline void set_max_threads(std::size_t n) {
  if (n == 0) n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  detail::thread_cap() = n;
}

inline std::size_t max_threads() { return detail::thread_cap(); }

/// Runs fn(i) for i in [0, n). Work is split into contiguous blocks, so callers
/// that write only to slot i get results independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t block = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * block;
    const std::size_t hi = std::min(n, lo + block);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Angle between two unit vectors in degrees, robust to rounding past +-1.
inline double angle_deg(const Vec3& a, const Vec3& b) {
  return rad2deg(std::acos(std::clamp(a.dot(b), -1.0, 1.0)));
}

}  // namespace cardiofib

#endif  // CARDIOFIB_CORE_HPP
