#ifndef CARDIOFIB_TSNE_HPP
#define CARDIOFIB_TSNE_HPP

// Exact t-SNE to two dimensions.

#include "core.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace cardiofib {

struct TsneParams {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch = 250;
  double entropy_tol = 1e-5;  // bits
  std::uint64_t seed = 0;
};

struct TsneResult {
  Matrix coords;                   // n x 2
  std::vector<double> kl;          // KL(P||Q) after every iteration (unexaggerated P)
  std::vector<double> entropy_error;  // |H(P_i) - log2(perplexity)| per point, bits
};

namespace detail {

/// Row i of the conditional affinities for squared distances d2 (self
/// excluded), bandwidth found by bisection on log(beta).
inline double calibrate_row(const std::vector<double>& d2, std::size_t self, double target_bits, double tol,
                            std::vector<double>& p) {
  const std::size_t n = d2.size();
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != self) dmin = std::min(dmin, d2[j]);
  auto entropy = [&](double beta) {
    double z = 0.0, s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self) {
        p[j] = 0.0;
        continue;
      }
      const double shifted = d2[j] - dmin;
      p[j] = std::exp(-beta * shifted);
      z += p[j];
      s += shifted * p[j];
    }
    for (double& v : p) v /= z;
    return (std::log(z) + beta * s / z) / std::log(2.0);
  };
  double lo = -60.0, hi = 60.0;  // log(beta)
  double err = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double h = entropy(std::exp(mid));
    err = h - target_bits;
    if (std::abs(err) <= tol) break;
    if (err > 0)
      lo = mid;  // too flat: sharpen
    else
      hi = mid;
  }
  return std::abs(err);
}

}  // namespace detail

inline TsneResult tsne_2d(const Matrix& x, const TsneParams& prm = {}) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  if (!(prm.perplexity > 0.0)) throw ConfigError("tsne: perplexity must be positive");
  if (static_cast<double>(n) <= 3.0 * prm.perplexity)
    throw DataError("tsne: need more than 3 * perplexity points (" + std::to_string(n) + " given)");
  if (prm.iterations < 1) throw ConfigError("tsne: iterations must be >= 1");
  if (!x.allFinite()) throw DataError("tsne: non-finite input");

  TsneResult res;
  Matrix P = Matrix::Zero(n, n);
  {
    const double target = std::log2(prm.perplexity);
    std::vector<double> d2(n), row(n);
    res.entropy_error.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) d2[j] = (x.row(i) - x.row(j)).squaredNorm();
      res.entropy_error[i] = detail::calibrate_row(d2, i, target, prm.entropy_tol, row);
      if (res.entropy_error[i] > prm.entropy_tol)
        throw NumericError("tsne: bandwidth search failed for point " + std::to_string(i));
      for (std::size_t j = 0; j < n; ++j) P(i, j) = row[j];
    }
    P = (P + P.transpose().eval()) / (2.0 * static_cast<double>(n));
    P = P.cwiseMax(1e-300);
    for (std::size_t i = 0; i < n; ++i) P(i, i) = 0.0;
  }

  std::mt19937_64 rng(prm.seed);
  std::normal_distribution<double> init(0.0, 1e-4);
  Matrix Y(n, 2);
  for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = init(rng);
  Matrix update = Matrix::Zero(n, 2), gains = Matrix::Ones(n, 2), grad(n, 2);
  Matrix num(n, n);

  for (int it = 0; it < prm.iterations; ++it) {
    const double exag = it < prm.exaggeration_iters ? prm.early_exaggeration : 1.0;
    const double momentum = it < prm.momentum_switch ? prm.initial_momentum : prm.final_momentum;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double v = 1.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm());
        num(i, j) = num(j, i) = v;
        z += 2.0 * v;
      }
    }
    grad.setZero();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = (exag * P(i, j) - num(i, j) / z) * num(i, j);
        grad.row(i) += 4.0 * w * (Y.row(i) - Y.row(j));
      }
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      double& g = gains.data()[k];
      const bool same = (grad.data()[k] > 0) == (update.data()[k] > 0);
      g = same ? std::max(g * 0.8, 0.01) : g + 0.2;
      update.data()[k] = momentum * update.data()[k] - prm.learning_rate * g * grad.data()[k];
    }
    Y += update;
    Y.rowwise() -= Y.colwise().mean();

    double kl = 0.0, zz = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) zz += 2.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = 1.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm()) / zz;
        kl += P(i, j) * std::log(P(i, j) / q);
      }
    res.kl.push_back(kl);
  }
  res.coords = Y;
  return res;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_TSNE_HPP
