#ifndef CARDIOFIB_TESTS_GRADCHECK_HPP
#define CARDIOFIB_TESTS_GRADCHECK_HPP

// Central finite differences against the gradients already stored in
// Parameter::grad.

#include <cardiofib/seqmodel/autodiff.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cftest {

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel = 0.0;
  double frac_ok = 0.0;  // fraction of coordinates with rel < 1e-4
  std::string worst;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// `loss(params)` must evaluate the objective from the current values without
/// touching gradients. Coordinates are sampled without replacement; when
/// `samples` exceeds the parameter count every coordinate is checked.
template <typename LossFn>
GradCheckReport finite_difference_check(cardiofib::ad::ParameterSet& params, LossFn&& loss, std::size_t samples,
                                        std::uint64_t seed, double h = 1e-5) {
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (Eigen::Index i = 0; i < params.all()[p].value.size(); ++i) coords.emplace_back(p, i);
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > samples) coords.resize(samples);

  GradCheckReport rep;
  std::size_t ok = 0;
  for (auto [p, i] : coords) {
    auto& prm = params.all()[p];
    double& x = prm.value.data()[i];
    const double saved = x;
    x = saved + h;
    const double up = loss(params);
    x = saved - h;
    const double down = loss(params);
    x = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = relative_error(prm.grad.data()[i], numeric);
    if (rel < 1e-4) ++ok;
    if (rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst = prm.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(prm.grad.data()[i]) +
                  " numeric=" + std::to_string(numeric);
    }
    ++rep.checked;
  }
  rep.frac_ok = rep.checked ? static_cast<double>(ok) / rep.checked : 0.0;
  return rep;
}

}  // namespace cftest

#endif  // CARDIOFIB_TESTS_GRADCHECK_HPP
