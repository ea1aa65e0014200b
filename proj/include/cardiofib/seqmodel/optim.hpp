#ifndef CARDIOFIB_SEQMODEL_OPTIM_HPP
#define CARDIOFIB_SEQMODEL_OPTIM_HPP

#include "autodiff.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace cardiofib::seq {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay:
///   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
class AdamW {
 public:
  explicit AdamW(AdamWHyper h = {}) : hyper_(h) {}

  void step(ad::ParameterSet& params, double lr) {
    if (!std::isfinite(lr)) throw NumericError("adamw: non-finite learning rate");
    auto& ps = params.all();
    if (m_.empty()) {
      for (const auto& p : ps) {
        m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      }
    }
    if (m_.size() != ps.size()) throw ConfigError("adamw: parameter set changed between steps");
    for (const auto& p : ps)
      if (!p.grad.allFinite() || !p.value.allFinite()) throw NumericError("adamw: non-finite input in " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, t_);
    const double c2 = 1.0 - std::pow(hyper_.beta2, t_);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& p = ps[k];
      m_[k] = hyper_.beta1 * m_[k] + (1.0 - hyper_.beta1) * p.grad;
      v_[k] = hyper_.beta2 * v_[k] + (1.0 - hyper_.beta2) * p.grad.cwiseProduct(p.grad);
      const auto mhat = m_[k].array() / c1;
      const auto vhat = v_[k].array() / c2;
      p.value.array() -= lr * (mhat / (vhat.sqrt() + hyper_.eps)) + lr * hyper_.weight_decay * p.value.array();
    }
  }

  long steps() const { return t_; }
  const AdamWHyper& hyper() const { return hyper_; }

 private:
  AdamWHyper hyper_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

/// Reduce-on-plateau: a loss below best - 1e-8 is an improvement; after more
/// than `patience` epochs without one the rate is multiplied by `factor`,
/// never going under `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, int patience, double min_lr)
      : lr_(lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  /// Returns true when this call reduced the rate.
  bool step(double loss) {
    if (loss < best_ - 1e-8) {
      best_ = loss;
      stale_ = 0;
      return false;
    }
    if (++stale_ > patience_) {
      stale_ = 0;
      const double next = std::max(lr_ * factor_, min_lr_);
      const bool reduced = next < lr_;
      lr_ = next;
      return reduced;
    }
    return false;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  int stale() const { return stale_; }

 private:
  double lr_, factor_;
  int patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

}  // namespace cardiofib::seq

#endif  // CARDIOFIB_SEQMODEL_OPTIM_HPP
