#ifndef CARDIOFIB_SEQMODEL_BATCH_HPP
#define CARDIOFIB_SEQMODEL_BATCH_HPP

#include "../core.hpp"

#include <random>
#include <vector>

namespace cardiofib::seq {

/// Variable-length sequences padded to the longest one. Row b * steps + t of
/// `data` holds step t of sequence b; rows with t >= lengths[b] hold the pad
/// value and are never read by a model in a way that reaches a valid output.
struct PaddedBatch {
  int batch = 0;
  int steps = 0;
  int features = 0;
  std::vector<int> lengths;
  Matrix data;

  static PaddedBatch from(const std::vector<const Matrix*>& seqs, double pad_value) {
    if (seqs.empty()) throw DataError("empty batch");
    PaddedBatch pb;
    pb.batch = static_cast<int>(seqs.size());
    pb.features = static_cast<int>(seqs[0]->cols());
    for (const Matrix* s : seqs) {
      if (s->rows() == 0) throw DataError("zero-length sequence in batch");
      if (s->cols() != pb.features) throw DataError("feature width differs within batch");
      pb.lengths.push_back(static_cast<int>(s->rows()));
      pb.steps = std::max(pb.steps, static_cast<int>(s->rows()));
    }
    pb.data = Matrix::Constant(static_cast<Eigen::Index>(pb.batch) * pb.steps, pb.features, pad_value);
    for (int b = 0; b < pb.batch; ++b)
      pb.data.middleRows(static_cast<Eigen::Index>(b) * pb.steps, pb.lengths[b]) = *seqs[b];
    return pb;
  }

  static PaddedBatch from(const std::vector<Matrix>& seqs, double pad_value) {
    std::vector<const Matrix*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    return from(ptrs, pad_value);
  }

  bool valid(int b, int t) const { return t < lengths[b]; }
  Eigen::Index row(int b, int t) const { return static_cast<Eigen::Index>(b) * steps + t; }

  /// batch x features slice of time step t.
  Matrix step(int t) const {
    Matrix out(batch, features);
    for (int b = 0; b < batch; ++b) out.row(b) = data.row(row(b, t));
    return out;
  }

  std::vector<char> step_mask(int t) const {
    std::vector<char> m(batch);
    for (int b = 0; b < batch; ++b) m[b] = valid(b, t) ? 1 : 0;
    return m;
  }

  /// (batch*steps) x width matrix with 1 on valid rows.
  Matrix row_mask(int width) const {
    Matrix m = Matrix::Zero(data.rows(), width);
    for (int b = 0; b < batch; ++b) m.middleRows(row(b, 0), lengths[b]).setOnes();
    return m;
  }
};

/// Inverted dropout masks drawn from a caller-owned generator. A disabled
/// Dropout (rate 0 or no generator) yields no mask at all.
struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  Matrix mask(Eigen::Index rows, Eigen::Index cols) const {
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix m(rows, cols);
    const double s = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? s : 0.0;
    return m;
  }
};

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace cardiofib::seq

#endif  // CARDIOFIB_SEQMODEL_BATCH_HPP
