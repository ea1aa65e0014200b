#ifndef CARDIOFIB_EMBEDDING_HPP
#define CARDIOFIB_EMBEDDING_HPP

// Per-fiber embeddings from trained checkpoints, fusion and PCA reduction.

#include "binary_format.hpp"
#include "core.hpp"
#include "seqmodel/train.hpp"
#include "sequence.hpp"

#include <Eigen/SVD>

#include <string>
#include <vector>

namespace cardiofib {

struct EmbeddingMatrix {
  Matrix data;                   // n_fibers x dim
  std::vector<std::size_t> ids;  // fiber id of each row
  std::string provenance;        // blstm | tae | fused | pca

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index dims() const { return data.cols(); }

  void validate() const {
    if (static_cast<std::size_t>(data.rows()) != ids.size()) throw DataError("embedding: id count != row count");
    if (!data.allFinite()) throw NumericError("embedding (" + provenance + "): non-finite entries");
  }
};

inline std::vector<std::size_t> sequential_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

namespace detail {

template <typename Fn>
Matrix embed_in_chunks(const std::vector<Matrix>& fibers, Eigen::Index dim, std::size_t chunk, Fn&& embed) {
  Matrix out(static_cast<Eigen::Index>(fibers.size()), dim);
  for (std::size_t lo = 0; lo < fibers.size(); lo += chunk) {
    std::vector<const Matrix*> batch;
    for (std::size_t k = lo; k < std::min(fibers.size(), lo + chunk); ++k) batch.push_back(&fibers[k]);
    out.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(batch.size())) = embed(batch);
  }
  return out;
}

inline std::vector<Matrix> preprocess_all(const seq::ModelCheckpoint& ck, const std::vector<FeatureSequence>& fibers) {
  std::vector<Matrix> out;
  out.reserve(fibers.size());
  for (const auto& f : fibers) out.push_back(ck.preprocess(f.values));
  return out;
}

}  // namespace detail

/// Concatenated final top-layer forward/backward states, 2H per fiber.
inline EmbeddingMatrix extract_blstm_embedding(const seq::ModelCheckpoint& ck, const std::vector<FeatureSequence>& fibers,
                                               std::vector<std::size_t> ids = {}) {
  const auto model = seq::blstm_from_checkpoint(ck);
  for (std::size_t i = 0; i < fibers.size(); ++i)
    if (static_cast<int>(fibers[i].size()) < model.min_length())
      throw DataError("extract_blstm_embedding: fiber " + std::to_string(i) + " has " +
                      std::to_string(fibers[i].size()) + " points, model minimum is " +
                      std::to_string(model.min_length()));
  const auto prepped = detail::preprocess_all(ck, fibers);
  EmbeddingMatrix e;
  e.data = detail::embed_in_chunks(prepped, 2 * model.config.hidden, 64,
                                   [&](const std::vector<const Matrix*>& b) { return model.embed(b); });
  e.ids = ids.empty() ? sequential_ids(fibers.size()) : std::move(ids);
  e.provenance = "blstm";
  e.validate();
  return e;
}

/// Pooled encoder token outputs, d_model per fiber.
inline EmbeddingMatrix extract_tae_embedding(const seq::ModelCheckpoint& ck, const std::vector<FeatureSequence>& fibers,
                                             std::vector<std::size_t> ids = {},
                                             seq::Pooling pooling = seq::Pooling::kMean) {
  const auto model = seq::tae_from_checkpoint(ck);
  for (std::size_t i = 0; i < fibers.size(); ++i)
    if (fibers[i].size() == 0) throw DataError("extract_tae_embedding: fiber " + std::to_string(i) + " is empty");
  const auto prepped = detail::preprocess_all(ck, fibers);
  EmbeddingMatrix e;
  e.data = detail::embed_in_chunks(prepped, model.config.d_model, 64,
                                   [&](const std::vector<const Matrix*>& b) { return model.embed(b, pooling); });
  e.ids = ids.empty() ? sequential_ids(fibers.size()) : std::move(ids);
  e.provenance = "tae";
  e.validate();
  return e;
}

inline EmbeddingMatrix fuse(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.rows() != b.rows()) throw DataError("fuse: row counts differ");
  if (a.ids != b.ids) throw DataError("fuse: fiber ids are not aligned");
  EmbeddingMatrix out;
  out.data.resize(a.rows(), a.dims() + b.dims());
  out.data.leftCols(a.dims()) = a.data;
  out.data.rightCols(b.dims()) = b.data;
  out.ids = a.ids;
  out.provenance = "fused";
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaOptions {
  double variance_target = 0.95;  // used when fixed_k == 0
  int fixed_k = 0;
};

struct PcaModel {
  Eigen::RowVectorXd mean;
  Matrix components;                    // dim x k, orthonormal columns
  std::vector<double> explained_ratio;  // k entries, non-increasing
  std::vector<double> all_ratios;       // one per singular value

  int k() const { return static_cast<int>(components.cols()); }

  Matrix transform(const Matrix& x) const {
    if (x.cols() != mean.size()) throw DataError("pca: dimension mismatch");
    return (x.rowwise() - mean) * components;
  }

  io::Json to_json() const {
    return {{"k", k()},
            {"dim", mean.size()},
            {"explained_ratio", explained_ratio},
            {"cumulative", [&] {
               double c = 0.0;
               std::vector<double> out;
               for (double r : explained_ratio) out.push_back(c += r);
               return out;
             }()}};
  }
};

/// Centered SVD (Eigen BDCSVD). Component signs are fixed so each column's
/// largest-magnitude entry is positive.
inline PcaModel pca_fit(const Matrix& x, const PcaOptions& opt = {}) {
  if (x.rows() < 2) throw DataError("pca: need at least 2 rows");
  if (!x.allFinite()) throw DataError("pca: non-finite input");
  if (opt.fixed_k < 0) throw ConfigError("pca: fixed_k must be >= 0");
  if (opt.fixed_k == 0 && !(opt.variance_target > 0.0 && opt.variance_target <= 1.0))
    throw ConfigError("pca: variance_target must be in (0, 1]");
  PcaModel m;
  m.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - m.mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double total = sv.squaredNorm();
  if (opt.fixed_k == 0 && !(total > 0.0)) throw NumericError("pca: zero-variance data");
  for (Eigen::Index i = 0; i < sv.size(); ++i) m.all_ratios.push_back(total > 0.0 ? sv[i] * sv[i] / total : 0.0);

  int k = opt.fixed_k;
  if (k == 0) {
    double cum = 0.0;
    for (k = 0; k < static_cast<int>(m.all_ratios.size());) {
      cum += m.all_ratios[k++];
      if (cum >= opt.variance_target) break;
    }
  }
  if (k > static_cast<int>(sv.size()))
    throw ConfigError("pca: fixed_k " + std::to_string(k) + " exceeds rank bound " + std::to_string(sv.size()));
  m.components = svd.matrixV().leftCols(k);
  for (int c = 0; c < k; ++c) {
    Eigen::Index arg;
    m.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (m.components(arg, c) < 0) m.components.col(c) *= -1.0;
  }
  m.explained_ratio.assign(m.all_ratios.begin(), m.all_ratios.begin() + k);
  return m;
}

inline std::pair<PcaModel, EmbeddingMatrix> pca_fit_transform(const EmbeddingMatrix& e, const PcaOptions& opt = {}) {
  PcaModel m = pca_fit(e.data, opt);
  EmbeddingMatrix out;
  out.data = m.transform(e.data);
  out.ids = e.ids;
  out.provenance = "pca";
  return {std::move(m), std::move(out)};
}

// ---------------------------------------------------------------------------
// .emb files

inline void write_embedding(const std::string& path, const EmbeddingMatrix& e) {
  e.validate();
  std::string payload;
  for (Eigen::Index r = 0; r < e.data.rows(); ++r)
    for (Eigen::Index c = 0; c < e.data.cols(); ++c) io::put_f32(payload, static_cast<float>(e.data(r, c)));
  io::write_container(path,
                      io::Json{{"rows", e.data.rows()},
                               {"dims", e.data.cols()},
                               {"provenance", e.provenance},
                               {"ids", e.ids},
                               {"dtype", "f32"}},
                      payload);
}

inline EmbeddingMatrix read_embedding(const std::string& path) {
  auto [header, reader] = io::read_container(path);
  EmbeddingMatrix e;
  const auto rows = io::header_field<Eigen::Index>(header, "rows", path);
  const auto dims = io::header_field<Eigen::Index>(header, "dims", path);
  if (rows < 0 || dims < 0) throw DataError(path + ": negative shape");
  e.provenance = header.value("provenance", std::string("unknown"));
  e.ids = header.contains("ids") ? header["ids"].get<std::vector<std::size_t>>()
                                 : sequential_ids(static_cast<std::size_t>(rows));
  if (e.ids.size() != static_cast<std::size_t>(rows)) throw DataError(path + ": id count != rows");
  e.data.resize(rows, dims);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < dims; ++c) e.data(r, c) = reader.finite_f32(k++);
  reader.expect_end();
  return e;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_EMBEDDING_HPP
