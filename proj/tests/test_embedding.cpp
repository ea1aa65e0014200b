#include "cardiofib/embedding.hpp"
#include "cardiofib/tsne.hpp"

#include <gtest/gtest.h>

#include "support/pca_oracle.hpp"

#include <cmath>
#include <cstdio>
#include <random>

using namespace cardiofib;
using namespace cftest;

namespace {

EmbeddingMatrix make_embedding(Matrix data, std::string tag) {
  EmbeddingMatrix e;
  e.ids = sequential_ids(static_cast<std::size_t>(data.rows()));
  e.data = std::move(data);
  e.provenance = std::move(tag);
  return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// fuse

TEST(Fuse, FullScaleDimensionsAddUp) {
  auto a = make_embedding(gaussian(6, 512, 1), "blstm");
  auto b = make_embedding(gaussian(6, 128, 2), "tae");
  const auto f = fuse(a, b);
  EXPECT_EQ(f.dims(), 640);
  EXPECT_EQ(f.provenance, "fused");
  EXPECT_EQ(f.data.leftCols(512), a.data);
  EXPECT_EQ(f.data.rightCols(128), b.data);
}

TEST(Fuse, EmptyWidthIsIdentity) {
  auto a = make_embedding(gaussian(5, 7, 3), "blstm");
  auto b = make_embedding(Matrix(5, 0), "tae");
  EXPECT_EQ(fuse(a, b).data, a.data);
  EXPECT_EQ(fuse(b, a).data, a.data);
}

TEST(Fuse, MisalignedIdsRejected) {
  auto a = make_embedding(gaussian(4, 3, 4), "blstm");
  auto b = make_embedding(gaussian(4, 2, 5), "tae");
  std::swap(b.ids[0], b.ids[3]);
  EXPECT_THROW(fuse(a, b), DataError);
  auto c = make_embedding(gaussian(3, 2, 6), "tae");
  EXPECT_THROW(fuse(a, c), DataError);
}

TEST(Fuse, DimsAlwaysSumProperty) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> w(0, 9), r(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    const int rows = r(rng), da = w(rng), db = w(rng);
    const auto f = fuse(make_embedding(gaussian(rows, da, trial), "a"), make_embedding(gaussian(rows, db, trial + 99), "b"));
    ASSERT_EQ(f.dims(), da + db);
    ASSERT_EQ(f.rows(), rows);
  }
}

// ---------------------------------------------------------------------------
// PCA

TEST(Pca, PointsOnALineNeedOneComponent) {
  Matrix x(20, 3);
  for (int i = 0; i < 20; ++i) x.row(i) << 1.0 + 0.5 * i, -2.0 + 0.25 * i, 3.0 - 1.0 * i;
  const auto m = pca_fit(x);
  ASSERT_EQ(m.k(), 1);
  EXPECT_NEAR(m.explained_ratio[0], 1.0, 1e-12);
}

TEST(Pca, IsotropicCloudHasFlatRatios) {
  const int d = 4;
  const Matrix x = gaussian(20000, d, 11);
  const auto m = pca_fit(x, {0.95, d});
  ASSERT_EQ(m.k(), d);
  for (double r : m.explained_ratio) EXPECT_NEAR(r, 1.0 / d, 0.02);
  const auto ev = jacobi_eigenvalues(covariance_by_loops(x));
  double total = 0.0;
  for (double v : ev) total += v;
  for (int i = 0; i < d; ++i) EXPECT_NEAR(m.explained_ratio[i], ev[i] / total, 1e-10);
}

TEST(Pca, CumulativeRatiosMatchCovarianceEigenvalues) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const Matrix x = anisotropic(150, 8, seed);
    const auto m = pca_fit(x, {0.95, 8});
    const auto ev = jacobi_eigenvalues(covariance_by_loops(x));
    double total = 0.0;
    for (double v : ev) total += v;
    double cum_pca = 0.0, cum_ref = 0.0;
    for (int i = 0; i < 8; ++i) {
      cum_pca += m.explained_ratio[i];
      cum_ref += ev[i] / total;
      EXPECT_NEAR(cum_pca, cum_ref, 1e-8) << "seed " << seed << " component " << i;
    }
  }
}

TEST(Pca, VarianceTargetPicksMinimalK) {
  const Matrix x = anisotropic(200, 10, 31);
  const auto ev = jacobi_eigenvalues(covariance_by_loops(x));
  double total = 0.0;
  for (double v : ev) total += v;
  for (double target : {0.5, 0.8, 0.9, 0.95, 0.99}) {
    int expect = 0;
    double cum = 0.0;
    while (cum < target) cum += ev[expect++] / total;
    const auto m = pca_fit(x, {target, 0});
    EXPECT_EQ(m.k(), expect) << "target " << target;
  }
}

TEST(Pca, ReconstructionResidualMatchesRatios) {
  const Matrix x = anisotropic(120, 6, 41);
  for (int k = 1; k <= 6; ++k) {
    const auto m = pca_fit(x, {0.95, k});
    const Matrix centered = x.rowwise() - m.mean;
    const Matrix recon = m.transform(x) * m.components.transpose();
    const double residual = (centered - recon).squaredNorm() / centered.squaredNorm();
    double cum = 0.0;
    for (double r : m.explained_ratio) cum += r;
    EXPECT_NEAR(residual, 1.0 - cum, 1e-9) << "k=" << k;
  }
}

TEST(Pca, InvariantsOnRandomData) {
  for (std::uint64_t seed = 50; seed < 60; ++seed) {
    const Matrix x = anisotropic(30 + static_cast<int>(seed % 7) * 10, 5 + static_cast<int>(seed % 4), seed);
    const auto m = pca_fit(x);
    const Matrix gram = m.components.transpose() * m.components;
    EXPECT_LT((gram - Matrix::Identity(m.k(), m.k())).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(m.transform(m.mean).cwiseAbs().maxCoeff(), 1e-9);
    double sum = 0.0;
    for (std::size_t i = 0; i < m.explained_ratio.size(); ++i) {
      sum += m.explained_ratio[i];
      if (i > 0) {
        EXPECT_LE(m.explained_ratio[i], m.explained_ratio[i - 1]);
      }
    }
    EXPECT_LE(sum, 1.0 + 1e-12);
  }
}

TEST(Pca, Errors) {
  EXPECT_THROW(pca_fit(Matrix::Ones(5, 3)), NumericError);
  EXPECT_THROW(pca_fit(Matrix::Ones(1, 3)), DataError);
  EXPECT_THROW(pca_fit(gaussian(5, 3, 1), {0.95, 9}), ConfigError);
}

TEST(Pca, FitTransformKeepsIds) {
  auto e = make_embedding(anisotropic(40, 6, 61), "fused");
  e.ids = std::vector<std::size_t>(40);
  for (std::size_t i = 0; i < 40; ++i) e.ids[i] = 1000 + 3 * i;
  const auto [model, reduced] = pca_fit_transform(e, {0.9, 0});
  EXPECT_EQ(reduced.ids, e.ids);
  EXPECT_EQ(reduced.provenance, "pca");
  EXPECT_EQ(reduced.dims(), model.k());
}

// ---------------------------------------------------------------------------
// t-SNE

namespace {

Matrix two_clusters(std::uint64_t seed) {
  Matrix x = gaussian(100, 5, seed, 0.5);
  x.topRows(50).col(0).array() += 20.0;
  return x;
}

double diameter(const Matrix& y, int lo, int hi) {
  double d = 0.0;
  for (int i = lo; i < hi; ++i)
    for (int j = lo; j < hi; ++j) d = std::max(d, (y.row(i) - y.row(j)).norm());
  return d;
}

}  // namespace

TEST(Tsne, SeparatesTwoClusters) {
  TsneParams prm;
  prm.seed = 3;
  const auto r = tsne_2d(two_clusters(71), prm);
  double gap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 50; ++i)
    for (int j = 50; j < 100; ++j) gap = std::min(gap, (r.coords.row(i) - r.coords.row(j)).norm());
  EXPECT_GT(gap, diameter(r.coords, 0, 50));
  EXPECT_GT(gap, diameter(r.coords, 50, 100));
}

TEST(Tsne, KlNonIncreasingOverSecondHalf) {
  TsneParams prm;
  prm.seed = 5;
  prm.iterations = 1000;
  const auto r = tsne_2d(two_clusters(72), prm);
  ASSERT_EQ(r.kl.size(), 1000u);
  for (std::size_t i = 501; i < r.kl.size(); ++i) EXPECT_LE(r.kl[i], r.kl[i - 1] + 1e-6) << "iteration " << i;
  EXPECT_LT(r.kl.back(), r.kl[250]);
}

TEST(Tsne, DeterministicUnderSeed) {
  TsneParams prm;
  prm.seed = 9;
  prm.iterations = 200;
  const Matrix x = two_clusters(73);
  EXPECT_EQ(tsne_2d(x, prm).coords, tsne_2d(x, prm).coords);
  prm.seed = 10;
  EXPECT_NE(tsne_2d(x, prm).coords, tsne_2d(x, {.iterations = 200, .seed = 9}).coords);
}

TEST(Tsne, BandwidthSearchHitsTargetEntropy) {
  for (double perplexity : {5.0, 15.0, 30.0}) {
    TsneParams prm;
    prm.perplexity = perplexity;
    prm.iterations = 1;
    const auto r = tsne_2d(gaussian(100, 4, 81), prm);
    for (double e : r.entropy_error) ASSERT_LE(e, 1e-5);
  }
}

TEST(Tsne, TooFewPointsRejected) {
  EXPECT_THROW(tsne_2d(gaussian(90, 3, 1)), DataError);
  EXPECT_NO_THROW(tsne_2d(gaussian(91, 3, 1), {.iterations = 1}));
}

// ---------------------------------------------------------------------------
// .emb files and extraction

TEST(EmbFile, RoundTripsF32) {
  auto e = make_embedding(gaussian(7, 5, 91), "tae");
  e.ids = {4, 8, 15, 16, 23, 42, 99};
  const std::string path = ::testing::TempDir() + "rt.emb";
  write_embedding(path, e);
  const auto back = read_embedding(path);
  EXPECT_EQ(back.ids, e.ids);
  EXPECT_EQ(back.provenance, "tae");
  EXPECT_EQ(back.data, e.data.cast<float>().cast<double>());
  std::remove(path.c_str());
}

TEST(EmbFile, TruncatedPayloadRejected) {
  const auto e = make_embedding(gaussian(3, 2, 92), "blstm");
  const std::string path = ::testing::TempDir() + "trunc.emb";
  write_embedding(path, e);
  std::string bytes;
  {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.append(buf, n);
    std::fclose(f);
  }
  bytes.resize(bytes.size() - 3);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  EXPECT_THROW(read_embedding(path), DataError);
  std::remove(path.c_str());
}

namespace {

std::vector<FeatureSequence> random_fibers(int count, int min_len, int max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::vector<FeatureSequence> out;
  for (int i = 0; i < count; ++i) out.emplace_back(gaussian(len(rng), kFeatureCount, seed * 100 + i));
  return out;
}

}  // namespace

TEST(Extraction, BlstmRowsDeterministicAndSized) {
  seq::BlstmConfig cfg{1, 6, kFeatureCount, 4};
  const auto ck = seq::make_checkpoint(seq::BlstmModel::create(cfg, 1), FeatureStats::identity(), true);
  auto fibers = random_fibers(70, 5, 12, 3);
  fibers[10] = fibers[3];
  const auto e = extract_blstm_embedding(ck, fibers);
  EXPECT_EQ(e.dims(), 12);
  EXPECT_EQ(e.rows(), 70);
  EXPECT_EQ(e.data.row(10), e.data.row(3));
  EXPECT_EQ(e.data, extract_blstm_embedding(ck, fibers).data);
  // Chunked extraction matches extracting a fiber alone.
  const auto single = extract_blstm_embedding(ck, {fibers[65]});
  EXPECT_LT((single.data.row(0) - e.data.row(65)).cwiseAbs().maxCoeff(), 1e-12);
  fibers[0] = FeatureSequence(gaussian(4, kFeatureCount, 1));
  EXPECT_THROW(extract_blstm_embedding(ck, fibers), DataError);
}

TEST(Extraction, TaeRowsDeterministicAndSized) {
  seq::TaeConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.ff = 16;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  const auto ck = seq::make_checkpoint(seq::TaeModel::create(cfg, 2), FeatureStats::identity(), true);
  auto fibers = random_fibers(70, 1, 9, 4);
  const auto e = extract_tae_embedding(ck, fibers);
  EXPECT_EQ(e.dims(), 8);
  EXPECT_EQ(e.data, extract_tae_embedding(ck, fibers).data);
  const auto single = extract_tae_embedding(ck, {fibers[66]});
  EXPECT_LT((single.data.row(0) - e.data.row(66)).cwiseAbs().maxCoeff(), 1e-12);
  fibers[5] = FeatureSequence();
  EXPECT_THROW(extract_tae_embedding(ck, fibers), DataError);
  EXPECT_THROW(extract_blstm_embedding(ck, fibers), DataError);
}
