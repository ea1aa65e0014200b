#ifndef CARDIOFIB_VALIDATION_HPP
#define CARDIOFIB_VALIDATION_HPP

// Internal cluster-quality indices, agreement with reference labels and the
// HDBSCAN hyperparameter grid.
//
// Silhouette, Davies–Bouldin and Calinski–Harabasz ignore noise points
// (label -1). DBCV counts noise in its normalizer, so a noisy labeling is
// penalized there and in noise_fraction only.

#include "clustering.hpp"
#include "core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

namespace cardiofib {

namespace detail {

/// Non-noise points grouped by label, groups in ascending label order.
inline std::vector<std::vector<Eigen::Index>> groups_of(const std::vector<int>& labels) {
  std::map<int, std::vector<Eigen::Index>> by;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) by[labels[i]].push_back(static_cast<Eigen::Index>(i));
  std::vector<std::vector<Eigen::Index>> out;
  for (auto& [l, v] : by) out.push_back(std::move(v));
  return out;
}

inline void check_shape(const Matrix& x, const std::vector<int>& labels, const char* who) {
  if (static_cast<std::size_t>(x.rows()) != labels.size())
    throw DataError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(x.rows()) + " points");
  for (int l : labels)
    if (l < -1) throw DataError(std::string(who) + ": labels must be >= -1");
}

inline std::vector<Eigen::RowVectorXd> centroids(const Matrix& x, const std::vector<std::vector<Eigen::Index>>& g) {
  std::vector<Eigen::RowVectorXd> c;
  for (const auto& members : g) {
    Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(x.cols());
    for (auto i : members) s += x.row(i);
    c.push_back(s / static_cast<double>(members.size()));
  }
  return c;
}

}  // namespace detail

inline double noise_fraction(const std::vector<int>& labels) {
  if (labels.empty()) throw DataError("noise_fraction: empty labels");
  return static_cast<double>(std::count(labels.begin(), labels.end(), -1)) / static_cast<double>(labels.size());
}

/// Mean silhouette over non-noise points; members of singleton clusters
/// score 0.
inline double silhouette(const Matrix& x, const std::vector<int>& labels) {
  detail::check_shape(x, labels, "silhouette");
  const auto groups = detail::groups_of(labels);
  if (groups.size() < 2) throw DataError("silhouette: needs at least 2 clusters");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto i : groups[g]) {
      ++count;
      if (groups[g].size() == 1) continue;
      double a = 0.0;
      for (auto j : groups[g])
        if (j != i) a += euclidean(x, i, j);
      a /= static_cast<double>(groups[g].size() - 1);
      double b = std::numeric_limits<double>::infinity();
      for (std::size_t h = 0; h < groups.size(); ++h) {
        if (h == g) continue;
        double s = 0.0;
        for (auto j : groups[h]) s += euclidean(x, i, j);
        b = std::min(b, s / static_cast<double>(groups[h].size()));
      }
      const double m = std::max(a, b);
      total += m > 0.0 ? (b - a) / m : 0.0;
    }
  return total / static_cast<double>(count);
}

/// +inf when two clusters share a centroid.
inline double davies_bouldin(const Matrix& x, const std::vector<int>& labels) {
  detail::check_shape(x, labels, "davies_bouldin");
  const auto groups = detail::groups_of(labels);
  if (groups.size() < 2) throw DataError("davies_bouldin: needs at least 2 clusters");
  const auto c = detail::centroids(x, groups);
  std::vector<double> scatter(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (auto i : groups[g]) scatter[g] += (x.row(i) - c[g]).norm();
    scatter[g] /= static_cast<double>(groups[g].size());
  }
  double total = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    double worst = 0.0;
    for (std::size_t h = 0; h < groups.size(); ++h) {
      if (h == g) continue;
      const double m = (c[g] - c[h]).norm();
      if (m == 0.0) return std::numeric_limits<double>::infinity();
      worst = std::max(worst, (scatter[g] + scatter[h]) / m);
    }
    total += worst;
  }
  return total / static_cast<double>(groups.size());
}

/// +inf when every point sits exactly on its centroid.
inline double calinski_harabasz(const Matrix& x, const std::vector<int>& labels) {
  detail::check_shape(x, labels, "calinski_harabasz");
  const auto groups = detail::groups_of(labels);
  std::size_t n = 0;
  for (const auto& g : groups) n += g.size();
  const std::size_t k = groups.size();
  if (k < 2) throw DataError("calinski_harabasz: needs at least 2 clusters");
  if (n <= k) throw DataError("calinski_harabasz: needs more points than clusters");
  const auto c = detail::centroids(x, groups);
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(x.cols());
  for (const auto& g : groups)
    for (auto i : g) mean += x.row(i);
  mean /= static_cast<double>(n);
  double between = 0.0, within = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    between += static_cast<double>(groups[g].size()) * (c[g] - mean).squaredNorm();
    for (auto i : groups[g]) within += (x.row(i) - c[g]).squaredNorm();
  }
  if (within == 0.0) return std::numeric_limits<double>::infinity();
  return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

// ---------------------------------------------------------------------------
// DBCV

namespace detail {

/// All-points core distance of member p of a cluster in `dim` dimensions,
/// evaluated in log space because (1/d)^dim overflows for realistic dim.
inline double all_points_core_distance(const Matrix& x, const std::vector<Eigen::Index>& members, std::size_t p,
                                       double dim) {
  std::vector<double> logs;
  for (std::size_t q = 0; q < members.size(); ++q) {
    if (q == p) continue;
    const double d = euclidean(x, members[p], members[q]);
    if (d == 0.0) return 0.0;
    logs.push_back(-dim * std::log(d));
  }
  const double top = *std::max_element(logs.begin(), logs.end());
  double s = 0.0;
  for (double l : logs) s += std::exp(l - top);
  const double log_mean = top + std::log(s) - std::log(static_cast<double>(logs.size()));
  return std::exp(-log_mean / dim);
}

}  // namespace detail

inline double dbcv(const Matrix& x, const std::vector<int>& labels) {
  detail::check_shape(x, labels, "dbcv");
  const auto groups = detail::groups_of(labels);
  if (groups.size() < 2) throw DataError("dbcv: needs at least 2 clusters (all-noise or single-cluster labeling)");
  for (const auto& g : groups)
    if (g.size() < 2) throw DataError("dbcv: cluster with a single point");
  const double dim = static_cast<double>(x.cols());
  const std::size_t k = groups.size();

  std::vector<std::vector<double>> apts(k);
  for (std::size_t g = 0; g < k; ++g)
    for (std::size_t p = 0; p < groups[g].size(); ++p)
      apts[g].push_back(detail::all_points_core_distance(x, groups[g], p, dim));

  // Per cluster: MST over mutual reachability, its internal nodes and the
  // density sparseness (largest internal edge).
  std::vector<double> sparseness(k, 0.0);
  std::vector<std::vector<std::size_t>> internal(k);
  for (std::size_t g = 0; g < k; ++g) {
    const auto& m = groups[g];
    const std::size_t n = m.size();
    auto mreach = [&](std::size_t a, std::size_t b) {
      return std::max({apts[g][a], apts[g][b], euclidean(x, m[a], m[b])});
    };
    // Edges are totally ordered by (weight, lower index, higher index), which
    // makes the tree unique when mutual-reachability weights tie.
    using Key = std::tuple<double, std::size_t, std::size_t>;
    auto key = [&](std::size_t a, std::size_t b) { return Key{mreach(a, b), std::min(a, b), std::max(a, b)}; };
    std::vector<Key> best(n, Key{std::numeric_limits<double>::infinity(), 0, 0});
    std::vector<std::size_t> from(n, 0);
    std::vector<char> in(n, 0);
    std::vector<int> degree(n, 0);
    std::vector<std::tuple<std::size_t, std::size_t, double>> edges;
    std::size_t cur = 0;
    in[0] = 1;
    for (std::size_t added = 1; added < n; ++added) {
      for (std::size_t v = 0; v < n; ++v)
        if (!in[v]) {
          const Key k = key(cur, v);
          if (k < best[v]) {
            best[v] = k;
            from[v] = cur;
          }
        }
      std::size_t next = n;
      for (std::size_t v = 0; v < n; ++v)
        if (!in[v] && (next == n || best[v] < best[next])) next = v;
      in[next] = 1;
      edges.emplace_back(from[next], next, std::get<0>(best[next]));
      ++degree[from[next]];
      ++degree[next];
      cur = next;
    }
    bool any_internal_edge = false;
    for (const auto& [a, b, w] : edges)
      if (degree[a] > 1 && degree[b] > 1) {
        sparseness[g] = std::max(sparseness[g], w);
        any_internal_edge = true;
      }
    if (!any_internal_edge)
      for (const auto& [a, b, w] : edges) sparseness[g] = std::max(sparseness[g], w);
    for (std::size_t v = 0; v < n; ++v)
      if (degree[v] > 1) internal[g].push_back(v);
    if (internal[g].empty())
      for (std::size_t v = 0; v < n; ++v) internal[g].push_back(v);
  }

  double total = 0.0;
  for (std::size_t g = 0; g < k; ++g) {
    double separation = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < k; ++h) {
      if (h == g) continue;
      for (auto a : internal[g])
        for (auto b : internal[h])
          separation = std::min(separation, std::max({apts[g][a], apts[h][b], euclidean(x, groups[g][a], groups[h][b])}));
    }
    const double denom = std::max(separation, sparseness[g]);
    const double v = denom > 0.0 ? (separation - sparseness[g]) / denom : 0.0;
    total += static_cast<double>(groups[g].size()) * v;
  }
  return total / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// ARI

/// Noise (-1) is treated as one more label. Two single-block partitions give 1.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw DataError("adjusted_rand_index: label vectors differ in length");
  if (a.empty()) throw DataError("adjusted_rand_index: empty labels");
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  auto pairs = [](double m) { return m * (m - 1.0) / 2.0; };
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [key, m] : table) sum_cells += pairs(m);
  for (const auto& [key, m] : rows) sum_rows += pairs(m);
  for (const auto& [key, m] : cols) sum_cols += pairs(m);
  const double expected = sum_rows * sum_cols / pairs(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (sum_cells - expected) / (max_index - expected);
}

// ---------------------------------------------------------------------------
// Grid search

struct MetricsRow {
  int min_samples = 0;
  int min_cluster_size = 0;
  int n_clusters = 0;
  double noise_fraction = std::numeric_limits<double>::quiet_NaN();
  double silhouette = std::numeric_limits<double>::quiet_NaN();
  double davies_bouldin = std::numeric_limits<double>::quiet_NaN();
  double calinski_harabasz = std::numeric_limits<double>::quiet_NaN();
  double dbcv = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> flags;  // e.g. "davies_bouldin:degenerate", "dbcv:<message>"
  std::string error;               // hdbscan failure for this cell, if any
  std::vector<int> labels;

  bool ranked() const { return error.empty() && std::isfinite(dbcv); }
};

/// Index computations on an existing labeling. Undefined or degenerate
/// values are recorded in flags; the row is always produced.
inline MetricsRow compute_metrics(const Matrix& x, const std::vector<int>& labels) {
  MetricsRow row;
  row.labels = labels;
  row.noise_fraction = noise_fraction(labels);
  row.n_clusters = static_cast<int>(detail::groups_of(labels).size());
  auto guarded = [&](const char* name, double& out, auto&& fn) {
    try {
      out = fn();
      if (!std::isfinite(out)) row.flags.push_back(std::string(name) + ":degenerate");
    } catch (const Error& e) {
      row.flags.push_back(std::string(name) + ":" + e.what());
    }
  };
  guarded("silhouette", row.silhouette, [&] { return silhouette(x, labels); });
  guarded("davies_bouldin", row.davies_bouldin, [&] { return davies_bouldin(x, labels); });
  guarded("calinski_harabasz", row.calinski_harabasz, [&] { return calinski_harabasz(x, labels); });
  guarded("dbcv", row.dbcv, [&] { return dbcv(x, labels); });
  return row;
}

/// One HDBSCAN run plus metrics per (min_samples, min_cluster_size) pair,
/// sorted by DBCV descending. Rows without a finite DBCV keep their grid
/// order at the end.
inline std::vector<MetricsRow> grid_search(const Matrix& x, const std::vector<int>& min_samples_list,
                                           const std::vector<int>& min_cluster_size_list,
                                           bool allow_single_cluster = false) {
  if (min_samples_list.empty() || min_cluster_size_list.empty()) throw ConfigError("grid_search: empty grid");
  std::vector<MetricsRow> rows(min_samples_list.size() * min_cluster_size_list.size());
  parallel_for(rows.size(), [&](std::size_t cell) {
    const int ms = min_samples_list[cell / min_cluster_size_list.size()];
    const int mcs = min_cluster_size_list[cell % min_cluster_size_list.size()];
    MetricsRow row;
    try {
      const auto res = hdbscan(x, {ms, mcs, allow_single_cluster});
      row = compute_metrics(x, res.labels);
    } catch (const Error& e) {
      row.error = e.what();
    }
    row.min_samples = ms;
    row.min_cluster_size = mcs;
    rows[cell] = std::move(row);
  });
  std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& p, const MetricsRow& q) {
    if (p.ranked() != q.ranked()) return p.ranked();
    return p.ranked() && p.dbcv > q.dbcv;
  });
  return rows;
}

/// Shortest round-trip text for a double, with "inf", "-inf" and "nan" tokens.
inline std::string number_token(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "min_samples,min_cluster_size,n_clusters,noise_fraction,silhouette,davies_bouldin,calinski_harabasz,dbcv,"
         "flags\n";
  for (const auto& r : rows) {
    std::string flags = r.error.empty() ? "" : "error:" + r.error;
    for (const auto& f : r.flags) flags += (flags.empty() ? "" : ";") + f;
    for (char& ch : flags)
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    out << r.min_samples << ',' << r.min_cluster_size << ',' << r.n_clusters << ',' << number_token(r.noise_fraction)
        << ',' << number_token(r.silhouette) << ',' << number_token(r.davies_bouldin) << ','
        << number_token(r.calinski_harabasz) << ',' << number_token(r.dbcv) << ',' << flags << '\n';
  }
}

}  // namespace cardiofib

#endif  // CARDIOFIB_VALIDATION_HPP
