#ifndef CARDIOFIB_CLUSTERING_HPP
#define CARDIOFIB_CLUSTERING_HPP

// HDBSCAN: core distances, mutual-reachability MST, single-linkage
// hierarchy, condensed tree and excess-of-mass extraction.
//
// Edges of equal weight merge at the same level, so a hierarchy node can have
// more than two children and the result does not depend on which of several
// equal-weight minimum spanning trees Prim happened to return.

#include "binary_format.hpp"
#include "core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace cardiofib {

struct ClusterParams {
  int min_samples = 5;
  int min_cluster_size = 10;
  bool allow_single_cluster = false;

  void validate() const {
    if (min_samples < 1) throw ConfigError("hdbscan: min_samples must be >= 1");
    if (min_cluster_size < 2) throw ConfigError("hdbscan: min_cluster_size must be >= 2");
  }
};

/// Plain left-to-right accumulation, so any two callers get identical bits.
inline double euclidean(const Matrix& x, Eigen::Index i, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double d = x(i, c) - x(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

/// Distance to the min_samples-th nearest point, the point itself being
/// the first.
inline std::vector<double> core_distances(const Matrix& x, int min_samples) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (min_samples < 1) throw ConfigError("core_distances: min_samples must be >= 1");
  if (n < static_cast<std::size_t>(min_samples))
    throw DataError("core_distances: " + std::to_string(n) + " points < min_samples " + std::to_string(min_samples));
  std::vector<double> core(n);
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> d(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = euclidean(x, i, j);
    std::nth_element(d.begin(), d.begin() + (min_samples - 1), d.end());
    core[i] = d[min_samples - 1];
  });
  return core;
}

struct MstEdge {
  std::size_t a = 0, b = 0;  // a < b
  double weight = 0.0;
};

/// Prim's algorithm on the complete mutual-reachability graph. Among equal
/// candidates the lowest vertex index is attached first. Edges are returned
/// sorted by (weight, a, b).
inline std::vector<MstEdge> mutual_reachability_mst(const Matrix& x, const std::vector<double>& core) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (core.size() != n) throw DataError("mst: core distance count != point count");
  std::vector<MstEdge> edges;
  if (n < 2) return edges;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> best(n, inf);
  std::vector<std::size_t> from(n, 0);
  std::vector<char> in_tree(n, 0);
  std::size_t cur = 0;
  in_tree[0] = 1;
  for (std::size_t added = 1; added < n; ++added) {
    for (std::size_t v = 0; v < n; ++v) {
      if (in_tree[v]) continue;
      const double w = std::max({core[cur], core[v], euclidean(x, cur, v)});
      if (w < best[v]) {
        best[v] = w;
        from[v] = cur;
      }
    }
    std::size_t next = n;
    for (std::size_t v = 0; v < n; ++v)
      if (!in_tree[v] && (next == n || best[v] < best[next])) next = v;
    in_tree[next] = 1;
    edges.push_back({std::min(from[next], next), std::max(from[next], next), best[next]});
    cur = next;
  }
  std::sort(edges.begin(), edges.end(), [](const MstEdge& p, const MstEdge& q) {
    if (p.weight != q.weight) return p.weight < q.weight;
    if (p.a != q.a) return p.a < q.a;
    return p.b < q.b;
  });
  return edges;
}

// ---------------------------------------------------------------------------
// Single-linkage hierarchy

struct LinkageNode {
  double weight = 0.0;         // merge distance; 0 for leaves
  std::vector<int> children;   // empty for leaves (points)
  std::size_t size = 1;
  std::size_t min_point = 0;
};

/// Nodes 0..n-1 are the points; the last node is the root.
struct LinkageTree {
  std::size_t n_points = 0;
  std::vector<LinkageNode> nodes;
  int root() const { return static_cast<int>(nodes.size()) - 1; }
};

namespace detail {

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace detail

inline LinkageTree build_linkage_tree(std::size_t n, const std::vector<MstEdge>& sorted_edges) {
  if (n == 0) throw DataError("linkage: no points");
  if (sorted_edges.size() + 1 != n) throw DataError("linkage: a spanning tree over n points has n-1 edges");
  LinkageTree t;
  t.n_points = n;
  for (std::size_t i = 0; i < n; ++i) t.nodes.push_back({0.0, {}, 1, i});
  detail::UnionFind uf(n);
  std::vector<int> node_of(n);
  std::iota(node_of.begin(), node_of.end(), 0);
  std::size_t lo = 0;
  while (lo < sorted_edges.size()) {
    std::size_t hi = lo;
    while (hi < sorted_edges.size() && sorted_edges[hi].weight == sorted_edges[lo].weight) ++hi;
    // Components as they stood before this level.
    std::vector<std::pair<int, int>> touched;
    for (std::size_t e = lo; e < hi; ++e)
      touched.emplace_back(node_of[uf.find(sorted_edges[e].a)], node_of[uf.find(sorted_edges[e].b)]);
    for (std::size_t e = lo; e < hi; ++e) uf.unite(sorted_edges[e].a, sorted_edges[e].b);
    std::vector<std::pair<std::size_t, std::vector<int>>> groups;  // new root -> old nodes
    for (std::size_t e = lo; e < hi; ++e) {
      const std::size_t r = uf.find(sorted_edges[e].a);
      auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == r; });
      if (it == groups.end()) {
        groups.push_back({r, {}});
        it = groups.end() - 1;
      }
      for (int nd : {touched[e - lo].first, touched[e - lo].second})
        if (std::find(it->second.begin(), it->second.end(), nd) == it->second.end()) it->second.push_back(nd);
    }
    std::sort(groups.begin(), groups.end(), [](const auto& p, const auto& q) { return p.first < q.first; });
    for (auto& [r, kids] : groups) {
      std::sort(kids.begin(), kids.end(),
                [&](int p, int q) { return t.nodes[p].min_point < t.nodes[q].min_point; });
      LinkageNode node;
      node.weight = sorted_edges[lo].weight;
      node.children = kids;
      node.size = 0;
      node.min_point = t.nodes[kids[0]].min_point;
      for (int k : kids) node.size += t.nodes[k].size;
      t.nodes.push_back(std::move(node));
      node_of[r] = static_cast<int>(t.nodes.size()) - 1;
    }
    lo = hi;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Condensed tree

struct CondensedCluster {
  int parent = -1;
  double birth_lambda = 0.0;
  double death_lambda = 0.0;  // lambda at which it split or emptied
  std::size_t size = 0;
  double stability = 0.0;
  std::vector<int> children;
};

struct CondensedEdge {
  int parent = 0;
  long child = 0;  // point index when !child_is_cluster, else cluster id
  bool child_is_cluster = false;
  double lambda = 0.0;
  std::size_t child_size = 1;
};

struct CondensedTree {
  std::size_t n_points = 0;
  std::vector<CondensedCluster> clusters;  // 0 is the root; parents precede children
  std::vector<CondensedEdge> edges;
  std::vector<int> point_cluster;      // cluster each point fell out of
  std::vector<double> point_lambda;    // lambda at which it fell out
};

namespace detail {

inline void collect_points(const LinkageTree& t, int node, std::vector<std::size_t>& out) {
  std::vector<int> stack{node};
  while (!stack.empty()) {
    const int k = stack.back();
    stack.pop_back();
    if (t.nodes[k].children.empty())
      out.push_back(static_cast<std::size_t>(k));
    else
      for (auto it = t.nodes[k].children.rbegin(); it != t.nodes[k].children.rend(); ++it) stack.push_back(*it);
  }
}

}  // namespace detail

/// Condenses the hierarchy top-down. At a node that splits at distance w
/// (lambda = 1/w): two or more children of at least min_cluster_size points
/// each start a new cluster; exactly one such child carries the current
/// cluster on; smaller children's points fall out at lambda. A zero-distance
/// node (identical points) cannot be split further, so its points fall out at
/// the lambda reached so far.
inline CondensedTree condense_tree(const LinkageTree& lt, std::size_t min_cluster_size) {
  if (min_cluster_size < 2) throw ConfigError("condense: min_cluster_size must be >= 2");
  CondensedTree ct;
  ct.n_points = lt.n_points;
  ct.point_cluster.assign(lt.n_points, 0);
  ct.point_lambda.assign(lt.n_points, 0.0);
  ct.clusters.push_back({-1, 0.0, 0.0, lt.nodes[lt.root()].size, 0.0, {}});

  auto fall_out = [&](int node, int cid, double lambda) {
    std::vector<std::size_t> pts;
    detail::collect_points(lt, node, pts);
    for (std::size_t p : pts) {
      ct.point_cluster[p] = cid;
      ct.point_lambda[p] = lambda;
      ct.clusters[cid].stability += lambda - ct.clusters[cid].birth_lambda;
      ct.edges.push_back({cid, static_cast<long>(p), false, lambda, 1});
    }
    ct.clusters[cid].death_lambda = std::max(ct.clusters[cid].death_lambda, lambda);
  };

  struct Item {
    int node;
    int cid;
    double lambda_prev;
  };
  std::vector<Item> stack{{lt.root(), 0, 0.0}};
  while (!stack.empty()) {
    const Item it = stack.back();
    stack.pop_back();
    const LinkageNode& node = lt.nodes[it.node];
    if (node.children.empty()) {
      fall_out(it.node, it.cid, it.lambda_prev);
      continue;
    }
    if (node.weight == 0.0) {
      fall_out(it.node, it.cid, it.lambda_prev);
      continue;
    }
    const double lambda = 1.0 / node.weight;
    std::vector<int> big;
    for (int c : node.children)
      if (lt.nodes[c].size >= min_cluster_size) big.push_back(c);
    if (big.size() >= 2) {
      std::vector<Item> pushes;
      for (int c : node.children) {
        if (lt.nodes[c].size < min_cluster_size) {
          fall_out(c, it.cid, lambda);
          continue;
        }
        const int nid = static_cast<int>(ct.clusters.size());
        ct.clusters.push_back({it.cid, lambda, 0.0, lt.nodes[c].size, 0.0, {}});
        ct.clusters[it.cid].children.push_back(nid);
        ct.clusters[it.cid].stability += (lambda - ct.clusters[it.cid].birth_lambda) * lt.nodes[c].size;
        ct.clusters[it.cid].death_lambda = std::max(ct.clusters[it.cid].death_lambda, lambda);
        ct.edges.push_back({it.cid, nid, true, lambda, lt.nodes[c].size});
        pushes.push_back({c, nid, lambda});
      }
      for (auto p = pushes.rbegin(); p != pushes.rend(); ++p) stack.push_back(*p);
    } else if (big.size() == 1) {
      for (int c : node.children)
        if (c != big[0]) fall_out(c, it.cid, lambda);
      stack.push_back({big[0], it.cid, lambda});
    } else {
      fall_out(it.node, it.cid, lambda);
    }
  }
  return ct;
}

// ---------------------------------------------------------------------------
// Extraction

struct ClusterResult {
  std::vector<int> labels;              // -1 noise, else 0..K-1
  int n_clusters = 0;
  std::vector<double> stabilities;      // per label
  std::vector<int> selected_clusters;   // condensed-tree id per label
  ClusterParams params;
  double noise_fraction = 0.0;

  io::Json stability_json() const {
    io::Json j = io::Json::array();
    for (int k = 0; k < n_clusters; ++k) {
      const auto size = std::count(labels.begin(), labels.end(), k);
      j.push_back({{"label", k}, {"stability", stabilities[k]}, {"size", size}});
    }
    return {{"min_samples", params.min_samples},
            {"min_cluster_size", params.min_cluster_size},
            {"allow_single_cluster", params.allow_single_cluster},
            {"noise_fraction", noise_fraction},
            {"clusters", j}};
  }
};

/// Excess of mass: bottom-up, a cluster is kept when its stability is
/// strictly greater than the summed value of its best descendants. Leaf
/// clusters are always candidates; the root only with allow_single_cluster.
inline ClusterResult extract_clusters(const CondensedTree& ct, bool allow_single_cluster) {
  const int m = static_cast<int>(ct.clusters.size());
  std::vector<char> selected(m, 0);
  std::vector<double> value(m, 0.0);
  for (int c = m - 1; c >= 0; --c) {
    const auto& cl = ct.clusters[c];
    if (c == 0 && !allow_single_cluster) continue;
    if (cl.children.empty()) {
      selected[c] = 1;
      value[c] = cl.stability;
      continue;
    }
    double sum = 0.0;
    for (int k : cl.children) sum += value[k];
    if (cl.stability > sum) {
      selected[c] = 1;
      value[c] = cl.stability;
    } else {
      value[c] = sum;
    }
  }
  // A selected cluster wins over everything below it.
  for (int c = 0; c < m; ++c)
    if (selected[c] || (c > 0 && selected[ct.clusters[c].parent] == 2))
      for (int k : ct.clusters[c].children) selected[k] = 2;
  ClusterResult res;
  std::vector<int> label_of(m, -1);
  for (int c = 0; c < m; ++c)
    if (selected[c] == 1) {
      label_of[c] = res.n_clusters++;
      res.selected_clusters.push_back(c);
      res.stabilities.push_back(ct.clusters[c].stability);
    }
  res.labels.assign(ct.n_points, -1);
  for (std::size_t p = 0; p < ct.n_points; ++p) {
    for (int c = ct.point_cluster[p]; c >= 0; c = ct.clusters[c].parent)
      if (label_of[c] >= 0) {
        res.labels[p] = label_of[c];
        break;
      }
  }
  const auto noise = std::count(res.labels.begin(), res.labels.end(), -1);
  res.noise_fraction = ct.n_points ? static_cast<double>(noise) / static_cast<double>(ct.n_points) : 0.0;
  return res;
}

inline ClusterResult hdbscan(const Matrix& x, const ClusterParams& params) {
  params.validate();
  const auto n = static_cast<std::size_t>(x.rows());
  if (n < static_cast<std::size_t>(std::max(params.min_samples, params.min_cluster_size)))
    throw DataError("hdbscan: " + std::to_string(n) + " points < max(min_samples, min_cluster_size)");
  if (!x.allFinite()) throw DataError("hdbscan: non-finite input");
  const auto core = core_distances(x, params.min_samples);
  const auto mst = mutual_reachability_mst(x, core);
  const auto lt = build_linkage_tree(n, mst);
  const auto ct = condense_tree(lt, static_cast<std::size_t>(params.min_cluster_size));
  ClusterResult res = extract_clusters(ct, params.allow_single_cluster);
  res.params = params;
  return res;
}

}  // namespace cardiofib

#endif  // CARDIOFIB_CLUSTERING_HPP
