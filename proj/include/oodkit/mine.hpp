#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"

namespace ood::mine {

inline constexpr int kNoise = -1;

// (l, w, h, l/w, l/h, w/h, lw, lh, wh)
inline Eigen::RowVector<double, 9> geom_features(const Box3D& b) {
  Eigen::RowVector<double, 9> f;
  f << b.length, b.width, b.height, b.length / b.width, b.length / b.height,
      b.width / b.height, b.length * b.width, b.length * b.height,
      b.width * b.height;
  return f;
}

// Column standardization; a zero-variance column keeps unit scale so constant
// features collapse to a single point instead of dividing by zero.
inline Eigen::MatrixXd standardize(const Eigen::MatrixXd& data) {
  Eigen::MatrixXd out = data;
  const auto n = data.rows();
  for (Eigen::Index c = 0; c < data.cols(); ++c) {
    const double mean = data.col(c).mean();
    const double var =
        (data.col(c).array() - mean).square().sum() / static_cast<double>(n - 1);
    const double sd = std::sqrt(var);
    out.col(c) = (data.col(c).array() - mean) / (sd > 1e-12 ? sd : 1.0);
  }
  return out;
}

// Projection onto the top-ndim eigenvectors of the standardized covariance;
// component sign fixed so the largest-magnitude loading is positive.
inline Eigen::MatrixXd pca_project(const Eigen::MatrixXd& data, int ndim = 2) {
  const auto n = data.rows();
  if (n < 3) throw DegenerateData("pca_project needs at least 3 rows");
  for (Eigen::Index c = 0; c < data.cols(); ++c) {
    const double mean = data.col(c).mean();
    const double var = (data.col(c).array() - mean).square().sum() /
                       static_cast<double>(n - 1);
    if (var < 1e-12)
      throw DegenerateData("zero-variance column " + std::to_string(c));
  }
  const Eigen::MatrixXd z = standardize(data);
  const Eigen::MatrixXd cov =
      z.transpose() * z / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success)
    throw DegenerateData("eigendecomposition failed");
  // eigenvalues ascend; take the top ndim.
  Eigen::MatrixXd components(data.cols(), ndim);
  for (int k = 0; k < ndim; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(data.cols() - 1 - k);
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;
    components.col(k) = v;
  }
  return z * components;
}

// Standard density-reachability DBSCAN; deterministic given input order
// (expansion seeded in ascending index order). Returns cluster id per point
// or kNoise.
inline std::vector<int> dbscan(const Eigen::MatrixXd& points, double eps,
                               std::size_t min_pts) {
  const auto n = points.rows();
  std::vector<std::vector<Eigen::Index>> neighbors(n);
  const double eps2 = eps * eps;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if ((points.row(i) - points.row(j)).squaredNorm() <= eps2)
        neighbors[i].push_back(j);  // includes self

  std::vector<int> labels(n, kNoise);
  std::vector<bool> visited(n, false);
  int next_cluster = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (visited[i]) continue;
    visited[i] = true;
    if (neighbors[i].size() < min_pts) continue;  // not core; may be claimed
    const int cid = next_cluster++;
    labels[i] = cid;
    std::vector<Eigen::Index> queue(neighbors[i].begin(), neighbors[i].end());
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const Eigen::Index p = queue[qi];
      if (labels[p] == kNoise) labels[p] = cid;  // border point
      if (visited[p]) continue;
      visited[p] = true;
      labels[p] = cid;
      if (neighbors[p].size() >= min_pts)
        queue.insert(queue.end(), neighbors[p].begin(), neighbors[p].end());
    }
  }
  return labels;
}

// eps by the k-distance heuristic: 90th percentile of distances to the k-th
// nearest neighbor (k = min_pts, excluding self).
inline double choose_eps(const Eigen::MatrixXd& points, std::size_t k) {
  const auto n = points.rows();
  std::vector<double> kdist;
  kdist.reserve(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> d;
    d.reserve(n - 1);
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) d.push_back((points.row(i) - points.row(j)).norm());
    if (d.size() < k) continue;
    std::nth_element(d.begin(), d.begin() + static_cast<long>(k - 1), d.end());
    kdist.push_back(d[k - 1]);
  }
  if (kdist.empty()) return 1.0;
  std::sort(kdist.begin(), kdist.end());
  const std::size_t idx =
      std::min(kdist.size() - 1,
               static_cast<std::size_t>(std::ceil(0.9 * kdist.size())) - 1);
  const double eps = kdist[idx];
  return eps > 1e-9 ? eps : 1e-9;
}

struct ClusteringDiagnostics {
  std::string feature_set;
  double eps = 0;
  std::size_t min_pts = 0;
  std::vector<int> labels;
  std::vector<std::size_t> outliers;
};

struct MineResult {
  std::vector<std::size_t> outliers;  // union over the four clusterings
  std::vector<ClusteringDiagnostics> diagnostics;
};

// Outliers of one clustering: NOISE points plus members of non-largest
// clusters smaller than 5% of n.
inline std::vector<std::size_t> clustering_outliers(
    const std::vector<int>& labels) {
  int max_label = -1;
  for (int l : labels) max_label = std::max(max_label, l);
  std::vector<std::size_t> sizes(static_cast<std::size_t>(max_label + 1), 0);
  for (int l : labels)
    if (l >= 0) ++sizes[static_cast<std::size_t>(l)];
  std::size_t largest = 0;
  for (std::size_t s : sizes) largest = std::max(largest, s);
  const double small_cut = 0.05 * static_cast<double>(labels.size());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l == kNoise) {
      out.push_back(i);
      continue;
    }
    const std::size_t sz = sizes[static_cast<std::size_t>(l)];
    if (sz != largest && static_cast<double>(sz) < small_cut) out.push_back(i);
  }
  return out;
}

// Four DBSCAN clusterings over PCA(geom, 2), [l,w], [l,h], [w,h]; global
// outliers are the union of per-clustering outliers.
inline MineResult mine_outliers(const std::vector<Box3D>& vehicles,
                                std::size_t min_pts = 5) {
  const std::size_t n = vehicles.size();
  if (n < 10) throw InsufficientSamples("mine_outliers needs >= 10 vehicles");
  Eigen::MatrixXd geom(static_cast<Eigen::Index>(n), 9);
  for (std::size_t i = 0; i < n; ++i)
    geom.row(static_cast<Eigen::Index>(i)) = geom_features(vehicles[i]);

  // All vehicles identical: one cluster by definition, no outliers.
  bool all_same = true;
  for (Eigen::Index i = 1; i < geom.rows() && all_same; ++i)
    all_same = (geom.row(i) - geom.row(0)).cwiseAbs().maxCoeff() < 1e-12;
  MineResult result;
  if (all_same) return result;

  std::vector<std::pair<std::string, Eigen::MatrixXd>> feature_sets;
  feature_sets.emplace_back("pca9", pca_project(geom, 2));
  const std::array<std::pair<const char*, std::array<int, 2>>, 3> pairs = {
      {{"lw", {0, 1}}, {"lh", {0, 2}}, {"wh", {1, 2}}}};
  for (const auto& [name, cols] : pairs) {
    Eigen::MatrixXd m(geom.rows(), 2);
    m.col(0) = geom.col(cols[0]);
    m.col(1) = geom.col(cols[1]);
    feature_sets.emplace_back(name, standardize(m));
  }

  std::set<std::size_t> global;
  for (const auto& [name, pts] : feature_sets) {
    ClusteringDiagnostics diag;
    diag.feature_set = name;
    diag.min_pts = min_pts;
    diag.eps = choose_eps(pts, min_pts);
    diag.labels = dbscan(pts, diag.eps, min_pts);
    diag.outliers = clustering_outliers(diag.labels);
    global.insert(diag.outliers.begin(), diag.outliers.end());
    result.diagnostics.push_back(std::move(diag));
  }
  result.outliers.assign(global.begin(), global.end());
  return result;
}

}  // namespace ood::mine
