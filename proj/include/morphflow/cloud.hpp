#pragma once

#include <optional>
#include <string>
#include <vector>

#include "morphflow/types.hpp"

namespace morphflow::cloud {

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<FeatureMatrix> attrs;
  std::string id;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts, std::string label = {})
      : points(std::move(pts)), id(std::move(label)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Vec3& operator[](std::size_t i) const { return points[i]; }

  /// Throws NonFinite / ShapeMismatch when an invariant is broken.
  void validate() const;

  /// Points as an n x 3 matrix.
  FeatureMatrix matrix() const;
  static PointCloud from_matrix(const FeatureMatrix& m, std::string label = {});

  /// Rows selected by index, attrs included.
  PointCloud subset(const IndexList& indices) const;
};

/// Neighbors of one query, nearest first.
struct NeighborSet {
  Index center_index = 0;
  IndexList indices;
  std::vector<double> distances;
};

enum class CloudSide { face, bone };

struct RoiLabel {
  std::string name;
  Vec3 box_min = Vec3::Zero();
  Vec3 box_max = Vec3::Zero();
  CloudSide side = CloudSide::face;

  /// box_min <= box_max componentwise.
  bool valid() const { return (box_min.array() <= box_max.array()).all(); }
};

struct Normalized {
  PointCloud cloud;
  Vec3 center;
  double scale;
};

/// Centers on the centroid and scales so the farthest point has norm 1.
Normalized normalize(const PointCloud& cloud);

/// Inverse of normalize.
PointCloud denormalize(const PointCloud& cloud, const Vec3& center, double scale);

/// k nearest points of `cloud` to `query`, ascending by distance, ties by lower index.
/// With exclude_self, the lowest-index point coinciding with the query is skipped.
NeighborSet knn(const PointCloud& cloud, const Vec3& query, std::size_t k, bool exclude_self);

/// k nearest neighbors of point `center` within its own cloud (center excluded).
NeighborSet knn_of_point(const PointCloud& cloud, Index center, std::size_t k);

/// Row-major n x k neighbor table for every point of `cloud` (self excluded).
/// Uses a uniform grid above `kGridThreshold` points; both paths return
/// identical results.
std::vector<Index> knn_graph(const std::vector<Vec3>& points, std::size_t k);

/// k nearest points of `reference` for each query point (no exclusion); n_query x k.
std::vector<Index> knn_table(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries, std::size_t k);

inline constexpr std::size_t kGridThreshold = 4096;

/// Same as knn_graph/knn_table but forced down one path (for testing agreement).
std::vector<Index> knn_table_bruteforce(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries,
                                        std::size_t k, bool exclude_same_index);
std::vector<Index> knn_table_grid(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries,
                                  std::size_t k, bool exclude_same_index);

/// Greedy max-min subset of size m starting at `start`.
IndexList farthest_point_sample(const PointCloud& cloud, std::size_t m, Index start = 0);

/// Per-point covariance of the k-neighborhood (the point plus its k-1 nearest),
/// biased 1/k normalizer, flattened row-major into 9 columns.
FeatureMatrix local_covariance(const PointCloud& cloud, std::size_t k = 8);

/// Drops points whose mean distance to their k nearest neighbors exceeds
/// mean + std_ratio * std over the cloud. Survivors keep their order.
PointCloud remove_statistical_outliers(const PointCloud& cloud, std::size_t k = 16, double std_ratio = 2.0);

/// DBSCAN labels: -1 for noise, clusters numbered in discovery order.
std::vector<int> dbscan_labels(const PointCloud& cloud, double eps, std::size_t min_pts);

/// Keeps only the largest DBSCAN cluster (ties: earliest discovered). Order preserved.
PointCloud dbscan_filter(const PointCloud& cloud, double eps, std::size_t min_pts);

/// Indices of points inside the closed box.
IndexList extract_roi(const PointCloud& cloud, const RoiLabel& roi);

/// Axis-aligned bounds of the cloud.
std::pair<Vec3, Vec3> bounds(const std::vector<Vec3>& points);

}  // namespace morphflow::cloud
