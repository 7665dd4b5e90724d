#include "morphflow/cloud.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "morphflow/error.hpp"

namespace morphflow::cloud {

namespace {

inline double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

// Fixed-capacity best-k list ordered by (squared distance, index).
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { items_.reserve(k + 1); }

  bool full() const { return items_.size() == k_; }
  double worst() const { return items_.back().first; }

  void offer(double d2, Index idx) {
    if (full() && !less(d2, idx, items_.back().first, items_.back().second)) return;
    auto pos = std::upper_bound(items_.begin(), items_.end(), std::make_pair(d2, idx),
                                [](const auto& a, const auto& b) { return less(a.first, a.second, b.first, b.second); });
    items_.insert(pos, {d2, idx});
    if (items_.size() > k_) items_.pop_back();
  }

  const std::vector<std::pair<double, Index>>& items() const { return items_; }

 private:
  static bool less(double d2a, Index ia, double d2b, Index ib) { return d2a < d2b || (d2a == d2b && ia < ib); }
  std::size_t k_;
  std::vector<std::pair<double, Index>> items_;
};

// Uniform grid over a reference set with points bucketed by cell (index order kept within a cell).
class Grid {
 public:
  Grid(const std::vector<Vec3>& points, double cell) : cell_(cell) {
    auto [lo, hi] = bounds(points);
    origin_ = lo;
    for (int a = 0; a < 3; ++a) {
      dims_[a] = static_cast<long>(std::floor((hi[a] - lo[a]) / cell_)) + 1;
    }
    const std::size_t ncells = static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
    start_.assign(ncells + 1, 0);
    std::vector<std::size_t> cell_of(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      cell_of[i] = linear(cell_coords(points[i]));
      ++start_[cell_of[i] + 1];
    }
    std::partial_sum(start_.begin(), start_.end(), start_.begin());
    order_.resize(points.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < points.size(); ++i) order_[fill[cell_of[i]]++] = i;
  }

  std::array<long, 3> cell_coords(const Vec3& p) const {
    std::array<long, 3> c{};
    for (int a = 0; a < 3; ++a) {
      long v = static_cast<long>(std::floor((p[a] - origin_[a]) / cell_));
      c[a] = std::clamp<long>(v, 0, dims_[a] - 1);
    }
    return c;
  }

  long max_dim() const { return std::max({dims_[0], dims_[1], dims_[2]}); }
  double cell() const { return cell_; }

  // Visits every point in cells at Chebyshev ring `r` around `c`.
  template <typename Fn>
  void visit_ring(const std::array<long, 3>& c, long r, Fn&& fn) const {
    for (long x = c[0] - r; x <= c[0] + r; ++x) {
      if (x < 0 || x >= dims_[0]) continue;
      for (long y = c[1] - r; y <= c[1] + r; ++y) {
        if (y < 0 || y >= dims_[1]) continue;
        const bool edge_xy = std::labs(x - c[0]) == r || std::labs(y - c[1]) == r;
        for (long z = c[2] - r; z <= c[2] + r; ++z) {
          if (z < 0 || z >= dims_[2]) continue;
          if (!edge_xy && std::labs(z - c[2]) != r) continue;
          const std::size_t cell = linear({x, y, z});
          for (std::size_t s = start_[cell]; s < start_[cell + 1]; ++s) fn(order_[s]);
        }
      }
    }
  }

 private:
  std::size_t linear(const std::array<long, 3>& c) const {
    return static_cast<std::size_t>((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
  }

  double cell_;
  Vec3 origin_;
  std::array<long, 3> dims_{};
  std::vector<std::size_t> start_;
  std::vector<std::size_t> order_;
};

void check_k(std::size_t k, std::size_t usable) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  if (k > usable) {
    throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " exceeds usable points " + std::to_string(usable));
  }
}

}  // namespace

void PointCloud::validate() const {
  for (const auto& p : points) {
    if (!p.allFinite()) throw Error(ErrorCode::NonFinite, "non-finite coordinate in cloud '" + id + "'");
  }
  if (attrs && static_cast<std::size_t>(attrs->rows()) != points.size()) {
    throw Error(ErrorCode::ShapeMismatch, "attrs rows do not match point count");
  }
}

FeatureMatrix PointCloud::matrix() const {
  FeatureMatrix m(points.size(), 3);
  for (std::size_t i = 0; i < points.size(); ++i) m.row(i) = points[i].transpose();
  return m;
}

PointCloud PointCloud::from_matrix(const FeatureMatrix& m, std::string label) {
  if (m.cols() != 3) throw Error(ErrorCode::ShapeMismatch, "point matrix must have 3 columns");
  PointCloud c;
  c.id = std::move(label);
  c.points.resize(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) c.points[i] = m.row(i).transpose();
  return c;
}

PointCloud PointCloud::subset(const IndexList& indices) const {
  PointCloud out;
  out.id = id;
  out.points.reserve(indices.size());
  for (Index i : indices) out.points.push_back(points.at(i));
  if (attrs) {
    FeatureMatrix a(indices.size(), attrs->cols());
    for (std::size_t r = 0; r < indices.size(); ++r) a.row(r) = attrs->row(indices[r]);
    out.attrs = std::move(a);
  }
  return out;
}

std::pair<Vec3, Vec3> bounds(const std::vector<Vec3>& points) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

Normalized normalize(const PointCloud& cloud) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "cannot normalize an empty cloud");
  Vec3 center = Vec3::Zero();
  for (const auto& p : cloud.points) center += p;
  center /= static_cast<double>(cloud.size());

  double scale = 0.0;
  for (const auto& p : cloud.points) scale = std::max(scale, (p - center).norm());
  if (!(scale > 0.0)) throw Error(ErrorCode::DegenerateCloud, "all points identical");

  Normalized out{cloud, center, scale};
  for (auto& p : out.cloud.points) p = (p - center) / scale;
  return out;
}

PointCloud denormalize(const PointCloud& cloud, const Vec3& center, double scale) {
  PointCloud out = cloud;
  for (auto& p : out.points) p = p * scale + center;
  return out;
}

NeighborSet knn(const PointCloud& cloud, const Vec3& query, std::size_t k, bool exclude_self) {
  std::optional<Index> self;
  if (exclude_self) {
    for (Index i = 0; i < cloud.size(); ++i) {
      if (cloud.points[i] == query) {
        self = i;
        break;
      }
    }
  }
  check_k(k, cloud.size() - (self ? 1 : 0));
  TopK best(k);
  for (Index i = 0; i < cloud.size(); ++i) {
    if (self && *self == i) continue;
    best.offer(dist2(cloud.points[i], query), i);
  }
  NeighborSet out;
  out.center_index = self.value_or(0);
  for (const auto& [d2, idx] : best.items()) {
    out.indices.push_back(idx);
    out.distances.push_back(std::sqrt(d2));
  }
  return out;
}

NeighborSet knn_of_point(const PointCloud& cloud, Index center, std::size_t k) {
  if (center >= cloud.size()) throw Error(ErrorCode::InvalidArgument, "center index out of range");
  check_k(k, cloud.size() - 1);
  TopK best(k);
  for (Index i = 0; i < cloud.size(); ++i) {
    if (i != center) best.offer(dist2(cloud.points[i], cloud.points[center]), i);
  }
  NeighborSet out;
  out.center_index = center;
  for (const auto& [d2, idx] : best.items()) {
    out.indices.push_back(idx);
    out.distances.push_back(std::sqrt(d2));
  }
  return out;
}

std::vector<Index> knn_table_bruteforce(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries,
                                        std::size_t k, bool exclude_same_index) {
  check_k(k, reference.size() - (exclude_same_index ? 1 : 0));
  std::vector<Index> table(queries.size() * k);
#pragma omp parallel for schedule(static)
  for (long qi = 0; qi < static_cast<long>(queries.size()); ++qi) {
    TopK best(k);
    const Vec3& q = queries[qi];
    for (Index i = 0; i < reference.size(); ++i) {
      if (exclude_same_index && i == static_cast<Index>(qi)) continue;
      const double d2 = dist2(reference[i], q);
      if (best.full() && d2 > best.worst()) continue;
      best.offer(d2, i);
    }
    for (std::size_t j = 0; j < k; ++j) table[qi * k + j] = best.items()[j].second;
  }
  return table;
}

std::vector<Index> knn_table_grid(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries, std::size_t k,
                                  bool exclude_same_index) {
  check_k(k, reference.size() - (exclude_same_index ? 1 : 0));
  auto [lo, hi] = bounds(reference);
  const double extent = std::max((hi - lo).maxCoeff(), 1e-12);
  // Roughly k points per occupied cell for surface-like data.
  const double per_axis = std::max(1.0, std::sqrt(static_cast<double>(reference.size()) / std::max<std::size_t>(k, 2)));
  const Grid grid(reference, extent / per_axis);

  std::vector<Index> table(queries.size() * k);
#pragma omp parallel for schedule(static)
  for (long qi = 0; qi < static_cast<long>(queries.size()); ++qi) {
    TopK best(k);
    const Vec3& q = queries[qi];
    const auto c = grid.cell_coords(q);
    for (long r = 0; r <= grid.max_dim(); ++r) {
      // Unvisited points lie at least (r-1)*cell away once ring r-1 is done.
      if (best.full() && r >= 1) {
        const double bound = static_cast<double>(r - 1) * grid.cell();
        if (best.worst() < bound * bound) break;
      }
      grid.visit_ring(c, r, [&](std::size_t i) {
        if (exclude_same_index && i == static_cast<std::size_t>(qi)) return;
        best.offer(dist2(reference[i], q), i);
      });
    }
    for (std::size_t j = 0; j < k; ++j) table[qi * k + j] = best.items()[j].second;
  }
  return table;
}

std::vector<Index> knn_graph(const std::vector<Vec3>& points, std::size_t k) {
  if (points.size() > kGridThreshold) return knn_table_grid(points, points, k, true);
  return knn_table_bruteforce(points, points, k, true);
}

std::vector<Index> knn_table(const std::vector<Vec3>& reference, const std::vector<Vec3>& queries, std::size_t k) {
  if (reference.size() > kGridThreshold) return knn_table_grid(reference, queries, k, false);
  return knn_table_bruteforce(reference, queries, k, false);
}

IndexList farthest_point_sample(const PointCloud& cloud, std::size_t m, Index start) {
  const std::size_t n = cloud.size();
  if (m == 0) throw Error(ErrorCode::InvalidArgument, "m must be positive");
  if (m > n) throw Error(ErrorCode::MTooLarge, "m=" + std::to_string(m) + " exceeds n=" + std::to_string(n));
  if (start >= n) throw Error(ErrorCode::InvalidArgument, "start index out of range");

  IndexList selected{start};
  selected.reserve(m);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  Index last = start;
  while (selected.size() < m) {
    Index best = 0;
    double best_d2 = -1.0;
    for (Index i = 0; i < n; ++i) {
      min_d2[i] = std::min(min_d2[i], dist2(cloud.points[i], cloud.points[last]));
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    // Once only duplicates remain, fall back to the lowest unselected index.
    if (best_d2 <= 0.0) {
      std::vector<bool> taken(n, false);
      for (Index s : selected) taken[s] = true;
      best = static_cast<Index>(std::find(taken.begin(), taken.end(), false) - taken.begin());
    }
    selected.push_back(best);
    min_d2[best] = -1.0;
    last = best;
  }
  return selected;
}

FeatureMatrix local_covariance(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  if (n <= k) throw Error(ErrorCode::KTooLarge, "local covariance needs more than k points");
  FeatureMatrix out(n, 9);
  const auto graph = k > 1 ? knn_graph(cloud.points, k - 1) : std::vector<Index>{};
  for (Index i = 0; i < n; ++i) {
    Vec3 mean = cloud.points[i];
    for (std::size_t j = 0; j + 1 < k; ++j) mean += cloud.points[graph[i * (k - 1) + j]];
    mean /= static_cast<double>(k);
    Eigen::Matrix3d cov = (cloud.points[i] - mean) * (cloud.points[i] - mean).transpose();
    for (std::size_t j = 0; j + 1 < k; ++j) {
      const Vec3 d = cloud.points[graph[i * (k - 1) + j]] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(k);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out(i, r * 3 + c) = cov(r, c);
  }
  return out;
}

PointCloud remove_statistical_outliers(const PointCloud& cloud, std::size_t k, double std_ratio) {
  const std::size_t n = cloud.size();
  if (n <= k) throw Error(ErrorCode::KTooLarge, "outlier removal needs more than k points");
  const auto graph = knn_graph(cloud.points, k);
  std::vector<double> mean_d(n, 0.0);
  for (Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::sqrt(dist2(cloud.points[i], cloud.points[graph[i * k + j]]));
    mean_d[i] = s / static_cast<double>(k);
  }
  const double mu = std::accumulate(mean_d.begin(), mean_d.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double d : mean_d) var += (d - mu) * (d - mu);
  const double sigma = std::sqrt(var / static_cast<double>(n));
  const double threshold = mu + std_ratio * sigma;

  IndexList keep;
  for (Index i = 0; i < n; ++i) {
    if (mean_d[i] <= threshold) keep.push_back(i);
  }
  return cloud.subset(keep);
}

std::vector<int> dbscan_labels(const PointCloud& cloud, double eps, std::size_t min_pts) {
  if (!(eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "eps must be positive");
  if (min_pts < 1) throw Error(ErrorCode::InvalidArgument, "min_pts must be >= 1");
  const std::size_t n = cloud.size();
  std::vector<int> labels(n, -2);  // -2 unvisited, -1 noise
  if (n == 0) return labels;

  // Cells no smaller than eps so the 27-cell block covers every eps-ball.
  auto [lo, hi] = bounds(cloud.points);
  const Grid grid(cloud.points, std::max(eps, (hi - lo).maxCoeff() / 256.0));
  const double eps2 = eps * eps;
  auto region = [&](Index i) {
    IndexList out;
    grid.visit_ring(grid.cell_coords(cloud.points[i]), 0, [&](std::size_t j) {
      if (dist2(cloud.points[i], cloud.points[j]) <= eps2) out.push_back(j);
    });
    grid.visit_ring(grid.cell_coords(cloud.points[i]), 1, [&](std::size_t j) {
      if (dist2(cloud.points[i], cloud.points[j]) <= eps2) out.push_back(j);
    });
    std::sort(out.begin(), out.end());
    return out;
  };

  int cluster = 0;
  for (Index i = 0; i < n; ++i) {
    if (labels[i] != -2) continue;
    auto seeds = region(i);
    if (seeds.size() < min_pts) {
      labels[i] = -1;
      continue;
    }
    labels[i] = cluster;
    std::deque<Index> queue(seeds.begin(), seeds.end());
    while (!queue.empty()) {
      const Index j = queue.front();
      queue.pop_front();
      if (labels[j] == -1) labels[j] = cluster;  // border point
      if (labels[j] != -2) continue;
      labels[j] = cluster;
      auto nb = region(j);
      if (nb.size() >= min_pts) queue.insert(queue.end(), nb.begin(), nb.end());
    }
    ++cluster;
  }
  return labels;
}

PointCloud dbscan_filter(const PointCloud& cloud, double eps, std::size_t min_pts) {
  const auto labels = dbscan_labels(cloud, eps, min_pts);
  const int clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  if (clusters <= 0) return cloud.subset({});
  std::vector<std::size_t> sizes(clusters, 0);
  for (int l : labels) {
    if (l >= 0) ++sizes[l];
  }
  const int largest = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  IndexList keep;
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] == largest) keep.push_back(i);
  }
  return cloud.subset(keep);
}

IndexList extract_roi(const PointCloud& cloud, const RoiLabel& roi) {
  if (!roi.valid()) throw Error(ErrorCode::InvalidArgument, "ROI box_min exceeds box_max");
  IndexList out;
  for (Index i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    if ((p.array() >= roi.box_min.array()).all() && (p.array() <= roi.box_max.array()).all()) out.push_back(i);
  }
  return out;
}

}  // namespace morphflow::cloud
