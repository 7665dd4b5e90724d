#include "morphflow/stage2.hpp"

#include <algorithm>
#include <cmath>

#include "morphflow/cloud.hpp"
#include "morphflow/error.hpp"

namespace morphflow::stage2 {

namespace {

using nn::Node;

Eigen::Index as_index(std::size_t v) { return static_cast<Index>(v); }

std::vector<Vec3> rows_to_points(const Matrix& m) {
  std::vector<Vec3> pts(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) pts[static_cast<std::size_t>(i)] = m.row(i).transpose();
  return pts;
}

IndexList repeat_rows(std::size_t n, std::size_t k) {
  IndexList out(n * k);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * k), k, i);
  return out;
}

}  // namespace

LiaConfig LiaConfig::desk() { return LiaConfig{}; }

LiaConfig LiaConfig::paper() {
  LiaConfig c;
  c.channels = 64;
  c.head_hidden = 64;
  return c;
}

void LiaConfig::validate() const {
  if (channels == 0) throw Error(ErrorCode::InvalidArgument, "LIA channels must be positive");
  if (k_local == 0 || k_far == 0 || covariance_k < 2) throw Error(ErrorCode::InvalidArgument, "LIA neighborhood sizes too small");
  if (!(theta_r > 1.0)) throw Error(ErrorCode::InvalidArgument, "theta_r must exceed 1");
}

std::vector<Index> farthest_table(const std::vector<Vec3>& points, std::size_t k_far) {
  const std::size_t n = points.size();
  if (k_far >= n) {
    throw Error(ErrorCode::KTooLarge, "k_far = " + std::to_string(k_far) + " needs more than " + std::to_string(n) + " points");
  }
  std::vector<Index> table(n * k_far);
  std::vector<double> xs(n), ys(n), zs(n), d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = points[i].x();
    ys[i] = points[i].y();
    zs[i] = points[i].z();
  }
#pragma omp parallel for schedule(static) firstprivate(d2)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = xs[j] - xs[i], dy = ys[j] - ys[i], dz = zs[j] - zs[i];
      d2[j] = dx * dx + dy * dy + dz * dz;
    }
    // Keep the k_far largest by (d2 desc, index asc); index i itself has d2 = 0.
    std::vector<std::pair<double, Index>> best;
    best.reserve(k_far + 1);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best.size() == k_far && d2[j] <= best.back().first) continue;
      auto pos = std::upper_bound(best.begin(), best.end(), std::make_pair(d2[j], j),
                                  [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      best.insert(pos, {d2[j], j});
      if (best.size() > k_far) best.pop_back();
    }
    for (std::size_t s = 0; s < k_far; ++s) table[i * k_far + s] = best[s].second;
  }
  return table;
}

FarRegion farthest_region(const std::vector<Vec3>& points, Index center, std::size_t k_far, double theta_r) {
  const std::size_t n = points.size();
  if (k_far == 0 || k_far >= n) {
    throw Error(ErrorCode::KTooLarge, "k_far must lie in [1, n)");
  }
  if (center >= n) throw Error(ErrorCode::InvalidArgument, "center index out of range");
  std::vector<std::pair<double, Index>> d;
  for (std::size_t j = 0; j < n; ++j) {
    if (j != center) d.emplace_back((points[j] - points[center]).norm(), j);
  }
  std::stable_sort(d.begin(), d.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  FarRegion region;
  region.center_index = center;
  region.r = theta_r * d.front().first;
  double total = 0.0;
  for (std::size_t s = 0; s < k_far; ++s) {
    region.far_indices.push_back(d[s].second);
    const double u = (region.r - d[s].first) * (region.r - d[s].first);
    region.weights.push_back(u);
    total += u;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::ZeroVector, "all far points coincide with the center");
  for (auto& w : region.weights) w /= total;
  return region;
}

Vec3 direction_coefficients(const Vec3& p, const Vec3& q) {
  const Vec3 d = q - p;
  const double n2 = d.squaredNorm();
  if (!(n2 > 0.0)) throw Error(ErrorCode::ZeroVector, "direction of a zero vector");
  return d.cwiseAbs2() / n2;
}

Value far_weights(const Value& positions, const std::vector<Index>& far_table, std::size_t k_far, double theta_r) {
  const Matrix& p = positions.data();
  const std::size_t n = static_cast<std::size_t>(p.rows());
  if (far_table.size() != n * k_far) throw Error(ErrorCode::GraphMismatch, "far table does not match the cloud");
  Matrix out(as_index(n * k_far), 3);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d(k_far), u(k_far);
    double dmax = 0.0;
    for (std::size_t s = 0; s < k_far; ++s) {
      d[s] = (p.row(as_index(far_table[i * k_far + s])) - p.row(as_index(i))).norm();
      if (!(d[s] > 0.0)) throw Error(ErrorCode::ZeroVector, "far point coincides with its center");
      dmax = std::max(dmax, d[s]);
    }
    const double r = theta_r * dmax;
    double total = 0.0;
    for (std::size_t s = 0; s < k_far; ++s) total += (u[s] = (r - d[s]) * (r - d[s]));
    for (std::size_t s = 0; s < k_far; ++s) {
      const Eigen::RowVector3d delta = p.row(as_index(far_table[i * k_far + s])) - p.row(as_index(i));
      out.row(as_index(i * k_far + s)) = (u[s] / total) * delta.cwiseAbs2() / (d[s] * d[s]);
    }
  }
  Node* pp = positions.node();
  return nn::make_op(std::move(out), {positions}, [pp, far_table, k_far, theta_r, n](Node& self) {
    const Matrix& p = pp->data;
    Matrix& gp = pp->grad_ref();
    std::vector<Eigen::RowVector3d> delta(k_far);
    std::vector<double> d(k_far), u(k_far), w(k_far), gw(k_far), gd(k_far, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      for (std::size_t s = 0; s < k_far; ++s) {
        delta[s] = p.row(as_index(far_table[i * k_far + s])) - p.row(as_index(i));
        d[s] = delta[s].norm();
        if (d[s] > d[arg]) arg = s;
      }
      const double r = theta_r * d[arg];
      double total = 0.0;
      for (std::size_t s = 0; s < k_far; ++s) total += (u[s] = (r - d[s]) * (r - d[s]));
      double gw_dot_w = 0.0;
      std::vector<Eigen::RowVector3d> gdelta(k_far);
      for (std::size_t s = 0; s < k_far; ++s) {
        w[s] = u[s] / total;
        const Eigen::RowVector3d g = self.grad.row(as_index(i * k_far + s));
        const double d2 = d[s] * d[s];
        const Eigen::RowVector3d c = delta[s].cwiseAbs2() / d2;
        gw[s] = g.dot(c);
        gw_dot_w += gw[s] * w[s];
        // c_A = delta_A^2 / d^2 with gc = g * w.
        const Eigen::RowVector3d gc = g * w[s];
        const double mix = gc.dot(delta[s].cwiseAbs2());
        gdelta[s] = 2.0 * gc.cwiseProduct(delta[s]) / d2 - 2.0 * mix * delta[s] / (d2 * d2);
      }
      double gr = 0.0;
      for (std::size_t s = 0; s < k_far; ++s) {
        const double gu = (gw[s] - gw_dot_w) / total;
        gr += gu * 2.0 * (r - d[s]);
        gd[s] = -gu * 2.0 * (r - d[s]);
      }
      gd[arg] += theta_r * gr;
      for (std::size_t s = 0; s < k_far; ++s) {
        const Eigen::RowVector3d g = gdelta[s] + gd[s] * delta[s] / d[s];
        gp.row(as_index(far_table[i * k_far + s])) += g;
        gp.row(as_index(i)) -= g;
      }
    }
  });
}

Value neighborhood_covariance(const Value& positions, const std::vector<Index>& members, std::size_t k) {
  const Matrix& p = positions.data();
  const std::size_t n = static_cast<std::size_t>(p.rows());
  if (k == 0 || members.size() != n * k) throw Error(ErrorCode::GraphMismatch, "covariance members do not match the cloud");
  Matrix out(as_index(n), 9);
  auto centroid = [&p, &members, k](std::size_t i) {
    Eigen::RowVector3d mu = Eigen::RowVector3d::Zero();
    for (std::size_t s = 0; s < k; ++s) mu += p.row(as_index(members[i * k + s]));
    return Eigen::RowVector3d(mu / static_cast<double>(k));
  };
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::RowVector3d mu = centroid(i);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t s = 0; s < k; ++s) {
      const Eigen::Vector3d d = (p.row(as_index(members[i * k + s])) - mu).transpose();
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(k);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) out(as_index(i), a * 3 + b) = cov(a, b);
  }
  Node* pp = positions.node();
  return nn::make_op(std::move(out), {positions}, [pp, members, k, n](Node& self) {
    Matrix& gp = pp->grad_ref();
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::RowVector3d mu = Eigen::RowVector3d::Zero();
      for (std::size_t s = 0; s < k; ++s) mu += pp->data.row(as_index(members[i * k + s]));
      mu /= static_cast<double>(k);
      Eigen::Matrix3d g;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) g(a, b) = self.grad(as_index(i), a * 3 + b);
      const Eigen::Matrix3d sym = (g + g.transpose()) / static_cast<double>(k);
      // The centroid term cancels because the centered offsets sum to zero.
      for (std::size_t s = 0; s < k; ++s) {
        const Eigen::Index m = as_index(members[i * k + s]);
        const Eigen::Vector3d d = (pp->data.row(m) - mu).transpose();
        gp.row(m) += (sym * d).transpose();
      }
    }
  });
}

Stage2Params Stage2Params::create(nn::ParamSet& params, const std::string& prefix, const LiaConfig& cfg,
                                  std::size_t global_channels) {
  cfg.validate();
  const Eigen::Index c = as_index(cfg.channels);
  Stage2Params p;
  p.embed = nn::Linear::create(params, prefix + ".embed", as_index(12 + cfg.noise_channels), c);
  p.edge.first = nn::Mlp::create(params, prefix + ".edge1", c, {c, c});
  p.edge.second = nn::Mlp::create(params, prefix + ".edge2", c, {c, c});
  for (std::size_t b = 0; b < 2; ++b) {
    const std::string name = prefix + ".rel" + std::to_string(b);
    auto& r = p.relative[b];
    const char* axes[3] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
      r.axis[a] = nn::Linear::create(params, name + ".w_" + axes[a], c, c, nn::Init::xavier_uniform, false);
    }
    r.edge_mlp = nn::Mlp::create(params, name + ".edge_mlp", c, {c, c});
    r.self_mlp = nn::Mlp::create(params, name + ".self_mlp", c, {c, c});
  }
  p.fuse = nn::Mlp::create(params, prefix + ".fuse", 3 * c, {c, c});
  p.hidden = nn::Linear::create(params, prefix + ".hidden", as_index(global_channels), c);
  p.gru = nn::GruCell::create(params, prefix + ".gru", c);
  p.head = nn::Mlp::create(params, prefix + ".head", c + as_index(cfg.noise_channels), {as_index(cfg.head_hidden), 3},
                           true);
  return p;
}

Value edge_conv_layer(const Value& features, const std::vector<Index>& graph, std::size_t k, const nn::Mlp& mlp) {
  const std::size_t n = static_cast<std::size_t>(features.rows());
  if (k == 0 || graph.size() != n * k) throw Error(ErrorCode::GraphMismatch, "edge graph does not match the features");
  const Value edges = nn::gather_rows(features, graph) - nn::gather_rows(features, repeat_rows(n, k));
  return nn::segment_max(mlp(edges), k);
}

Value static_edge_conv(const Value& features, const std::vector<Index>& graph, std::size_t k,
                       const EdgeConvParams& params) {
  return edge_conv_layer(edge_conv_layer(features, graph, k, params.first), graph, k, params.second);
}

Value relative_position_block(const Value& features, const std::vector<Index>& far_table, std::size_t k_far,
                              const Value& weights, const RelativePositionParams& params) {
  const std::size_t n = static_cast<std::size_t>(features.rows());
  if (far_table.size() != n * k_far || weights.rows() != as_index(n * k_far) || weights.cols() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "far table and weights must have n * k_far rows");
  }
  const Value edges = nn::gather_rows(features, far_table) - nn::gather_rows(features, repeat_rows(n, k_far));
  Value sum;
  for (int a = 0; a < 3; ++a) {
    const Value term = params.axis[a](nn::segment_sum(nn::mul_col(edges, nn::slice_cols(weights, a, 1)), k_far));
    sum = sum.defined() ? sum + term : term;
  }
  return params.edge_mlp(sum) + params.self_mlp(features);
}

FineOutput aggregate_and_fuse(const Value& coarse, const Value& f1, const Value& f2, const Value& f3,
                              const Value& f_global, const Stage2Params& params, const Matrix& noise) {
  if (f1.rows() != coarse.rows() || f2.rows() != coarse.rows() || f3.rows() != coarse.rows() ||
      f_global.rows() != coarse.rows() || noise.rows() != coarse.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "aggregate_and_fuse: row counts differ");
  }
  const Value local = params.fuse(nn::concat_cols({f1, f2, f3}));
  const Value fused = nn::gru_cell(local, params.hidden(f_global), params.gru);
  FineOutput out;
  out.displacement = params.head(noise.cols() > 0 ? nn::concat_cols({fused, Value::constant(noise)}) : fused);
  out.warped = coarse + out.displacement;
  return out;
}

FineOutput fine_forward(const Value& coarse, const Value& f_global, const Stage2Params& params, const LiaConfig& cfg,
                        const Matrix& noise) {
  const std::size_t n = static_cast<std::size_t>(coarse.rows());
  if (coarse.cols() != 3) throw Error(ErrorCode::ShapeMismatch, "coarse cloud must be n x 3");
  if (noise.rows() != coarse.rows() || noise.cols() != as_index(cfg.noise_channels)) {
    throw Error(ErrorCode::ShapeMismatch, "noise must be n x noise_channels");
  }
  if (n <= std::max({cfg.k_local, cfg.k_far, cfg.covariance_k})) {
    throw Error(ErrorCode::KTooLarge, "cloud too small for the LIA neighborhoods");
  }
  const auto pts = rows_to_points(coarse.data());
  const std::size_t kg = std::max(cfg.k_local, cfg.covariance_k - 1);
  const auto graph_full = cloud::knn_graph(pts, kg);

  std::vector<Index> graph(n * cfg.k_local);
  std::vector<Index> members(n * cfg.covariance_k);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(graph_full.begin() + static_cast<std::ptrdiff_t>(i * kg), cfg.k_local,
                graph.begin() + static_cast<std::ptrdiff_t>(i * cfg.k_local));
    members[i * cfg.covariance_k] = i;
    std::copy_n(graph_full.begin() + static_cast<std::ptrdiff_t>(i * kg), cfg.covariance_k - 1,
                members.begin() + static_cast<std::ptrdiff_t>(i * cfg.covariance_k + 1));
  }
  const auto far = farthest_table(pts, cfg.k_far);

  const Value cov = nn::standardize_cols(neighborhood_covariance(coarse, members, cfg.covariance_k), 1e-12);
  std::vector<Value> parts{coarse, cov};
  if (cfg.noise_channels > 0) parts.push_back(Value::constant(noise));
  const Value f = params.embed(nn::concat_cols(parts));

  const Value f1 = static_edge_conv(f, graph, cfg.k_local, params.edge);
  const Value w = far_weights(coarse, far, cfg.k_far, cfg.theta_r);
  const Value f2 = relative_position_block(f, far, cfg.k_far, w, params.relative[0]);
  const Value f3 = relative_position_block(f2, far, cfg.k_far, w, params.relative[1]);
  return aggregate_and_fuse(coarse, f1, f2, f3, f_global, params, noise);
}

}  // namespace morphflow::stage2
