#include "morphflow/distort.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "morphflow/error.hpp"

namespace morphflow::distort {

namespace {

using nn::Node;
using EIdx = Eigen::Index;

EIdx as_index(std::size_t v) { return static_cast<EIdx>(v); }

void require_nonempty(std::size_t a, std::size_t b, const char* what) {
  if (a == 0 || b == 0) throw Error(ErrorCode::EmptyCloud, std::string(what) + " of an empty cloud");
}

Matrix pairwise_distances(const Matrix& x, const Matrix& y) {
  Matrix d(x.rows(), y.rows());
#pragma omp parallel for schedule(static)
  for (EIdx i = 0; i < x.rows(); ++i) {
    for (EIdx j = 0; j < y.rows(); ++j) d(i, j) = (x.row(i) - y.row(j)).norm();
  }
  return d;
}

/// Directed chamfer term with its gradient contributions.
void directed_term(const Matrix& from, const Matrix& to, double weight, Matrix* g_from, Matrix* g_to, double* value) {
  const Nearest nn = nearest(from, to);
  double sum = 0.0;
  for (std::size_t i = 0; i < nn.distance.size(); ++i) sum += nn.distance[i];
  if (value) *value = sum / static_cast<double>(from.rows());
  if (!g_from && !g_to) return;
  const double s = weight / static_cast<double>(from.rows());
  for (std::size_t i = 0; i < nn.index.size(); ++i) {
    const double d = nn.distance[i];
    if (!(d > 0.0)) continue;
    const Eigen::RowVector3d dir = (from.row(as_index(i)) - to.row(as_index(nn.index[i]))) * (s / d);
    if (g_from) g_from->row(as_index(i)) += dir;
    if (g_to) g_to->row(as_index(nn.index[i])) -= dir;
  }
}

double normal_sf_two_sided(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

}  // namespace

Matrix to_matrix(const Points& pts) {
  Matrix m(as_index(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(as_index(i)) = pts[i].transpose();
  return m;
}

Points to_points(const Matrix& m) {
  Points pts(static_cast<std::size_t>(m.rows()));
  for (EIdx i = 0; i < m.rows(); ++i) pts[static_cast<std::size_t>(i)] = m.row(i).transpose();
  return pts;
}

Nearest nearest(const Matrix& queries, const Matrix& reference) {
  const std::size_t n = static_cast<std::size_t>(queries.rows());
  const std::size_t m = static_cast<std::size_t>(reference.rows());
  require_nonempty(n, m, "nearest neighbor search");
  std::vector<double> xs(m), ys(m), zs(m);
  for (std::size_t j = 0; j < m; ++j) {
    xs[j] = reference(as_index(j), 0);
    ys[j] = reference(as_index(j), 1);
    zs[j] = reference(as_index(j), 2);
  }
  Nearest out;
  out.index.resize(n);
  out.distance.resize(n);
#pragma omp parallel
  {
    std::vector<double> d2(m);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
      const EIdx i = ii;
      const double qx = queries(i, 0), qy = queries(i, 1), qz = queries(i, 2);
      for (std::size_t j = 0; j < m; ++j) {
        const double dx = xs[j] - qx, dy = ys[j] - qy, dz = zs[j] - qz;
        d2[j] = dx * dx + dy * dy + dz * dz;
      }
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j) {
        if (d2[j] < d2[best]) best = j;
      }
      out.index[static_cast<std::size_t>(i)] = best;
      out.distance[static_cast<std::size_t>(i)] = std::sqrt(d2[best]);
    }
  }
  return out;
}

double chamfer(const Points& x, const Points& y) {
  require_nonempty(x.size(), y.size(), "chamfer");
  const Matrix mx = to_matrix(x), my = to_matrix(y);
  double a = 0.0, b = 0.0;
  directed_term(mx, my, 1.0, nullptr, nullptr, &a);
  directed_term(my, mx, 1.0, nullptr, nullptr, &b);
  return a + b;
}

Value chamfer_loss(const Value& x, const Value& y) {
  require_nonempty(static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(y.rows()), "chamfer");
  if (x.cols() != 3 || y.cols() != 3) throw Error(ErrorCode::ShapeMismatch, "chamfer expects n x 3 clouds");
  double a = 0.0, b = 0.0;
  Matrix gx = Matrix::Zero(x.rows(), 3), gy = Matrix::Zero(y.rows(), 3);
  const bool need = x.requires_grad() || y.requires_grad();
  directed_term(x.data(), y.data(), 1.0, need ? &gx : nullptr, need ? &gy : nullptr, &a);
  directed_term(y.data(), x.data(), 1.0, need ? &gy : nullptr, need ? &gx : nullptr, &b);
  Matrix out(1, 1);
  out(0, 0) = a + b;
  Node* px = x.node();
  Node* py = y.node();
  return nn::make_op(std::move(out), {x, y}, [px, py, gx = std::move(gx), gy = std::move(gy)](Node& self) {
    const double g = self.grad(0, 0);
    if (px->requires_grad) px->grad_ref() += g * gx;
    if (py->requires_grad) py->grad_ref() += g * gy;
  });
}

std::vector<Index> assignment_exact(const Matrix& cost) {
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw Error(ErrorCode::SizeMismatch, "assignment needs a square cost matrix");
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(as_index(i0 - 1), as_index(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

AuctionResult assignment_auction(const Matrix& cost, double rel_gap) {
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw Error(ErrorCode::SizeMismatch, "assignment needs a square cost matrix");
  AuctionResult res;
  if (n == 0) return res;
  if (n == 1) {
    res.assignment = {0};
    res.primal = res.lower_bound = cost(0, 0);
    return res;
  }
  const double cmax = cost.maxCoeff();
  const double abs_tol = 1e-12 * std::max(cmax, 1e-300) * static_cast<double>(n);
  std::vector<double> price(n, 0.0);
  std::vector<std::ptrdiff_t> owner(n), assigned(n);
  double eps = std::max(cmax, 1e-300) / 4.0;
  while (true) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    std::vector<std::size_t> queue(n);
    std::iota(queue.begin(), queue.end(), 0);
    std::size_t head = 0;
    while (head < queue.size()) {
      const std::size_t i = queue[head++];
      double best = std::numeric_limits<double>::infinity(), second = best;
      std::size_t bj = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double val = cost(as_index(i), as_index(j)) + price[j];
        if (val < best) {
          second = best;
          best = val;
          bj = j;
        } else if (val < second) {
          second = val;
        }
      }
      price[bj] += (second - best) + eps;
      if (owner[bj] >= 0) {
        assigned[static_cast<std::size_t>(owner[bj])] = -1;
        queue.push_back(static_cast<std::size_t>(owner[bj]));
      }
      owner[bj] = static_cast<std::ptrdiff_t>(i);
      assigned[i] = static_cast<std::ptrdiff_t>(bj);
      if (head > 4096 && head * 2 > queue.size()) {
        queue.erase(queue.begin(), queue.begin() + static_cast<std::ptrdiff_t>(head));
        head = 0;
      }
    }
    double primal = 0.0, lower = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      primal += cost(as_index(i), as_index(static_cast<std::size_t>(assigned[i])));
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) m = std::min(m, cost(as_index(i), as_index(j)) + price[j]);
      lower += m;
    }
    for (std::size_t j = 0; j < n; ++j) lower -= price[j];
    lower = std::max(lower, 0.0);
    if (primal - lower <= std::max(rel_gap * lower, abs_tol) || eps < abs_tol / static_cast<double>(n)) {
      res.assignment.resize(n);
      for (std::size_t i = 0; i < n; ++i) res.assignment[i] = static_cast<Index>(assigned[i]);
      res.primal = primal;
      res.lower_bound = lower;
      return res;
    }
    eps /= 5.0;
  }
}

double emd(const Points& x, const Points& y, EmdMode mode) {
  if (x.size() != y.size()) {
    throw Error(ErrorCode::SizeMismatch, "EMD needs equal sizes, got " + std::to_string(x.size()) + " and " +
                                             std::to_string(y.size()));
  }
  require_nonempty(x.size(), y.size(), "EMD");
  const Matrix cost = pairwise_distances(to_matrix(x), to_matrix(y));
  const double n = static_cast<double>(x.size());
  if (mode == EmdMode::approx && x.size() > kAuctionThreshold) return assignment_auction(cost).primal / n;
  const auto a = assignment_exact(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += cost(as_index(i), as_index(a[i]));
  return total / n;
}

Value emd_loss(const Value& x, const Value& y) {
  if (x.rows() != y.rows()) throw Error(ErrorCode::SizeMismatch, "EMD needs equal sizes");
  require_nonempty(static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(y.rows()), "EMD");
  const Matrix cost = pairwise_distances(x.data(), y.data());
  const auto a = assignment_exact(cost);
  const double n = static_cast<double>(x.rows());
  Matrix out(1, 1);
  out(0, 0) = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) out(0, 0) += cost(as_index(i), as_index(a[i]));
  out(0, 0) /= n;
  Node* px = x.node();
  Node* py = y.node();
  return nn::make_op(std::move(out), {x, y}, [px, py, a, n](Node& self) {
    const double g = self.grad(0, 0) / n;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Eigen::RowVector3d diff = px->data.row(as_index(i)) - py->data.row(as_index(a[i]));
      const double d = diff.norm();
      if (!(d > 0.0)) continue;
      if (px->requires_grad) px->grad_ref().row(as_index(i)) += g * diff / d;
      if (py->requires_grad) py->grad_ref().row(as_index(a[i])) -= g * diff / d;
    }
  });
}

StagePair similarity_losses(const Value& coarse_face, const Value& coarse_bone, const Value& fine_face,
                            const Value& fine_bone, const Value& face, const Value& bone) {
  return {chamfer_loss(coarse_face, face) + chamfer_loss(coarse_bone, bone),
          chamfer_loss(fine_face, face) + chamfer_loss(fine_bone, bone)};
}

Value cross_reg(const Value& face, const Value& bone, const Value& coarse_face, const Value& coarse_bone,
                const Value& fine_face, const Value& fine_bone) {
  return chamfer_loss(nn::concat_rows({face, coarse_bone}), nn::concat_rows({bone, coarse_face})) +
         chamfer_loss(nn::concat_rows({face, fine_bone}), nn::concat_rows({bone, fine_face}));
}

Value local_density_loss(const Points& p, const Value& h, std::size_t k, double beta, const std::vector<Index>* p_table,
                         const Points* queries) {
  const std::size_t n = p.size();
  if (static_cast<std::size_t>(h.rows()) != n) throw Error(ErrorCode::SizeMismatch, "local loss needs |P| = |H|");
  if (k == 0 || k >= n) throw Error(ErrorCode::KTooLarge, "local loss K must lie in [1, n)");
  if (queries && queries->size() != n) throw Error(ErrorCode::SizeMismatch, "one query per point of P");
  if (beta < 0.0) throw Error(ErrorCode::InvalidArgument, "beta must be nonnegative");
  const Points& q = queries ? *queries : p;
  const Points hp = to_points(h.data());
  std::vector<Index> own_storage;
  if (!p_table) {
    own_storage = cloud::knn_table(p, p, k);
    p_table = &own_storage;
  }
  if (p_table->size() != n * k) throw Error(ErrorCode::GraphMismatch, "cached neighbor table has the wrong size");
  const auto h_table = cloud::knn_table(hp, q, k);

  // Per point: rank-pair sign weights and the neighborhood matching.
  auto signs = std::make_shared<std::vector<double>>(n * k);
  auto match = std::make_shared<std::vector<Index>>(n * k);
  double first = 0.0, second = 0.0;
  Matrix cost(as_index(k), as_index(k));
  for (std::size_t i = 0; i < n; ++i) {
    double t1 = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      const double a = (p[(*p_table)[i * k + r]] - p[i]).norm();
      const double b = (hp[h_table[i * k + r]] - q[i]).norm();
      t1 += std::abs(a - b);
      (*signs)[i * k + r] = (a > b) ? 1.0 : (a < b ? -1.0 : 0.0);
    }
    first += t1 / static_cast<double>(k);
    if (beta > 0.0) {
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t s = 0; s < k; ++s) cost(as_index(r), as_index(s)) = (p[(*p_table)[i * k + r]] - hp[h_table[i * k + s]]).norm();
      const auto a = assignment_exact(cost);
      double t2 = 0.0;
      for (std::size_t r = 0; r < k; ++r) {
        t2 += cost(as_index(r), as_index(a[r]));
        (*match)[i * k + r] = a[r];
      }
      second += t2 / static_cast<double>(k);
    }
  }
  const double nn_ = static_cast<double>(n);
  Matrix out(1, 1);
  out(0, 0) = first / nn_ + beta * second / nn_;

  Node* ph = h.node();
  auto p_rows = std::make_shared<std::vector<Index>>(*p_table);
  auto p_copy = std::make_shared<Points>(p);
  auto q_copy = queries ? std::make_shared<Points>(*queries) : p_copy;
  return nn::make_op(std::move(out), {h}, [=](Node& self) {
    const double g = self.grad(0, 0) / (nn_ * static_cast<double>(k));
    Matrix& gh = ph->grad_ref();
    const Matrix& hd = ph->data;
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::RowVector3d qi = (*q_copy)[i].transpose();
      for (std::size_t r = 0; r < k; ++r) {
        const EIdx z = as_index(h_table[i * k + r]);
        // d|a - b| / dz = -sign(a - b) * (z - q) / b
        const Eigen::RowVector3d dz = hd.row(z) - qi;
        const double b = dz.norm();
        if (b > 0.0 && (*signs)[i * k + r] != 0.0) gh.row(z) -= g * (*signs)[i * k + r] * dz / b;
        if (beta > 0.0) {
          const EIdx zm = as_index(h_table[i * k + (*match)[i * k + r]]);
          const Eigen::RowVector3d diff = hd.row(zm) - (*p_copy)[(*p_rows)[i * k + r]].transpose();
          const double d = diff.norm();
          if (d > 0.0) gh.row(zm) += g * beta * diff / d;
        }
      }
    }
  });
}

Value aux_roi_loss(const std::vector<RoiIndexPair>& rois, const Value& face, const Value& bone,
                   const Value& warped_face_to_bone, const Value& warped_bone_to_face) {
  if (rois.empty()) throw Error(ErrorCode::MissingLabel, "auxiliary loss needs at least one ROI");
  if (warped_face_to_bone.rows() != face.rows() || warped_bone_to_face.rows() != bone.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "warped clouds must align with their sources");
  }
  Value total;
  for (const auto& roi : rois) {
    if (roi.face.empty() || roi.bone.empty()) {
      throw Error(ErrorCode::MissingLabel, "ROI '" + roi.name + "' is empty on one side");
    }
    const Value term = chamfer_loss(nn::gather_rows(bone, roi.bone), nn::gather_rows(warped_face_to_bone, roi.face)) +
                       chamfer_loss(nn::gather_rows(face, roi.face), nn::gather_rows(warped_bone_to_face, roi.bone));
    total = total.defined() ? total + term : term;
  }
  return nn::scale(total, 1.0 / static_cast<double>(rois.size()));
}

Value total_loss(const LossParts& parts, const LossWeights& weights) {
  if (weights.lambda < 0.0 || weights.beta < 0.0) throw Error(ErrorCode::InvalidArgument, "loss weights must be nonnegative");
  for (const Value* v : {&parts.coarse, &parts.fine, &parts.reg, &parts.local}) {
    if (!v->defined()) throw Error(ErrorCode::InvalidArgument, "missing loss part");
    if (!std::isfinite(v->item())) throw Error(ErrorCode::NonFinite, "non-finite loss part");
  }
  Value total = parts.coarse + parts.fine + nn::scale(parts.reg, weights.lambda) + parts.local;
  if (weights.aux_enabled && parts.aux.defined()) {
    if (!std::isfinite(parts.aux.item())) throw Error(ErrorCode::NonFinite, "non-finite auxiliary loss");
    total = total + parts.aux;
  }
  return total;
}

double hausdorff(const Points& x, const Points& y) {
  require_nonempty(x.size(), y.size(), "Hausdorff distance");
  const Matrix mx = to_matrix(x), my = to_matrix(y);
  const Nearest a = nearest(mx, my), b = nearest(my, mx);
  return std::max(*std::max_element(a.distance.begin(), a.distance.end()),
                  *std::max_element(b.distance.begin(), b.distance.end()));
}

double jsd(const Points& x, const Points& y, std::size_t grid) {
  require_nonempty(x.size(), y.size(), "JSD");
  if (grid == 0) throw Error(ErrorCode::InvalidArgument, "JSD grid must be positive");
  auto histogram = [grid](const Points& pts) {
    std::map<std::size_t, double> h;
    for (const auto& p : pts) {
      std::size_t cell = 0;
      for (int a = 0; a < 3; ++a) {
        const double t = (p[a] + 1.0) / 2.0 * static_cast<double>(grid);
        const auto c = static_cast<std::size_t>(std::clamp(std::floor(t), 0.0, static_cast<double>(grid - 1)));
        cell = cell * grid + c;
      }
      h[cell] += 1.0 / static_cast<double>(pts.size());
    }
    return h;
  };
  const auto hx = histogram(x), hy = histogram(y);
  auto kl_to_mix = [](const std::map<std::size_t, double>& p, const std::map<std::size_t, double>& q) {
    double s = 0.0;
    for (const auto& [cell, pv] : p) {
      auto it = q.find(cell);
      const double m = 0.5 * (pv + (it == q.end() ? 0.0 : it->second));
      s += pv * std::log(pv / m);
    }
    return s;
  };
  return std::max(0.0, 0.5 * kl_to_mix(hx, hy) + 0.5 * kl_to_mix(hy, hx));
}

double mped(const Points& x, const Points& y, const std::vector<std::size_t>& scales) {
  require_nonempty(x.size(), y.size(), "MPED");
  auto side = [](const Points& a, const Points& b, std::size_t k) {
    const std::size_t ko = std::min(k, a.size());
    const std::size_t kc = std::min(k, b.size());
    const auto own = cloud::knn_table(a, a, ko);
    const auto cross = cloud::knn_table(b, a, kc);
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      double mo = 0.0, mc = 0.0;
      for (std::size_t r = 0; r < ko; ++r) mo += (a[own[i * ko + r]] - a[i]).norm();
      for (std::size_t r = 0; r < kc; ++r) mc += (b[cross[i * kc + r]] - a[i]).norm();
      total += std::abs(mo / static_cast<double>(ko) - mc / static_cast<double>(kc));
    }
    return total / static_cast<double>(a.size());
  };
  double sum = 0.0;
  for (std::size_t k : scales) {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "MPED scale must be positive");
    sum += side(x, y, k) + side(y, x, k);
  }
  return sum;
}

double ranksum_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 5 || b.size() < 5) throw Error(ErrorCode::TooFewSamples, "rank-sum test needs at least 5 samples per group");
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  std::vector<std::pair<double, int>> all;
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  for (const auto& [v, g] : all) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "rank-sum test on non-finite samples");
  }
  std::sort(all.begin(), all.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  double rank_a = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t s = i; s < j; ++s)
      if (all[s].second == 0) rank_a += mid;
    i = j;
  }
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dn = static_cast<double>(n);
  const double mean = dn1 * (dn + 1.0) / 2.0;
  const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (!(var > 0.0)) return 1.0;
  return normal_sf_two_sided((rank_a - mean) / std::sqrt(var));
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  // Guard the documented min <= mean <= max against rounding.
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

std::vector<MetricRow> MetricReport::select(const std::string& direction, const std::string& region) const {
  std::vector<MetricRow> out;
  for (const auto& r : rows) {
    if ((direction.empty() || r.direction == direction) && r.region == region) out.push_back(r);
  }
  return out;
}

void MetricReport::write_csv(std::ostream& out) const {
  out << "sample,direction,region,mped,cd,emd,jsd,hd\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.sample << ',' << r.direction << ',' << r.region << ',' << r.mped << ',' << r.cd << ',';
    if (r.has_emd) out << r.emd;
    out << ',';
    if (r.has_jsd) out << r.jsd;
    out << ',' << r.hd << '\n';
  }
}

void MetricReport::write_table(std::ostream& out) const {
  std::vector<std::pair<std::string, std::string>> groups;
  for (const auto& r : rows) {
    const auto shape = r.direction == "face2bone" ? std::string("bone") : std::string("face");
    if (std::find(groups.begin(), groups.end(), std::make_pair(shape, r.region)) == groups.end()) {
      groups.emplace_back(shape, r.region);
    }
  }
  auto fmt = [](const std::vector<double>& v) {
    if (v.empty()) return std::string("-");
    const Summary s = summarize(v);
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(4) << s.mean << "+-" << s.std;
    return ss.str();
  };
  out << std::left << std::setw(8) << "shape" << std::setw(8) << "region" << std::setw(20) << "MPED" << std::setw(20)
      << "CD" << std::setw(20) << "EMD" << std::setw(20) << "JSD" << std::setw(20) << "HD" << '\n';
  auto emit = [&](const std::string& shape, const std::string& region) {
    std::vector<double> m, c, e, j, h;
    for (const auto& r : rows) {
      const auto rs = r.direction == "face2bone" ? std::string("bone") : std::string("face");
      if (r.region != region || (shape != "all" && rs != shape)) continue;
      m.push_back(r.mped);
      c.push_back(r.cd);
      h.push_back(r.hd);
      if (r.has_emd) e.push_back(r.emd);
      if (r.has_jsd) j.push_back(r.jsd);
    }
    out << std::setw(8) << shape << std::setw(8) << region << std::setw(20) << fmt(m) << std::setw(20) << fmt(c)
        << std::setw(20) << fmt(e) << std::setw(20) << fmt(j) << std::setw(20) << fmt(h) << '\n';
  };
  for (const auto& [shape, region] : groups) emit(shape, region);
  if (std::any_of(rows.begin(), rows.end(), [](const MetricRow& r) { return r.region == "all"; })) emit("all", "all");
}

}  // namespace morphflow::distort
