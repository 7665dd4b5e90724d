#include "morphflow/stage1.hpp"

#include <cmath>

#include "morphflow/error.hpp"

namespace morphflow::stage1 {

namespace {

using Eigen::Index;
using nn::Node;

Index as_index(std::size_t v) { return static_cast<Index>(v); }

double level_grid(const StageConfig& cfg, std::size_t level) { return cfg.grid_size * std::ldexp(1.0, static_cast<int>(level)); }

}  // namespace

StageConfig StageConfig::desk() { return StageConfig{}; }

StageConfig StageConfig::paper() {
  StageConfig c;
  c.enc_channels = {32, 64, 128, 256, 512};
  c.enc_heads = {2, 4, 8, 16, 32};
  c.enc_blocks = {2, 2, 2, 6, 2};
  c.dec_channels = {64, 64, 128, 256};
  c.dec_heads = {4, 4, 8, 16};
  c.dec_blocks = {2, 2, 2, 2};
  c.window_size = 1024;
  c.grid_size = 0.01;
  c.head_hidden = 64;
  return c;
}

std::size_t StageConfig::total_blocks() const {
  std::size_t n = 0;
  for (auto b : enc_blocks) n += b;
  for (auto b : dec_blocks) n += b;
  return n;
}

void StageConfig::validate() const {
  const std::size_t L = enc_channels.size();
  if (L == 0) throw Error(ErrorCode::InvalidArgument, "stage needs at least one level");
  if (enc_heads.size() != L || enc_blocks.size() != L) {
    throw Error(ErrorCode::InvalidArgument, "encoder channel/head/block lists differ in length");
  }
  if (dec_channels.size() + 1 != L || dec_heads.size() + 1 != L || dec_blocks.size() + 1 != L) {
    throw Error(ErrorCode::InvalidArgument, "decoder lists must have one entry fewer than the encoder");
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (enc_heads[l] == 0 || enc_channels[l] % enc_heads[l] != 0) {
      throw Error(ErrorCode::InvalidArgument, "encoder heads must divide channels at level " + std::to_string(l));
    }
  }
  for (std::size_t l = 0; l + 1 < L; ++l) {
    if (dec_heads[l] == 0 || dec_channels[l] % dec_heads[l] != 0) {
      throw Error(ErrorCode::InvalidArgument, "decoder heads must divide channels at level " + std::to_string(l));
    }
  }
  if (window_size == 0) throw Error(ErrorCode::InvalidArgument, "window size must be positive");
  if (!(grid_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid size must be positive");
  if (pool_stride < 2) throw Error(ErrorCode::InvalidArgument, "pool stride must be at least 2");
}

AttentionBlockParams AttentionBlockParams::create(nn::ParamSet& params, const std::string& name, std::size_t channels,
                                                  std::size_t heads) {
  const Index c = as_index(channels);
  AttentionBlockParams b;
  b.heads = heads;
  b.xcpe = nn::Mlp::create(params, name + ".xcpe", 3, {c, c});
  b.query = nn::Linear::create(params, name + ".q", c, c);
  b.key = nn::Linear::create(params, name + ".k", c, c, nn::Init::xavier_uniform, false);
  b.value = nn::Linear::create(params, name + ".v", c, c);
  b.output = nn::Linear::create(params, name + ".proj", c, c);
  b.mlp = nn::Mlp::create(params, name + ".mlp", c, {2 * c, c});
  return b;
}

Stage1Params Stage1Params::create(nn::ParamSet& params, const std::string& prefix, const StageConfig& cfg) {
  cfg.validate();
  const std::size_t L = cfg.levels();
  Stage1Params p;
  p.embed = nn::Linear::create(params, prefix + ".embed", as_index(3 + cfg.noise_channels), as_index(cfg.enc_channels[0]));
  p.enc.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    if (l > 0) {
      p.pool.push_back(nn::Linear::create(params, prefix + ".pool" + std::to_string(l), as_index(cfg.enc_channels[l - 1]),
                                          as_index(cfg.enc_channels[l]), nn::Init::xavier_uniform, false));
    }
    for (std::size_t b = 0; b < cfg.enc_blocks[l]; ++b) {
      p.enc[l].push_back(AttentionBlockParams::create(
          params, prefix + ".enc" + std::to_string(l) + "." + std::to_string(b), cfg.enc_channels[l], cfg.enc_heads[l]));
    }
  }
  p.dec.resize(L - 1);
  p.unpool.resize(L - 1);
  for (std::size_t l = L - 1; l-- > 0;) {
    const std::size_t up = (l + 2 == L) ? cfg.enc_channels[L - 1] : cfg.dec_channels[l + 1];
    p.unpool[l] = nn::Linear::create(params, prefix + ".unpool" + std::to_string(l), as_index(up + cfg.enc_channels[l]),
                                     as_index(cfg.dec_channels[l]));
    for (std::size_t b = 0; b < cfg.dec_blocks[l]; ++b) {
      p.dec[l].push_back(AttentionBlockParams::create(
          params, prefix + ".dec" + std::to_string(l) + "." + std::to_string(b), cfg.dec_channels[l], cfg.dec_heads[l]));
    }
  }
  const std::size_t top = L > 1 ? cfg.dec_channels[0] : cfg.enc_channels[0];
  p.head = nn::Mlp::create(params, prefix + ".head", as_index(top + cfg.noise_channels),
                           {as_index(cfg.head_hidden), 3}, true);
  return p;
}

Matrix points_matrix(const std::vector<Vec3>& points) {
  Matrix m(as_index(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) m.row(as_index(i)) = points[i].transpose();
  return m;
}

BlockPlan plan_block(const std::vector<Vec3>& points, double grid_size, sfc::Pattern pattern, std::size_t window_size) {
  BlockPlan plan;
  plan.pattern = pattern;
  const auto order = sfc::serialize_cloud(points, grid_size, pattern, sfc::TieBreak::position);
  const std::size_t n = points.size();
  // Cells are integers, so this mean is exact and independent of point order.
  Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
  for (const auto& c : order.cells) mean += Eigen::RowVector3d(c[0], c[1], c[2]);
  mean /= static_cast<double>(n);
  plan.offsets.resize(as_index(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = order.cells[i];
    plan.offsets.row(as_index(i)) = (Eigen::RowVector3d(c[0], c[1], c[2]) - mean) * grid_size;
  }
  plan.windows = sfc::partition_windows(order, std::min(window_size, n));
  return plan;
}

PoolRecord pool_groups(const std::vector<Vec3>& points, double grid_size, std::size_t stride) {
  const auto order = sfc::serialize_cloud(points, grid_size, sfc::Pattern::zorder, sfc::TieBreak::position);
  PoolRecord rec;
  rec.parent.resize(points.size());
  for (std::size_t start = 0; start < order.perm.size(); start += stride) {
    const std::size_t end = std::min(order.perm.size(), start + stride);
    IndexList group(order.perm.begin() + static_cast<std::ptrdiff_t>(start),
                    order.perm.begin() + static_cast<std::ptrdiff_t>(end));
    for (Index i : group) rec.parent[i] = rec.groups.size();
    rec.groups.push_back(std::move(group));
  }
  return rec;
}

namespace {

std::vector<Vec3> pooled_positions(const std::vector<Vec3>& points, const PoolRecord& record) {
  std::vector<Vec3> out;
  out.reserve(record.groups.size());
  for (const auto& g : record.groups) {
    Vec3 s = Vec3::Zero();
    for (Index i : g) s += points[i];
    out.push_back(s / static_cast<double>(g.size()));
  }
  return out;
}

}  // namespace

CoarsePlan build_plan(const std::vector<Vec3>& points, const StageConfig& cfg) {
  cfg.validate();
  const std::size_t L = cfg.levels();
  const auto schedule = sfc::order_schedule(cfg.total_blocks(), cfg.order_seed);
  std::size_t next = 0;
  CoarsePlan plan;
  plan.levels.resize(L);
  plan.levels[0].points = points;
  for (std::size_t l = 0; l < L; ++l) {
    LevelPlan& level = plan.levels[l];
    const double g = level_grid(cfg, l);
    for (std::size_t b = 0; b < cfg.enc_blocks[l]; ++b) {
      level.enc_blocks.push_back(plan_block(level.points, g, schedule[next++], cfg.window_size));
    }
    if (l + 1 < L) {
      level.pool = pool_groups(level.points, g, cfg.pool_stride);
      plan.levels[l + 1].points = pooled_positions(level.points, level.pool);
    }
  }
  for (std::size_t l = L - 1; l-- > 0;) {
    LevelPlan& level = plan.levels[l];
    for (std::size_t b = 0; b < cfg.dec_blocks[l]; ++b) {
      level.dec_blocks.push_back(plan_block(level.points, level_grid(cfg, l), schedule[next++], cfg.window_size));
    }
  }
  return plan;
}

Value xcpe(const Value& features, const Matrix& offsets, const nn::Mlp& net) {
  if (offsets.rows() != features.rows() || offsets.cols() != 3) {
    throw Error(ErrorCode::ShapeMismatch, "xcpe: offsets must be n x 3 for n feature rows");
  }
  return features + net(Value::constant(offsets));
}

Value scalar_attention(const Value& x, const AttentionBlockParams& p) {
  const std::size_t s = static_cast<std::size_t>(x.rows());
  sfc::WindowPartition part;
  part.window_size = s;
  IndexList all(s);
  for (std::size_t i = 0; i < s; ++i) {
    all[i] = i;
    part.owner.emplace_back(0, i);
  }
  part.windows.push_back(all);
  return p.output(window_attention(p.query(x), p.key(x), p.value(x), part, p.heads));
}

Value window_attention(const Value& q, const Value& k, const Value& v, const sfc::WindowPartition& part,
                       std::size_t heads) {
  const Index n = q.rows();
  const Index c = q.cols();
  if (k.rows() != n || v.rows() != n || k.cols() != c || v.cols() != c) {
    throw Error(ErrorCode::ShapeMismatch, "window_attention: q, k, v shapes differ");
  }
  if (heads == 0 || c % as_index(heads) != 0) throw Error(ErrorCode::ShapeMismatch, "heads must divide channels");
  if (part.owner.size() != static_cast<std::size_t>(n)) {
    throw Error(ErrorCode::ShapeMismatch, "window partition does not match the feature rows");
  }
  const Index ca = c / as_index(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(ca));
  const Index S = as_index(part.window_size);
  const std::size_t W = part.windows.size();

  // Slot of each window whose output is kept (owner occurrence), else -1.
  auto owners = std::make_shared<std::vector<std::vector<Index>>>(W, std::vector<Index>(part.window_size, -1));
  for (std::size_t i = 0; i < part.owner.size(); ++i) {
    const auto [w, s] = part.owner[i];
    (*owners)[w][s] = static_cast<Index>(i);
  }

  auto probs = std::make_shared<std::vector<Matrix>>(W * heads);
  Matrix out(n, c);
  Matrix qw(S, c), kw(S, c), vw(S, c), ow(S, c);
  for (std::size_t w = 0; w < W; ++w) {
    const auto& idx = part.windows[w];
    for (Index s = 0; s < S; ++s) {
      qw.row(s) = q.data().row(as_index(idx[s]));
      kw.row(s) = k.data().row(as_index(idx[s]));
      vw.row(s) = v.data().row(as_index(idx[s]));
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const Index c0 = as_index(h) * ca;
      Matrix a = (qw.middleCols(c0, ca) * kw.middleCols(c0, ca).transpose()) * inv;
      for (Index r = 0; r < S; ++r) {
        const double m = a.row(r).maxCoeff();
        a.row(r) = (a.row(r).array() - m).exp().matrix();
        a.row(r) /= a.row(r).sum();
      }
      ow.middleCols(c0, ca).noalias() = a * vw.middleCols(c0, ca);
      (*probs)[w * heads + h] = std::move(a);
    }
    for (Index s = 0; s < S; ++s) {
      const Index i = (*owners)[w][s];
      if (i >= 0) out.row(i) = ow.row(s);
    }
  }

  Node* pq = q.node();
  Node* pk = k.node();
  Node* pv = v.node();
  // The partition may not outlive the graph.
  auto win_copy = std::make_shared<std::vector<IndexList>>(part.windows);
  return nn::make_op(std::move(out), {q, k, v}, [=](Node& self) {
    Matrix qw(S, c), kw(S, c), vw(S, c), go(S, c), gq(S, c), gk(S, c), gv(S, c);
    for (std::size_t w = 0; w < W; ++w) {
      const auto& idx = (*win_copy)[w];
      go.setZero();
      for (Index s = 0; s < S; ++s) {
        qw.row(s) = pq->data.row(as_index(idx[s]));
        kw.row(s) = pk->data.row(as_index(idx[s]));
        vw.row(s) = pv->data.row(as_index(idx[s]));
        const Index i = (*owners)[w][s];
        if (i >= 0) go.row(s) = self.grad.row(i);
      }
      for (std::size_t h = 0; h < heads; ++h) {
        const Index c0 = as_index(h) * ca;
        const Matrix& a = (*probs)[w * heads + h];
        gv.middleCols(c0, ca).noalias() = a.transpose() * go.middleCols(c0, ca);
        Matrix ga = go.middleCols(c0, ca) * vw.middleCols(c0, ca).transpose();
        const Eigen::VectorXd dots = ga.cwiseProduct(a).rowwise().sum();
        Matrix gl = (a.array() * (ga.colwise() - dots).array()).matrix() * inv;
        gq.middleCols(c0, ca).noalias() = gl * kw.middleCols(c0, ca);
        gk.middleCols(c0, ca).noalias() = gl.transpose() * qw.middleCols(c0, ca);
      }
      for (Index s = 0; s < S; ++s) {
        const Index r = as_index(idx[s]);
        if (pq->requires_grad) pq->grad_ref().row(r) += gq.row(s);
        if (pk->requires_grad) pk->grad_ref().row(r) += gk.row(s);
        if (pv->requires_grad) pv->grad_ref().row(r) += gv.row(s);
      }
    }
  });
}

Value attention_block(const Value& features, const BlockPlan& plan, const AttentionBlockParams& p,
                      bool pre_norm) {
  Value x = xcpe(features, plan.offsets, p.xcpe);
  const Value a_in = pre_norm ? nn::layer_norm_rows(x) : x;
  x = x + p.output(window_attention(p.query(a_in), p.key(a_in), p.value(a_in), plan.windows, p.heads));
  return x + p.mlp(pre_norm ? nn::layer_norm_rows(x) : x);
}

Pooled window_pool(const std::vector<Vec3>& points, const Value& features, const PoolRecord& record,
                   const nn::Linear& u) {
  if (features.rows() != as_index(points.size()) || record.parent.size() != points.size()) {
    throw Error(ErrorCode::ShapeMismatch, "window_pool: points, features and record disagree in size");
  }
  Pooled out;
  out.points = pooled_positions(points, record);
  out.features = nn::group_max(u(features), record.groups);
  out.record = record;
  return out;
}

Value window_unpool(const Value& pooled, const PoolRecord& record, const Value& skip, const nn::Linear& proj) {
  if (pooled.rows() != as_index(record.groups.size()) || skip.rows() != as_index(record.parent.size())) {
    throw Error(ErrorCode::RecordMismatch, "window_unpool: record does not match the pooled or skip features");
  }
  return proj(nn::concat_cols({nn::gather_rows(pooled, record.parent), skip}));
}

CoarseOutput coarse_forward(const std::vector<Vec3>& source, const CoarsePlan& plan, const Stage1Params& params,
                            const StageConfig& cfg, const Matrix& noise) {
  const std::size_t L = cfg.levels();
  if (plan.levels.size() != L || plan.levels[0].points.size() != source.size()) {
    throw Error(ErrorCode::ShapeMismatch, "coarse plan was built for a different cloud or config");
  }
  if (noise.rows() != as_index(source.size()) || noise.cols() != as_index(cfg.noise_channels)) {
    throw Error(ErrorCode::ShapeMismatch, "noise must be n x noise_channels");
  }
  const Value coords = Value::constant(points_matrix(source));
  const Value noise_v = Value::constant(noise);
  const Value input = cfg.noise_channels > 0 ? nn::concat_cols({coords, noise_v}) : coords;

  std::vector<Value> skips(L);
  Value f = params.embed(input);
  for (std::size_t l = 0; l < L; ++l) {
    if (l > 0) f = window_pool(plan.levels[l - 1].points, f, plan.levels[l - 1].pool, params.pool[l - 1]).features;
    for (std::size_t b = 0; b < params.enc[l].size(); ++b) {
      f = attention_block(f, plan.levels[l].enc_blocks[b], params.enc[l][b], cfg.pre_norm);
    }
    skips[l] = f;
  }
  for (std::size_t l = L - 1; l-- > 0;) {
    f = window_unpool(f, plan.levels[l].pool, skips[l], params.unpool[l]);
    for (std::size_t b = 0; b < params.dec[l].size(); ++b) {
      f = attention_block(f, plan.levels[l].dec_blocks[b], params.dec[l][b], cfg.pre_norm);
    }
  }

  CoarseOutput out;
  out.f_global = cfg.pre_norm ? nn::layer_norm_rows(f) : f;
  out.displacement =
      params.head(cfg.noise_channels > 0 ? nn::concat_cols({out.f_global, noise_v}) : out.f_global);
  out.warped = coords + out.displacement;
  return out;
}

}  // namespace morphflow::stage1
