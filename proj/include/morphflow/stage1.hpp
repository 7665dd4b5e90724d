#pragma once

// Coarse stage: serialized window attention in a U-shaped encoder/decoder.

#include <cstdint>
#include <string>
#include <vector>

#include "morphflow/nn.hpp"
#include "morphflow/sfc.hpp"

namespace morphflow::stage1 {

using nn::Matrix;
using nn::Value;

struct StageConfig {
  std::vector<std::size_t> enc_channels{16, 32, 64};
  std::vector<std::size_t> enc_heads{2, 4, 8};
  std::vector<std::size_t> enc_blocks{1, 1, 1};
  std::vector<std::size_t> dec_channels{16, 32};
  std::vector<std::size_t> dec_heads{2, 4};
  std::vector<std::size_t> dec_blocks{1, 1};
  std::size_t window_size = 128;
  double grid_size = 0.02;
  std::size_t pool_stride = 4;
  std::size_t noise_channels = 16;
  std::size_t head_hidden = 32;
  std::uint64_t order_seed = 7;
  bool pre_norm = true;  ///< row layer norm before attention and MLP, and on f_global

  static StageConfig desk();
  static StageConfig paper();

  std::size_t levels() const { return enc_channels.size(); }
  std::size_t total_blocks() const;
  /// Throws InvalidArgument on inconsistent schedules.
  void validate() const;
};

struct AttentionBlockParams {
  nn::Mlp xcpe;  ///< 3 -> c -> c over centered grid offsets
  nn::Linear query, key, value, output;
  nn::Mlp mlp;  ///< c -> 2c -> c
  std::size_t heads = 1;

  static AttentionBlockParams create(nn::ParamSet& params, const std::string& name, std::size_t channels,
                                     std::size_t heads);
};

struct Stage1Params {
  nn::Linear embed;                               ///< (3 + noise) -> enc_channels[0]
  std::vector<std::vector<AttentionBlockParams>> enc;  ///< per level
  std::vector<nn::Linear> pool;                   ///< U for level l -> l+1
  std::vector<nn::Linear> unpool;                 ///< [up, skip] -> dec_channels[l]
  std::vector<std::vector<AttentionBlockParams>> dec;  ///< per decoder level
  nn::Mlp head;                                   ///< [f_global, noise] -> 3, last layer zero

  static Stage1Params create(nn::ParamSet& params, const std::string& prefix, const StageConfig& cfg);
};

/// Serialization-derived data for one attention block.
struct BlockPlan {
  sfc::Pattern pattern = sfc::Pattern::zorder;
  Matrix offsets;  ///< n x 3 centered cells times the level grid size
  sfc::WindowPartition windows;
};

/// Subsets produced by one pooling step, kept for unpooling.
struct PoolRecord {
  std::vector<IndexList> groups;  ///< member indices at the finer level
  IndexList parent;               ///< finer point -> group
};

struct LevelPlan {
  std::vector<Vec3> points;
  std::vector<BlockPlan> enc_blocks;
  std::vector<BlockPlan> dec_blocks;
  PoolRecord pool;  ///< towards the next level (empty at the deepest)
};

/// Everything coarse_forward derives from source coordinates alone.
struct CoarsePlan {
  std::vector<LevelPlan> levels;
};

CoarsePlan build_plan(const std::vector<Vec3>& points, const StageConfig& cfg);

/// Serializes `points` at grid `g` and partitions into windows of min(S, n).
BlockPlan plan_block(const std::vector<Vec3>& points, double grid_size, sfc::Pattern pattern, std::size_t window_size);

/// features + MLP(offsets).
Value xcpe(const Value& features, const Matrix& offsets, const nn::Mlp& net);

/// Multi-head scalar attention inside one window (rows of `x`).
Value scalar_attention(const Value& x, const AttentionBlockParams& p);

/// Multi-head attention restricted to each window; row i of the result comes
/// from the slot that owns point i.
Value window_attention(const Value& q, const Value& k, const Value& v, const sfc::WindowPartition& part,
                       std::size_t heads);

/// xCPE, windowed attention with residual, MLP with residual (pre-norm when set).
Value attention_block(const Value& features, const BlockPlan& plan, const AttentionBlockParams& p,
                      bool pre_norm = true);

struct Pooled {
  std::vector<Vec3> points;
  Value features;
  PoolRecord record;
};

/// Serialized runs of `stride` points (z-order at grid `g`); max over f*U, mean position.
PoolRecord pool_groups(const std::vector<Vec3>& points, double grid_size, std::size_t stride);
Pooled window_pool(const std::vector<Vec3>& points, const Value& features, const PoolRecord& record,
                   const nn::Linear& u);

/// Broadcasts pooled rows to their members, concatenates the skip features, projects.
Value window_unpool(const Value& pooled, const PoolRecord& record, const Value& skip, const nn::Linear& proj);

struct CoarseOutput {
  Value displacement;  ///< n x 3
  Value f_global;      ///< n x dec_channels[0]
  Value warped;        ///< source + displacement
};

/// `noise` is n x cfg.noise_channels (may have zero columns).
CoarseOutput coarse_forward(const std::vector<Vec3>& source, const CoarsePlan& plan, const Stage1Params& params,
                            const StageConfig& cfg, const Matrix& noise);

Matrix points_matrix(const std::vector<Vec3>& points);

}  // namespace morphflow::stage1
