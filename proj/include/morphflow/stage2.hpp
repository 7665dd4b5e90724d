#pragma once

// Fine stage: local information aggregation over the coarse cloud.

#include <array>
#include <string>
#include <vector>

#include "morphflow/nn.hpp"

namespace morphflow::stage2 {

using nn::Matrix;
using nn::Value;

struct LiaConfig {
  std::size_t channels = 32;
  std::size_t k_local = 8;
  std::size_t k_far = 8;
  double theta_r = 1.1;
  std::size_t covariance_k = 8;
  std::size_t noise_channels = 16;
  std::size_t head_hidden = 32;

  static LiaConfig desk();
  static LiaConfig paper();
  void validate() const;
};

struct FarRegion {
  Index center_index = 0;
  IndexList far_indices;        ///< farthest first
  double r = 0.0;               ///< theta_r times the largest distance
  std::vector<double> weights;  ///< W_d, sums to 1
};

/// The k_far points farthest from `center`, with r = theta_r * max |pq| and
/// W_d proportional to (r - |pq|)^2.
FarRegion farthest_region(const std::vector<Vec3>& points, Index center, std::size_t k_far, double theta_r = 1.1);

/// Squared direction cosines of q - p against the x, y and z axes.
Vec3 direction_coefficients(const Vec3& p, const Vec3& q);

/// Row-major n x k_far table of farthest indices (farthest first, ties by lower index).
std::vector<Index> farthest_table(const std::vector<Vec3>& points, std::size_t k_far);

/// Per (point, far point) row the three products W_d * c_A, differentiable in `positions`.
/// Rows are ordered point-major: row i*k_far + j belongs to far_table[i*k_far + j].
Value far_weights(const Value& positions, const std::vector<Index>& far_table, std::size_t k_far, double theta_r);

/// Flattened 3x3 covariance of each neighborhood (row i lists its members,
/// `k` per row), biased 1/k normalizer; differentiable in `positions`.
Value neighborhood_covariance(const Value& positions, const std::vector<Index>& members, std::size_t k);

struct EdgeConvParams {
  nn::Mlp first, second;
};

struct RelativePositionParams {
  std::array<nn::Linear, 3> axis;  ///< W_x, W_y, W_z (no bias)
  nn::Mlp edge_mlp, self_mlp;
};

struct Stage2Params {
  nn::Linear embed;  ///< (3 + 9 + noise) -> C
  EdgeConvParams edge;
  std::array<RelativePositionParams, 2> relative;
  nn::Mlp fuse;          ///< 3C -> C
  nn::Linear hidden;     ///< f_global width -> C
  nn::GruCell gru;
  nn::Mlp head;          ///< [f1, noise] -> 3, last layer zero

  static Stage2Params create(nn::ParamSet& params, const std::string& prefix, const LiaConfig& cfg,
                             std::size_t global_channels);
};

/// max over q in the graph row of MLP(f_q - f), applied by each MLP in turn;
/// the same graph (n x k, row-major) feeds both layers.
Value edge_conv_layer(const Value& features, const std::vector<Index>& graph, std::size_t k, const nn::Mlp& mlp);
Value static_edge_conv(const Value& features, const std::vector<Index>& graph, std::size_t k,
                       const EdgeConvParams& params);

/// f'' = sum_q sum_A w_qA (f_q - f) W_A, then MLP(f'') + MLP(f).
Value relative_position_block(const Value& features, const std::vector<Index>& far_table, std::size_t k_far,
                              const Value& weights, const RelativePositionParams& params);

struct FineOutput {
  Value displacement;
  Value warped;
};

/// f_local = MLP([f', f'', f''']), GRU(input = f_local, hidden = proj(f_global)),
/// head on [f1, noise]; H = coarse + displacement.
FineOutput aggregate_and_fuse(const Value& coarse, const Value& f1, const Value& f2, const Value& f3,
                              const Value& f_global, const Stage2Params& params, const Matrix& noise);

/// Full stage on the coarse cloud; neighbor graphs are rebuilt from its coordinates.
FineOutput fine_forward(const Value& coarse, const Value& f_global, const Stage2Params& params, const LiaConfig& cfg,
                        const Matrix& noise);

}  // namespace morphflow::stage2
