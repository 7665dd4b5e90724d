#pragma once

// Similarity losses and evaluation metrics.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "morphflow/cloud.hpp"
#include "morphflow/nn.hpp"

namespace morphflow::distort {

using nn::Matrix;
using nn::Value;
using Points = std::vector<Vec3>;

struct Nearest {
  std::vector<Index> index;      ///< per query, ties to the lowest index
  std::vector<double> distance;  ///< unsquared
};

/// Brute-force nearest neighbor of every row of `queries` among `reference`.
Nearest nearest(const Matrix& queries, const Matrix& reference);

Matrix to_matrix(const Points& pts);
Points to_points(const Matrix& m);

/// Mean nearest distance X->Y plus mean Y->X (unsquared).
double chamfer(const Points& x, const Points& y);
Value chamfer_loss(const Value& x, const Value& y);

/// Optimal assignment for a square cost matrix (shortest augmenting paths).
std::vector<Index> assignment_exact(const Matrix& cost);

struct AuctionResult {
  std::vector<Index> assignment;
  double primal = 0.0;       ///< cost of the returned assignment
  double lower_bound = 0.0;  ///< dual bound on the optimum
};

/// epsilon-scaled auction; stops once primal - lower_bound <= rel_gap * lower_bound.
AuctionResult assignment_auction(const Matrix& cost, double rel_gap = 0.01);

enum class EmdMode { exact, approx };

/// Mean matched distance under the optimal bijection. Approx mode switches to
/// the auction solver above kAuctionThreshold points.
double emd(const Points& x, const Points& y, EmdMode mode = EmdMode::exact);
inline constexpr std::size_t kAuctionThreshold = 512;

/// Exact EMD with gradients through the optimal matching.
Value emd_loss(const Value& x, const Value& y);

struct LossWeights {
  double lambda = 0.3;  ///< cross-regularization
  double beta = 0.1;    ///< local EMD term
  bool aux_enabled = false;
};

struct StagePair {
  Value coarse;
  Value fine;
};

/// (CD(H^_F, P_F) + CD(H^_B, P_B), same for H).
StagePair similarity_losses(const Value& coarse_face, const Value& coarse_bone, const Value& fine_face,
                            const Value& fine_bone, const Value& face, const Value& bone);

/// CD([P_F, H^_B], [P_B, H^_F]) + CD([P_F, H_B], [P_B, H_F]).
Value cross_reg(const Value& face, const Value& bone, const Value& coarse_face, const Value& coarse_bone,
                const Value& fine_face, const Value& fine_bone);

/// Rank-paired neighbor-distance discrepancy plus beta times the neighborhood EMD.
///
/// For each x in P, Omega_P is the K nearest of x in P (x included) and Omega_H
/// the K nearest of `queries[i]` in H (queries default to P). Distances are taken
/// from x on the P side and from queries[i] on the H side. Differentiable in H.
/// `p_table` optionally caches knn_table(P, P, K).
Value local_density_loss(const Points& p, const Value& h, std::size_t k = 16, double beta = 0.1,
                         const std::vector<Index>* p_table = nullptr, const Points* queries = nullptr);

struct RoiIndexPair {
  std::string name;
  IndexList face;  ///< indices into P_F
  IndexList bone;  ///< indices into P_B
};

/// Mean over labels of CD(P_B[bone], H_B[face]) + CD(P_F[face], H_F[bone]), where
/// H_B = P_F warped towards bone (rows aligned with P_F) and H_F the reverse.
Value aux_roi_loss(const std::vector<RoiIndexPair>& rois, const Value& face, const Value& bone,
                   const Value& warped_face_to_bone, const Value& warped_bone_to_face);

struct LossParts {
  Value coarse, fine, reg, local;
  Value aux;  ///< undefined when disabled
};

/// L_coarse + L_fine + lambda L_reg + L_local (+ L_aux). Throws NonFinite.
Value total_loss(const LossParts& parts, const LossWeights& weights);

double hausdorff(const Points& x, const Points& y);

/// Jensen-Shannon divergence (natural log) of voxel occupancy on grid^3 cells over [-1, 1]^3.
double jsd(const Points& x, const Points& y, std::size_t grid = 28);

/// For each scale K: per-point |mean own-cloud K-NN distance (self included)
/// - mean distance to the K nearest cross-cloud points|, averaged per cloud,
/// summed over both clouds, then summed over scales.
double mped(const Points& x, const Points& y, const std::vector<std::size_t>& scales = {1, 4, 8, 16});

/// Two-sided Wilcoxon rank-sum p-value, normal approximation with tie correction.
double ranksum_test(const std::vector<double>& a, const std::vector<double>& b);

struct MetricRow {
  std::string sample;
  std::string direction;  ///< face2bone or bone2face
  std::string region;     ///< all or an ROI name
  double cd = 0.0, emd = 0.0, jsd = 0.0, hd = 0.0, mped = 0.0;
  bool has_emd = true, has_jsd = true;
};

struct Summary {
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
  std::size_t count = 0;
};

Summary summarize(const std::vector<double>& values);

struct MetricReport {
  std::vector<MetricRow> rows;

  /// Rows matching direction ("" = any) and region.
  std::vector<MetricRow> select(const std::string& direction, const std::string& region) const;
  void write_csv(std::ostream& out) const;
  void write_table(std::ostream& out) const;
};

}  // namespace morphflow::distort
