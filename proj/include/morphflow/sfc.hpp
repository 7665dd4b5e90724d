#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "morphflow/cloud.hpp"

namespace morphflow::sfc {

using Cell = std::array<std::uint32_t, 3>;

inline constexpr unsigned kMaxBitsPerAxis = 21;

enum class Pattern { zorder, zorder_trans, hilbert, hilbert_trans };

inline constexpr std::array<Pattern, 4> kAllPatterns{Pattern::zorder, Pattern::zorder_trans, Pattern::hilbert,
                                                     Pattern::hilbert_trans};

std::string_view to_string(Pattern p);

/// Bit j of x -> code bit 3j, y -> 3j+1, z -> 3j+2.
std::uint64_t morton_encode(const Cell& cell, unsigned bits);
Cell morton_decode(std::uint64_t code, unsigned bits);

/// 3D Hilbert index via the transpose / Gray-code construction.
std::uint64_t hilbert_encode(const Cell& cell, unsigned bits);
Cell hilbert_decode(std::uint64_t code, unsigned bits);

enum class TieBreak {
  index,     ///< equal codes ordered by original point index
  position,  ///< equal codes ordered by (x, y, z), then index
};

struct SerialOrder {
  Pattern pattern = Pattern::zorder;
  unsigned bits = 0;
  std::vector<std::uint64_t> codes;  ///< per point, in original order
  std::vector<Cell> cells;           ///< per point grid cell (before any axis swap)
  IndexList perm;                    ///< point indices sorted by code

  /// rank[i] = position of point i in perm.
  IndexList ranks() const;
};

/// Quantizes (p - min) / g per axis and sorts by the pattern's code.
SerialOrder serialize_cloud(const std::vector<Vec3>& points, double grid_size, Pattern pattern,
                            TieBreak tie = TieBreak::index);
inline SerialOrder serialize_cloud(const cloud::PointCloud& c, double grid_size, Pattern pattern,
                                   TieBreak tie = TieBreak::index) {
  return serialize_cloud(c.points, grid_size, pattern, tie);
}

struct WindowPartition {
  std::size_t window_size = 0;
  std::vector<IndexList> windows;  ///< point indices, each exactly window_size long
  /// For each point, (window, slot) of its unpadded occurrence.
  std::vector<std::pair<std::size_t, std::size_t>> owner;
};

/// Consecutive runs of S serialized points; a short tail is padded from the front
/// with the last points of the previous window.
WindowPartition partition_windows(const SerialOrder& order, std::size_t window_size);

/// Seeded shuffle of the four patterns, cycled to `depth` entries.
std::vector<Pattern> order_schedule(std::size_t depth, std::uint64_t seed);

/// Mean fraction of each point's true k nearest neighbors found among its k
/// serial neighbors (k/2 before, k/2 after in `perm`, shifted at the ends).
double serial_neighbor_recall(const std::vector<Vec3>& points, const IndexList& perm, std::size_t k);

}  // namespace morphflow::sfc
