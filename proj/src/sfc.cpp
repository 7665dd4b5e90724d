#include "morphflow/sfc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "morphflow/error.hpp"
#include "morphflow/rng.hpp"

namespace morphflow::sfc {

namespace {

void check_cell(const Cell& cell, unsigned bits) {
  if (bits == 0 || bits > kMaxBitsPerAxis) {
    throw Error(ErrorCode::CoordinateOverflow, "bits per axis must be in [1, 21]");
  }
  const std::uint64_t limit = std::uint64_t{1} << bits;
  for (auto c : cell) {
    if (c >= limit) throw Error(ErrorCode::CoordinateOverflow, "cell coordinate exceeds 2^bits");
  }
}

void check_code(std::uint64_t code, unsigned bits) {
  if (bits == 0 || bits > kMaxBitsPerAxis) {
    throw Error(ErrorCode::CoordinateOverflow, "bits per axis must be in [1, 21]");
  }
  if (code >> (3 * bits) != 0) throw Error(ErrorCode::CoordinateOverflow, "code exceeds 3*bits");
}

// Spreads the low 21 bits of v so bit j lands at bit 3j.
std::uint64_t spread3(std::uint64_t v) {
  v &= 0x1fffff;
  v = (v | v << 32) & 0x1f00000000ffffULL;
  v = (v | v << 16) & 0x1f0000ff0000ffULL;
  v = (v | v << 8) & 0x100f00f00f00f00fULL;
  v = (v | v << 4) & 0x10c30c30c30c30c3ULL;
  v = (v | v << 2) & 0x1249249249249249ULL;
  return v;
}

std::uint32_t compact3(std::uint64_t v) {
  v &= 0x1249249249249249ULL;
  v = (v ^ (v >> 2)) & 0x10c30c30c30c30c3ULL;
  v = (v ^ (v >> 4)) & 0x100f00f00f00f00fULL;
  v = (v ^ (v >> 8)) & 0x1f0000ff0000ffULL;
  v = (v ^ (v >> 16)) & 0x1f00000000ffffULL;
  v = (v ^ (v >> 32)) & 0x1fffffULL;
  return static_cast<std::uint32_t>(v);
}

// Skilling's in-place axes <-> transposed Hilbert index conversions.
void axes_to_transpose(std::array<std::uint32_t, 3>& x, unsigned bits) {
  const std::uint32_t m = std::uint32_t{1} << (bits - 1);
  for (std::uint32_t q = m; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  for (int i = 1; i < 3; ++i) x[i] ^= x[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = m; q > 1; q >>= 1) {
    if (x[2] & q) t ^= q - 1;
  }
  for (int i = 0; i < 3; ++i) x[i] ^= t;
}

void transpose_to_axes(std::array<std::uint32_t, 3>& x, unsigned bits) {
  const std::uint32_t n = std::uint32_t{2} << (bits - 1);
  std::uint32_t t = x[2] >> 1;
  for (int i = 2; i > 0; --i) x[i] ^= x[i - 1];
  x[0] ^= t;
  for (std::uint32_t q = 2; q != n; q <<= 1) {
    const std::uint32_t p = q - 1;
    for (int i = 2; i >= 0; --i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
}

}  // namespace

std::string_view to_string(Pattern p) {
  switch (p) {
    case Pattern::zorder: return "zorder";
    case Pattern::zorder_trans: return "zorder_trans";
    case Pattern::hilbert: return "hilbert";
    case Pattern::hilbert_trans: return "hilbert_trans";
  }
  return "unknown";
}

std::uint64_t morton_encode(const Cell& cell, unsigned bits) {
  check_cell(cell, bits);
  return spread3(cell[0]) | (spread3(cell[1]) << 1) | (spread3(cell[2]) << 2);
}

Cell morton_decode(std::uint64_t code, unsigned bits) {
  check_code(code, bits);
  return {compact3(code), compact3(code >> 1), compact3(code >> 2)};
}

std::uint64_t hilbert_encode(const Cell& cell, unsigned bits) {
  check_cell(cell, bits);
  std::array<std::uint32_t, 3> x = cell;
  axes_to_transpose(x, bits);
  // Interleave transposed words, x[0] carrying the most significant bit of each triple.
  std::uint64_t code = 0;
  for (int b = static_cast<int>(bits) - 1; b >= 0; --b) {
    for (int i = 0; i < 3; ++i) code = (code << 1) | ((x[i] >> b) & 1U);
  }
  return code;
}

Cell hilbert_decode(std::uint64_t code, unsigned bits) {
  check_code(code, bits);
  std::array<std::uint32_t, 3> x{0, 0, 0};
  for (int b = static_cast<int>(bits) - 1; b >= 0; --b) {
    for (int i = 0; i < 3; ++i) {
      const unsigned shift = static_cast<unsigned>(3 * b + (2 - i));
      x[i] |= static_cast<std::uint32_t>((code >> shift) & 1U) << b;
    }
  }
  transpose_to_axes(x, bits);
  return x;
}

IndexList SerialOrder::ranks() const {
  IndexList r(perm.size());
  for (std::size_t pos = 0; pos < perm.size(); ++pos) r[perm[pos]] = pos;
  return r;
}

SerialOrder serialize_cloud(const std::vector<Vec3>& points, double grid_size, Pattern pattern, TieBreak tie) {
  if (!(grid_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid size must be positive");
  if (points.empty()) throw Error(ErrorCode::EmptyCloud, "cannot serialize an empty cloud");
  const auto [lo, hi] = cloud::bounds(points);

  SerialOrder order;
  order.pattern = pattern;
  order.cells.resize(points.size());
  std::uint32_t max_cell = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      const double c = std::floor((points[i][a] - lo[a]) / grid_size);
      if (!(c < static_cast<double>(std::uint64_t{1} << kMaxBitsPerAxis))) {
        throw Error(ErrorCode::GridTooFine, "cell coordinate needs more than 21 bits");
      }
      order.cells[i][a] = static_cast<std::uint32_t>(c);
      max_cell = std::max(max_cell, order.cells[i][a]);
    }
  }
  unsigned bits = 1;
  while (bits < kMaxBitsPerAxis && (std::uint64_t{1} << bits) <= max_cell) ++bits;
  order.bits = bits;

  const bool transposed = pattern == Pattern::zorder_trans || pattern == Pattern::hilbert_trans;
  const bool hilbert = pattern == Pattern::hilbert || pattern == Pattern::hilbert_trans;
  order.codes.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    Cell c = order.cells[i];
    if (transposed) std::swap(c[0], c[1]);
    order.codes[i] = hilbert ? hilbert_encode(c, bits) : morton_encode(c, bits);
  }

  order.perm.resize(points.size());
  std::iota(order.perm.begin(), order.perm.end(), Index{0});
  const auto& codes = order.codes;
  if (tie == TieBreak::index) {
    std::sort(order.perm.begin(), order.perm.end(),
              [&](Index a, Index b) { return codes[a] != codes[b] ? codes[a] < codes[b] : a < b; });
  } else {
    std::sort(order.perm.begin(), order.perm.end(), [&](Index a, Index b) {
      if (codes[a] != codes[b]) return codes[a] < codes[b];
      for (int ax = 0; ax < 3; ++ax) {
        if (points[a][ax] != points[b][ax]) return points[a][ax] < points[b][ax];
      }
      return a < b;
    });
  }
  return order;
}

WindowPartition partition_windows(const SerialOrder& order, std::size_t window_size) {
  const std::size_t n = order.perm.size();
  if (window_size == 0) throw Error(ErrorCode::InvalidArgument, "window size must be positive");
  if (n < window_size) {
    throw Error(ErrorCode::CloudSmallerThanWindow,
                std::to_string(n) + " points cannot fill a window of " + std::to_string(window_size));
  }
  WindowPartition part;
  part.window_size = window_size;
  part.owner.resize(n);
  const std::size_t full = n / window_size;
  for (std::size_t w = 0; w < full; ++w) {
    IndexList win(order.perm.begin() + w * window_size, order.perm.begin() + (w + 1) * window_size);
    for (std::size_t s = 0; s < window_size; ++s) part.owner[win[s]] = {w, s};
    part.windows.push_back(std::move(win));
  }
  const std::size_t rem = n % window_size;
  if (rem > 0) {
    IndexList win(order.perm.end() - static_cast<std::ptrdiff_t>(window_size), order.perm.end());
    for (std::size_t s = window_size - rem; s < window_size; ++s) part.owner[win[s]] = {full, s};
    part.windows.push_back(std::move(win));
  }
  return part;
}

std::vector<Pattern> order_schedule(std::size_t depth, std::uint64_t seed) {
  if (depth == 0) throw Error(ErrorCode::InvalidArgument, "depth must be >= 1");
  std::vector<Pattern> base(kAllPatterns.begin(), kAllPatterns.end());
  Rng rng(seed);
  shuffle(base, rng);
  std::vector<Pattern> out(depth);
  for (std::size_t i = 0; i < depth; ++i) out[i] = base[i % base.size()];
  return out;
}

double serial_neighbor_recall(const std::vector<Vec3>& points, const IndexList& perm, std::size_t k) {
  const std::size_t n = points.size();
  if (perm.size() != n) throw Error(ErrorCode::SizeMismatch, "permutation size differs from cloud");
  if (k + 1 > n) throw Error(ErrorCode::KTooLarge, "k too large for serial recall");
  const auto truth = cloud::knn_graph(points, k);
  IndexList rank(n);
  for (std::size_t pos = 0; pos < n; ++pos) rank[perm[pos]] = pos;

  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const std::size_t pos = rank[i];
    // Window of k+1 serial positions centred on pos, clamped to the sequence.
    std::size_t begin = pos >= k / 2 ? pos - k / 2 : 0;
    begin = std::min(begin, n - (k + 1));
    std::unordered_set<Index> serial;
    for (std::size_t p = begin; p < begin + k + 1; ++p) {
      if (perm[p] != i) serial.insert(perm[p]);
    }
    std::size_t hits = 0;
    for (std::size_t j = 0; j < k; ++j) hits += serial.count(truth[i * k + j]);
    total += static_cast<double>(hits) / static_cast<double>(k);
  }
  return total / static_cast<double>(n);
}

}  // namespace morphflow::sfc
