#pragma once

#include <filesystem>
#include <vector>

#include "morphflow/cloud.hpp"

namespace morphflow::cloud {

enum class PlyEncoding { ascii, binary_le };
enum class PlyScalar { float32, float64 };

PointCloud read_xyz(const std::filesystem::path& path);
void write_xyz(const PointCloud& cloud, const std::filesystem::path& path);

/// Reads the x, y, z properties of the vertex element (float or double,
/// ascii or binary little-endian). Other vertex properties are skipped.
PointCloud read_ply(const std::filesystem::path& path);
void write_ply(const PointCloud& cloud, const std::filesystem::path& path,
               PlyEncoding encoding = PlyEncoding::binary_le, PlyScalar scalar = PlyScalar::float64);

/// Dispatches on extension (.xyz/.txt or .ply).
PointCloud read_cloud(const std::filesystem::path& path);
void write_cloud(const PointCloud& cloud, const std::filesystem::path& path);

/// ROI sidecar: a single object or an array of {name, box_min, box_max, cloud_side}.
std::vector<RoiLabel> read_roi_labels(const std::filesystem::path& path);
void write_roi_labels(const std::vector<RoiLabel>& labels, const std::filesystem::path& path);

}  // namespace morphflow::cloud
