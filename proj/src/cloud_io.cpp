#include "morphflow/cloud_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "morphflow/error.hpp"

namespace morphflow::cloud {

namespace {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

std::size_t scalar_size(const std::string& type) {
  if (type == "char" || type == "uchar" || type == "int8" || type == "uint8") return 1;
  if (type == "short" || type == "ushort" || type == "int16" || type == "uint16") return 2;
  if (type == "int" || type == "uint" || type == "float" || type == "int32" || type == "uint32" || type == "float32")
    return 4;
  if (type == "double" || type == "float64") return 8;
  throw Error(ErrorCode::IOError, "unsupported PLY scalar type '" + type + "'");
}

double read_scalar(const char* bytes, const std::string& type) {
  auto load = [bytes]<typename T>(T) {
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return static_cast<double>(v);
  };
  if (type == "float" || type == "float32") return load(float{});
  if (type == "double" || type == "float64") return load(double{});
  if (type == "char" || type == "int8") return load(std::int8_t{});
  if (type == "uchar" || type == "uint8") return load(std::uint8_t{});
  if (type == "short" || type == "int16") return load(std::int16_t{});
  if (type == "ushort" || type == "uint16") return load(std::uint16_t{});
  if (type == "int" || type == "int32") return load(std::int32_t{});
  return load(std::uint32_t{});
}

struct PlyProperty {
  std::string name;
  std::string type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

}  // namespace

PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path.string());
  PointCloud cloud;
  cloud.id = path.stem().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Vec3 p;
    if (!(ss >> p.x() >> p.y() >> p.z())) {
      throw Error(ErrorCode::IOError, path.string() + ":" + std::to_string(lineno) + ": expected 'x y z'");
    }
    cloud.points.push_back(p);
  }
  cloud.validate();
  return cloud;
}

void write_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path.string());
  out.precision(17);
  for (const auto& p : cloud.points) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path.string());
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path.string());

  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw Error(ErrorCode::IOError, path.string() + ": missing ply magic");

  std::string format;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      ss >> format;
    } else if (word == "element") {
      PlyElement e;
      ss >> e.name >> e.count;
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw Error(ErrorCode::IOError, "property before element");
      std::string type;
      ss >> type;
      if (type == "list") throw Error(ErrorCode::IOError, "list properties are not supported before vertex data");
      PlyProperty prop{"", type};
      ss >> prop.name;
      elements.back().props.push_back(prop);
    } else if (word == "end_header") {
      break;
    }
  }
  if (format != "ascii" && format != "binary_little_endian") {
    throw Error(ErrorCode::IOError, "unsupported PLY format '" + format + "'");
  }
  if (elements.empty() || elements.front().name != "vertex") {
    throw Error(ErrorCode::IOError, "vertex must be the first PLY element");
  }
  const PlyElement& vertex = elements.front();
  std::array<int, 3> slot{-1, -1, -1};
  for (std::size_t i = 0; i < vertex.props.size(); ++i) {
    if (vertex.props[i].name == "x") slot[0] = static_cast<int>(i);
    if (vertex.props[i].name == "y") slot[1] = static_cast<int>(i);
    if (vertex.props[i].name == "z") slot[2] = static_cast<int>(i);
  }
  if (std::find(slot.begin(), slot.end(), -1) != slot.end()) throw Error(ErrorCode::IOError, "vertex lacks x/y/z");

  PointCloud cloud;
  cloud.id = path.stem().string();
  cloud.points.resize(vertex.count);
  if (format == "ascii") {
    for (std::size_t v = 0; v < vertex.count; ++v) {
      std::vector<double> values(vertex.props.size());
      for (auto& value : values) {
        if (!(in >> value)) throw Error(ErrorCode::IOError, "truncated ascii PLY");
      }
      cloud.points[v] = Vec3(values[slot[0]], values[slot[1]], values[slot[2]]);
    }
  } else {
    std::vector<std::size_t> offsets;
    std::size_t stride = 0;
    for (const auto& p : vertex.props) {
      offsets.push_back(stride);
      stride += scalar_size(p.type);
    }
    std::vector<char> buffer(stride * vertex.count);
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    if (in.gcount() != static_cast<std::streamsize>(buffer.size())) {
      throw Error(ErrorCode::IOError, "truncated binary PLY");
    }
    for (std::size_t v = 0; v < vertex.count; ++v) {
      const char* row = buffer.data() + v * stride;
      for (int a = 0; a < 3; ++a) {
        cloud.points[v][a] = read_scalar(row + offsets[slot[a]], vertex.props[slot[a]].type);
      }
    }
  }
  cloud.validate();
  return cloud;
}

void write_ply(const PointCloud& cloud, const std::filesystem::path& path, PlyEncoding encoding, PlyScalar scalar) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path.string());
  const char* type = scalar == PlyScalar::float32 ? "float" : "double";
  out << "ply\n"
      << "format " << (encoding == PlyEncoding::ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
      << "element vertex " << cloud.size() << "\n"
      << "property " << type << " x\nproperty " << type << " y\nproperty " << type << " z\n"
      << "end_header\n";
  if (encoding == PlyEncoding::ascii) {
    out.precision(scalar == PlyScalar::float32 ? 9 : 17);
    for (const auto& p : cloud.points) {
      if (scalar == PlyScalar::float32) {
        out << static_cast<float>(p.x()) << ' ' << static_cast<float>(p.y()) << ' ' << static_cast<float>(p.z()) << '\n';
      } else {
        out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
      }
    }
  } else {
    for (const auto& p : cloud.points) {
      for (int a = 0; a < 3; ++a) {
        if (scalar == PlyScalar::float32) {
          const float v = static_cast<float>(p[a]);
          out.write(reinterpret_cast<const char*>(&v), sizeof v);
        } else {
          const double v = p[a];
          out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
      }
    }
  }
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path.string());
}

PointCloud read_cloud(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ply") return read_ply(path);
  if (ext == ".xyz" || ext == ".txt") return read_xyz(path);
  throw Error(ErrorCode::IOError, "unknown cloud extension '" + ext + "'");
}

void write_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ply") return write_ply(cloud, path);
  if (ext == ".xyz" || ext == ".txt") return write_xyz(cloud, path);
  throw Error(ErrorCode::IOError, "unknown cloud extension '" + ext + "'");
}

namespace {

RoiLabel label_from_json(const nlohmann::json& j) {
  RoiLabel label;
  try {
    label.name = j.at("name").get<std::string>();
    const auto lo = j.at("box_min").get<std::vector<double>>();
    const auto hi = j.at("box_max").get<std::vector<double>>();
    if (lo.size() != 3 || hi.size() != 3) throw Error(ErrorCode::IOError, "box corners need 3 components");
    label.box_min = Vec3(lo[0], lo[1], lo[2]);
    label.box_max = Vec3(hi[0], hi[1], hi[2]);
    const auto side = j.at("cloud_side").get<std::string>();
    if (side == "face") {
      label.side = CloudSide::face;
    } else if (side == "bone") {
      label.side = CloudSide::bone;
    } else {
      throw Error(ErrorCode::IOError, "cloud_side must be face or bone");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IOError, std::string("malformed ROI label: ") + e.what());
  }
  if (!label.valid()) throw Error(ErrorCode::IOError, "ROI '" + label.name + "' has box_min > box_max");
  return label;
}

}  // namespace

std::vector<RoiLabel> read_roi_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IOError, path.string() + ": " + e.what());
  }
  std::vector<RoiLabel> labels;
  if (j.is_array()) {
    for (const auto& item : j) labels.push_back(label_from_json(item));
  } else {
    labels.push_back(label_from_json(j));
  }
  return labels;
}

void write_roi_labels(const std::vector<RoiLabel>& labels, const std::filesystem::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : labels) {
    arr.push_back({{"name", l.name},
                   {"box_min", {l.box_min.x(), l.box_min.y(), l.box_min.z()}},
                   {"box_max", {l.box_max.x(), l.box_max.y(), l.box_max.z()}},
                   {"cloud_side", l.side == CloudSide::face ? "face" : "bone"}});
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

}  // namespace morphflow::cloud
