#include "morphflow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <Eigen/Geometry>

#include "json.hpp"

#include "morphflow/cloud_io.hpp"
#include "morphflow/error.hpp"
#include "morphflow/rng.hpp"

namespace morphflow::pipeline {

namespace {

using EIdx = Eigen::Index;
using nn::Matrix;

EIdx as_index(std::size_t v) { return static_cast<EIdx>(v); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' expects a real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorCode::InvalidArgument, "config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, std::string v) {
  v = trim(v);
  if (!v.empty() && v.front() == '[') v = v.substr(1);
  if (!v.empty() && v.back() == ']') v.pop_back();
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_count(key, item));
  }
  return out;
}

std::string fmt_real(double x) {
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

Matrix noise_matrix(std::size_t n, std::size_t channels, std::uint64_t seed) {
  return nn::gaussian_noise(as_index(n), as_index(channels), seed);
}

std::uint64_t fnv1a64(const char* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

class Reader {
 public:
  Reader(const std::string& data, std::size_t pos) : data_(data), pos_(pos) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read_doubles(double* dst, std::size_t count) {
    need(count * sizeof(double));
    std::memcpy(dst, data_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw Error(ErrorCode::CorruptCheckpoint, "checkpoint payload is truncated");
  }
  const std::string& data_;
  std::size_t pos_;
};

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.preset = "paper";
  c.epochs = 60;
  c.lr = 0.01;
  c.lr_drops = {30, 45};
  c.n_points = 20480;
  c.preprocess_points = 20480;
  c.stage1 = stage1::StageConfig::paper();
  c.lia = stage2::LiaConfig::paper();
  return c;
}

TrainConfig TrainConfig::for_preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw Error(ErrorCode::InvalidArgument, "unknown preset '" + name + "' (expected desk or paper)");
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = unquote(raw);
  if (key == "preset") {
    preset = v;
  } else if (key == "seed") {
    seed = parse_u64(key, v);
  } else if (key == "epochs") {
    epochs = parse_count(key, v);
  } else if (key == "lr") {
    lr = parse_real(key, v);
  } else if (key == "lr_drops") {
    lr_drops = parse_list(key, v);
  } else if (key == "lr_factor") {
    lr_factor = parse_real(key, v);
  } else if (key == "batch_size") {
    batch_size = parse_count(key, v);
  } else if (key == "adam_beta1") {
    adam_beta1 = parse_real(key, v);
  } else if (key == "adam_beta2") {
    adam_beta2 = parse_real(key, v);
  } else if (key == "adam_eps") {
    adam_eps = parse_real(key, v);
  } else if (key == "lambda") {
    weights.lambda = parse_real(key, v);
  } else if (key == "beta") {
    weights.beta = parse_real(key, v);
  } else if (key == "aux_enabled") {
    weights.aux_enabled = parse_bool(key, v);
  } else if (key == "k_local") {
    k_local = parse_count(key, v);
  } else if (key == "k_lia") {
    lia.k_local = parse_count(key, v);
  } else if (key == "k_far") {
    lia.k_far = parse_count(key, v);
  } else if (key == "theta_r") {
    lia.theta_r = parse_real(key, v);
  } else if (key == "noise_channels") {
    stage1.noise_channels = lia.noise_channels = parse_count(key, v);
  } else if (key == "n_points") {
    n_points = parse_count(key, v);
  } else if (key == "coarse_only") {
    coarse_only = parse_bool(key, v);
  } else if (key == "enc_channels") {
    stage1.enc_channels = parse_list(key, v);
  } else if (key == "enc_heads") {
    stage1.enc_heads = parse_list(key, v);
  } else if (key == "enc_blocks") {
    stage1.enc_blocks = parse_list(key, v);
  } else if (key == "dec_channels") {
    stage1.dec_channels = parse_list(key, v);
  } else if (key == "dec_heads") {
    stage1.dec_heads = parse_list(key, v);
  } else if (key == "dec_blocks") {
    stage1.dec_blocks = parse_list(key, v);
  } else if (key == "window_size") {
    stage1.window_size = parse_count(key, v);
  } else if (key == "grid_size") {
    stage1.grid_size = parse_real(key, v);
  } else if (key == "pool_stride") {
    stage1.pool_stride = parse_count(key, v);
  } else if (key == "head_hidden") {
    stage1.head_hidden = lia.head_hidden = parse_count(key, v);
  } else if (key == "order_seed") {
    stage1.order_seed = parse_u64(key, v);
  } else if (key == "pre_norm") {
    stage1.pre_norm = parse_bool(key, v);
  } else if (key == "lia_channels") {
    lia.channels = parse_count(key, v);
  } else if (key == "covariance_k") {
    lia.covariance_k = parse_count(key, v);
  } else if (key == "outlier_k") {
    outlier_k = parse_count(key, v);
  } else if (key == "outlier_std_ratio") {
    outlier_std_ratio = parse_real(key, v);
  } else if (key == "dbscan_eps") {
    dbscan_eps = parse_real(key, v);
  } else if (key == "dbscan_min_pts") {
    dbscan_min_pts = parse_count(key, v);
  } else if (key == "preprocess_points") {
    preprocess_points = parse_count(key, v);
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown config key '" + key + "'");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string preset_name = "desk";
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidArgument, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "preset") preset_name = unquote(value);
    entries.emplace_back(key, value);
  }
  TrainConfig cfg = for_preset(preset_name);
  for (const auto& [k, v] : entries) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::model_text() const {
  std::ostringstream out;
  out << "preset = " << preset << '\n'
      << "n_points = " << n_points << '\n'
      << "noise_channels = " << stage1.noise_channels << '\n'
      << "coarse_only = " << (coarse_only ? "true" : "false") << '\n'
      << "enc_channels = " << fmt_list(stage1.enc_channels) << '\n'
      << "enc_heads = " << fmt_list(stage1.enc_heads) << '\n'
      << "enc_blocks = " << fmt_list(stage1.enc_blocks) << '\n'
      << "dec_channels = " << fmt_list(stage1.dec_channels) << '\n'
      << "dec_heads = " << fmt_list(stage1.dec_heads) << '\n'
      << "dec_blocks = " << fmt_list(stage1.dec_blocks) << '\n'
      << "window_size = " << stage1.window_size << '\n'
      << "grid_size = " << fmt_real(stage1.grid_size) << '\n'
      << "pool_stride = " << stage1.pool_stride << '\n'
      << "head_hidden = " << stage1.head_hidden << '\n'
      << "order_seed = " << stage1.order_seed << '\n'
      << "pre_norm = " << (stage1.pre_norm ? "true" : "false") << '\n'
      << "lia_channels = " << lia.channels << '\n'
      << "k_lia = " << lia.k_local << '\n'
      << "k_far = " << lia.k_far << '\n'
      << "theta_r = " << fmt_real(lia.theta_r) << '\n'
      << "covariance_k = " << lia.covariance_k << '\n';
  return out.str();
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << model_text() << "seed = " << seed << '\n'
      << "epochs = " << epochs << '\n'
      << "lr = " << fmt_real(lr) << '\n'
      << "lr_drops = " << fmt_list(lr_drops) << '\n'
      << "lr_factor = " << fmt_real(lr_factor) << '\n'
      << "batch_size = " << batch_size << '\n'
      << "adam_beta1 = " << fmt_real(adam_beta1) << '\n'
      << "adam_beta2 = " << fmt_real(adam_beta2) << '\n'
      << "adam_eps = " << fmt_real(adam_eps) << '\n'
      << "lambda = " << fmt_real(weights.lambda) << '\n'
      << "beta = " << fmt_real(weights.beta) << '\n'
      << "aux_enabled = " << (weights.aux_enabled ? "true" : "false") << '\n'
      << "k_local = " << k_local << '\n'
      << "outlier_k = " << outlier_k << '\n'
      << "outlier_std_ratio = " << fmt_real(outlier_std_ratio) << '\n'
      << "dbscan_eps = " << fmt_real(dbscan_eps) << '\n'
      << "dbscan_min_pts = " << dbscan_min_pts << '\n'
      << "preprocess_points = " << preprocess_points << '\n';
  return out.str();
}

void TrainConfig::validate() const {
  if (preset != "desk" && preset != "paper") throw Error(ErrorCode::InvalidArgument, "preset must be desk or paper");
  if (epochs == 0) throw Error(ErrorCode::InvalidArgument, "epochs must be at least 1");
  if (!(lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "lr must be positive");
  if (!(lr_factor > 0.0)) throw Error(ErrorCode::InvalidArgument, "lr_factor must be positive");
  if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch_size must be positive");
  if (weights.lambda < 0.0 || weights.beta < 0.0) throw Error(ErrorCode::InvalidArgument, "lambda and beta must be >= 0");
  if (k_local == 0) throw Error(ErrorCode::InvalidArgument, "k_local must be positive");
  if (stage1.noise_channels != lia.noise_channels) {
    throw Error(ErrorCode::InvalidArgument, "stage noise channel counts differ");
  }
  stage1.validate();
  lia.validate();
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double r = lr;
  for (auto d : lr_drops) {
    if (epoch >= d) r *= lr_factor;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model

namespace {

std::size_t global_channels(const stage1::StageConfig& c) {
  return c.levels() > 1 ? c.dec_channels[0] : c.enc_channels[0];
}

}  // namespace

BidirModel::BidirModel(const TrainConfig& cfg)
    : config((cfg.validate(), cfg)),
      params(cfg.seed),
      coarse_to_face(stage1::Stage1Params::create(params, "s1_b2f", config.stage1)),
      coarse_to_bone(stage1::Stage1Params::create(params, "s1_f2b", config.stage1)),
      fine_face(stage2::Stage2Params::create(params, "s2_face", config.lia, global_channels(config.stage1))),
      fine_bone(stage2::Stage2Params::create(params, "s2_bone", config.lia, global_channels(config.stage1))) {}

void BidirModel::zero_heads() {
  for (const auto* mlp : {&coarse_to_face.head, &coarse_to_bone.head, &fine_face.head, &fine_bone.head}) {
    const auto& last = mlp->layers.back();
    Value w = last.weight, b = last.bias;
    w.mutable_data().setZero();
    if (b.defined()) b.mutable_data().setZero();
  }
}

NoiseSeeds NoiseSeeds::from(std::uint64_t seed) {
  return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), mix_seed(seed, 4)};
}

namespace {

DirectionOutput run_direction(const BidirModel& model, const stage1::Stage1Params& s1, const stage2::Stage2Params& s2,
                              const Points& source, const stage1::CoarsePlan& plan, std::uint64_t coarse_seed,
                              std::uint64_t fine_seed) {
  const TrainConfig& cfg = model.config;
  const std::size_t n = source.size();
  const auto coarse = stage1::coarse_forward(source, plan, s1, cfg.stage1, noise_matrix(n, cfg.stage1.noise_channels, coarse_seed));
  DirectionOutput out;
  out.coarse = coarse.warped;
  out.coarse_field = coarse.displacement;
  out.f_global = coarse.f_global;
  if (cfg.coarse_only) {
    out.fine = coarse.warped;
    out.fine_field = Value::constant(Matrix::Zero(as_index(n), 3));
  } else {
    const auto fine = stage2::fine_forward(coarse.warped, coarse.f_global, s2, cfg.lia,
                                           noise_matrix(n, cfg.lia.noise_channels, fine_seed));
    out.fine = fine.warped;
    out.fine_field = fine.displacement;
  }
  out.total_field = out.fine - Value::constant(stage1::points_matrix(source));
  return out;
}

}  // namespace

ForwardResult model_forward(const BidirModel& model, const Points& face, const Points& bone, std::uint64_t seed,
                            const stage1::CoarsePlan* plan_from_face, const stage1::CoarsePlan* plan_from_bone) {
  if (face.size() != bone.size()) throw Error(ErrorCode::SizeMismatch, "face and bone clouds differ in size");
  stage1::CoarsePlan local_face, local_bone;
  if (!plan_from_face) {
    local_face = stage1::build_plan(face, model.config.stage1);
    plan_from_face = &local_face;
  }
  if (!plan_from_bone) {
    local_bone = stage1::build_plan(bone, model.config.stage1);
    plan_from_bone = &local_bone;
  }
  const NoiseSeeds seeds = NoiseSeeds::from(seed);
  ForwardResult r;
  r.face = run_direction(model, model.coarse_to_face, model.fine_face, bone, *plan_from_bone, seeds.coarse_face,
                         seeds.fine_face);
  r.bone = run_direction(model, model.coarse_to_bone, model.fine_bone, face, *plan_from_face, seeds.coarse_bone,
                         seeds.fine_bone);
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Bump {
  Vec3 center;
  double amplitude, width;
};

double angular_gaussian(const Vec3& u, const Vec3& c, double width) {
  const double ang = std::acos(std::clamp(u.dot(c), -1.0, 1.0));
  return std::exp(-0.5 * ang * ang / (width * width));
}

Vec3 random_unit(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-9) v = Vec3(rng.normal(), rng.normal(), rng.normal());
  return v.normalized();
}

double softplus(double x, double sharpness) {
  const double t = sharpness * x;
  return (t > 30.0 ? t : std::log1p(std::exp(t))) / sharpness;
}

const Vec3 kNoseDirection = Vec3(0.0, 0.25, 1.0).normalized();
const Vec3 kLipDirection = Vec3(0.0, -0.45, 1.0).normalized();
constexpr double kNoseCap = 0.30;
constexpr double kLipCap = 0.25;
// Soft tissue thickness is a fixed function of direction and bone relief, so
// the face is determined by the bone.
constexpr double kThicknessBase = 0.24;
constexpr double kNoseHeight = 0.5;
constexpr double kLipHeight = 0.16;
constexpr double kBumpCoupling = 0.6;

cloud::RoiLabel box_label(const std::string& name, cloud::CloudSide side, const Points& pts, const IndexList& members) {
  Points sel;
  for (Index i : members) sel.push_back(pts[i]);
  const auto [lo, hi] = cloud::bounds(sel);
  cloud::RoiLabel l;
  l.name = name;
  l.side = side;
  l.box_min = lo;
  l.box_max = hi;
  return l;
}

}  // namespace

std::vector<SyntheticPair> synth_generate(std::uint64_t seed, std::size_t n_points, std::size_t n_pairs) {
  if (n_points < 256) throw Error(ErrorCode::InvalidArgument, "synthetic clouds need at least 256 points");
  std::vector<SyntheticPair> pairs;
  pairs.reserve(n_pairs);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t p = 0; p < n_pairs; ++p) {
    SyntheticPair pair;
    pair.seed = mix_seed(seed, 0x5e11, p);
    std::ostringstream id;
    id << "pair_" << std::setw(3) << std::setfill('0') << p;
    pair.id = id.str();
    Rng rng(pair.seed);

    std::vector<Bump> bumps(6 + rng.below(5));
    for (auto& b : bumps) b = {random_unit(rng), rng.uniform(-0.08, 0.22), rng.uniform(0.3, 0.6)};
    const Vec3 stretch(rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15));
    const Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3d rot = q.normalized().toRotationMatrix();
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

    Points bone_raw(n_points), face_raw(n_points);
    std::vector<Vec3> dirs(n_points);
    pair.bone_radius.resize(n_points);
    pair.face_radius.resize(n_points);
    for (std::size_t i = 0; i < n_points; ++i) {
      const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n_points);
      const double rr = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * static_cast<double>(i) + phase;
      const Vec3 u = (rot * Vec3(rr * std::cos(phi), rr * std::sin(phi), z)).normalized();
      dirs[i] = u;
      double bump = 0.0;
      for (const auto& b : bumps) bump += b.amplitude * angular_gaussian(u, b.center, b.width);
      const double rb = 1.0 + bump;
      const double raw = kThicknessBase + kNoseHeight * angular_gaussian(u, kNoseDirection, 0.25) +
                         kLipHeight * angular_gaussian(u, kLipDirection, 0.2) - kBumpCoupling * bump;
      const double t = 0.03 + softplus(raw, 20.0);
      pair.bone_radius[i] = rb;
      pair.face_radius[i] = rb + t;
      bone_raw[i] = (rb * u).cwiseProduct(stretch);
      face_raw[i] = ((rb + t) * u).cwiseProduct(stretch);
    }

    IndexList perm(n_points);
    for (std::size_t i = 0; i < n_points; ++i) perm[i] = i;
    shuffle(perm, rng);
    Points face_perm(n_points);
    for (std::size_t i = 0; i < n_points; ++i) face_perm[perm[i]] = face_raw[i];
    pair.correspondence = perm;

    pair.bone = cloud::normalize(cloud::PointCloud(bone_raw, pair.id + "_bone")).cloud;
    pair.face = cloud::normalize(cloud::PointCloud(face_perm, pair.id + "_face")).cloud;
    pair.bone.id = pair.id + "_bone";
    pair.face.id = pair.id + "_face";

    for (const auto& [name, dir, cap] : {std::tuple{"nose", kNoseDirection, kNoseCap}, std::tuple{"lip", kLipDirection, kLipCap}}) {
      IndexList bone_members, face_members;
      for (std::size_t i = 0; i < n_points; ++i) {
        if (std::acos(std::clamp(dirs[i].dot(dir), -1.0, 1.0)) <= cap) {
          bone_members.push_back(i);
          face_members.push_back(perm[i]);
        }
      }
      if (bone_members.empty()) continue;
      pair.rois.push_back(box_label(name, cloud::CloudSide::bone, pair.bone.points, bone_members));
      pair.rois.push_back(box_label(name, cloud::CloudSide::face, pair.face.points, face_members));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

void write_pairs(const std::vector<SyntheticPair>& pairs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& p : pairs) {
    cloud::write_ply(p.face, dir / (p.id + "_face.ply"));
    cloud::write_ply(p.bone, dir / (p.id + "_bone.ply"));
    cloud::write_roi_labels(p.rois, dir / (p.id + "_roi.json"));
  }
}

PairData to_pair_data(const SyntheticPair& pair) {
  return {pair.id, pair.face.points, pair.bone.points, pair.rois};
}

std::vector<PairData> read_pairs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::IOError, dir.string() + " is not a directory");
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    const std::string suffix = "_face.ply";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<PairData> out;
  for (const auto& id : ids) {
    PairData p;
    p.id = id;
    p.face = cloud::read_ply(dir / (id + "_face.ply")).points;
    const auto bone_path = dir / (id + "_bone.ply");
    if (!std::filesystem::exists(bone_path)) throw Error(ErrorCode::IOError, "missing " + bone_path.string());
    p.bone = cloud::read_ply(bone_path).points;
    const auto roi_path = dir / (id + "_roi.json");
    if (std::filesystem::exists(roi_path)) p.rois = cloud::read_roi_labels(roi_path);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<distort::RoiIndexPair> roi_indices(const PairData& pair) {
  std::vector<distort::RoiIndexPair> out;
  const cloud::PointCloud face(pair.face), bone(pair.bone);
  for (const auto& l : pair.rois) {
    if (l.side != cloud::CloudSide::face) continue;
    for (const auto& m : pair.rois) {
      if (m.side != cloud::CloudSide::bone || m.name != l.name) continue;
      out.push_back({l.name, cloud::extract_roi(face, l), cloud::extract_roi(bone, m)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

PreprocessResult preprocess_cloud(const cloud::PointCloud& input, const TrainConfig& cfg) {
  input.validate();
  PreprocessResult res;
  res.provenance.source = input.id;
  res.provenance.input_points = input.size();
  if (input.size() <= cfg.outlier_k) {
    throw Error(ErrorCode::EmptyAfterFiltering, input.id + ": " + std::to_string(input.size()) +
                                                    " points is too few for outlier removal");
  }
  const auto filtered = cloud::remove_statistical_outliers(input, cfg.outlier_k, cfg.outlier_std_ratio);
  res.provenance.after_outliers = filtered.size();
  double eps = cfg.dbscan_eps;
  if (!(eps > 0.0)) {
    const auto nn1 = cloud::knn_graph(filtered.points, 1);
    double mean = 0.0;
    for (std::size_t i = 0; i < filtered.size(); ++i) mean += (filtered.points[nn1[i]] - filtered.points[i]).norm();
    eps = 3.0 * mean / static_cast<double>(filtered.size());
  }
  const auto clustered = cloud::dbscan_filter(filtered, eps, cfg.dbscan_min_pts);
  res.provenance.after_dbscan = clustered.size();
  if (clustered.size() < cfg.preprocess_points) {
    throw Error(ErrorCode::EmptyAfterFiltering, input.id + ": " + std::to_string(clustered.size()) +
                                                    " points left after filtering, need " +
                                                    std::to_string(cfg.preprocess_points));
  }
  const auto norm = cloud::normalize(clustered);
  auto idx = cloud::farthest_point_sample(norm.cloud, cfg.preprocess_points, 0);
  std::sort(idx.begin(), idx.end());
  res.cloud = norm.cloud.subset(idx);
  res.cloud.id = input.id;
  res.provenance.center = norm.center;
  res.provenance.scale = norm.scale;
  res.provenance.output_points = res.cloud.size();
  return res;
}

void write_provenance(const Provenance& p, const std::filesystem::path& path) {
  nlohmann::json j = {{"source", p.source},
                      {"center", {p.center.x(), p.center.y(), p.center.z()}},
                      {"scale", p.scale},
                      {"input_points", p.input_points},
                      {"after_outliers", p.after_outliers},
                      {"after_dbscan", p.after_dbscan},
                      {"output_points", p.output_points}};
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOError, "cannot write " + path.string());
  out << std::setprecision(17) << j.dump(2) << '\n';
}

Provenance read_provenance(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOError, "cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    Provenance p;
    p.source = j.value("source", std::string());
    const auto c = j.at("center").get<std::vector<double>>();
    if (c.size() != 3) throw Error(ErrorCode::IOError, "center needs 3 components");
    p.center = Vec3(c[0], c[1], c[2]);
    p.scale = j.at("scale").get<double>();
    p.input_points = j.value("input_points", std::size_t{0});
    p.after_outliers = j.value("after_outliers", std::size_t{0});
    p.after_dbscan = j.value("after_dbscan", std::size_t{0});
    p.output_points = j.value("output_points", std::size_t{0});
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IOError, path.string() + ": " + e.what());
  }
}

std::vector<PreprocessResult> preprocess_run(const std::vector<std::filesystem::path>& inputs,
                                             const std::filesystem::path& out_dir, const TrainConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  std::vector<PreprocessResult> results;
  for (const auto& path : inputs) {
    auto cloud_in = cloud::read_cloud(path);
    cloud_in.id = path.stem().string();
    auto res = preprocess_cloud(cloud_in, cfg);
    res.provenance.source = path.string();
    cloud::write_ply(res.cloud, out_dir / (path.stem().string() + ".ply"));
    write_provenance(res.provenance, out_dir / (path.stem().string() + ".json"));
    results.push_back(std::move(res));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Training

PreparedPair prepare_pair(const PairData& pair, const TrainConfig& cfg) {
  if (pair.face.size() != pair.bone.size()) throw Error(ErrorCode::SizeMismatch, pair.id + ": face and bone sizes differ");
  PreparedPair p;
  p.data = pair;
  p.plan_from_face = stage1::build_plan(pair.face, cfg.stage1);
  p.plan_from_bone = stage1::build_plan(pair.bone, cfg.stage1);
  p.face_knn = cloud::knn_table(pair.face, pair.face, cfg.k_local);
  p.bone_knn = cloud::knn_table(pair.bone, pair.bone, cfg.k_local);
  if (cfg.weights.aux_enabled) {
    p.rois = roi_indices(pair);
    if (p.rois.empty()) throw Error(ErrorCode::MissingLabel, pair.id + ": auxiliary loss enabled but no ROI labels");
  }
  return p;
}

LossBreakdown compute_loss(const BidirModel& model, const PreparedPair& pair, const ForwardResult& fwd) {
  const TrainConfig& cfg = model.config;
  const Value face = Value::constant(stage1::points_matrix(pair.data.face));
  const Value bone = Value::constant(stage1::points_matrix(pair.data.bone));
  LossBreakdown out;
  const auto sim = distort::similarity_losses(fwd.face.coarse, fwd.bone.coarse, fwd.face.fine, fwd.bone.fine, face, bone);
  out.parts.coarse = sim.coarse;
  out.parts.fine = sim.fine;
  out.parts.reg = distort::cross_reg(face, bone, fwd.face.coarse, fwd.bone.coarse, fwd.face.fine, fwd.bone.fine);
  out.parts.local =
      distort::local_density_loss(pair.data.face, fwd.face.fine, cfg.k_local, cfg.weights.beta, &pair.face_knn) +
      distort::local_density_loss(pair.data.bone, fwd.bone.fine, cfg.k_local, cfg.weights.beta, &pair.bone_knn);
  if (cfg.weights.aux_enabled) {
    out.parts.aux = distort::aux_roi_loss(pair.rois, face, bone, fwd.bone.fine, fwd.face.fine);
  }
  out.total = distort::total_loss(out.parts, cfg.weights);
  return out;
}

TrainResult train_run(BidirModel& model, const std::vector<PairData>& train, const TrainOptions& options) {
  const TrainConfig& cfg = model.config;
  cfg.validate();
  if (train.size() < 2) throw Error(ErrorCode::InvalidArgument, "training needs at least 2 pairs");
  for (const auto& p : train) {
    if (p.face.size() != cfg.n_points || p.bone.size() != cfg.n_points) {
      throw Error(ErrorCode::PresetMismatch, p.id + ": expected " + std::to_string(cfg.n_points) + " points per cloud");
    }
  }
  std::vector<PreparedPair> prepared;
  prepared.reserve(train.size());
  for (const auto& p : train) prepared.push_back(prepare_pair(p, cfg));

  nn::Adam adam({cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps});
  Rng rng(mix_seed(cfg.seed, 0x7a11));
  IndexList order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (options.out_dir) std::filesystem::create_directories(*options.out_dir);

  TrainResult result;
  std::size_t step = 0;
  auto rng_text = [&rng] {
    std::ostringstream ss;
    ss << rng.engine();
    return ss.str();
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    shuffle(order, rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      model.params.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        const PreparedPair& pair = prepared[order[s]];
        const auto fwd = model_forward(model, pair.data.face, pair.data.bone, mix_seed(cfg.seed, epoch, step, s - start),
                                       &pair.plan_from_face, &pair.plan_from_bone);
        LossBreakdown loss;
        try {
          loss = compute_loss(model, pair, fwd);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::NonFinite) throw;
          throw Error(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                                    " pair " + pair.data.id + ": " + e.what());
        }
        const double value = loss.total.item();
        if (!std::isfinite(value)) {
          throw Error(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                                    " pair " + pair.data.id + ": total loss is not finite");
        }
        nn::backward(loss.total, 1.0 / static_cast<double>(end - start));
        batch_loss += value;
      }
      adam.step(model.params, lr);
      StepRecord rec{epoch, step, lr, batch_loss / static_cast<double>(end - start)};
      result.curve.push_back(rec);
      if (options.on_step) options.on_step(rec);
      epoch_sum += batch_loss;
      ++step;
    }
    const double mean = epoch_sum / static_cast<double>(order.size());
    result.epoch_loss.push_back(mean);
    if (options.on_epoch) options.on_epoch(epoch, mean);
    const bool boundary = std::find(cfg.lr_drops.begin(), cfg.lr_drops.end(), epoch + 1) != cfg.lr_drops.end();
    if (options.out_dir && (boundary || epoch + 1 == cfg.epochs)) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << (epoch + 1) << ".mfck";
      save_checkpoint(model, *options.out_dir / name.str(), epoch + 1, rng_text());
    }
  }
  result.digest = digest_of(model, cfg.epochs, rng_text());
  if (options.out_dir) save_checkpoint(model, *options.out_dir / "final.mfck", cfg.epochs, rng_text());
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string checkpoint_payload(const BidirModel& model, std::size_t epoch, const std::string& rng_state) {
  std::string payload;
  put_string(payload, model.config.to_text());
  put<std::uint64_t>(payload, epoch);
  put_string(payload, rng_state);
  const auto& entries = model.params.entries();
  put<std::uint64_t>(payload, entries.size());
  for (const auto& [name, v] : entries) {
    put_string(payload, name);
    put<std::uint64_t>(payload, static_cast<std::uint64_t>(v.rows()));
    put<std::uint64_t>(payload, static_cast<std::uint64_t>(v.cols()));
    payload.append(reinterpret_cast<const char*>(v.data().data()), static_cast<std::size_t>(v.data().size()) * sizeof(double));
  }
  return payload;
}

}  // namespace

std::string checkpoint_bytes(const BidirModel& model, std::size_t epoch, const std::string& rng_state) {
  const std::string payload = checkpoint_payload(model, epoch, rng_state);
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, fnv1a64(payload.data(), payload.size()));
  out += payload;
  return out;
}

std::string digest_of(const BidirModel& model, std::size_t epoch, const std::string& rng_state) {
  const std::string payload = checkpoint_payload(model, epoch, rng_state);
  return hex64(fnv1a64(payload.data(), payload.size()));
}

void save_checkpoint(const BidirModel& model, const std::filesystem::path& path, std::size_t epoch,
                     const std::string& rng_state) {
  const std::string bytes = checkpoint_bytes(model, epoch, rng_state);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IOError, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IOError, "write failed for " + path.string());
}

std::unique_ptr<BidirModel> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta,
                                            const TrainConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOError, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + " is not a checkpoint");
  }
  Reader head(bytes, 4);
  const auto version = head.get<std::uint32_t>();
  if (version != kVersion) throw Error(ErrorCode::CorruptCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  const auto digest = head.get<std::uint64_t>();
  if (fnv1a64(bytes.data() + header, bytes.size() - header) != digest) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": digest mismatch");
  }
  Reader r(bytes, header);
  TrainConfig cfg;
  try {
    cfg = TrainConfig::parse(r.get_string());
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("embedded config unreadable: ") + e.what());
  }
  if (expected && expected->model_text() != cfg.model_text()) {
    throw Error(ErrorCode::ConfigMismatch, path.string() + " was trained with a different model configuration");
  }
  const auto epoch = r.get<std::uint64_t>();
  const std::string rng_state = r.get_string();
  auto model = std::make_unique<BidirModel>(cfg);
  const auto count = r.get<std::uint64_t>();
  const auto& entries = model->params.entries();
  if (count != entries.size()) throw Error(ErrorCode::CorruptCheckpoint, "parameter count differs from the config");
  for (const auto& [name, v] : entries) {
    const std::string stored = r.get_string();
    const auto rows = r.get<std::uint64_t>(), cols = r.get<std::uint64_t>();
    if (stored != name || rows != static_cast<std::uint64_t>(v.rows()) || cols != static_cast<std::uint64_t>(v.cols())) {
      throw Error(ErrorCode::CorruptCheckpoint, "parameter '" + stored + "' does not match '" + name + "'");
    }
    Value slot = v;
    r.read_doubles(slot.mutable_data().data(), static_cast<std::size_t>(rows * cols));
  }
  if (!r.done()) throw Error(ErrorCode::CorruptCheckpoint, "trailing bytes after the parameters");
  if (meta) {
    meta->epoch = epoch;
    meta->rng_state = rng_state;
    meta->digest = hex64(digest);
  }
  return model;
}

nn::GradCheckResult gradcheck_loss(std::uint64_t seed, std::size_t n_points, bool aux,
                                   std::size_t max_entries_per_param) {
  if (n_points < 32) throw Error(ErrorCode::InvalidArgument, "gradient check needs at least 32 points");
  const auto synth = synth_generate(seed, 256, 1).front();
  PairData pair;
  pair.id = synth.id;
  const std::size_t stride = 256 / n_points;
  IndexList face_idx, bone_idx;
  for (std::size_t i = 0; i < n_points; ++i) {
    bone_idx.push_back(i * stride);
    face_idx.push_back(synth.correspondence[i * stride]);
  }
  for (Index i : face_idx) pair.face.push_back(synth.face.points[i]);
  for (Index i : bone_idx) pair.bone.push_back(synth.bone.points[i]);
  // Boxes around the first eight points of each side form a probe ROI.
  const auto [flo, fhi] = cloud::bounds(std::vector<Vec3>(pair.face.begin(), pair.face.begin() + 8));
  const auto [blo, bhi] = cloud::bounds(std::vector<Vec3>(pair.bone.begin(), pair.bone.begin() + 8));
  pair.rois = {{"probe", flo, fhi, cloud::CloudSide::face}, {"probe", blo, bhi, cloud::CloudSide::bone}};

  TrainConfig cfg = TrainConfig::desk();
  cfg.seed = seed;
  cfg.n_points = n_points;
  cfg.k_local = std::min<std::size_t>(cfg.k_local, n_points / 2);
  cfg.weights.aux_enabled = aux;
  BidirModel model(cfg);
  Rng rng(mix_seed(seed, 0x6c));
  for (const auto& [name, v] : model.params.entries()) {
    Value slot = v;
    for (Eigen::Index i = 0; i < slot.data().size(); ++i) {
      if (slot.data()(i) == 0.0) slot.mutable_data()(i) = 0.05 * rng.normal();
    }
  }
  const PreparedPair prepared = prepare_pair(pair, cfg);
  auto build = [&] {
    const auto fwd = model_forward(model, pair.face, pair.bone, seed, &prepared.plan_from_face, &prepared.plan_from_bone);
    return compute_loss(model, prepared, fwd).total;
  };
  return nn::grad_check(build, model.params, 1e-4, max_entries_per_param);
}

// ---------------------------------------------------------------------------
// Inference and evaluation

Direction parse_direction(const std::string& s) {
  if (s == "face2bone") return Direction::face2bone;
  if (s == "bone2face") return Direction::bone2face;
  throw Error(ErrorCode::InvalidArgument, "direction must be face2bone or bone2face");
}

std::string to_string(Direction d) { return d == Direction::face2bone ? "face2bone" : "bone2face"; }

InferOutput infer(const BidirModel& model, const cloud::PointCloud& input, Direction dir, std::uint64_t seed) {
  input.validate();
  if (input.size() != model.config.n_points) {
    throw Error(ErrorCode::PresetMismatch, "model expects " + std::to_string(model.config.n_points) + " points, input has " +
                                               std::to_string(input.size()));
  }
  const auto plan = stage1::build_plan(input.points, model.config.stage1);
  const NoiseSeeds seeds = NoiseSeeds::from(seed);
  const bool to_bone = dir == Direction::face2bone;
  const auto out = run_direction(model, to_bone ? model.coarse_to_bone : model.coarse_to_face,
                                 to_bone ? model.fine_bone : model.fine_face, input.points, plan,
                                 to_bone ? seeds.coarse_bone : seeds.coarse_face, to_bone ? seeds.fine_bone : seeds.fine_face);
  InferOutput res;
  res.fine = cloud::PointCloud::from_matrix(out.fine.data(), input.id + (to_bone ? "_bone" : "_face"));
  res.coarse = cloud::PointCloud::from_matrix(out.coarse.data(), res.fine.id + "_coarse");
  return res;
}

InferOutput infer_run(const std::filesystem::path& checkpoint, const std::filesystem::path& input, Direction dir,
                      const std::filesystem::path& out, bool emit_coarse,
                      const std::optional<std::filesystem::path>& provenance, std::uint64_t seed) {
  const auto model = load_checkpoint(checkpoint);
  auto in = cloud::read_cloud(input);
  in.id = input.stem().string();
  InferOutput res = infer(*model, in, dir, seed);
  if (provenance) {
    const Provenance p = read_provenance(*provenance);
    res.fine = cloud::denormalize(res.fine, p.center, p.scale);
    res.coarse = cloud::denormalize(res.coarse, p.center, p.scale);
  }
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  cloud::write_cloud(res.fine, out);
  if (emit_coarse) {
    const auto coarse_path = out.parent_path() / (out.stem().string() + "_coarse" + out.extension().string());
    cloud::write_cloud(res.coarse, coarse_path);
  }
  return res;
}

std::vector<EvalPrediction> predict_pairs(const BidirModel& model, const std::vector<PairData>& pairs,
                                          std::uint64_t seed) {
  std::vector<EvalPrediction> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto fwd = model_forward(model, p.face, p.bone, seed);
    EvalPrediction e;
    e.id = p.id;
    e.pred_face = distort::to_points(fwd.face.fine.data());
    e.pred_bone = distort::to_points(fwd.bone.fine.data());
    e.coarse_face = distort::to_points(fwd.face.coarse.data());
    e.coarse_bone = distort::to_points(fwd.bone.coarse.data());
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

Points gather(const Points& pts, const IndexList& idx) {
  Points out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(pts[i]);
  return out;
}

}  // namespace

distort::MetricReport evaluate_predictions(const std::vector<PairData>& pairs, const std::vector<EvalPrediction>& preds,
                                           const EvalOptions& options) {
  if (pairs.size() != preds.size()) throw Error(ErrorCode::SizeMismatch, "one prediction per pair expected");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&pairs](std::size_t a, std::size_t b) { return pairs[a].id < pairs[b].id; });
  distort::MetricReport report;
  for (std::size_t k : order) {
    const PairData& pair = pairs[k];
    const EvalPrediction& pred = preds[k];
    for (const auto dir : {Direction::face2bone, Direction::bone2face}) {
      const bool to_bone = dir == Direction::face2bone;
      const Points& target = to_bone ? pair.bone : pair.face;
      const Points& predicted = to_bone ? pred.pred_bone : pred.pred_face;
      distort::MetricRow row;
      row.sample = pair.id;
      row.direction = to_string(dir);
      row.region = "all";
      row.cd = distort::chamfer(predicted, target);
      row.hd = distort::hausdorff(predicted, target);
      row.jsd = distort::jsd(predicted, target);
      row.mped = distort::mped(predicted, target);
      row.has_emd = options.emd && predicted.size() == target.size();
      if (row.has_emd) row.emd = distort::emd(predicted, target, distort::EmdMode::approx);
      report.rows.push_back(row);
    }
    if (!options.with_rois) continue;
    for (const auto& roi : roi_indices(pair)) {
      for (const auto dir : {Direction::face2bone, Direction::bone2face}) {
        const bool to_bone = dir == Direction::face2bone;
        const Points target = to_bone ? gather(pair.bone, roi.bone) : gather(pair.face, roi.face);
        const Points predicted = to_bone ? gather(pred.pred_bone, roi.face) : gather(pred.pred_face, roi.bone);
        distort::MetricRow row;
        row.sample = pair.id;
        row.direction = to_string(dir);
        row.region = roi.name;
        row.cd = distort::chamfer(predicted, target);
        row.hd = distort::hausdorff(predicted, target);
        row.mped = distort::mped(predicted, target);
        row.has_emd = row.has_jsd = false;
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

distort::MetricReport evaluate_run(const BidirModel& model, const std::vector<PairData>& pairs,
                                   const EvalOptions& options) {
  return evaluate_predictions(pairs, predict_pairs(model, pairs), options);
}

std::map<std::string, double> compare_reports(const distort::MetricReport& a, const distort::MetricReport& b,
                                              const std::string& region) {
  const auto ra = a.select("", region), rb = b.select("", region);
  std::map<std::string, std::vector<double>> va, vb;
  for (const auto& r : ra) {
    va["cd"].push_back(r.cd);
    va["hd"].push_back(r.hd);
    va["mped"].push_back(r.mped);
    if (r.has_emd) va["emd"].push_back(r.emd);
    if (r.has_jsd) va["jsd"].push_back(r.jsd);
  }
  for (const auto& r : rb) {
    vb["cd"].push_back(r.cd);
    vb["hd"].push_back(r.hd);
    vb["mped"].push_back(r.mped);
    if (r.has_emd) vb["emd"].push_back(r.emd);
    if (r.has_jsd) vb["jsd"].push_back(r.jsd);
  }
  std::map<std::string, double> out;
  for (const auto& [metric, values] : va) {
    auto it = vb.find(metric);
    if (it == vb.end() || values.size() < 5 || it->second.size() < 5) continue;
    out[metric] = distort::ranksum_test(values, it->second);
  }
  return out;
}

double roi_chamfer(const std::vector<PairData>& pairs, const std::vector<EvalPrediction>& preds) {
  if (pairs.size() != preds.size()) throw Error(ErrorCode::SizeMismatch, "one prediction per pair expected");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    for (const auto& roi : roi_indices(pairs[k])) {
      sum += distort::chamfer(gather(preds[k].pred_bone, roi.face), gather(pairs[k].bone, roi.bone));
      sum += distort::chamfer(gather(preds[k].pred_face, roi.bone), gather(pairs[k].face, roi.face));
      count += 2;
    }
  }
  if (count == 0) throw Error(ErrorCode::MissingLabel, "no ROI labels on the evaluated pairs");
  return sum / static_cast<double>(count);
}

}  // namespace morphflow::pipeline
