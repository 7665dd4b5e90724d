#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "doctest.h"

#include "morphflow/cloud_io.hpp"
#include "morphflow/error.hpp"
#include "morphflow/pipeline.hpp"
#include "support.hpp"

using namespace morphflow;
using namespace morphflow::pipeline;
namespace fs = std::filesystem;

namespace {

/// Smallest identity-baseline chamfer over synthetic seeds 0..99 at n = 1024.
constexpr double kMinBaselineChamfer = 0.062396381813841224;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "morphflow_pipeline_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainConfig small_config(std::size_t n = 256) {
  auto cfg = TrainConfig::desk();
  cfg.n_points = n;
  cfg.stage1.window_size = 64;
  return cfg;
}

bool same_points(const Points& a, const nn::Matrix& b) {
  if (static_cast<Eigen::Index>(a.size()) != b.rows()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].transpose() != b.row(static_cast<Eigen::Index>(i))) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config parsing and presets") {
    const auto d = TrainConfig::parse("");
    CHECK(d.preset == "desk");
    CHECK(d.lr_drops == std::vector<std::size_t>{15, 23});
    CHECK(d.preprocess_points == 2048);
    const auto p = TrainConfig::parse("# comment\n[train]\npreset = \"paper\"\nseed = 9\n");
    CHECK(p.epochs == 60);
    CHECK(p.lr_drops == std::vector<std::size_t>{30, 45});
    CHECK(p.preprocess_points == 20480);
    CHECK(p.seed == 9);
    CHECK(p.lr == 0.01);
    CHECK(p.batch_size == 2);

    auto c = TrainConfig::desk();
    c.set("lambda", "0.5");
    c.set("k_lia", "6");
    c.set("noise_channels", "4");
    CHECK(c.weights.lambda == 0.5);
    CHECK(c.lia.k_local == 6);
    CHECK(c.stage1.noise_channels == 4);
    CHECK(c.lia.noise_channels == 4);
    const auto again = TrainConfig::parse(c.to_text());
    CHECK(again.to_text() == c.to_text());
    CHECK_THROWS_AS(c.set("no_such_key", "1"), Error);
    CHECK_THROWS_AS(c.set("epochs", "-3"), Error);
    CHECK_THROWS_AS(TrainConfig::parse("epochs = 0").validate(), Error);

    CHECK(d.lr_at(0) == d.lr);
    CHECK(d.lr_at(15) == doctest::Approx(d.lr * 0.1));
    CHECK(d.lr_at(29) == doctest::Approx(d.lr * 0.01));
  }

  TEST_CASE("synthetic pairs") {
    const auto a = synth_generate(5, 512, 3);
    const auto b = synth_generate(5, 512, 3);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a[i].face.points == b[i].face.points);
      CHECK(a[i].bone.points == b[i].bone.points);
      CHECK(a[i].face.size() == 512);
      CHECK(a[i].bone.size() == 512);
      for (std::size_t j = 0; j < 512; ++j) CHECK(a[i].face_radius[j] >= a[i].bone_radius[j]);
      CHECK(a[i].rois.size() == 4);
    }
    CHECK(a[0].face.points != a[1].face.points);
    CHECK_THROWS_AS(synth_generate(1, 100, 1), Error);
  }

  TEST_CASE("synthetic pairs are distinct shapes") {
    double smallest = 1e300;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto pair = synth_generate(seed, 1024, 1).front();
      smallest = std::min(smallest, distort::chamfer(pair.face.points, pair.bone.points));
    }
    CHECK(smallest > 0.05);
    CHECK(smallest == doctest::Approx(kMinBaselineChamfer).epsilon(1e-9));
  }

  TEST_CASE("pair files round trip") {
    const auto dir = scratch("pairs");
    const auto pairs = synth_generate(3, 300, 2);
    write_pairs(pairs, dir);
    const auto back = read_pairs(dir);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id < back[1].id);
    CHECK(back[0].face == pairs[0].face.points);
    CHECK(back[1].bone == pairs[1].bone.points);
    const auto rois = roi_indices(back[0]);
    REQUIRE(rois.size() == 2);
    for (const auto& r : rois) {
      CHECK(!r.face.empty());
      CHECK(!r.bone.empty());
    }
  }

  TEST_CASE("preprocessing") {
    auto cfg = TrainConfig::desk();
    cfg.preprocess_points = 500;
    // Evenly spaced ring: every point has the same neighbor distances.
    std::vector<Vec3> ring;
    for (int i = 0; i < 500; ++i) {
      const double t = 2.0 * std::numbers::pi * i / 500.0;
      ring.emplace_back(std::cos(t), std::sin(t), 0.0);
    }
    const cloud::PointCloud clean(ring);
    const auto same = preprocess_cloud(clean, cfg);
    CHECK(same.cloud.points == normalize(clean).cloud.points);

    auto pts = synth_generate(4, 1200, 1).front().face.points;
    for (auto& p : pts) p = 40.0 * p + Vec3(10, -5, 3);
    pts.push_back(Vec3(900, 900, 900));
    const auto out = preprocess_cloud(cloud::PointCloud(pts), cfg);
    CHECK(out.cloud.size() == 500);
    CHECK(out.provenance.after_outliers < 1201);
    CHECK(out.provenance.after_outliers > 1000);
    double max_norm = 0.0;
    for (const auto& p : out.cloud.points) max_norm = std::max(max_norm, p.norm());
    CHECK(max_norm <= 1.0 + 1e-9);
    const auto back = cloud::denormalize(out.cloud, out.provenance.center, out.provenance.scale);
    for (const auto& p : back.points) CHECK((p - Vec3(10, -5, 3)).norm() < 45.0);

    const auto dir = scratch("pre");
    cloud::write_xyz(cloud::PointCloud(pts), dir / "raw.xyz");
    const auto results = preprocess_run({dir / "raw.xyz"}, dir / "out", cfg);
    CHECK(cloud::read_ply(dir / "out" / "raw.ply").size() == 500);
    const auto prov = read_provenance(dir / "out" / "raw.json");
    CHECK(prov.center == results[0].provenance.center);
    CHECK(prov.scale == results[0].provenance.scale);
    CHECK_THROWS_AS(preprocess_cloud(cloud::PointCloud(std::vector<Vec3>(5, Vec3(1, 2, 3))), cfg), Error);
    CHECK_THROWS_AS(preprocess_run({dir / "missing.xyz"}, dir / "out", cfg), Error);
  }

  TEST_CASE("zero heads give the identity map") {
    const auto cfg = small_config();
    BidirModel model(cfg);
    const auto data = to_pair_data(synth_generate(6, 256, 1).front());
    const auto fwd = model_forward(model, data.face, data.bone, 3);
    CHECK(same_points(data.bone, fwd.face.fine.data()));
    CHECK(same_points(data.face, fwd.bone.fine.data()));
    CHECK(same_points(data.bone, fwd.face.coarse.data()));
    CHECK(fwd.face.fine.rows() == 256);

    // Random heads move points, deterministically.
    for (const auto& [name, v] : model.params.entries()) {
      if (name.find(".head.1.") != std::string::npos) Value(v).mutable_data().setConstant(0.01);
    }
    const auto a = model_forward(model, data.face, data.bone, 3);
    const auto b = model_forward(model, data.face, data.bone, 3);
    CHECK(a.face.fine.data() == b.face.fine.data());
    CHECK(!same_points(data.bone, a.face.fine.data()));
  }

  TEST_CASE("directions use separate parameters") {
    BidirModel model(small_config());
    std::set<std::string> prefixes;
    for (const auto& [name, v] : model.params.entries()) prefixes.insert(name.substr(0, name.find('.')));
    CHECK(prefixes == std::set<std::string>{"s1_b2f", "s1_f2b", "s2_bone", "s2_face"});
  }

  TEST_CASE("training smoke run") {
    auto cfg = small_config();
    cfg.epochs = 3;
    cfg.lr_drops = {};
    const auto pairs = synth_generate(7, 256, 2);
    std::vector<PairData> data;
    for (const auto& p : pairs) data.push_back(to_pair_data(p));

    BidirModel model(cfg);
    const auto dir = scratch("train");
    TrainOptions opt;
    opt.out_dir = dir;
    const auto result = train_run(model, data, opt);
    REQUIRE(result.curve.size() == 3);
    for (const auto& r : result.curve) CHECK(std::isfinite(r.loss));
    CHECK(result.curve.back().loss < result.curve.front().loss);
    CHECK(fs::exists(dir / "final.mfck"));
    CHECK(fs::exists(dir / "epoch_003.mfck"));

    BidirModel again(cfg);
    const auto repeat = train_run(again, data);
    for (std::size_t i = 0; i < 3; ++i) CHECK(repeat.curve[i].loss == result.curve[i].loss);
    CHECK(repeat.digest == result.digest);

    std::vector<PairData> one(data.begin(), data.begin() + 1);
    BidirModel lonely(cfg);
    CHECK_THROWS_AS(train_run(lonely, one), Error);
  }

  TEST_CASE("coarse-only mode") {
    auto cfg = small_config();
    cfg.coarse_only = true;
    BidirModel model(cfg);
    const auto data = to_pair_data(synth_generate(8, 256, 1).front());
    const auto fwd = model_forward(model, data.face, data.bone, 1);
    CHECK(fwd.face.fine.data() == fwd.face.coarse.data());
  }

  TEST_CASE("aux loss reads labels only when enabled") {
    auto cfg = small_config();
    auto data = to_pair_data(synth_generate(9, 256, 1).front());
    data.rois.clear();
    CHECK_NOTHROW(prepare_pair(data, cfg));
    cfg.weights.aux_enabled = true;
    CHECK_THROWS_AS(prepare_pair(data, cfg), Error);
  }

  TEST_CASE("checkpoints") {
    auto cfg = small_config();
    BidirModel model(cfg);
    for (const auto& [name, v] : model.params.entries()) {
      if (name.find(".head.1.") != std::string::npos) Value(v).mutable_data().setConstant(0.02);
    }
    const auto dir = scratch("ckpt");
    save_checkpoint(model, dir / "m.mfck", 4, "state");
    CheckpointMeta meta;
    const auto loaded = load_checkpoint(dir / "m.mfck", &meta);
    CHECK(meta.epoch == 4);
    CHECK(meta.rng_state == "state");
    CHECK(meta.digest == digest_of(model, 4, "state"));
    const auto data = to_pair_data(synth_generate(10, 256, 1).front());
    CHECK(model_forward(model, data.face, data.bone, 2).face.fine.data() ==
          model_forward(*loaded, data.face, data.bone, 2).face.fine.data());

    std::string bytes;
    {
      std::ifstream in(dir / "m.mfck", std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      bytes = ss.str();
    }
    std::ofstream(dir / "cut.mfck", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    try {
      load_checkpoint(dir / "cut.mfck");
      FAIL("expected CorruptCheckpoint");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::CorruptCheckpoint);
    }
    bytes[bytes.size() - 3] ^= 0x40;
    std::ofstream(dir / "flip.mfck", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(dir / "flip.mfck"), Error);

    auto other = cfg;
    other.stage1.head_hidden = 16;
    try {
      load_checkpoint(dir / "m.mfck", nullptr, &other);
      FAIL("expected ConfigMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigMismatch);
    }
    auto training_only = cfg;
    training_only.lr = 0.5;
    CHECK_NOTHROW(load_checkpoint(dir / "m.mfck", nullptr, &training_only));
  }

  TEST_CASE("inference") {
    auto cfg = small_config();
    BidirModel model(cfg);
    const auto dir = scratch("infer");
    save_checkpoint(model, dir / "zero.mfck");
    const auto pair = synth_generate(11, 256, 1).front();
    cloud::write_ply(pair.face, dir / "face.ply");
    const auto out = infer_run(dir / "zero.mfck", dir / "face.ply", Direction::face2bone, dir / "pred.ply", true);
    CHECK(out.fine.points == pair.face.points);
    CHECK(cloud::read_ply(dir / "pred.ply").points == out.fine.points);
    CHECK(fs::exists(dir / "pred_coarse.ply"));

    Provenance prov;
    prov.center = Vec3(1, 2, 3);
    prov.scale = 10.0;
    write_provenance(prov, dir / "prov.json");
    const auto scaled =
        infer_run(dir / "zero.mfck", dir / "face.ply", Direction::bone2face, dir / "mm.ply", false, dir / "prov.json");
    const auto mm = cloud::read_ply(dir / "mm.ply");
    CHECK((mm.points[0] - (10.0 * pair.face.points[0] + Vec3(1, 2, 3))).norm() < 1e-12);

    cloud::write_ply(synth_generate(11, 300, 1).front().face, dir / "wrong.ply");
    try {
      infer_run(dir / "zero.mfck", dir / "wrong.ply", Direction::face2bone, dir / "x.ply");
      FAIL("expected PresetMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::PresetMismatch);
    }
    CHECK(parse_direction("bone2face") == Direction::bone2face);
    CHECK_THROWS_AS(parse_direction("sideways"), Error);
  }

  TEST_CASE("evaluation") {
    auto cfg = small_config();
    BidirModel model(cfg);
    const auto pairs = synth_generate(12, 256, 3);
    std::vector<PairData> data;
    for (const auto& p : pairs) data.push_back(to_pair_data(p));

    EvalOptions opt;
    opt.with_rois = true;
    const auto report = evaluate_run(model, data, opt);
    std::ostringstream csv;
    report.write_csv(csv);
    const std::string text = csv.str();
    // Header plus pairs x directions x (all + 2 ROIs).
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 3 * 2 * 3);

    const auto whole = report.select("face2bone", "all");
    REQUIRE(whole.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(whole[i].cd == doctest::Approx(distort::chamfer(data[i].face, data[i].bone)));
      CHECK(whole[i].hd == doctest::Approx(distort::hausdorff(data[i].face, data[i].bone)));
    }

    std::vector<EvalPrediction> perfect;
    // Predictions are row-aligned with their source cloud.
    for (std::size_t k = 0; k < data.size(); ++k) {
      const auto& d = data[k];
      const auto& corr = pairs[k].correspondence;
      Points pred_face(d.bone.size()), pred_bone(d.face.size());
      for (std::size_t i = 0; i < corr.size(); ++i) {
        pred_face[i] = d.face[corr[i]];
        pred_bone[corr[i]] = d.bone[i];
      }
      perfect.push_back({d.id, pred_face, pred_bone, pred_face, pred_bone});
    }
    const auto zero = evaluate_predictions(data, perfect, opt);
    for (const auto& r : zero.rows) {
      CHECK(r.cd == 0.0);
      CHECK(r.hd == 0.0);
      CHECK(r.mped == 0.0);
      if (r.has_emd) CHECK(r.emd == 0.0);
      if (r.has_jsd) CHECK(r.jsd == 0.0);
    }
    CHECK(roi_chamfer(data, perfect) == 0.0);
  }

  TEST_CASE("rank-sum comparison of reports") {
    std::vector<PairData> data;
    for (const auto& p : synth_generate(13, 256, 5)) data.push_back(to_pair_data(p));
    std::vector<EvalPrediction> identity, perfect;
    for (const auto& d : data) {
      identity.push_back({d.id, d.bone, d.face, d.bone, d.face});
      perfect.push_back({d.id, d.face, d.bone, d.face, d.bone});
    }
    EvalOptions opt;
    opt.emd = false;
    const auto a = evaluate_predictions(data, identity, opt);
    const auto b = evaluate_predictions(data, perfect, opt);
    const auto p = compare_reports(a, b);
    REQUIRE(p.count("cd"));
    CHECK(p.at("cd") < 0.01);
    CHECK(compare_reports(a, a).at("cd") == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("full loss gradient on 32 points") {
    const auto r = gradcheck_loss(1, 32, true, 4);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.entries_checked > 100);
  }
}
