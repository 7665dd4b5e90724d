#include <algorithm>
#include <cmath>

#include "doctest.h"

#include "morphflow/error.hpp"
#include "morphflow/rng.hpp"
#include "morphflow/stage1.hpp"
#include "support.hpp"

using namespace morphflow;
using namespace morphflow::stage1;
using morphflow::testing::random_points;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

void randomize(nn::ParamSet& params, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (const auto& [name, v] : params.entries()) {
    Value p = v;
    for (Eigen::Index i = 0; i < p.data().size(); ++i) p.mutable_data().data()[i] = scale * rng.uniform(-1.0, 1.0);
  }
}

StageConfig tiny_config() {
  StageConfig cfg;
  cfg.enc_channels = {8, 8};
  cfg.enc_heads = {2, 2};
  cfg.enc_blocks = {1, 1};
  cfg.dec_channels = {8};
  cfg.dec_heads = {2};
  cfg.dec_blocks = {1};
  cfg.window_size = 8;
  cfg.noise_channels = 0;
  cfg.head_hidden = 8;
  return cfg;
}

}  // namespace

TEST_SUITE("stage1") {
  TEST_CASE("xcpe") {
    nn::ParamSet params(1);
    auto net = nn::Mlp::create(params, "x", 3, {4, 4});
    const Value f = Value::constant(random_matrix(6, 4, 2));
    const Matrix offsets = random_matrix(6, 3, 3);
    params.zero_fill("x");
    CHECK(xcpe(f, offsets, net).data() == f.data());

    // Plans center the offsets, so a rigid shift of all points leaves them unchanged.
    const auto pts = random_points(50, 4);
    auto shifted = pts;
    for (auto& p : shifted) p += Vec3(0.2, -0.4, 0.6);
    const auto a = plan_block(pts, 0.02, sfc::Pattern::hilbert, 8);
    const auto b = plan_block(shifted, 0.02, sfc::Pattern::hilbert, 8);
    CHECK((a.offsets - b.offsets).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(a.offsets.colwise().sum().cwiseAbs().maxCoeff() < 1e-9);

    randomize(params, 5);
    const Value fp = Value::parameter(f.data());
    const auto r = nn::grad_check([&] { return nn::sum_all(nn::tanh(xcpe(fp, offsets, net))); }, params, 1e-4);
    CHECK(r.max_rel_error < 1e-4);
    CHECK_THROWS_AS(xcpe(f, random_matrix(5, 3, 1), net), Error);
  }

  TEST_CASE("window attention hand examples") {
    sfc::WindowPartition one_window;
    one_window.window_size = 2;
    one_window.windows = {{0, 1}};
    one_window.owner = {{0, 0}, {0, 1}};
    // q = 1, keys (0, ln 3): weights (0.25, 0.75).
    const Value q = Value::constant(Matrix{{1.0}, {0.0}});
    const Value k = Value::constant(Matrix{{0.0}, {std::log(3.0)}});
    const Value v = Value::constant(Matrix{{4.0}, {8.0}});
    const Value out = window_attention(q, k, v, one_window, 1);
    CHECK(out.data()(0, 0) == doctest::Approx(0.25 * 4.0 + 0.75 * 8.0));
    CHECK(out.data()(1, 0) == doctest::Approx(6.0));

    // Identical keys average the values.
    const Value q2 = Value::constant(random_matrix(2, 4, 1));
    const Value same = Value::constant(Matrix::Ones(2, 4));
    const Value v2 = Value::constant(random_matrix(2, 4, 2));
    const Value mean = window_attention(q2, same, v2, one_window, 2);
    for (int r = 0; r < 2; ++r) CHECK(mean.data().row(r).isApprox(v2.data().colwise().mean()));
  }

  TEST_CASE("single point attention returns its projected value") {
    nn::ParamSet params(2);
    const auto p = AttentionBlockParams::create(params, "b", 4, 2);
    randomize(params, 3);
    const Value x = Value::constant(random_matrix(1, 4, 4));
    const Value out = scalar_attention(x, p);
    CHECK(out.data().isApprox(p.output(p.value(x)).data()));
  }

  TEST_CASE("zero attention block is the identity") {
    nn::ParamSet params(3);
    const auto p = AttentionBlockParams::create(params, "b", 8, 2);
    params.zero_fill("b");
    const auto pts = random_points(40, 6);
    const auto plan = plan_block(pts, 0.02, sfc::Pattern::zorder, 16);
    const Value f = Value::constant(random_matrix(40, 8, 7));
    CHECK(attention_block(f, plan, p, true).data() == f.data());
    CHECK(attention_block(f, plan, p, false).data() == f.data());
  }

  TEST_CASE("attention block gradient on 32 points") {
    nn::ParamSet params(4);
    const auto p = AttentionBlockParams::create(params, "b", 8, 2);
    randomize(params, 8);
    const auto pts = random_points(32, 9);
    const auto plan = plan_block(pts, 0.02, sfc::Pattern::hilbert, 16);
    const Value f = Value::parameter(random_matrix(32, 8, 10));
    const Matrix target = random_matrix(32, 8, 11);
    for (bool pre_norm : {false, true}) {
      auto loss = [&] {
        const Value d = attention_block(f, plan, p, pre_norm) - Value::constant(target);
        return nn::mean_all(nn::mul(d, d));
      };
      auto leaves = params.entries();
      leaves.emplace_back("features", f);
      CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
    }
  }

  TEST_CASE("window pooling") {
    nn::ParamSet params(5);
    auto u = nn::Linear::create(params, "u", 2, 2);
    u.weight.mutable_data() = Matrix::Identity(2, 2);
    const std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(2, 4, 6)};
    PoolRecord rec;
    rec.groups = {{0, 1}};
    rec.parent = {0, 0};
    const auto pooled = window_pool(pts, Value::constant(Matrix{{1.0, 2.0}, {3.0, 1.0}}), rec, u);
    CHECK(pooled.features.data() == Matrix{{3.0, 2.0}});
    CHECK(pooled.points[0].isApprox(Vec3(1, 2, 3)));

    PoolRecord singles;
    singles.groups = {{0}, {1}};
    singles.parent = {0, 1};
    randomize(params, 2);
    const Value f = Value::constant(random_matrix(2, 2, 3));
    CHECK(window_pool(pts, f, singles, u).features.data().isApprox(u(f).data()));

    const auto cloud = random_points(64, 12);
    const auto groups = pool_groups(cloud, 0.02, 4);
    CHECK(groups.groups.size() == 16);
    for (std::size_t g = 0; g < groups.groups.size(); ++g) {
      for (auto m : groups.groups[g]) CHECK(groups.parent[m] == g);
    }
    const Value fp = Value::parameter(random_matrix(64, 2, 13));
    auto leaves = params.entries();
    leaves.emplace_back("features", fp);
    auto loss = [&] { return nn::sum_all(nn::tanh(window_pool(cloud, fp, groups, u).features)); };
    CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("window unpooling") {
    nn::ParamSet params(6);
    auto proj = nn::Linear::create(params, "p", 4, 2);
    proj.weight.mutable_data() = Matrix::Zero(4, 2);
    proj.weight.mutable_data().topRows(2) = Matrix::Identity(2, 2);
    PoolRecord rec;
    rec.groups = {{0, 2}, {1}};
    rec.parent = {0, 1, 0};
    const Value pooled = Value::constant(Matrix{{1.0, 2.0}, {5.0, 6.0}});
    const Value skip = Value::constant(random_matrix(3, 2, 1));
    const Value out = window_unpool(pooled, rec, skip, proj);
    CHECK(out.data().row(0) == pooled.data().row(0));
    CHECK(out.data().row(2) == pooled.data().row(0));
    CHECK(out.data().row(1) == pooled.data().row(1));
    CHECK_THROWS_AS(window_unpool(pooled, rec, Value::constant(random_matrix(4, 2, 1)), proj), Error);

    randomize(params, 7);
    const Value pp = Value::parameter(pooled.data());
    auto leaves = params.entries();
    leaves.emplace_back("pooled", pp);
    auto loss = [&] { return nn::sum_all(nn::tanh(window_unpool(pp, rec, skip, proj))); };
    CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("plans cover every point at every level") {
    const auto cfg = StageConfig::desk();
    const auto pts = random_points(1000, 14);
    const auto plan = build_plan(pts, cfg);
    REQUIRE(plan.levels.size() == cfg.levels());
    for (const auto& level : plan.levels) {
      for (const auto& block : level.enc_blocks) {
        std::vector<int> hit(level.points.size(), 0);
        for (const auto& w : block.windows.windows)
          for (auto i : w) hit[i] = 1;
        CHECK(std::count(hit.begin(), hit.end(), 1) == static_cast<long>(level.points.size()));
      }
    }
  }

  TEST_CASE("coarse forward identity, shapes and determinism") {
    auto cfg = StageConfig::desk();
    nn::ParamSet params(8);
    const auto p = Stage1Params::create(params, "s1", cfg);
    const auto pts = random_points(300, 15);
    const auto plan = build_plan(pts, cfg);
    const Matrix noise = nn::gaussian_noise(300, static_cast<Eigen::Index>(cfg.noise_channels), 3);
    const auto out = coarse_forward(pts, plan, p, cfg, noise);
    CHECK(out.warped.data() == points_matrix(pts));
    CHECK(out.displacement.rows() == 300);
    CHECK(out.f_global.rows() == 300);
    CHECK(out.f_global.cols() == static_cast<Eigen::Index>(cfg.dec_channels[0]));

    randomize(params, 16, 0.3);
    const auto a = coarse_forward(pts, plan, p, cfg, noise);
    const auto b = coarse_forward(pts, plan, p, cfg, noise);
    CHECK(a.warped.data() == b.warped.data());
    CHECK(a.displacement.data().cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("coarse forward is permutation equivariant without noise") {
    auto cfg = StageConfig::desk();
    cfg.noise_channels = 0;
    nn::ParamSet params(9);
    const auto p = Stage1Params::create(params, "s1", cfg);
    randomize(params, 17, 0.3);
    const auto pts = random_points(500, 18);
    IndexList perm(pts.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(19);
    shuffle(perm, rng);
    std::vector<Vec3> permuted(pts.size());
    for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = pts[perm[i]];
    const Matrix none(static_cast<Eigen::Index>(pts.size()), 0);
    const auto a = coarse_forward(pts, build_plan(pts, cfg), p, cfg, none);
    const auto b = coarse_forward(permuted, build_plan(permuted, cfg), p, cfg, none);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      REQUIRE(b.warped.data().row(static_cast<Eigen::Index>(i)) ==
              a.warped.data().row(static_cast<Eigen::Index>(perm[i])));
    }
  }

  TEST_CASE("coarse forward gradient on a small cloud") {
    auto cfg = tiny_config();
    nn::ParamSet params(10);
    const auto p = Stage1Params::create(params, "s1", cfg);
    randomize(params, 20, 0.4);
    const auto pts = random_points(32, 21);
    const auto plan = build_plan(pts, cfg);
    const Matrix none(32, 0);
    const Matrix target = random_matrix(32, 3, 22);
    auto loss = [&] {
      const Value d = coarse_forward(pts, plan, p, cfg, none).warped - Value::constant(target);
      return nn::mean_all(nn::mul(d, d));
    };
    CHECK(nn::grad_check(loss, params, 1e-4, 6).max_rel_error < 1e-4);
  }

  TEST_CASE("config validation") {
    auto cfg = StageConfig::desk();
    cfg.enc_heads = {2, 4};
    CHECK_THROWS_AS(cfg.validate(), Error);
    auto odd = StageConfig::desk();
    odd.enc_heads[0] = 3;
    CHECK_THROWS_AS(odd.validate(), Error);
    auto zero = StageConfig::desk();
    zero.window_size = 0;
    CHECK_THROWS_AS(zero.validate(), Error);
    CHECK_NOTHROW(StageConfig::paper().validate());
  }
}
