#include <cmath>

#include "doctest.h"

#include "morphflow/cloud.hpp"
#include "morphflow/error.hpp"
#include "morphflow/rng.hpp"
#include "morphflow/stage1.hpp"
#include "morphflow/stage2.hpp"
#include "support.hpp"

using namespace morphflow;
using namespace morphflow::stage2;
using morphflow::testing::random_points;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

void randomize(nn::ParamSet& params, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (const auto& [name, v] : params.entries()) {
    Value p = v;
    for (Eigen::Index i = 0; i < p.data().size(); ++i) p.mutable_data().data()[i] = scale * rng.uniform(-1.0, 1.0);
  }
}

nn::Mlp identity_mlp(nn::ParamSet& params, const std::string& name, Eigen::Index c) {
  auto m = nn::Mlp::create(params, name, c, {c});
  m.layers[0].weight.mutable_data() = Matrix::Identity(c, c);
  return m;
}

LiaConfig small_config() {
  LiaConfig cfg;
  cfg.channels = 6;
  cfg.k_local = 4;
  cfg.k_far = 3;
  cfg.covariance_k = 4;
  cfg.noise_channels = 2;
  cfg.head_hidden = 5;
  return cfg;
}

}  // namespace

TEST_SUITE("stage2") {
  TEST_CASE("farthest region weights") {
    const std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 2, 0), Vec3(0.1, 0, 0)};
    const auto r = farthest_region(pts, 0, 2, 1.1);
    CHECK(r.far_indices == IndexList{2, 1});
    CHECK(r.r == doctest::Approx(2.2));
    CHECK(r.weights[0] == doctest::Approx(0.04 / 1.48));
    CHECK(r.weights[1] == doctest::Approx(1.44 / 1.48));
    CHECK(r.weights[1] == doctest::Approx(0.973).epsilon(1e-3));

    const std::vector<Vec3> ring{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(0.1, 0.1, 0)};
    const auto u = farthest_region(ring, 0, 3);
    for (double w : u.weights) CHECK(w == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(farthest_region(ring, 0, 5), Error);

    const auto cloud = random_points(200, 3);
    for (Index c = 0; c < 200; c += 17) {
      const auto reg = farthest_region(cloud, c, 8);
      double sum = 0.0, far = 0.0;
      for (std::size_t j = 0; j < reg.weights.size(); ++j) {
        sum += reg.weights[j];
        CHECK(reg.weights[j] >= 0.0);
        far = std::max(far, (cloud[reg.far_indices[j]] - cloud[c]).norm());
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
      CHECK(reg.r >= far);
    }
  }

  TEST_CASE("direction coefficients") {
    CHECK(direction_coefficients(Vec3(0, 0, 0), Vec3(3, 0, 0)).isApprox(Vec3(1, 0, 0)));
    CHECK(direction_coefficients(Vec3(0, 0, 0), Vec3(1, 1, 0)).isApprox(Vec3(0.5, 0.5, 0)));
    const auto pts = random_points(100, 4);
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const Vec3 c = direction_coefficients(pts[i - 1], pts[i]);
      CHECK(std::abs(c.sum() - 1.0) < 1e-9);
      CHECK(c.minCoeff() >= 0.0);
      CHECK(c.maxCoeff() <= 1.0);
    }
    CHECK_THROWS_AS(direction_coefficients(Vec3(1, 2, 3), Vec3(1, 2, 3)), Error);
  }

  TEST_CASE("far weights agree with the scalar definitions") {
    const auto pts = random_points(30, 5);
    const auto table = farthest_table(pts, 4);
    const Value w = far_weights(Value::constant(stage1::points_matrix(pts)), table, 4, 1.1);
    for (Index i = 0; i < 30; i += 7) {
      const auto reg = farthest_region(pts, i, 4, 1.1);
      for (std::size_t j = 0; j < 4; ++j) {
        REQUIRE(table[i * 4 + j] == reg.far_indices[j]);
        const Vec3 c = direction_coefficients(pts[i], pts[reg.far_indices[j]]) * reg.weights[j];
        for (int a = 0; a < 3; ++a) CHECK(w.data()(static_cast<Eigen::Index>(i * 4 + j), a) == doctest::Approx(c[a]));
      }
    }
    const Value pos = Value::parameter(stage1::points_matrix(pts));
    const Matrix probe = random_matrix(120, 3, 6);
    auto loss = [&] { return nn::sum_all(nn::mul(far_weights(pos, table, 4, 1.1), Value::constant(probe))); };
    CHECK(nn::grad_check(loss, {{"pos", pos}}, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("neighborhood covariance matches the cloud routine") {
    const auto pts = random_points(40, 7);
    const cloud::PointCloud c(pts);
    const auto table = cloud::knn_table_bruteforce(pts, pts, 7, true);
    std::vector<Index> members;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      members.push_back(i);
      for (std::size_t j = 0; j < 7; ++j) members.push_back(table[i * 7 + j]);
    }
    const Value pos = Value::parameter(stage1::points_matrix(pts));
    const Value cov = neighborhood_covariance(pos, members, 8);
    const auto ref = cloud::local_covariance(c, 8);
    CHECK((cov.data() - ref).cwiseAbs().maxCoeff() < 1e-12);
    const Matrix probe = random_matrix(40, 9, 8);
    auto loss = [&] { return nn::sum_all(nn::mul(neighborhood_covariance(pos, members, 8), Value::constant(probe))); };
    CHECK(nn::grad_check(loss, {{"pos", pos}}, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("edge convolution") {
    nn::ParamSet params(1);
    const auto id = identity_mlp(params, "id", 2);
    const Value f = Value::constant(Matrix{{1.0, 2.0}, {4.0, -1.0}});
    const std::vector<Index> graph{1, 0};
    const Value out = edge_conv_layer(f, graph, 1, id);
    CHECK(out.data() == Matrix{{3.0, -3.0}, {-3.0, 3.0}});

    auto mlp = nn::Mlp::create(params, "m", 2, {3, 2});
    randomize(params, 2);
    const Value constant = Value::constant(Matrix::Constant(5, 2, 0.7));
    std::vector<Index> ring;
    for (Index i = 0; i < 5; ++i) ring.push_back((i + 1) % 5), ring.push_back((i + 2) % 5);
    const Value at_zero = mlp(Value::constant(Matrix::Zero(1, 2)));
    const Value c_out = edge_conv_layer(constant, ring, 2, mlp);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(c_out.data().row(i).isApprox(at_zero.data().row(0)));
    CHECK_THROWS_AS(edge_conv_layer(constant, graph, 1, mlp), Error);

    const auto pts = random_points(16, 9);
    const auto knn = cloud::knn_table_bruteforce(pts, pts, 4, true);
    EdgeConvParams ep{nn::Mlp::create(params, "e1", 3, {4, 4}), nn::Mlp::create(params, "e2", 4, {4, 4})};
    randomize(params, 3);
    const Value x = Value::parameter(random_matrix(16, 3, 10));
    auto leaves = params.entries();
    leaves.emplace_back("x", x);
    auto loss = [&] { return nn::sum_all(nn::tanh(static_edge_conv(x, knn, 4, ep))); };
    CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("relative position block") {
    nn::ParamSet params(2);
    RelativePositionParams rp;
    for (int a = 0; a < 3; ++a) {
      rp.axis[static_cast<std::size_t>(a)] =
          nn::Linear::create(params, "w" + std::to_string(a), 2, 2, nn::Init::zeros, false);
    }
    rp.axis[0].weight.mutable_data() = Matrix::Identity(2, 2);
    rp.edge_mlp = identity_mlp(params, "edge", 2);
    rp.self_mlp = identity_mlp(params, "self", 2);

    const std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    const auto table = farthest_table(pts, 1);
    const Value w = far_weights(Value::constant(stage1::points_matrix(pts)), table, 1, 1.1);
    const Value f = Value::constant(Matrix{{1.0, 2.0}, {5.0, -3.0}});
    const Value out = relative_position_block(f, table, 1, w, rp);
    CHECK(out.data().row(0).isApprox(f.data().row(1)));
    CHECK(out.data().row(1).isApprox(f.data().row(0)));

    // Equal features give zero edge terms.
    auto mlp_params = nn::ParamSet(3);
    RelativePositionParams rnd;
    for (std::size_t a = 0; a < 3; ++a) {
      rnd.axis[a] = nn::Linear::create(mlp_params, "a" + std::to_string(a), 2, 2, nn::Init::xavier_uniform, false);
    }
    rnd.edge_mlp = nn::Mlp::create(mlp_params, "edge", 2, {3, 2});
    rnd.self_mlp = nn::Mlp::create(mlp_params, "self", 2, {3, 2});
    randomize(mlp_params, 4);
    const Value same = Value::constant(Matrix::Constant(2, 2, 0.4));
    const Value expected = rnd.edge_mlp(Value::constant(Matrix::Zero(2, 2))) + rnd.self_mlp(same);
    CHECK(relative_position_block(same, table, 1, w, rnd).data().isApprox(expected.data()));

    const auto cloud = random_points(20, 11);
    const auto far = farthest_table(cloud, 3);
    const Value pos = Value::parameter(stage1::points_matrix(cloud));
    const Value x = Value::parameter(random_matrix(20, 2, 12));
    auto leaves = mlp_params.entries();
    leaves.emplace_back("x", x);
    leaves.emplace_back("pos", pos);
    auto loss = [&] {
      return nn::sum_all(nn::tanh(relative_position_block(x, far, 3, far_weights(pos, far, 3, 1.1), rnd)));
    };
    CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("fine forward identity and determinism") {
    const auto cfg = LiaConfig::desk();
    nn::ParamSet params(5);
    const auto p = Stage2Params::create(params, "s2", cfg, 16);
    const auto pts = random_points(200, 13);
    const Value coarse = Value::constant(stage1::points_matrix(pts));
    const Value global = Value::constant(random_matrix(200, 16, 14));
    const Matrix noise = nn::gaussian_noise(200, static_cast<Eigen::Index>(cfg.noise_channels), 15);
    const auto out = fine_forward(coarse, global, p, cfg, noise);
    CHECK(out.warped.data() == coarse.data());
    CHECK(out.warped.rows() == 200);

    randomize(params, 16, 0.3);
    const auto a = fine_forward(coarse, global, p, cfg, noise);
    const auto b = fine_forward(coarse, global, p, cfg, noise);
    CHECK(a.warped.data() == b.warped.data());
    CHECK(a.warped.data().allFinite());
    CHECK(a.displacement.data().cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("aggregate and fuse gradient on 16 points") {
    const auto cfg = small_config();
    nn::ParamSet params(6);
    const auto p = Stage2Params::create(params, "s2", cfg, 4);
    randomize(params, 17, 0.4);
    const Value coarse = Value::constant(random_matrix(16, 3, 18));
    const Value f1 = Value::parameter(random_matrix(16, 6, 19));
    const Value f2 = Value::constant(random_matrix(16, 6, 20));
    const Value f3 = Value::constant(random_matrix(16, 6, 21));
    const Value g = Value::parameter(random_matrix(16, 4, 22));
    const Matrix noise = nn::gaussian_noise(16, 2, 23);
    const Matrix target = random_matrix(16, 3, 24);
    auto leaves = params.entries();
    leaves.emplace_back("f1", f1);
    leaves.emplace_back("global", g);
    auto loss = [&] {
      const Value d = aggregate_and_fuse(coarse, f1, f2, f3, g, p, noise).warped - Value::constant(target);
      return nn::mean_all(nn::mul(d, d));
    };
    CHECK(nn::grad_check(loss, leaves, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("fine forward gradient on 32 points") {
    const auto cfg = small_config();
    nn::ParamSet params(7);
    const auto p = Stage2Params::create(params, "s2", cfg, 4);
    randomize(params, 25, 0.4);
    const Value coarse = Value::parameter(stage1::points_matrix(random_points(32, 26)));
    const Value g = Value::parameter(random_matrix(32, 4, 27));
    const Matrix noise = nn::gaussian_noise(32, 2, 28);
    const Matrix target = random_matrix(32, 3, 29);
    auto leaves = params.entries();
    leaves.emplace_back("coarse", coarse);
    leaves.emplace_back("global", g);
    auto loss = [&] {
      const Value d = fine_forward(coarse, g, p, cfg, noise).warped - Value::constant(target);
      return nn::mean_all(nn::mul(d, d));
    };
    CHECK(nn::grad_check(loss, leaves, 1e-4, 12).max_rel_error < 1e-4);
  }
}
