#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "doctest.h"

#include "morphflow/distort.hpp"
#include "morphflow/error.hpp"
#include "morphflow/rng.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace morphflow;
using namespace morphflow::distort;
using namespace morphflow::testing;

namespace {

Points line(std::initializer_list<double> xs) {
  Points p;
  for (double x : xs) p.push_back(Vec3(x, 0, 0));
  return p;
}

Value param(const Points& p) { return Value::parameter(to_matrix(p)); }

}  // namespace

TEST_SUITE("distort") {
  TEST_CASE("chamfer examples") {
    const auto x = random_points(20, 1);
    CHECK(chamfer(x, x) == 0.0);
    CHECK(chamfer(line({0}), line({3})) == doctest::Approx(6.0));
    CHECK(chamfer(line({0, 2}), line({1})) == doctest::Approx(2.0));
    CHECK(chamfer_loss(param(line({0, 2})), param(line({1}))).item() == doctest::Approx(2.0));
    CHECK_THROWS_AS(chamfer(Points{}, x), Error);
  }

  TEST_CASE("chamfer and hausdorff match exhaustive scans") {
    for (std::uint64_t s = 0; s < 30; ++s) {
      const auto x = random_points(1 + s * 2, 100 + s);
      const auto y = random_points(64 - s, 200 + s);
      CHECK(chamfer(x, y) == doctest::Approx(brute_chamfer(x, y)).epsilon(1e-12));
      CHECK(hausdorff(x, y) == brute_hausdorff(x, y));
    }
    CHECK(hausdorff(line({0}), line({5})) == 5.0);
    CHECK(hausdorff(line({1, 2}), line({1, 2})) == 0.0);
  }

  TEST_CASE("emd examples") {
    CHECK(emd(line({0, 2}), line({1, 3})) == doctest::Approx(1.0));
    auto x = random_points(30, 3);
    auto y = x;
    std::reverse(y.begin(), y.end());
    CHECK(emd(x, y) == 0.0);
    CHECK_THROWS_AS(emd(x, random_points(29, 4)), Error);
  }

  TEST_CASE("emd matches enumeration and an independent flow solver") {
    for (std::size_t n = 1; n <= 8; ++n) {
      const auto x = random_points(n, 300 + n);
      const auto y = random_points(n, 400 + n);
      CHECK(emd(x, y) == doctest::Approx(enumerate_emd(x, y)).epsilon(1e-12));
    }
    for (std::size_t n : {9, 17, 40, 64}) {
      const auto x = random_points(n, 500 + n);
      const auto y = random_points(n, 600 + n);
      const double e = emd(x, y);
      CHECK(e == doctest::Approx(flow_emd(x, y)).epsilon(1e-10));
      // Reordering either side leaves the value unchanged.
      auto yr = y;
      Rng rng(n);
      shuffle(yr, rng);
      CHECK(emd(x, yr) == doctest::Approx(e).epsilon(1e-12));
    }
  }

  TEST_CASE("auction agrees with the exact solver") {
    const auto x = random_points(1024, 7);
    const auto y = random_points(1024, 8);
    const double exact = emd(x, y, EmdMode::exact);
    const double approx = emd(x, y, EmdMode::approx);
    CHECK(approx >= exact - 1e-12);
    CHECK(approx <= 1.01 * exact);
    const auto small_x = random_points(100, 9);
    const auto small_y = random_points(100, 10);
    CHECK(emd(small_x, small_y, EmdMode::approx) == emd(small_x, small_y, EmdMode::exact));
  }

  TEST_CASE("chamfer and emd gradients") {
    const Value x = param(random_points(12, 11));
    const Value y = param(random_points(16, 12));
    CHECK(nn::grad_check([&] { return chamfer_loss(x, y); }, {{"x", x}, {"y", y}}, 1e-4).max_rel_error < 1e-4);
    const Value z = param(random_points(12, 13));
    CHECK(nn::grad_check([&] { return emd_loss(x, z); }, {{"x", x}, {"z", z}}, 1e-4).max_rel_error < 1e-4);
    CHECK(emd_loss(x, z).item() == doctest::Approx(emd(to_points(x.data()), to_points(z.data()))));
  }

  TEST_CASE("similarity losses") {
    const Value f = param(line({0, 2}));
    const Value b = param(line({1}));
    const auto zero = similarity_losses(f, b, f, b, f, b);
    CHECK(zero.coarse.item() == 0.0);
    CHECK(zero.fine.item() == 0.0);
    // Identity predictions: coarse face = bone input, etc.
    const auto id = similarity_losses(b, f, b, f, f, b);
    CHECK(id.coarse.item() == doctest::Approx(4.0));
    CHECK(id.fine.item() == id.coarse.item());
  }

  TEST_CASE("cross regularization") {
    const Value p = param(random_points(10, 14));
    CHECK(cross_reg(p, p, p, p, p, p).item() == 0.0);
    const Value pf = param(line({0})), pb = param(line({4}));
    const Value cf = param(line({1})), cb = param(line({2}));
    const Value ff = param(line({3})), fb = param(line({5}));
    // CD({0,2},{4,1}) + CD({0,5},{4,3}) = (1 + 1.5) + (2 + 1.5).
    CHECK(cross_reg(pf, pb, cf, cb, ff, fb).item() == doctest::Approx(6.0));
    CHECK(cross_reg(pf, pb, cf, cb, ff, fb).item() == doctest::Approx(cross_reg(pb, pf, cb, cf, fb, ff).item()));
  }

  TEST_CASE("local density loss") {
    const auto p = random_points(40, 15);
    CHECK(local_density_loss(p, param(p), 8, 0.1).item() == 0.0);

    Points shifted = p, shifted_q = p;
    for (std::size_t i = 0; i < p.size(); ++i) {
      shifted[i] += Vec3(0.3, -0.1, 0.2);
      shifted_q[i] += Vec3(0.3, -0.1, 0.2);
    }
    CHECK(local_density_loss(p, param(shifted), 8, 0.0, nullptr, &shifted_q).item() == doctest::Approx(0.0));

    // n=3, K=1: each neighborhood is the point itself, so both terms reduce
    // to the distance from x to its nearest point of H.
    const Points p3 = line({0, 1, 3});
    const Value h3 = param(line({0.5, 1, 3}));
    CHECK(local_density_loss(p3, h3, 1, 0.1).item() == doctest::Approx(1.1 * 0.5 / 3.0));
    CHECK_THROWS_AS(local_density_loss(p3, h3, 3, 0.1), Error);

    const Value h = param(random_points(40, 16));
    CHECK(nn::grad_check([&] { return local_density_loss(p, h, 6, 0.1); }, {{"h", h}}, 1e-4).max_rel_error < 1e-4);
  }

  TEST_CASE("auxiliary roi loss") {
    const Value face = param(line({0, 10}));
    const Value bone = param(line({1, 20}));
    const std::vector<RoiIndexPair> rois{{"nose", {0}, {0}}};
    CHECK(aux_roi_loss(rois, face, bone, param(line({1, 7})), param(line({0, 9}))).item() == 0.0);
    const double d = 0.25;
    const double expected = 2.0 * d + 2.0 * d;
    CHECK(aux_roi_loss(rois, face, bone, param(line({1 + d, 7})), param(line({-d, 9}))).item() ==
          doctest::Approx(expected));

    double prev = std::numeric_limits<double>::infinity();
    for (int s = 0; s <= 10; ++s) {
      const double off = 2.0 - 0.2 * s;
      const double v = aux_roi_loss(rois, face, bone, param(line({1 + off, 7})), param(line({0 - off, 9}))).item();
      CHECK(v < prev);
      prev = v;
    }
    const std::vector<RoiIndexPair> empty{{"lip", {}, {0}}};
    CHECK_THROWS_AS(aux_roi_loss(empty, face, bone, face, bone), Error);
    CHECK_THROWS_AS(aux_roi_loss({}, face, bone, face, bone), Error);
  }

  TEST_CASE("total loss") {
    auto c = [](double v) { return Value::constant(Matrix::Constant(1, 1, v)); };
    LossWeights w;
    CHECK(total_loss({c(0), c(0), c(0), c(0), {}}, w).item() == 0.0);
    const LossParts parts{c(1.5), c(0.5), c(2.0), c(0.25), c(3.0)};
    CHECK(total_loss(parts, w).item() == doctest::Approx(1.5 + 0.5 + 0.3 * 2.0 + 0.25));
    w.aux_enabled = true;
    CHECK(total_loss(parts, w).item() == doctest::Approx(1.5 + 0.5 + 0.3 * 2.0 + 0.25 + 3.0));
    LossWeights w2 = w;
    w2.lambda = 2.0 * w.lambda;
    CHECK(total_loss(parts, w2).item() - total_loss(parts, w).item() == doctest::Approx(w.lambda * 2.0));
    CHECK_THROWS_AS(total_loss({c(std::nan("")), c(0), c(0), c(0), {}}, LossWeights{}), Error);
  }

  TEST_CASE("jsd") {
    const auto x = random_points(200, 17);
    CHECK(jsd(x, x) == 0.0);
    CHECK(jsd(random_points(50, 18, -1.0, -0.1), random_points(50, 19, 0.1, 1.0)) == doctest::Approx(std::log(2.0)));
    // Two cells: X = {a, a}, Y = {a, b} -> P = (1, 0), Q = (1/2, 1/2), M = (3/4, 1/4).
    const Points a2{Vec3(-0.5, -0.5, -0.5), Vec3(-0.5, -0.5, -0.5)};
    const Points ab{Vec3(-0.5, -0.5, -0.5), Vec3(0.5, 0.5, 0.5)};
    const double expected =
        0.5 * std::log(1.0 / 0.75) + 0.5 * (0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25));
    CHECK(jsd(a2, ab) == doctest::Approx(expected));
    CHECK_THROWS_AS(jsd(Points{}, x), Error);
  }

  TEST_CASE("mped") {
    const auto x = random_points(100, 20);
    CHECK(mped(x, x) == 0.0);
    const auto y = random_points(100, 21);
    CHECK(mped(x, y) == doctest::Approx(mped(y, x)));
    Rng rng(22);
    Points noise(100);
    for (auto& n : noise) n = Vec3(rng.normal(), rng.normal(), rng.normal());
    double prev = 0.0;
    for (double sigma : {0.0, 0.01, 0.03, 0.1, 0.3}) {
      Points j = x;
      for (std::size_t i = 0; i < j.size(); ++i) j[i] += sigma * noise[i];
      const double v = mped(x, j);
      CHECK(v >= prev);
      prev = v;
    }
    CHECK(mped(x, y) >= 0.0);
  }

  TEST_CASE("rank-sum test") {
    const std::vector<double> a{0.3, 0.1, 0.5, 0.7, 0.2, 0.9};
    CHECK(ranksum_test(a, a) == doctest::Approx(1.0).epsilon(0.02));
    const std::vector<double> zeros(20, 0.0), ones(20, 1.0);
    CHECK(ranksum_test(zeros, ones) < 0.001);
    const std::vector<double> b{1.3, 0.4, 2.2, 0.8, 1.9, 1.1, 1.7};
    CHECK(ranksum_test(a, b) == ranksum_test(b, a));
    CHECK_THROWS_AS(ranksum_test({1, 2, 3, 4}, b), Error);
    // Hand value: no ties, n1 = n2 = 5, disjoint halves -> U = 0, z = -(12.5 - 0.5)/sqrt(22.9167).
    const std::vector<double> lo{1, 2, 3, 4, 5}, hi{6, 7, 8, 9, 10};
    const double z = 12.5 / std::sqrt(25.0 * 11.0 / 12.0);
    CHECK(ranksum_test(lo, hi) == doctest::Approx(std::erfc(z / std::sqrt(2.0))).epsilon(1e-6));
  }

  TEST_CASE("metric report") {
    MetricReport r;
    r.rows.push_back({"a", "face2bone", "all", 1.0, 2.0, 0.1, 3.0, 0.5, true, true});
    r.rows.push_back({"a", "bone2face", "all", 2.0, 1.0, 0.2, 4.0, 0.7, true, true});
    r.rows.push_back({"a", "face2bone", "nose", 0.5, 0.0, 0.0, 1.0, 0.2, false, false});
    CHECK(r.select("", "all").size() == 2);
    CHECK(r.select("face2bone", "nose").size() == 1);
    std::ostringstream csv;
    r.write_csv(csv);
    const std::string text = csv.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 4);
    const auto s = summarize({1.0, 2.0, 6.0});
    CHECK(s.mean == doctest::Approx(3.0));
    CHECK(s.min == 1.0);
    CHECK(s.max == 6.0);
    CHECK(s.count == 3);
  }
}
