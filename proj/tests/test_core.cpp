#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oodkit/core.hpp"
#include "oodkit/rng.hpp"

using ood::Box3D;

namespace {

Box3D box(double cx, double cy, double cz, double l, double w, double h,
          double yaw) {
  return {cx, cy, cz, l, w, h, yaw};
}

}  // namespace

TEST_SUITE("core") {

TEST_CASE("normalize_yaw wraps into (-pi, pi]") {
  const double pi = std::numbers::pi;
  CHECK(ood::normalize_yaw(pi) == doctest::Approx(pi));
  CHECK(ood::normalize_yaw(-pi) == doctest::Approx(pi));
  CHECK(ood::normalize_yaw(3 * pi) == doctest::Approx(pi));
  CHECK(ood::normalize_yaw(2 * pi) == doctest::Approx(0.0));
  CHECK(ood::normalize_yaw(0.5) == doctest::Approx(0.5));
  CHECK(ood::normalize_yaw(-2.5 * pi) == doctest::Approx(-0.5 * pi));
}

TEST_CASE("bev_iou on axis-aligned squares") {
  const Box3D a = box(0, 0, 0, 2, 2, 2, 0);
  SUBCASE("identical boxes") { CHECK(ood::bev_iou(a, a) == doctest::Approx(1.0)); }
  SUBCASE("half overlap") {
    const Box3D b = box(1, 0, 0, 2, 2, 2, 0);
    // intersection 1x2=2, union 4+4-2=6
    CHECK(ood::bev_iou(a, b) == doctest::Approx(2.0 / 6.0));
  }
  SUBCASE("disjoint") {
    const Box3D b = box(5, 5, 0, 2, 2, 2, 0);
    CHECK(ood::bev_iou(a, b) == 0.0);
  }
  SUBCASE("edge contact counts as zero") {
    const Box3D b = box(2, 0, 0, 2, 2, 2, 0);
    CHECK(ood::bev_iou(a, b) == 0.0);
  }
  SUBCASE("corner contact counts as zero") {
    const Box3D b = box(2, 2, 0, 2, 2, 2, 0);
    CHECK(ood::bev_iou(a, b) == 0.0);
  }
}

TEST_CASE("bev_iou with rotation") {
  // A square rotated by 90 degrees maps onto itself.
  const Box3D a = box(0, 0, 0, 2, 2, 1, 0);
  const Box3D b = box(0, 0, 0, 2, 2, 1, std::numbers::pi / 2);
  CHECK(ood::bev_iou(a, b) == doctest::Approx(1.0));

  // Unit square vs the same square rotated 45 degrees: the intersection is a
  // regular octagon with area 2*(sqrt(2)-1).
  const Box3D c = box(0, 0, 0, 1, 1, 1, 0);
  const Box3D d = box(0, 0, 0, 1, 1, 1, std::numbers::pi / 4);
  const double inter = 2.0 * (std::sqrt(2.0) - 1.0);
  CHECK(ood::bev_intersection_area(c, d) == doctest::Approx(inter).epsilon(1e-9));
  CHECK(ood::bev_iou(c, d) == doctest::Approx(inter / (2.0 - inter)).epsilon(1e-9));
}

TEST_CASE("iou3d separates boxes by height") {
  const Box3D a = box(0, 0, 0, 2, 2, 2, 0);
  const Box3D b = box(0, 0, 3, 2, 2, 2, 0);  // vertical gap
  CHECK(ood::iou3d(a, b) == 0.0);
  const Box3D c = box(0, 0, 1, 2, 2, 2, 0);  // half vertical overlap
  // inter = 4 * 1 = 4, union = 8 + 8 - 4 = 12
  CHECK(ood::iou3d(a, c) == doctest::Approx(4.0 / 12.0));
  CHECK(ood::iou3d(a, a) == doctest::Approx(1.0));
}

TEST_CASE("points_in_box is boundary-inclusive and respects yaw") {
  ood::PointCloud pc;
  pc.points.push_back({1.0, 0.0, 0.0, 0.0});   // on the +x face
  pc.points.push_back({1.01, 0.0, 0.0, 0.0});  // just outside
  pc.points.push_back({0.0, 0.0, 0.0, 0.0});   // center
  const Box3D b = box(0, 0, 0, 2, 1, 1, 0);
  auto idx = ood::points_in_box(pc, b);
  REQUIRE(idx.size() == 2);
  CHECK(idx[0] == 0);
  CHECK(idx[1] == 2);

  // Rotating the box by 90 degrees swaps which point is inside.
  const Box3D r = box(0, 0, 0, 2, 1, 1, std::numbers::pi / 2);
  ood::PointCloud pc2;
  pc2.points.push_back({0.9, 0.0, 0.0, 0.0});
  pc2.points.push_back({0.0, 0.9, 0.0, 0.0});
  auto idx2 = ood::points_in_box(pc2, r);
  REQUIRE(idx2.size() == 1);
  CHECK(idx2[0] == 1);
}

TEST_CASE("rotate_about_origin preserves ranges to 1e-9") {
  ood::Rng rng(7);
  ood::PointCloud pc;
  for (int i = 0; i < 500; ++i)
    pc.points.push_back({rng.uniform(-50, 50), rng.uniform(-50, 50),
                         rng.uniform(-3, 3), rng.uniform()});
  const double delta = rng.uniform(-3.0, 3.0);
  const ood::PointCloud out = ood::rotate_about_origin(pc, delta);
  REQUIRE(out.size() == pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double r0 = std::hypot(pc.points[i].x, pc.points[i].y);
    const double r1 = std::hypot(out.points[i].x, out.points[i].y);
    CHECK(std::abs(r0 - r1) < 1e-9);
    CHECK(out.points[i].z == pc.points[i].z);
    CHECK(out.points[i].intensity == pc.points[i].intensity);
  }
}

TEST_CASE("rotate_about_origin on boxes rotates center and yaw together") {
  const Box3D b = box(10, 0, -1, 4, 2, 1.5, 0.25);
  const double delta = 1.1;
  const Box3D r = ood::rotate_about_origin(b, delta);
  CHECK(std::hypot(r.cx, r.cy) == doctest::Approx(10.0));
  CHECK(r.yaw == doctest::Approx(ood::normalize_yaw(0.25 + delta)));
  CHECK(r.length == b.length);
  // The rotated box's footprint equals the rotated footprint: IoU with a
  // direct reconstruction is 1.
  const Box3D direct = box(10 * std::cos(delta), 10 * std::sin(delta), -1, 4,
                           2, 1.5, ood::normalize_yaw(0.25 + delta));
  CHECK(ood::bev_iou(r, direct) == doctest::Approx(1.0));
}

TEST_CASE("category helpers") {
  CHECK(ood::in_scope(ood::category_from_int(3)));
  CHECK(ood::in_scope(ood::category_from_int(5)));
  CHECK(ood::in_scope(ood::category_from_int(7)));
  CHECK_FALSE(ood::in_scope(ood::category_from_int(1)));
  CHECK_FALSE(ood::is_ood_category(ood::category_from_int(2)));
  CHECK(ood::is_ood_category(ood::category_from_int(8)));
  CHECK_THROWS_AS(ood::category_from_int(0), ood::UnknownCategory);
  CHECK_THROWS_AS(ood::category_from_int(9), ood::UnknownCategory);
}

}  // TEST_SUITE
