#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "oodkit/errors.hpp"

namespace ood {

// Stored in double precision; the on-disk format is 32-bit floats.
struct Point {
  double x = 0, y = 0, z = 0;
  double intensity = 0;  // in [0,1]
};

struct PointCloud {
  std::vector<Point> points;
  std::string frame_id;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// yaw normalized to (-pi, pi]
inline double normalize_yaw(double yaw) {
  const double two_pi = 2.0 * std::numbers::pi;
  yaw = std::fmod(yaw, two_pi);
  if (yaw <= -std::numbers::pi) yaw += two_pi;
  if (yaw > std::numbers::pi) yaw -= two_pi;
  return yaw;
}

struct Box3D {
  double cx = 0, cy = 0, cz = 0;  // center
  double length = 1, width = 1, height = 1;
  double yaw = 0;  // rotation about z, (-pi, pi]

  double volume() const { return length * width * height; }
  double bev_area() const { return length * width; }
};

// The eight object categories; (3), (5) and (7) are the targeted OOD types.
enum class OodCategory : int {
  kDetectedFgInDist = 1,
  kMissedFgInDist = 2,
  kDetectedFgOutDist = 3,
  kMissedFgOutDist = 4,
  kBgInDistMisdetected = 5,
  kBgInDistUndetected = 6,
  kBgOutDistMisdetected = 7,
  kBgOutDistUndetected = 8,
};

inline bool in_scope(OodCategory c) {
  const int v = static_cast<int>(c);
  return v == 3 || v == 5 || v == 7;
}

inline bool is_ood_category(OodCategory c) {
  return static_cast<int>(c) >= 3;
}

inline OodCategory category_from_int(int v) {
  if (v < 1 || v > 8)
    throw UnknownCategory("category must be 1..8, got " + std::to_string(v));
  return static_cast<OodCategory>(v);
}

struct LabeledObject {
  Box3D box;
  std::string class_name;
  bool is_ood = false;
  OodCategory category = OodCategory::kDetectedFgInDist;
};

struct Detection {
  Box3D box;
  std::vector<double> class_probs;  // FG classes... , background (sums to 1)
  std::vector<double> logits;       // optional pre-softmax FG scores
  int predicted_class = 0;          // argmax over FG entries
  std::optional<std::size_t> anchor_index;  // backbone grid cell
  double confidence = 0;            // max FG probability
};

// ---------------------------------------------------------------------------
// Oriented-box BEV geometry via Sutherland-Hodgman polygon clipping.
// ---------------------------------------------------------------------------

namespace detail {

struct Vec2 {
  double x = 0, y = 0;
};

inline std::array<Vec2, 4> footprint(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.length, hw = 0.5 * b.width;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (int i = 0; i < 4; ++i) {
    out[i].x = b.cx + c * local[i].x - s * local[i].y;
    out[i].y = b.cy + s * local[i].x + c * local[i].y;
  }
  return out;
}

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Clip `poly` against the half-plane left of edge (e0, e1) of a CCW clipper.
inline std::vector<Vec2> clip_edge(const std::vector<Vec2>& poly,
                                   const Vec2& e0, const Vec2& e1) {
  std::vector<Vec2> out;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& cur = poly[i];
    const Vec2& nxt = poly[(i + 1) % n];
    const double dc = cross(e0, e1, cur);
    const double dn = cross(e0, e1, nxt);
    if (dc >= 0) out.push_back(cur);
    if ((dc > 0 && dn < 0) || (dc < 0 && dn > 0)) {
      const double t = dc / (dc - dn);
      out.push_back({cur.x + t * (nxt.x - cur.x), cur.y + t * (nxt.y - cur.y)});
    }
  }
  return out;
}

inline double polygon_area(const std::vector<Vec2>& poly) {
  if (poly.size() < 3) return 0.0;
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

}  // namespace detail

// Area of intersection of the two yaw-rotated footprint rectangles.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto fa = detail::footprint(a);
  const auto fb = detail::footprint(b);
  std::vector<detail::Vec2> poly(fa.begin(), fa.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i)
    poly = detail::clip_edge(poly, fb[i], fb[(i + 1) % 4]);
  const double area = detail::polygon_area(poly);
  return area < 1e-12 ? 0.0 : area;
}

inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.bev_area() + b.bev_area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou3d(const Box3D& a, const Box3D& b) {
  const double inter_bev = bev_intersection_area(a, b);
  if (inter_bev <= 0.0) return 0.0;
  const double za0 = a.cz - 0.5 * a.height, za1 = a.cz + 0.5 * a.height;
  const double zb0 = b.cz - 0.5 * b.height, zb1 = b.cz + 0.5 * b.height;
  const double dz = std::min(za1, zb1) - std::max(za0, zb0);
  if (dz <= 0.0) return 0.0;
  const double inter = inter_bev * dz;
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Indices of points inside the yaw-rotated cuboid, boundary-inclusive.
inline std::vector<std::size_t> points_in_box(const PointCloud& pc,
                                              const Box3D& box) {
  std::vector<std::size_t> out;
  const double c = std::cos(-box.yaw), s = std::sin(-box.yaw);
  const double hl = 0.5 * box.length, hw = 0.5 * box.width,
               hh = 0.5 * box.height;
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    const auto& p = pc.points[i];
    const double dx = p.x - box.cx, dy = p.y - box.cy, dz = p.z - box.cz;
    const double lx = c * dx - s * dy;
    const double ly = s * dx + c * dy;
    if (std::abs(lx) <= hl && std::abs(ly) <= hw && std::abs(dz) <= hh)
      out.push_back(i);
  }
  return out;
}

// Rotate every point about the sensor origin (z axis). Ranges preserved.
inline PointCloud rotate_about_origin(const PointCloud& pc,
                                      double delta_azimuth) {
  PointCloud out;
  out.frame_id = pc.frame_id;
  out.points.reserve(pc.points.size());
  const double c = std::cos(delta_azimuth), s = std::sin(delta_azimuth);
  for (const auto& p : pc.points) {
    Point q = p;
    q.x = c * p.x - s * p.y;
    q.y = s * p.x + c * p.y;
    out.points.push_back(q);
  }
  return out;
}

inline Box3D rotate_about_origin(const Box3D& b, double delta_azimuth) {
  Box3D out = b;
  const double c = std::cos(delta_azimuth), s = std::sin(delta_azimuth);
  out.cx = c * b.cx - s * b.cy;
  out.cy = s * b.cx + c * b.cy;
  out.yaw = normalize_yaw(b.yaw + delta_azimuth);
  return out;
}

}  // namespace ood
