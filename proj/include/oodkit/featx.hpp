#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"

namespace ood::featx {

// Layer-tagged H x W x C tensor. `stride_vs_backbone` is 1 for the backbone
// map and 2/4/8 for the intermediate convolution blocks.
struct FeatureMap {
  std::string layer;
  std::size_t height = 0, width = 0, channels = 0;
  int stride_vs_backbone = 1;
  std::vector<float> data;  // (y * width + x) * channels + c

  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * channels + c];
  }
  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * channels + c];
  }
  std::vector<float> cell(std::size_t y, std::size_t x) const {
    const auto* p = data.data() + (y * width + x) * channels;
    return std::vector<float>(p, p + channels);
  }
};

struct AnchorTemplate {
  int class_index = 0;
  std::string class_name;
  double length = 1, width = 1, height = 1;
  double yaw = 0;  // 0 or pi/2
};

// Backbone-resolution grid with metric BEV extent. Rows map to y, cols to x;
// anchor boxes sit at cell centers at a fixed z.
struct AnchorGrid {
  std::size_t rows = 0, cols = 0;
  double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  double anchor_z = 0;
  std::vector<AnchorTemplate> templates;

  double cell_w() const { return (x_max - x_min) / static_cast<double>(cols); }
  double cell_h() const { return (y_max - y_min) / static_cast<double>(rows); }

  Box3D anchor_box(std::size_t row, std::size_t col,
                   std::size_t template_idx) const {
    const auto& t = templates[template_idx];
    Box3D b;
    b.cx = x_min + (static_cast<double>(col) + 0.5) * cell_w();
    b.cy = y_min + (static_cast<double>(row) + 0.5) * cell_h();
    b.cz = anchor_z;
    b.length = t.length;
    b.width = t.width;
    b.height = t.height;
    b.yaw = t.yaw;
    return b;
  }

  std::size_t flat_index(std::size_t row, std::size_t col) const {
    return row * cols + col;
  }
};

struct FeatureSample {
  std::vector<float> vector;
  int class_label = 0;
  bool is_ood = false;
  enum class Source : std::uint8_t { gt_anchor = 0, prediction = 1 };
  Source source = Source::gt_anchor;
  std::string frame_id;
  std::string layer;
};

struct PositiveAnchor {
  std::size_t row = 0, col = 0;
  std::size_t template_idx = 0;
  int class_index = 0;       // class of the matched GT object
  std::size_t gt_index = 0;  // which GT object produced this positive
};

inline double positive_iou_threshold(const std::string& class_name) {
  return class_name == "Car" ? 0.6 : 0.5;
}

// Positive anchors per GT object: IoU >= class threshold, restricted to
// anchors of the object's class; the best-IoU anchor is forced positive when
// no anchor clears the threshold. One object may yield many positives.
inline std::vector<PositiveAnchor> assign_positive_anchors(
    const std::vector<LabeledObject>& gt, const AnchorGrid& grid) {
  std::vector<PositiveAnchor> out;
  for (std::size_t gi = 0; gi < gt.size(); ++gi) {
    const auto& obj = gt[gi];
    int class_index = -1;
    for (const auto& t : grid.templates)
      if (t.class_name == obj.class_name) {
        class_index = t.class_index;
        break;
      }
    if (class_index < 0) continue;  // class has no anchors
    const double thr = positive_iou_threshold(obj.class_name);

    // Search window: anchors further than the sum of half-diagonals cannot
    // overlap the object.
    double max_template_diag = 0;
    for (const auto& t : grid.templates)
      max_template_diag =
          std::max(max_template_diag, std::hypot(t.length, t.width));
    const double reach = 0.5 * std::hypot(obj.box.length, obj.box.width) +
                         0.5 * max_template_diag;
    const auto clamp_idx = [](double v, std::size_t n) {
      if (v < 0) return std::size_t{0};
      if (v >= static_cast<double>(n)) return n - 1;
      return static_cast<std::size_t>(v);
    };
    const std::size_t c0 =
        clamp_idx((obj.box.cx - reach - grid.x_min) / grid.cell_w() - 1,
                  grid.cols);
    const std::size_t c1 =
        clamp_idx((obj.box.cx + reach - grid.x_min) / grid.cell_w() + 1,
                  grid.cols);
    const std::size_t r0 =
        clamp_idx((obj.box.cy - reach - grid.y_min) / grid.cell_h() - 1,
                  grid.rows);
    const std::size_t r1 =
        clamp_idx((obj.box.cy + reach - grid.y_min) / grid.cell_h() + 1,
                  grid.rows);

    std::size_t matched_before = out.size();
    PositiveAnchor best{};
    double best_iou = -1.0;
    for (std::size_t r = r0; r <= r1; ++r)
      for (std::size_t c = c0; c <= c1; ++c)
        for (std::size_t ti = 0; ti < grid.templates.size(); ++ti) {
          if (grid.templates[ti].class_index != class_index) continue;
          const double iou = bev_iou(grid.anchor_box(r, c, ti), obj.box);
          if (iou > best_iou) {
            best_iou = iou;
            best = {r, c, ti, class_index, gi};
          }
          if (iou >= thr) out.push_back({r, c, ti, class_index, gi});
        }
    if (out.size() == matched_before && best_iou > 0) out.push_back(best);
  }
  return out;
}

// output[y][x] = fm[y/s][x/s]; the backbone layer passes through unchanged.
inline FeatureMap upsample_nearest(const FeatureMap& fm, std::size_t target_h,
                                   std::size_t target_w) {
  if (fm.height == target_h && fm.width == target_w) return fm;
  if (fm.height == 0 || fm.width == 0 || target_h % fm.height != 0 ||
      target_w % fm.width != 0)
    throw NonIntegerScale("target " + std::to_string(target_h) + "x" +
                          std::to_string(target_w) + " vs map " +
                          std::to_string(fm.height) + "x" +
                          std::to_string(fm.width));
  const std::size_t sy = target_h / fm.height;
  const std::size_t sx = target_w / fm.width;
  if (sy != sx)
    throw NonIntegerScale("anisotropic scale " + std::to_string(sy) + "/" +
                          std::to_string(sx));
  FeatureMap out;
  out.layer = fm.layer;
  out.height = target_h;
  out.width = target_w;
  out.channels = fm.channels;
  out.stride_vs_backbone = 1;
  out.data.resize(target_h * target_w * fm.channels);
  for (std::size_t y = 0; y < target_h; ++y)
    for (std::size_t x = 0; x < target_w; ++x)
      for (std::size_t c = 0; c < fm.channels; ++c)
        out.at(y, x, c) = fm.at(y / sy, x / sx, c);
  return out;
}

// One sample per positive anchor, read from the (upsampled) layer map at the
// anchor's backbone cell. No aggregation across anchors of one object.
template <typename DetectorOutputT>
std::vector<FeatureSample> extract_training_samples(
    const DetectorOutputT& out, const std::vector<LabeledObject>& gt,
    const AnchorGrid& grid, const std::string& layer,
    const std::string& frame_id = "") {
  const auto it = out.feature_maps.find(layer);
  if (it == out.feature_maps.end()) throw MissingLayer(layer);
  const FeatureMap up = upsample_nearest(it->second, grid.rows, grid.cols);
  std::vector<FeatureSample> samples;
  for (const auto& pa : assign_positive_anchors(gt, grid)) {
    FeatureSample s;
    s.vector = up.cell(pa.row, pa.col);
    s.class_label = pa.class_index;
    s.is_ood = gt[pa.gt_index].is_ood;
    s.source = FeatureSample::Source::gt_anchor;
    s.frame_id = frame_id;
    s.layer = layer;
    samples.push_back(std::move(s));
  }
  return samples;
}

// Exactly one sample per detection, at the detection's anchor cell.
template <typename DetectorOutputT>
std::vector<FeatureSample> extract_test_samples(
    const DetectorOutputT& out, const AnchorGrid& grid,
    const std::string& layer, const std::string& frame_id = "") {
  const auto it = out.feature_maps.find(layer);
  if (it == out.feature_maps.end()) throw MissingLayer(layer);
  const FeatureMap up = upsample_nearest(it->second, grid.rows, grid.cols);
  std::vector<FeatureSample> samples;
  for (const auto& det : out.detections) {
    if (!det.anchor_index.has_value())
      throw MissingAnchorIndex("detection without anchor index");
    const std::size_t idx = *det.anchor_index;
    const std::size_t row = idx / grid.cols;
    const std::size_t col = idx % grid.cols;
    FeatureSample s;
    s.vector = up.cell(row, col);
    s.class_label = det.predicted_class;
    s.is_ood = false;  // labeled downstream by GT matching
    s.source = FeatureSample::Source::prediction;
    s.frame_id = frame_id;
    s.layer = layer;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ood::featx
