#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/featx.hpp"
#include "oodkit/rng.hpp"

namespace ood {

struct ClassTemplate {
  std::string name;
  double length = 1, width = 1, height = 1;
};

inline std::vector<ClassTemplate> default_class_templates() {
  return {{"Car", 3.9, 1.6, 1.56},
          {"Pedestrian", 0.8, 0.6, 1.73},
          {"Cyclist", 1.76, 0.6, 1.73}};
}

struct Fov {
  double x_min = 0, x_max = 70.4;
  double y_min = -40, y_max = 40;
  double z_min = -3, z_max = 1;

  bool contains(double x, double y, double z) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max &&
           z >= z_min && z <= z_max;
  }
  bool contains_bev(double x, double y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
};

struct DetectorConfig {
  double score_threshold = 0.3;  // tau
  Fov fov;
  int mc_samples = 10;  // T
  std::uint64_t rng_seed = 0;
  // stub parameters
  double cell_size = 0.5;        // BEV clustering and backbone cell size (m)
  std::size_t min_points = 30;   // minimum cluster size
  double temperature = 0.5;      // softmax temperature on size mismatch (m)
  double background_distance = 2.0;
  std::vector<ClassTemplate> class_templates = default_class_templates();
};

struct DetectorOutput {
  std::vector<Detection> detections;
  std::map<std::string, featx::FeatureMap> feature_maps;
  // per detection, T probability vectors (empty when MC sampling is off)
  std::vector<std::vector<std::vector<double>>> mc_softmax_samples;
};

struct Detector {
  virtual ~Detector() = default;
  virtual DetectorOutput detect(const PointCloud& pc) const = 0;
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_cloud(const PointCloud& pc) {
  std::uint64_t h = fnv1a(pc.frame_id.data(), pc.frame_id.size());
  for (const auto& p : pc.points) {
    const double v[4] = {p.x, p.y, p.z, p.intensity};
    h = fnv1a(v, sizeof(v), h);
  }
  return h;
}

// Deterministic mixing weights for the hashed feature channels.
inline double hash_weight(std::uint64_t layer_salt, std::size_t channel,
                          std::size_t stat) {
  std::uint64_t s = mix_seed(layer_salt, (channel << 8) ^ stat);
  return 2.0 * (static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53) - 1.0;
}

}  // namespace detail

// Deterministic geometric detector: grid-clusters points in BEV cells,
// merges 8-connected occupied cells, and emits one detection per cluster of
// at least min_points. Feature maps are per-cell occupancy statistics at
// strides 1/2/4/8; MC softmax samples are seeded Dirichlet perturbations of
// the class distribution.
class StubDetector : public Detector {
 public:
  explicit StubDetector(DetectorConfig cfg) : cfg_(std::move(cfg)) {
    // Backbone grid dims rounded up to a multiple of 8 so the strided maps
    // divide evenly; the extent is widened to keep cells square.
    cols_ = round_up8(static_cast<std::size_t>(
        std::ceil((cfg_.fov.x_max - cfg_.fov.x_min) / cfg_.cell_size)));
    rows_ = round_up8(static_cast<std::size_t>(
        std::ceil((cfg_.fov.y_max - cfg_.fov.y_min) / cfg_.cell_size)));
    x_max_grid_ = cfg_.fov.x_min + static_cast<double>(cols_) * cfg_.cell_size;
    y_max_grid_ = cfg_.fov.y_min + static_cast<double>(rows_) * cfg_.cell_size;
  }

  const DetectorConfig& config() const { return cfg_; }

  featx::AnchorGrid anchor_grid() const {
    featx::AnchorGrid g;
    g.rows = rows_;
    g.cols = cols_;
    g.x_min = cfg_.fov.x_min;
    g.x_max = x_max_grid_;
    g.y_min = cfg_.fov.y_min;
    g.y_max = y_max_grid_;
    g.anchor_z = 0.5 * (cfg_.fov.z_min + cfg_.fov.z_max);
    int ci = 0;
    for (const auto& t : cfg_.class_templates) {
      for (double yaw : {0.0, std::numbers::pi / 2}) {
        featx::AnchorTemplate a;
        a.class_index = ci;
        a.class_name = t.name;
        a.length = t.length;
        a.width = t.width;
        a.height = t.height;
        a.yaw = yaw;
        g.templates.push_back(a);
      }
      ++ci;
    }
    return g;
  }

  DetectorOutput detect(const PointCloud& pc) const override {
    DetectorOutput out;

    // Assign in-FOV points to backbone cells.
    std::vector<std::vector<std::size_t>> cell_points(rows_ * cols_);
    for (std::size_t i = 0; i < pc.points.size(); ++i) {
      const auto& p = pc.points[i];
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        throw DetectorFailure("non-finite point coordinate");
      if (!cfg_.fov.contains(p.x, p.y, p.z)) continue;
      const auto [r, c] = cell_of(p.x, p.y);
      cell_points[r * cols_ + c].push_back(i);
    }

    out.feature_maps = build_feature_maps(pc, cell_points);

    // 8-connected merge of occupied cells.
    std::vector<int> cluster_of(rows_ * cols_, -1);
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) {
        const std::size_t idx = r * cols_ + c;
        if (cell_points[idx].empty() || cluster_of[idx] >= 0) continue;
        const int id = static_cast<int>(clusters.size());
        clusters.emplace_back();
        std::vector<std::size_t> stack{idx};
        cluster_of[idx] = id;
        while (!stack.empty()) {
          const std::size_t cur = stack.back();
          stack.pop_back();
          clusters[id].push_back(cur);
          const std::size_t cr = cur / cols_, cc = cur % cols_;
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              if (dr == 0 && dc == 0) continue;
              const std::int64_t nr = static_cast<std::int64_t>(cr) + dr;
              const std::int64_t nc = static_cast<std::int64_t>(cc) + dc;
              if (nr < 0 || nc < 0 || nr >= static_cast<std::int64_t>(rows_) ||
                  nc >= static_cast<std::int64_t>(cols_))
                continue;
              const std::size_t nidx =
                  static_cast<std::size_t>(nr) * cols_ +
                  static_cast<std::size_t>(nc);
              if (!cell_points[nidx].empty() && cluster_of[nidx] < 0) {
                cluster_of[nidx] = id;
                stack.push_back(nidx);
              }
            }
        }
      }

    const std::uint64_t cloud_hash = detail::hash_cloud(pc);
    std::vector<std::pair<Detection, std::size_t>> dets;  // with cluster id
    for (std::size_t cid = 0; cid < clusters.size(); ++cid) {
      std::vector<std::size_t> pts;
      for (std::size_t cell : clusters[cid])
        pts.insert(pts.end(), cell_points[cell].begin(),
                   cell_points[cell].end());
      if (pts.size() < cfg_.min_points) continue;
      Detection det = make_detection(pc, pts);
      if (det.confidence < cfg_.score_threshold) continue;
      dets.emplace_back(std::move(det), cid);
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const auto& a, const auto& b) {
                       return a.first.confidence > b.first.confidence;
                     });

    for (std::size_t di = 0; di < dets.size(); ++di) {
      out.detections.push_back(std::move(dets[di].first));
      if (cfg_.mc_samples > 0) {
        Rng rng(mix_seed(mix_seed(cfg_.rng_seed, cloud_hash),
                         dets[di].second + 1));
        std::vector<std::vector<double>> samples;
        const auto& probs = out.detections.back().class_probs;
        std::vector<double> alpha(probs.size());
        for (std::size_t k = 0; k < probs.size(); ++k)
          alpha[k] = 50.0 * probs[k];
        for (int t = 0; t < cfg_.mc_samples; ++t)
          samples.push_back(rng.dirichlet(alpha));
        out.mc_softmax_samples.push_back(std::move(samples));
      }
    }
    return out;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

 private:
  static std::size_t round_up8(std::size_t v) {
    return (v + 7) / 8 * 8;
  }

  std::pair<std::size_t, std::size_t> cell_of(double x, double y) const {
    auto clamp_cell = [](double v, std::size_t n) {
      if (v < 0) return std::size_t{0};
      const auto i = static_cast<std::size_t>(v);
      return i >= n ? n - 1 : i;
    };
    return {clamp_cell((y - cfg_.fov.y_min) / cfg_.cell_size, rows_),
            clamp_cell((x - cfg_.fov.x_min) / cfg_.cell_size, cols_)};
  }

  Detection make_detection(const PointCloud& pc,
                           const std::vector<std::size_t>& pts) const {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300, z0 = 1e300,
           z1 = -1e300;
    for (std::size_t i : pts) {
      const auto& p = pc.points[i];
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
      z0 = std::min(z0, p.z);
      z1 = std::max(z1, p.z);
    }
    Detection det;
    det.box.cx = 0.5 * (x0 + x1);
    det.box.cy = 0.5 * (y0 + y1);
    det.box.cz = 0.5 * (z0 + z1);
    det.box.length = std::max(x1 - x0, 0.1);
    det.box.width = std::max(y1 - y0, 0.1);
    det.box.height = std::max(z1 - z0, 0.1);
    det.box.yaw = 0;

    // Class by footprint-size match against the per-class templates; the
    // cluster footprint is orientation-free so compare sorted extents.
    const double e_long = std::max(det.box.length, det.box.width);
    const double e_short = std::min(det.box.length, det.box.width);
    const std::size_t k = cfg_.class_templates.size();
    std::vector<double> mismatch(k);
    for (std::size_t c = 0; c < k; ++c) {
      const auto& t = cfg_.class_templates[c];
      mismatch[c] = std::sqrt(sq(e_long - t.length) + sq(e_short - t.width) +
                              sq(det.box.height - t.height));
    }
    det.logits.resize(k);
    for (std::size_t c = 0; c < k; ++c)
      det.logits[c] = -mismatch[c] / cfg_.temperature;
    std::vector<double> softmax_fg(k);
    double zmax = *std::max_element(det.logits.begin(), det.logits.end());
    double zsum = 0;
    for (std::size_t c = 0; c < k; ++c) {
      softmax_fg[c] = std::exp(det.logits[c] - zmax);
      zsum += softmax_fg[c];
    }
    for (auto& v : softmax_fg) v /= zsum;

    // FG mass from cluster density; background takes the remainder.
    const double fg_mass =
        1.0 / (1.0 + std::exp(-static_cast<double>(pts.size()) / 100.0));
    det.class_probs.resize(k + 1);
    for (std::size_t c = 0; c < k; ++c)
      det.class_probs[c] = fg_mass * softmax_fg[c];
    det.class_probs[k] = 1.0 - fg_mass;
    det.predicted_class = static_cast<int>(
        std::max_element(softmax_fg.begin(), softmax_fg.end()) -
        softmax_fg.begin());
    det.confidence = det.class_probs[det.predicted_class];

    const auto [row, col] = cell_of(det.box.cx, det.box.cy);
    det.anchor_index = row * cols_ + col;
    return det;
  }

  std::map<std::string, featx::FeatureMap> build_feature_maps(
      const PointCloud& pc,
      const std::vector<std::vector<std::size_t>>& cell_points) const {
    std::map<std::string, featx::FeatureMap> maps;
    const struct {
      const char* name;
      int stride;
    } layers[] = {{"backbone", 1}, {"conv2x", 2}, {"conv4x", 4}, {"conv8x", 8}};
    for (const auto& layer : layers) {
      const std::size_t s = static_cast<std::size_t>(layer.stride);
      featx::FeatureMap fm;
      fm.layer = layer.name;
      fm.stride_vs_backbone = layer.stride;
      fm.height = rows_ / s;
      fm.width = cols_ / s;
      fm.channels = 8;
      fm.data.assign(fm.height * fm.width * fm.channels, 0.0f);
      const std::uint64_t salt =
          detail::fnv1a(layer.name, std::char_traits<char>::length(layer.name));
      for (std::size_t y = 0; y < fm.height; ++y)
        for (std::size_t x = 0; x < fm.width; ++x) {
          // Aggregate the s x s backbone block.
          std::size_t count = 0;
          double sum_z = 0, max_z = -1e300, sum_i = 0;
          for (std::size_t by = y * s; by < (y + 1) * s; ++by)
            for (std::size_t bx = x * s; bx < (x + 1) * s; ++bx)
              for (std::size_t pi : cell_points[by * cols_ + bx]) {
                const auto& p = pc.points[pi];
                ++count;
                sum_z += p.z;
                max_z = std::max(max_z, p.z);
                sum_i += p.intensity;
              }
          if (count == 0) continue;
          const double stats[4] = {
              std::log1p(static_cast<double>(count)),
              sum_z / static_cast<double>(count), max_z,
              sum_i / static_cast<double>(count)};
          for (std::size_t ch = 0; ch < 4; ++ch)
            fm.at(y, x, ch) = static_cast<float>(stats[ch]);
          for (std::size_t ch = 4; ch < 8; ++ch) {
            double v = 0;
            for (std::size_t st = 0; st < 4; ++st)
              v += detail::hash_weight(salt, ch, st) * stats[st];
            fm.at(y, x, ch) = static_cast<float>(std::tanh(v));
          }
        }
      maps.emplace(layer.name, std::move(fm));
    }
    return maps;
  }

  static double sq(double v) { return v * v; }

  DetectorConfig cfg_;
  std::size_t rows_ = 0, cols_ = 0;
  double x_max_grid_ = 0, y_max_grid_ = 0;
};

}  // namespace ood
