#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/detector.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/io.hpp"
#include "oodkit/rng.hpp"

namespace ood::inject {

struct InjectConfig {
  int gamma_max = 100;    // max trials per frame
  int zeta_max = 300;     // max objects inserted per class
  double tau = 0.3;       // confirming-detection confidence threshold
  std::uint64_t rng_seed = 0;
  Fov fov;
  // BEV IoU thresholds for the Alg. 1 checks (see try_insert).
  double overlap_epsilon = 1e-9;
  double confirm_iou = 0.3;
  double preserve_iou = 0.5;
  enum class IntensityMode { none, constant, log_moments, by_source };
  IntensityMode intensity_mode = IntensityMode::by_source;
};

struct ClassStats {
  std::size_t attempted_frames = 0;
  std::size_t inserted_count = 0;
  std::size_t injection_failure_trials = 0;  // overlap / FOV rejections
  std::size_t detection_failure_trials = 0;  // not confirmed by the model

  double injection_failures() const {
    return attempted_frames
               ? static_cast<double>(injection_failure_trials) /
                     static_cast<double>(attempted_frames)
               : 0.0;
  }
  double detection_failures() const {
    return attempted_frames
               ? static_cast<double>(detection_failure_trials) /
                     static_cast<double>(attempted_frames)
               : 0.0;
  }
};

struct TrialRecord {
  std::string class_name;
  std::string frame_id;
  enum class Outcome { injection_failure, detection_failure, accepted };
  Outcome outcome;
};

struct InjectStats {
  std::map<std::string, ClassStats> per_class;
  std::vector<TrialRecord> trial_log;
};

// ---------------------------------------------------------------------------
// Intensity adaptation
// ---------------------------------------------------------------------------

inline double median_intensity(const PointCloud& target) {
  if (target.empty()) throw EmptyTarget("median of empty cloud");
  std::vector<double> v;
  v.reserve(target.size());
  for (const auto& p : target.points) v.push_back(p.intensity);
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Every output intensity set to the median of the target's intensities.
inline PointCloud match_intensity_constant(const PointCloud& obj,
                                           const PointCloud& target) {
  const double med = median_intensity(target);
  PointCloud out = obj;
  for (auto& p : out.points) p.intensity = med;
  return out;
}

inline constexpr double kLogIntensityEps = 1e-6;

// tanh the object intensities, then shift/scale in log space so mean and
// variance match the target's log-scale moments; result clamped to [0,1].
inline PointCloud match_intensity_log_moments(const PointCloud& obj,
                                              const PointCloud& target) {
  if (obj.empty() || target.empty())
    throw EmptyTarget("log-moment matching needs nonempty clouds");
  std::vector<double> u(obj.size());
  for (std::size_t i = 0; i < obj.size(); ++i)
    u[i] = std::log(std::tanh(obj.points[i].intensity) + kLogIntensityEps);
  double mean_u = 0;
  for (double v : u) mean_u += v;
  mean_u /= static_cast<double>(u.size());
  double var_u = 0;
  for (double v : u) var_u += (v - mean_u) * (v - mean_u);
  var_u /= static_cast<double>(u.size());
  if (var_u < 1e-18)
    throw DegenerateIntensity("object intensity variance is zero after tanh");

  double mean_t = 0;
  for (const auto& p : target.points)
    mean_t += std::log(p.intensity + kLogIntensityEps);
  mean_t /= static_cast<double>(target.size());
  double var_t = 0;
  for (const auto& p : target.points) {
    const double d = std::log(p.intensity + kLogIntensityEps) - mean_t;
    var_t += d * d;
  }
  var_t /= static_cast<double>(target.size());

  const double scale = std::sqrt(var_t / var_u);
  PointCloud out = obj;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double adjusted = (u[i] - mean_u) * scale + mean_t;
    out.points[i].intensity =
        std::clamp(std::exp(adjusted) - kLogIntensityEps, 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Placement
// ---------------------------------------------------------------------------

inline Box3D tight_box(const PointCloud& pc) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300, z0 = 1e300,
         z1 = -1e300;
  for (const auto& p : pc.points) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
    z0 = std::min(z0, p.z);
    z1 = std::max(z1, p.z);
  }
  Box3D b;
  b.cx = 0.5 * (x0 + x1);
  b.cy = 0.5 * (y0 + y1);
  b.cz = 0.5 * (z0 + z1);
  b.length = std::max(x1 - x0, 1e-3);
  b.width = std::max(y1 - y0, 1e-3);
  b.height = std::max(z1 - z0, 1e-3);
  return b;
}

struct PlacedObject {
  PointCloud merged;
  Box3D proposed_box;
  std::size_t first_inserted_index = 0;  // index of the object's first point
};

// Rotate the object from its original azimuth to `azimuth` about the sensor
// origin (range preserved) and concatenate onto the frame. No shadows are
// simulated.
inline PlacedObject place_object(const io::OodObjectRecord& record,
                                 const PointCloud& obj_cloud,
                                 const PointCloud& frame, double azimuth) {
  const double delta = azimuth - record.original_azimuth;
  const PointCloud rotated = rotate_about_origin(obj_cloud, delta);
  PlacedObject out;
  out.merged = frame;
  out.first_inserted_index = frame.size();
  out.merged.points.insert(out.merged.points.end(), rotated.points.begin(),
                           rotated.points.end());
  out.proposed_box = rotate_about_origin(tight_box(obj_cloud), delta);
  return out;
}

// ---------------------------------------------------------------------------
// try_insert: one Alg. 1 trial
// ---------------------------------------------------------------------------

struct Accepted {
  PointCloud frame;
  LabeledObject label;
  Detection detection;
};
struct OverlapOrFovFail {};
struct DetectFail {};
using TryInsertResult = std::variant<Accepted, OverlapOrFovFail, DetectFail>;

// Azimuth interval covering the FOV rectangle as seen from the sensor. When
// the origin is inside the rectangle every azimuth is admissible.
inline std::pair<double, double> fov_azimuth_interval(const Fov& fov) {
  if (fov.x_min < 0 && fov.x_max > 0 && fov.y_min < 0 && fov.y_max > 0)
    return {-std::numbers::pi, std::numbers::pi};
  double lo = 1e300, hi = -1e300;
  for (double x : {fov.x_min, fov.x_max})
    for (double y : {fov.y_min, fov.y_max}) {
      const double a = std::atan2(y, x);
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
  if (hi - lo > std::numbers::pi)  // interval wraps; fall back to full circle
    return {-std::numbers::pi, std::numbers::pi};
  return {lo, hi};
}

inline PointCloud adapt_intensity(const io::OodObjectRecord& record,
                                  const PointCloud& obj,
                                  const PointCloud& frame,
                                  InjectConfig::IntensityMode mode) {
  using Mode = InjectConfig::IntensityMode;
  if (mode == Mode::none || frame.empty()) return obj;
  if (mode == Mode::constant) return match_intensity_constant(obj, frame);
  if (mode == Mode::log_moments)
    return match_intensity_log_moments(obj, frame);
  // by_source: synthetic objects get the constant median, real objects the
  // log-moment transform (constant fallback for degenerate intensities).
  if (record.source == io::OodSource::synthetic)
    return match_intensity_constant(obj, frame);
  try {
    return match_intensity_log_moments(obj, frame);
  } catch (const DegenerateIntensity&) {
    return match_intensity_constant(obj, frame);
  }
}

inline TryInsertResult try_insert(const PointCloud& frame,
                                  const std::vector<LabeledObject>& labels,
                                  const io::OodObjectRecord& record,
                                  const PointCloud& obj_cloud,
                                  const Detector& model,
                                  const std::vector<Detection>& pre_detections,
                                  const InjectConfig& cfg, double azimuth) {
  const PointCloud adapted =
      adapt_intensity(record, obj_cloud, frame, cfg.intensity_mode);
  PlacedObject placed = place_object(record, adapted, frame, azimuth);
  const Box3D& box = placed.proposed_box;

  // (a) zero BEV overlap with every GT box and pre-insertion prediction,
  // (b) box center inside the FOV.
  if (!cfg.fov.contains(box.cx, box.cy, box.cz)) return OverlapOrFovFail{};
  for (const auto& g : labels)
    if (bev_iou(box, g.box) > cfg.overlap_epsilon) return OverlapOrFovFail{};
  for (const auto& p : pre_detections)
    if (bev_iou(box, p.box) > cfg.overlap_epsilon) return OverlapOrFovFail{};

  // (c) the model must confirm the inserted object.
  const DetectorOutput post = model.detect(placed.merged);
  const Detection* confirming = nullptr;
  for (const auto& d : post.detections)
    if (d.confidence >= cfg.tau && bev_iou(d.box, box) >= cfg.confirm_iou) {
      confirming = &d;
      break;
    }
  if (!confirming) return DetectFail{};

  // (d) every pre-insertion prediction keeps a same-class match.
  for (const auto& p : pre_detections) {
    bool matched = false;
    for (const auto& d : post.detections)
      if (d.predicted_class == p.predicted_class &&
          bev_iou(d.box, p.box) >= cfg.preserve_iou) {
        matched = true;
        break;
      }
    if (!matched) return DetectFail{};
  }

  Accepted acc;
  acc.frame = std::move(placed.merged);
  acc.label.box = box;
  acc.label.class_name = record.class_name;
  acc.label.is_ood = true;
  acc.label.category = record.category;
  acc.detection = *confirming;
  return acc;
}

// ---------------------------------------------------------------------------
// generate_ood_dataset: Alg. 1 in full
// ---------------------------------------------------------------------------

struct LoadedFrame {
  std::string frame_id;
  PointCloud cloud;
  std::vector<LabeledObject> labels;
};

struct LoadedObject {
  io::OodObjectRecord record;
  PointCloud cloud;
};

struct GenerateResult {
  std::vector<LoadedFrame> frames;  // augmented, manifest order
  InjectStats stats;
};

// Per class (sorted by name): walk frames in manifest order until zeta_max
// objects are inserted, running up to gamma_max trials per frame and moving
// on after the first acceptance. Classes see the dataset as updated by
// earlier classes.
inline GenerateResult generate_ood_dataset(std::vector<LoadedFrame> frames,
                                           const std::vector<LoadedObject>& db,
                                           const Detector& model,
                                           const InjectConfig& cfg) {
  if (db.empty()) throw EmptyDatabaseClass("OOD object database is empty");
  std::map<std::string, std::vector<const LoadedObject*>> by_class;
  for (const auto& obj : db) by_class[obj.record.class_name].push_back(&obj);

  GenerateResult result;
  result.frames = std::move(frames);
  const auto [az_lo, az_hi] = fov_azimuth_interval(cfg.fov);

  for (const auto& [class_name, objects] : by_class) {
    if (objects.empty()) throw EmptyDatabaseClass(class_name);
    auto& stats = result.stats.per_class[class_name];
    Rng rng(mix_seed(cfg.rng_seed,
                     detail::fnv1a(class_name.data(), class_name.size())));
    int zeta = 0;
    for (auto& frame : result.frames) {
      if (zeta >= cfg.zeta_max) break;
      ++stats.attempted_frames;
      const DetectorOutput pre = model.detect(frame.cloud);
      for (int gamma = 0; gamma < cfg.gamma_max; ++gamma) {
        const auto& obj = *objects[rng.uniform_index(objects.size())];
        const double azimuth = rng.uniform(az_lo, az_hi);
        TryInsertResult r =
            try_insert(frame.cloud, frame.labels, obj.record, obj.cloud, model,
                       pre.detections, cfg, azimuth);
        if (std::holds_alternative<OverlapOrFovFail>(r)) {
          ++stats.injection_failure_trials;
          result.stats.trial_log.push_back(
              {class_name, frame.frame_id,
               TrialRecord::Outcome::injection_failure});
          continue;
        }
        if (std::holds_alternative<DetectFail>(r)) {
          ++stats.detection_failure_trials;
          result.stats.trial_log.push_back(
              {class_name, frame.frame_id,
               TrialRecord::Outcome::detection_failure});
          continue;
        }
        auto& acc = std::get<Accepted>(r);
        frame.cloud = std::move(acc.frame);
        frame.labels.push_back(acc.label);
        ++stats.inserted_count;
        ++zeta;
        result.stats.trial_log.push_back(
            {class_name, frame.frame_id, TrialRecord::Outcome::accepted});
        break;
      }
    }
  }
  return result;
}

// Load helpers bridging the manifest formats to the in-memory generator.

inline std::vector<LoadedFrame> load_frames(const io::DatasetManifest& m) {
  std::vector<LoadedFrame> frames;
  frames.reserve(m.frames.size());
  for (const auto& f : m.frames) {
    LoadedFrame lf;
    lf.frame_id = f.frame_id;
    lf.cloud = io::read_cloud(f.cloud_path);
    lf.cloud.frame_id = f.frame_id;
    lf.labels = io::read_labels(f.label_path);
    frames.push_back(std::move(lf));
  }
  return frames;
}

inline std::vector<LoadedObject> load_ood_db(const std::filesystem::path& dir) {
  std::vector<LoadedObject> out;
  for (const auto& rec : io::read_ood_db(dir)) {
    LoadedObject obj;
    obj.record = rec;
    obj.cloud = io::read_cloud(rec.cloud_path);
    out.push_back(std::move(obj));
  }
  return out;
}

// Persist an augmented dataset under out_dir (clouds/, labels/, manifest.txt).
inline io::DatasetManifest write_dataset(const std::vector<LoadedFrame>& frames,
                                         const std::vector<std::string>& classes,
                                         const std::filesystem::path& out_dir) {
  io::DatasetManifest m;
  m.classes = classes;
  for (const auto& f : frames) {
    io::FrameRef ref;
    ref.frame_id = f.frame_id;
    ref.cloud_path = out_dir / "clouds" / (f.frame_id + ".bin");
    ref.label_path = out_dir / "labels" / (f.frame_id + ".txt");
    io::write_cloud(f.cloud, ref.cloud_path);
    io::write_labels(f.labels, ref.label_path);
    m.frames.push_back(std::move(ref));
  }
  io::write_manifest(m, out_dir / "manifest.txt");
  return m;
}

// Stats summary as line-oriented structured text.
inline void write_stats(const InjectStats& stats,
                        const std::filesystem::path& path) {
  std::ostringstream ss;
  for (const auto& [cls, s] : stats.per_class)
    ss << "class=" << cls << " attempted_frames=" << s.attempted_frames
       << " inserted=" << s.inserted_count
       << " injection_failures=" << io::detail::fmt_float(s.injection_failures())
       << " detection_failures=" << io::detail::fmt_float(s.detection_failures())
       << '\n';
  io::detail::write_file(path, ss.str());
}

}  // namespace ood::inject
