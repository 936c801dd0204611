#pragma once

// Shared fixtures: a small synthetic scene the stub detector reliably
// resolves, plus a two-object OOD database (one synthetic, one real source).

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/detector.hpp"
#include "oodkit/inject.hpp"
#include "oodkit/io.hpp"
#include "oodkit/rng.hpp"

namespace testfx {

namespace fs = std::filesystem;

// Unique per-test scratch directory, removed on destruction.
struct TempDir {
  fs::path path;

  explicit TempDir(const std::string& name) {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("oodkit-" + name + "-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline ood::Fov small_fov() {
  ood::Fov f;
  f.x_min = 0;
  f.x_max = 40;
  f.y_min = -20;
  f.y_max = 20;
  f.z_min = -3;
  f.z_max = 1;
  return f;
}

inline ood::DetectorConfig small_detector_config() {
  ood::DetectorConfig cfg;
  cfg.fov = small_fov();
  cfg.mc_samples = 5;
  return cfg;
}

// n points uniform inside an axis-aligned box, intensities U(i_lo, i_hi).
inline ood::PointCloud box_cluster(ood::Rng& rng, double cx, double cy,
                                   double cz, double l, double w, double h,
                                   std::size_t n, double i_lo = 0.2,
                                   double i_hi = 0.9) {
  ood::PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ood::Point p;
    p.x = cx + rng.uniform(-0.5 * l, 0.5 * l);
    p.y = cy + rng.uniform(-0.5 * w, 0.5 * w);
    p.z = cz + rng.uniform(-0.5 * h, 0.5 * h);
    p.intensity = rng.uniform(i_lo, i_hi);
    pc.points.push_back(p);
  }
  return pc;
}

inline void append(ood::PointCloud& dst, const ood::PointCloud& src) {
  dst.points.insert(dst.points.end(), src.points.begin(), src.points.end());
}

// One frame with a Car, a Pedestrian and a Cyclist cluster, all well inside
// the FOV and far from the insertion circles (radius <= 16) used by the OOD
// database below.
inline ood::inject::LoadedFrame make_frame(const std::string& frame_id,
                                           ood::Rng& rng) {
  ood::inject::LoadedFrame f;
  f.frame_id = frame_id;
  f.cloud.frame_id = frame_id;

  const struct {
    const char* cls;
    double cx, cy;
    double l, w, h;
    std::size_t n;
  } objs[] = {
      {"Car", 22, -12, 3.9, 1.6, 1.56, 260},
      {"Pedestrian", 27, 0, 0.8, 0.6, 1.73, 70},
      {"Cyclist", 32, 12, 1.76, 0.6, 1.73, 90},
  };
  for (const auto& o : objs) {
    const double cx = o.cx + rng.uniform(-1.5, 1.5);
    const double cy = o.cy + rng.uniform(-1.5, 1.5);
    const double cz = -0.8;
    append(f.cloud, box_cluster(rng, cx, cy, cz, o.l, o.w, o.h, o.n));
    ood::LabeledObject g;
    g.box = {cx, cy, cz, o.l, o.w, o.h, 0.0};
    g.class_name = o.cls;
    g.is_ood = false;
    g.category = ood::OodCategory::kDetectedFgInDist;
    f.labels.push_back(g);
  }
  return f;
}

inline std::vector<ood::inject::LoadedFrame> make_id_frames(
    std::size_t n, std::uint64_t seed) {
  ood::Rng rng(seed);
  std::vector<ood::inject::LoadedFrame> frames;
  for (std::size_t i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "%06zu", i);
    frames.push_back(make_frame(id, rng));
  }
  return frames;
}

inline const std::vector<std::string>& fg_classes() {
  static const std::vector<std::string> v{"Car", "Pedestrian", "Cyclist"};
  return v;
}

// OOD database: a synthetic-source Barrier on the r=12 circle and a
// real-source Dumpster on the r=15 circle. Both cluster shapes are
// detectable by the stub at tau=0.3.
inline void make_ood_db(const fs::path& dir, std::uint64_t seed) {
  ood::Rng rng(seed);
  std::vector<ood::io::OodObjectRecord> records;

  {
    const double az = 0.3, range = 12.0;
    ood::PointCloud pc = box_cluster(rng, range * std::cos(az),
                                     range * std::sin(az), -0.8, 2.0, 2.0, 1.0,
                                     220, 0.5, 0.5);
    ood::io::write_cloud(pc, dir / "barrier.bin");
    ood::io::OodObjectRecord r;
    r.object_id = "barrier0";
    r.class_name = "Barrier";
    r.source = ood::io::OodSource::synthetic;
    r.category = ood::OodCategory::kBgOutDistMisdetected;
    r.original_range = range;
    r.original_azimuth = az;
    r.cloud_path = dir / "barrier.bin";
    records.push_back(r);
  }
  {
    const double az = -0.4, range = 15.0;
    ood::PointCloud pc = box_cluster(rng, range * std::cos(az),
                                     range * std::sin(az), -0.8, 2.5, 1.2, 1.2,
                                     180, 0.2, 0.9);
    ood::io::write_cloud(pc, dir / "dumpster.bin");
    ood::io::OodObjectRecord r;
    r.object_id = "dumpster0";
    r.class_name = "Dumpster";
    r.source = ood::io::OodSource::real;
    r.category = ood::OodCategory::kBgInDistMisdetected;
    r.original_range = range;
    r.original_azimuth = az;
    r.cloud_path = dir / "dumpster.bin";
    records.push_back(r);
  }
  ood::io::write_ood_db(records, dir);
}

inline ood::inject::InjectConfig small_inject_config(std::uint64_t seed,
                                                     int zeta_max = 6) {
  ood::inject::InjectConfig cfg;
  cfg.fov = small_fov();
  cfg.rng_seed = seed;
  cfg.zeta_max = zeta_max;
  return cfg;
}

}  // namespace testfx
