#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/featx.hpp"

namespace ood::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// little-endian primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& data;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n) const {
    if (pos + n > data.size())
      throw TruncatedFile(path + " at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data[pos++]);
  }
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string fmt_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Point clouds: one 16-byte record per point, four little-endian f32
// (x, y, z, intensity). Real KITTI .bin files load unmodified.
// ---------------------------------------------------------------------------

struct ReadCloudStats {
  std::size_t clamped_intensities = 0;
};

inline PointCloud read_cloud(const fs::path& path,
                             ReadCloudStats* stats = nullptr) {
  const std::string data = detail::read_file(path);
  if (data.size() % 16 != 0)
    throw TruncatedFile(path.string() + ": length " +
                        std::to_string(data.size()) +
                        " is not a multiple of 16");
  PointCloud pc;
  pc.frame_id = path.stem().string();
  detail::Reader r{data, 0, path.string()};
  pc.points.reserve(data.size() / 16);
  while (r.pos < data.size()) {
    Point p;
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    double intensity = r.f32();
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) ||
        !std::isfinite(intensity))
      throw NonFiniteValue(path.string() + " at byte " +
                           std::to_string(r.pos - 16));
    if (intensity < 0.0 || intensity > 1.0) {
      intensity = std::clamp(intensity, 0.0, 1.0);
      if (stats) ++stats->clamped_intensities;
    }
    p.intensity = intensity;
    pc.points.push_back(p);
  }
  return pc;
}

inline void write_cloud(const PointCloud& pc, const fs::path& path) {
  std::string out;
  out.reserve(pc.points.size() * 16);
  for (const auto& p : pc.points) {
    detail::put_f32(out, static_cast<float>(p.x));
    detail::put_f32(out, static_cast<float>(p.y));
    detail::put_f32(out, static_cast<float>(p.z));
    detail::put_f32(out, static_cast<float>(p.intensity));
  }
  detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Labels: one object per line, whitespace-separated
//   class l w h x y z yaw is_ood category
// '#' starts a comment.
// ---------------------------------------------------------------------------

inline std::vector<LabeledObject> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<LabeledObject> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    LabeledObject obj;
    int is_ood = 0, category = 0;
    if (!(ss >> obj.class_name)) continue;  // blank line
    if (!(ss >> obj.box.length >> obj.box.width >> obj.box.height >>
          obj.box.cx >> obj.box.cy >> obj.box.cz >> obj.box.yaw >> is_ood >>
          category))
      throw ParseError(path.string() + ":" + std::to_string(lineno));
    obj.is_ood = is_ood != 0;
    obj.category = category_from_int(category);
    if (obj.is_ood != is_ood_category(obj.category))
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": is_ood flag inconsistent with category");
    out.push_back(std::move(obj));
  }
  return out;
}

inline void write_labels(const std::vector<LabeledObject>& labels,
                         const fs::path& path) {
  std::ostringstream ss;
  for (const auto& o : labels) {
    ss << o.class_name << ' ' << detail::fmt_float(o.box.length) << ' '
       << detail::fmt_float(o.box.width) << ' '
       << detail::fmt_float(o.box.height) << ' '
       << detail::fmt_float(o.box.cx) << ' ' << detail::fmt_float(o.box.cy)
       << ' ' << detail::fmt_float(o.box.cz) << ' '
       << detail::fmt_float(o.box.yaw) << ' ' << (o.is_ood ? 1 : 0) << ' '
       << static_cast<int>(o.category) << '\n';
  }
  detail::write_file(path, ss.str());
}

// ---------------------------------------------------------------------------
// Dataset manifests: line-oriented key=value records.
//   classes=Car,Pedestrian,Cyclist
//   frame_id=000000 cloud=clouds/000000.bin labels=labels/000000.txt
// Paths are relative to the manifest's directory.
// ---------------------------------------------------------------------------

struct FrameRef {
  std::string frame_id;
  fs::path cloud_path;
  fs::path label_path;
};

struct DatasetManifest {
  std::vector<FrameRef> frames;
  std::vector<std::string> classes;
};

namespace detail {

inline std::map<std::string, std::string> parse_kv_line(
    const std::string& line, const std::string& where) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace detail

inline DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const fs::path base = path.parent_path();
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, bool> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto kv = detail::parse_kv_line(line, where);
    if (kv.count("classes")) {
      m.classes = detail::split(kv.at("classes"), ',');
      continue;
    }
    if (!kv.count("frame_id") || !kv.count("cloud") || !kv.count("labels"))
      throw ParseError(where + ": frame record needs frame_id, cloud, labels");
    FrameRef f;
    f.frame_id = kv.at("frame_id");
    if (seen[f.frame_id]) throw ParseError(where + ": duplicate frame_id " + f.frame_id);
    seen[f.frame_id] = true;
    f.cloud_path = base / kv.at("cloud");
    f.label_path = base / kv.at("labels");
    m.frames.push_back(std::move(f));
  }
  return m;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  std::ostringstream ss;
  std::string classes;
  for (std::size_t i = 0; i < m.classes.size(); ++i) {
    if (i) classes += ',';
    classes += m.classes[i];
  }
  ss << "classes=" << classes << '\n';
  for (const auto& f : m.frames)
    ss << "frame_id=" << f.frame_id << " cloud="
       << fs::relative(f.cloud_path, base).generic_string()
       << " labels=" << fs::relative(f.label_path, base).generic_string()
       << '\n';
  detail::write_file(path, ss.str());
}

// ---------------------------------------------------------------------------
// OOD object database: a directory with db.txt (one record per line) plus the
// per-object cloud files.
// ---------------------------------------------------------------------------

enum class OodSource : int { synthetic = 0, real = 1 };

struct OodObjectRecord {
  std::string object_id;
  std::string class_name;
  OodSource source = OodSource::synthetic;
  OodCategory category = OodCategory::kBgOutDistMisdetected;
  double original_range = 0;    // meters
  double original_azimuth = 0;  // radians
  fs::path cloud_path;
};

inline std::vector<OodObjectRecord> read_ood_db(const fs::path& dir) {
  const fs::path manifest = dir / "db.txt";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  std::vector<OodObjectRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = manifest.string() + ":" + std::to_string(lineno);
    const auto kv = detail::parse_kv_line(line, where);
    for (const char* key :
         {"object_id", "class", "source", "category", "range", "azimuth",
          "cloud"})
      if (!kv.count(key)) throw ParseError(where + ": missing " + key);
    OodObjectRecord r;
    r.object_id = kv.at("object_id");
    r.class_name = kv.at("class");
    if (kv.at("source") == "synthetic")
      r.source = OodSource::synthetic;
    else if (kv.at("source") == "real")
      r.source = OodSource::real;
    else
      throw ParseError(where + ": unknown source '" + kv.at("source") + "'");
    r.category = category_from_int(std::stoi(kv.at("category")));
    if (!in_scope(r.category))
      throw UnknownCategory(where + ": category not in scope");
    r.original_range = std::stod(kv.at("range"));
    r.original_azimuth = std::stod(kv.at("azimuth"));
    if (!(r.original_range > 0)) throw ParseError(where + ": range must be > 0");
    r.cloud_path = dir / kv.at("cloud");
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_ood_db(const std::vector<OodObjectRecord>& records,
                         const fs::path& dir) {
  std::ostringstream ss;
  for (const auto& r : records)
    ss << "object_id=" << r.object_id << " class=" << r.class_name
       << " source=" << (r.source == OodSource::synthetic ? "synthetic" : "real")
       << " category=" << static_cast<int>(r.category)
       << " range=" << detail::fmt_float(r.original_range)
       << " azimuth=" << detail::fmt_float(r.original_azimuth)
       << " cloud=" << fs::relative(r.cloud_path, dir).generic_string() << '\n';
  detail::write_file(dir / "db.txt", ss.str());
}

// ---------------------------------------------------------------------------
// Feature dumps: binary header (magic, count, dim, layer tag, class count)
// followed by rows of (class_label u32, is_ood u8, source u8, d x f32).
// ---------------------------------------------------------------------------

inline constexpr char kFeatureDumpMagic[8] = {'O', 'O', 'D', 'F',
                                              'D', 'P', 'v', '1'};

inline void write_feature_dump(const std::vector<featx::FeatureSample>& samples,
                               const fs::path& path,
                               std::uint32_t class_count = 0) {
  std::size_t dim = samples.empty() ? 0 : samples.front().vector.size();
  std::string layer = samples.empty() ? "" : samples.front().layer;
  for (const auto& s : samples) {
    if (s.vector.size() != dim)
      throw DimensionMismatch("feature dump rows must share one dimension");
    if (s.layer != layer)
      throw DimensionMismatch("feature dump rows must share one layer tag");
  }
  std::string out(kFeatureDumpMagic, sizeof(kFeatureDumpMagic));
  detail::put_u64(out, samples.size());
  detail::put_u32(out, static_cast<std::uint32_t>(dim));
  detail::put_u32(out, class_count);
  char tag[16] = {};
  std::memcpy(tag, layer.data(), std::min<std::size_t>(layer.size(), 16));
  out.append(tag, 16);
  for (const auto& s : samples) {
    detail::put_u32(out, static_cast<std::uint32_t>(s.class_label));
    out.push_back(static_cast<char>(s.is_ood ? 1 : 0));
    out.push_back(static_cast<char>(s.source));
    for (float v : s.vector) detail::put_f32(out, v);
  }
  detail::write_file(path, out);
}

struct FeatureDump {
  std::vector<featx::FeatureSample> samples;
  std::uint32_t class_count = 0;
  std::string layer;
};

inline FeatureDump read_feature_dump(const fs::path& path) {
  const std::string data = detail::read_file(path);
  detail::Reader r{data, 0, path.string()};
  r.need(sizeof(kFeatureDumpMagic));
  if (std::memcmp(data.data(), kFeatureDumpMagic,
                  sizeof(kFeatureDumpMagic)) != 0)
    throw ParseError(path.string() + ": bad feature dump magic");
  r.pos = sizeof(kFeatureDumpMagic);
  const std::uint64_t n = r.u64();
  const std::uint32_t dim = r.u32();
  FeatureDump dump;
  dump.class_count = r.u32();
  r.need(16);
  {
    const char* tag = data.data() + r.pos;
    std::size_t len = 0;
    while (len < 16 && tag[len] != 0) ++len;
    dump.layer.assign(tag, len);
    r.pos += 16;
  }
  dump.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    featx::FeatureSample s;
    s.class_label = static_cast<int>(r.u32());
    s.is_ood = r.u8() != 0;
    s.source = static_cast<featx::FeatureSample::Source>(r.u8());
    s.layer = dump.layer;
    s.vector.resize(dim);
    for (auto& v : s.vector) v = r.f32();
    dump.samples.push_back(std::move(s));
  }
  if (r.pos != data.size())
    throw TruncatedFile(path.string() + ": trailing bytes at " +
                        std::to_string(r.pos));
  return dump;
}

// ---------------------------------------------------------------------------
// Score tables: CSV (frame_id, detection index, class, method, layer, score,
// is_ood).
// ---------------------------------------------------------------------------

struct ScoreRow {
  std::string frame_id;
  std::size_t detection_index = 0;
  std::string class_label;
  std::string method;
  std::string layer;
  double score = 0;
  bool is_ood = false;
};

inline void write_score_table(const std::vector<ScoreRow>& rows,
                              const fs::path& path) {
  std::ostringstream ss;
  ss << "frame_id,detection_index,class,method,layer,score,is_ood\n";
  for (const auto& r : rows)
    ss << r.frame_id << ',' << r.detection_index << ',' << r.class_label
       << ',' << r.method << ',' << r.layer << ','
       << detail::fmt_float(r.score) << ',' << (r.is_ood ? 1 : 0) << '\n';
  detail::write_file(path, ss.str());
}

inline std::vector<ScoreRow> read_score_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ScoreRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("frame_id,", 0) == 0) continue;
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 7)
      throw ParseError(path.string() + ":" + std::to_string(lineno));
    ScoreRow r;
    r.frame_id = f[0];
    r.detection_index = static_cast<std::size_t>(std::stoull(f[1]));
    r.class_label = f[2];
    r.method = f[3];
    r.layer = f[4];
    r.score = std::stod(f[5]);
    r.is_ood = f[6] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ood::io
