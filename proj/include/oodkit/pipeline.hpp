#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oodkit/config.hpp"
#include "oodkit/core.hpp"
#include "oodkit/detector.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/featx.hpp"
#include "oodkit/flow.hpp"
#include "oodkit/inject.hpp"
#include "oodkit/io.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/rng.hpp"
#include "oodkit/scorers.hpp"

namespace ood::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> v{
      "max_softmax",    "predictive_entropy", "aleatoric_entropy",
      "mutual_information", "mahalanobis",    "ocsvm",
      "flow"};
  return v;
}

struct ScorerGrid {
  std::vector<std::string> methods = known_methods();
  std::vector<std::string> layers = {"conv2x", "conv4x", "conv8x", "backbone"};
  bool mahalanobis_logits = true;  // add the logit "layer" for Mahalanobis
  scorers::MahalanobisConfig mahalanobis;
  scorers::OcSvmConfig ocsvm;
  flow::FlowConfig flow_model;  // dim filled in per layer at fit time
  flow::TrainConfig flow_train;
};

struct ExperimentSpec {
  fs::path manifest_path;
  fs::path ood_db_path;
  DetectorConfig detector;
  inject::InjectConfig inject_cfg;
  ScorerGrid grid;
  std::size_t balance_repeats = 10;  // resampling repeats inside balanced_eval
  double ood_match_iou = 0.3;        // detection-to-GT match for OOD labels
  int repeats = 3;
  std::uint64_t master_seed = 0;
};

inline ExperimentSpec spec_from_config(const config::ConfigMap& cfg,
                                       const fs::path& base_dir) {
  ExperimentSpec spec;
  const std::string manifest = cfg.get_string("dataset");
  const std::string db = cfg.get_string("ood_db");
  if (manifest.empty()) throw ConfigError("missing key: dataset");
  if (db.empty()) throw ConfigError("missing key: ood_db");
  spec.manifest_path = base_dir / manifest;
  spec.ood_db_path = base_dir / db;
  if (!fs::exists(spec.manifest_path))
    throw ConfigError("dataset manifest not found: " +
                      spec.manifest_path.string());
  if (!fs::exists(spec.ood_db_path))
    throw ConfigError("ood database not found: " + spec.ood_db_path.string());

  spec.detector = config::parse_detector_config(cfg);
  spec.inject_cfg = config::parse_inject_config(cfg);
  spec.repeats = static_cast<int>(cfg.get_int("repeats", spec.repeats));
  if (spec.repeats < 1) throw ConfigError("repeats must be >= 1");
  if (!cfg.has("seed")) throw ConfigError("missing key: seed");
  spec.master_seed = cfg.get_u64("seed", 0);
  spec.balance_repeats = static_cast<std::size_t>(
      cfg.get_int("balance_repeats",
                  static_cast<std::int64_t>(spec.balance_repeats)));
  if (spec.balance_repeats < 1)
    throw ConfigError("balance_repeats must be >= 1");
  spec.ood_match_iou = cfg.get_double("ood_match_iou", spec.ood_match_iou);

  auto& g = spec.grid;
  if (cfg.has("grid.methods")) g.methods = cfg.get_list("grid.methods", "");
  for (const auto& m : g.methods)
    if (std::find(known_methods().begin(), known_methods().end(), m) ==
        known_methods().end())
      throw ConfigError("unknown method: " + m);
  if (cfg.has("grid.layers")) g.layers = cfg.get_list("grid.layers", "");
  g.mahalanobis_logits = cfg.get_int("grid.mahalanobis_logits", 1) != 0;
  g.mahalanobis.batch_size = static_cast<int>(
      cfg.get_int("mahalanobis.batch_size", g.mahalanobis.batch_size));
  g.mahalanobis.epochs =
      static_cast<int>(cfg.get_int("mahalanobis.epochs", g.mahalanobis.epochs));
  g.ocsvm.nu = cfg.get_double("ocsvm.nu", g.ocsvm.nu);
  g.ocsvm.gamma = cfg.get_double("ocsvm.gamma", g.ocsvm.gamma);
  g.ocsvm.batch_size =
      static_cast<int>(cfg.get_int("ocsvm.batch_size", g.ocsvm.batch_size));
  g.ocsvm.epochs = static_cast<int>(cfg.get_int("ocsvm.epochs", g.ocsvm.epochs));
  g.ocsvm.num_features = static_cast<int>(
      cfg.get_int("ocsvm.num_features", g.ocsvm.num_features));
  g.ocsvm.lr0 = cfg.get_double("ocsvm.lr0", g.ocsvm.lr0);
  g.flow_model.num_layers = static_cast<int>(
      cfg.get_int("flow.num_layers", g.flow_model.num_layers));
  g.flow_model.hidden =
      static_cast<int>(cfg.get_int("flow.hidden", g.flow_model.hidden));
  g.flow_train.batch_size =
      static_cast<int>(cfg.get_int("flow.batch_size", g.flow_train.batch_size));
  g.flow_train.steps =
      static_cast<int>(cfg.get_int("flow.steps", g.flow_train.steps));
  g.flow_train.lr = cfg.get_double("flow.lr", g.flow_train.lr);
  return spec;
}

// The (method, layer) grid. Detection-level methods carry layer "-";
// Mahalanobis optionally adds the logit layer.
struct GridCell {
  std::string method;
  std::string layer;
};

inline std::vector<GridCell> grid_cells(const ScorerGrid& g) {
  std::vector<GridCell> cells;
  for (const auto& m : g.methods) {
    if (m == "max_softmax" || m == "predictive_entropy" ||
        m == "aleatoric_entropy" || m == "mutual_information") {
      cells.push_back({m, "-"});
      continue;
    }
    for (const auto& layer : g.layers) cells.push_back({m, layer});
    if (m == "mahalanobis" && g.mahalanobis_logits)
      cells.push_back({m, "logits"});
  }
  return cells;
}

// Feature-map layers any grid cell actually needs (lazy feature extraction).
inline std::set<std::string> needed_feature_layers(const ScorerGrid& g) {
  std::set<std::string> layers;
  for (const auto& cell : grid_cells(g))
    if (cell.layer != "-" && cell.layer != "logits") layers.insert(cell.layer);
  return layers;
}

inline bool needs_logits(const ScorerGrid& g) {
  for (const auto& cell : grid_cells(g))
    if (cell.layer == "logits") return true;
  return false;
}

// ---------------------------------------------------------------------------
// Hierarchical seeds and content-addressed stage directories
// ---------------------------------------------------------------------------

inline std::uint64_t stage_salt(const std::string& name) {
  return ood::detail::fnv1a(name.data(), name.size());
}

inline std::string hash_hex(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(
                    ood::detail::fnv1a(text.data(), text.size())));
  return buf;
}

// A stage directory is named by the hash of everything that determines its
// contents; a DONE marker makes reruns skip the work.
struct StageDir {
  fs::path dir;
  bool cached = false;
};

inline StageDir open_stage(const fs::path& base, const std::string& name,
                           const std::string& key) {
  StageDir s;
  s.dir = base / (name + "-" + hash_hex(key));
  s.cached = fs::exists(s.dir / "DONE");
  return s;
}

inline void mark_done(const StageDir& s) {
  io::detail::write_file(s.dir / "DONE", "");
}

namespace detail {

inline std::string canonical_detector(const DetectorConfig& d) {
  std::ostringstream ss;
  ss << "score_threshold=" << d.score_threshold << " mc=" << d.mc_samples
     << " cell=" << d.cell_size << " min_points=" << d.min_points
     << " temp=" << d.temperature << " fov=" << d.fov.x_min << ','
     << d.fov.x_max << ',' << d.fov.y_min << ',' << d.fov.y_max << ','
     << d.fov.z_min << ',' << d.fov.z_max;
  for (const auto& t : d.class_templates)
    ss << ' ' << t.name << ':' << t.length << 'x' << t.width << 'x'
       << t.height;
  return ss.str();
}

inline std::string canonical_inject(const inject::InjectConfig& c) {
  std::ostringstream ss;
  ss << "gamma=" << c.gamma_max << " zeta=" << c.zeta_max << " tau=" << c.tau
     << " mode=" << static_cast<int>(c.intensity_mode)
     << " confirm=" << c.confirm_iou << " preserve=" << c.preserve_iou;
  return ss.str();
}

inline std::string canonical_grid(const ScorerGrid& g) {
  std::ostringstream ss;
  for (const auto& cell : grid_cells(g)) ss << cell.method << '/' << cell.layer << ' ';
  ss << "maha=" << g.mahalanobis.batch_size << ',' << g.mahalanobis.epochs
     << " ocsvm=" << g.ocsvm.nu << ',' << g.ocsvm.gamma << ','
     << g.ocsvm.batch_size << ',' << g.ocsvm.epochs << ','
     << g.ocsvm.num_features << ',' << g.ocsvm.lr0
     << " flow=" << g.flow_model.num_layers << ',' << g.flow_model.hidden
     << ',' << g.flow_train.batch_size << ',' << g.flow_train.steps << ','
     << g.flow_train.lr;
  return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset audit: re-check the insertion invariants after the fact
// ---------------------------------------------------------------------------

struct AuditViolation {
  std::string frame_id;
  std::size_t object_index = 0;
  std::string reason;
};

struct AuditReport {
  std::vector<AuditViolation> violations;
  std::size_t objects_checked = 0;
};

inline AuditReport audit_dataset(const io::DatasetManifest& manifest,
                                 const inject::InjectConfig& cfg) {
  AuditReport report;
  for (const auto& ref : manifest.frames) {
    const auto labels = io::read_labels(ref.label_path);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& obj = labels[i];
      if (!obj.is_ood) continue;
      ++report.objects_checked;
      if (!cfg.fov.contains(obj.box.cx, obj.box.cy, obj.box.cz))
        report.violations.push_back(
            {ref.frame_id, i, "box center outside FOV"});
      for (std::size_t j = 0; j < labels.size(); ++j) {
        if (j == i) continue;
        if (bev_iou(obj.box, labels[j].box) > cfg.overlap_epsilon) {
          report.violations.push_back(
              {ref.frame_id, i,
               "BEV overlap with object " + std::to_string(j)});
          break;
        }
      }
    }
  }
  return report;
}

inline void write_audit(const AuditReport& report, const fs::path& path) {
  std::ostringstream ss;
  ss << "objects_checked=" << report.objects_checked
     << " violations=" << report.violations.size() << '\n';
  for (const auto& v : report.violations)
    ss << "frame_id=" << v.frame_id << " object=" << v.object_index
       << " reason=" << v.reason << '\n';
  io::detail::write_file(path, ss.str());
}

// ---------------------------------------------------------------------------
// Per-repeat report rows and their CSV form
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string method;
  std::string layer;
  std::string source;  // "all" or a db source name
  metrics::BalancedReport report;
};

inline void write_report_csv(const std::vector<ReportRow>& rows,
                             const fs::path& path) {
  std::ostringstream ss;
  ss << "method,layer,source,n_id,n_ood,stratum_size,"
        "auroc,auroc_sd,aupr_in,aupr_in_sd,aupr_out,aupr_out_sd,"
        "de,de_sd,fpr95,fpr95_sd\n";
  for (const auto& r : rows) {
    const auto& m = r.report.mean;
    const auto& s = r.report.sd;
    ss << r.method << ',' << r.layer << ',' << r.source << ',' << m.n_id
       << ',' << m.n_ood << ',' << r.report.stratum_size << ','
       << io::detail::fmt_float(m.auroc) << ',' << io::detail::fmt_float(s.auroc)
       << ',' << io::detail::fmt_float(m.aupr_in) << ','
       << io::detail::fmt_float(s.aupr_in) << ','
       << io::detail::fmt_float(m.aupr_out) << ','
       << io::detail::fmt_float(s.aupr_out) << ','
       << io::detail::fmt_float(m.detection_error) << ','
       << io::detail::fmt_float(s.detection_error) << ','
       << io::detail::fmt_float(m.fpr_at_95_tpr) << ','
       << io::detail::fmt_float(s.fpr_at_95_tpr) << '\n';
  }
  io::detail::write_file(path, ss.str());
}

inline std::vector<ReportRow> read_report_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ReportRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto f = io::detail::split(line, ',');
    if (f.size() != 16)
      throw ParseError(path.string() + ":" + std::to_string(lineno));
    ReportRow r;
    r.method = f[0];
    r.layer = f[1];
    r.source = f[2];
    r.report.mean.n_id = std::stoull(f[3]);
    r.report.mean.n_ood = std::stoull(f[4]);
    r.report.stratum_size = std::stoull(f[5]);
    r.report.mean.auroc = std::stod(f[6]);
    r.report.sd.auroc = std::stod(f[7]);
    r.report.mean.aupr_in = std::stod(f[8]);
    r.report.sd.aupr_in = std::stod(f[9]);
    r.report.mean.aupr_out = std::stod(f[10]);
    r.report.sd.aupr_out = std::stod(f[11]);
    r.report.mean.detection_error = std::stod(f[12]);
    r.report.sd.detection_error = std::stod(f[13]);
    r.report.mean.fpr_at_95_tpr = std::stod(f[14]);
    r.report.sd.fpr_at_95_tpr = std::stod(f[15]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// One repeat of the full protocol
// ---------------------------------------------------------------------------

namespace detail {

// One scored test detection with everything the grid can ask of it.
struct TestRecord {
  std::string frame_id;
  std::size_t det_index = 0;
  std::string class_name;
  bool is_ood = false;
  std::string source;  // "-" for ID, db source name for OOD
  double max_softmax = 0;
  double predictive_entropy = 0, aleatoric_entropy = 0, mutual_information = 0;
  std::vector<float> logits;
  std::map<std::string, std::vector<float>> features;  // per layer
};

struct RepeatData {
  std::map<std::string, std::vector<featx::FeatureSample>> train;  // per layer
  std::vector<featx::FeatureSample> train_logits;
  std::vector<TestRecord> tests;
};

inline std::vector<float> to_float(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

inline Eigen::VectorXd to_eigen(const std::vector<float>& v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    x[static_cast<Eigen::Index>(i)] = v[i];
  return x;
}

// Training pass over the ID dataset plus scoring pass over the augmented
// dataset. Feature layers are only touched when the grid needs them.
inline RepeatData collect_samples(const ExperimentSpec& spec,
                                  const StubDetector& det,
                                  const std::vector<inject::LoadedFrame>& id_frames,
                                  const std::vector<inject::LoadedFrame>& aug_frames,
                                  const std::map<std::string, std::string>& class_source) {
  const auto layers = needed_feature_layers(spec.grid);
  const bool want_logits = needs_logits(spec.grid);
  const featx::AnchorGrid grid = det.anchor_grid();
  RepeatData data;

  for (const auto& frame : id_frames) {
    const DetectorOutput out = det.detect(frame.cloud);
    for (const auto& layer : layers) {
      auto samples = featx::extract_training_samples(out, frame.labels, grid,
                                                     layer, frame.frame_id);
      auto& dst = data.train[layer];
      dst.insert(dst.end(), std::make_move_iterator(samples.begin()),
                 std::make_move_iterator(samples.end()));
    }
    if (want_logits)
      for (const auto& d : out.detections) {
        featx::FeatureSample s;
        s.vector = to_float(d.logits);
        s.class_label = d.predicted_class;
        s.is_ood = false;
        s.source = featx::FeatureSample::Source::prediction;
        s.frame_id = frame.frame_id;
        s.layer = "logits";
        data.train_logits.push_back(std::move(s));
      }
  }

  for (const auto& frame : aug_frames) {
    const DetectorOutput out = det.detect(frame.cloud);
    std::map<std::string, std::vector<featx::FeatureSample>> per_layer;
    for (const auto& layer : layers)
      per_layer[layer] =
          featx::extract_test_samples(out, grid, layer, frame.frame_id);

    for (std::size_t di = 0; di < out.detections.size(); ++di) {
      const auto& d = out.detections[di];
      // Label the detection by its best-overlap ground-truth object;
      // unmatched detections have no OOD label and are excluded.
      double best_iou = 0;
      const LabeledObject* best = nullptr;
      for (const auto& g : frame.labels) {
        const double iou = bev_iou(d.box, g.box);
        if (iou > best_iou) {
          best_iou = iou;
          best = &g;
        }
      }
      if (!best || best_iou < spec.ood_match_iou) continue;

      TestRecord rec;
      rec.frame_id = frame.frame_id;
      rec.det_index = di;
      rec.class_name =
          spec.detector.class_templates[static_cast<std::size_t>(
                                            d.predicted_class)].name;
      rec.is_ood = best->is_ood;
      if (best->is_ood) {
        const auto it = class_source.find(best->class_name);
        rec.source = it == class_source.end() ? "unknown" : it->second;
      } else {
        rec.source = "-";
      }
      rec.max_softmax = scorers::score_max_softmax(d);
      if (di < out.mc_softmax_samples.size() &&
          !out.mc_softmax_samples[di].empty()) {
        const auto u = scorers::score_uncertainty(out.mc_softmax_samples[di]);
        rec.predictive_entropy = u.predictive_entropy;
        rec.aleatoric_entropy = u.aleatoric_entropy;
        rec.mutual_information = u.mutual_information;
      }
      rec.logits = to_float(d.logits);
      for (const auto& layer : layers)
        rec.features[layer] = per_layer[layer][di].vector;
      data.tests.push_back(std::move(rec));
    }
  }
  return data;
}

inline void score_cell(const ExperimentSpec& spec, const GridCell& cell,
                       const RepeatData& data, std::uint64_t seed_r,
                       const fs::path& models_dir,
                       std::vector<io::ScoreRow>& rows) {
  auto emit = [&](const TestRecord& t, double score) {
    io::ScoreRow r;
    r.frame_id = t.frame_id;
    r.detection_index = t.det_index;
    r.class_label = t.class_name;
    r.method = cell.method;
    r.layer = cell.layer;
    r.score = score;
    r.is_ood = t.is_ood;
    rows.push_back(std::move(r));
  };

  if (cell.method == "max_softmax") {
    for (const auto& t : data.tests) emit(t, t.max_softmax);
    return;
  }
  if (cell.method == "predictive_entropy") {
    for (const auto& t : data.tests) emit(t, t.predictive_entropy);
    return;
  }
  if (cell.method == "aleatoric_entropy") {
    for (const auto& t : data.tests) emit(t, t.aleatoric_entropy);
    return;
  }
  if (cell.method == "mutual_information") {
    for (const auto& t : data.tests) emit(t, t.mutual_information);
    return;
  }

  const bool logit_layer = cell.layer == "logits";
  const auto& train = logit_layer ? data.train_logits
                                  : data.train.at(cell.layer);
  if (train.empty())
    throw EmptySamples("no training samples for layer " + cell.layer);
  auto query = [&](const TestRecord& t) -> const std::vector<float>& {
    return logit_layer ? t.logits : t.features.at(cell.layer);
  };

  if (cell.method == "mahalanobis") {
    const auto model = scorers::fit_mahalanobis(train, spec.grid.mahalanobis);
    scorers::save_mahalanobis(
        model, cell.layer, models_dir / ("mahalanobis-" + cell.layer + ".bin"));
    for (const auto& t : data.tests) emit(t, scorers::score_mahalanobis(model, query(t)));
    return;
  }
  if (cell.method == "ocsvm") {
    scorers::OcSvmConfig cfg = spec.grid.ocsvm;
    cfg.seed = mix_seed(seed_r, stage_salt("ocsvm:" + cell.layer));
    const auto model = scorers::fit_ocsvm(train, cfg);
    scorers::save_ocsvm(model, cell.layer,
                        models_dir / ("ocsvm-" + cell.layer + ".bin"));
    for (const auto& t : data.tests) emit(t, scorers::score_ocsvm(model, query(t)));
    return;
  }
  if (cell.method == "flow") {
    flow::FlowConfig fc = spec.grid.flow_model;
    fc.dim = static_cast<int>(train.front().vector.size());
    flow::FlowModel model(fc);
    Rng init_rng(mix_seed(seed_r, stage_salt("flow-init:" + cell.layer)));
    model.init_random(init_rng);
    std::vector<Eigen::VectorXd> xs;
    xs.reserve(train.size());
    for (const auto& s : train) xs.push_back(to_eigen(s.vector));
    flow::TrainConfig tc = spec.grid.flow_train;
    tc.seed = mix_seed(seed_r, stage_salt("flow:" + cell.layer));
    const auto trace = flow::fit(model, xs, tc);
    model.save(models_dir / ("flow-" + cell.layer + ".bin"));
    flow::write_loss_trace(trace,
                           models_dir / ("flow-" + cell.layer + "-loss.csv"));
    for (const auto& t : data.tests) emit(t, scorers::score_flow(model, query(t)));
    return;
  }
  throw ConfigError("unknown method: " + cell.method);
}

// Detection metadata written next to the score table so evaluation (and
// reruns hitting the cache) can recover OOD labels and sources.
inline void write_test_meta(const std::vector<TestRecord>& tests,
                            const fs::path& path) {
  std::ostringstream ss;
  ss << "frame_id,detection_index,class,is_ood,source\n";
  for (const auto& t : tests)
    ss << t.frame_id << ',' << t.det_index << ',' << t.class_name << ','
       << (t.is_ood ? 1 : 0) << ',' << t.source << '\n';
  io::detail::write_file(path, ss.str());
}

struct TestMeta {
  std::string class_name;
  bool is_ood = false;
  std::string source;
};

inline std::map<std::pair<std::string, std::size_t>, TestMeta> read_test_meta(
    const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::pair<std::string, std::size_t>, TestMeta> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto f = io::detail::split(line, ',');
    if (f.size() != 5)
      throw ParseError(path.string() + ":" + std::to_string(lineno));
    out[{f[0], std::stoull(f[1])}] = {f[2], f[3] == "1", f[4]};
  }
  return out;
}

}  // namespace detail

struct RepeatResult {
  int repeat = 0;
  bool ok = false;
  std::string error;
  fs::path report_csv;
};

inline RepeatResult run_repeat(const ExperimentSpec& spec,
                               const fs::path& out_dir, int r) {
  RepeatResult result;
  result.repeat = r;
  const std::uint64_t seed_r =
      mix_seed(spec.master_seed, static_cast<std::uint64_t>(r) + 1);
  const std::string rep_tag = "rep" + std::to_string(r);

  DetectorConfig dc = spec.detector;
  dc.rng_seed = mix_seed(seed_r, stage_salt("detector"));
  const StubDetector det(dc);

  // --- stage 1: OOD dataset generation ---
  inject::InjectConfig ic = spec.inject_cfg;
  ic.rng_seed = mix_seed(seed_r, stage_salt("inject"));
  const std::string dataset_key =
      detail::canonical_detector(dc) + "|" + detail::canonical_inject(ic) +
      "|" + spec.manifest_path.string() + "|" + spec.ood_db_path.string() +
      "|" + std::to_string(seed_r);
  const StageDir dataset_stage =
      open_stage(out_dir / "datasets", rep_tag, dataset_key);

  const io::DatasetManifest id_manifest = io::read_manifest(spec.manifest_path);
  std::vector<inject::LoadedFrame> id_frames = inject::load_frames(id_manifest);
  std::vector<inject::LoadedFrame> aug_frames;
  if (dataset_stage.cached) {
    aug_frames =
        inject::load_frames(io::read_manifest(dataset_stage.dir / "manifest.txt"));
  } else {
    const auto db = inject::load_ood_db(spec.ood_db_path);
    auto gen = inject::generate_ood_dataset(id_frames, db, det, ic);
    aug_frames = std::move(gen.frames);
    inject::write_dataset(aug_frames, id_manifest.classes, dataset_stage.dir);
    inject::write_stats(gen.stats, dataset_stage.dir / "stats.txt");
    write_audit(
        audit_dataset(io::read_manifest(dataset_stage.dir / "manifest.txt"), ic),
        dataset_stage.dir / "audit.txt");
    mark_done(dataset_stage);
  }

  std::map<std::string, std::string> class_source;
  for (const auto& rec : io::read_ood_db(spec.ood_db_path))
    class_source[rec.class_name] =
        rec.source == io::OodSource::synthetic ? "synthetic" : "real";

  // --- stage 2: features, models, scores ---
  const std::string scores_key =
      dataset_key + "|" + detail::canonical_grid(spec.grid) + "|" +
      io::detail::fmt_float(spec.ood_match_iou);
  const StageDir scores_stage =
      open_stage(out_dir / "scores", rep_tag, scores_key);
  std::vector<io::ScoreRow> rows;
  std::map<std::pair<std::string, std::size_t>, detail::TestMeta> meta;
  if (scores_stage.cached) {
    rows = io::read_score_table(scores_stage.dir / "scores.csv");
    meta = detail::read_test_meta(scores_stage.dir / "test_meta.csv");
  } else {
    const detail::RepeatData data =
        detail::collect_samples(spec, det, id_frames, aug_frames, class_source);
    const fs::path features_dir = scores_stage.dir / "features";
    for (const auto& [layer, samples] : data.train)
      io::write_feature_dump(
          samples, features_dir / ("train-" + layer + ".bin"),
          static_cast<std::uint32_t>(spec.detector.class_templates.size()));
    const fs::path models_dir = scores_stage.dir / "models";
    fs::create_directories(models_dir);
    for (const auto& cell : grid_cells(spec.grid))
      detail::score_cell(spec, cell, data, seed_r, models_dir, rows);
    io::write_score_table(rows, scores_stage.dir / "scores.csv");
    detail::write_test_meta(data.tests, scores_stage.dir / "test_meta.csv");
    for (const auto& t : data.tests)
      meta[{t.frame_id, t.det_index}] = {t.class_name, t.is_ood, t.source};
    mark_done(scores_stage);
  }

  // --- stage 3: balanced evaluation per (method, layer) x source ---
  std::set<std::string> sources{"all"};
  for (const auto& [key, m] : meta)
    if (m.is_ood) sources.insert(m.source);

  std::vector<ReportRow> report_rows;
  for (const auto& cell : grid_cells(spec.grid)) {
    std::map<std::string, metrics::ScoredSet> subsets;
    for (const auto& row : rows) {
      if (row.method != cell.method || row.layer != cell.layer) continue;
      const auto mit = meta.find({row.frame_id, row.detection_index});
      if (mit == meta.end()) continue;
      metrics::ScoredEntry e;
      e.score = row.score;
      e.is_ood = mit->second.is_ood;
      e.class_label = row.class_label;
      e.frame_id = row.frame_id;
      subsets["all"].push_back(e);
      if (mit->second.is_ood)
        subsets[mit->second.source].push_back(e);
      else
        for (const auto& src : sources)
          if (src != "all") subsets[src].push_back(e);
    }
    for (const auto& src : sources) {
      const auto sit = subsets.find(src);
      if (sit == subsets.end()) continue;
      const std::uint64_t eval_seed = mix_seed(
          mix_seed(seed_r, stage_salt("eval")),
          stage_salt(cell.method + "/" + cell.layer + "/" + src));
      ReportRow rr;
      rr.method = cell.method;
      rr.layer = cell.layer;
      rr.source = src;
      try {
        rr.report =
            metrics::balanced_eval(sit->second, spec.balance_repeats, eval_seed);
      } catch (const SingleClassSet&) {
        continue;  // this source has no OOD (or no ID) rows; nothing to report
      }
      report_rows.push_back(std::move(rr));
    }
  }

  result.report_csv = out_dir / "reports" / (rep_tag + ".csv");
  write_report_csv(report_rows, result.report_csv);
  result.ok = true;
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation over repeats
// ---------------------------------------------------------------------------

struct SummaryCell {
  double mean = 0, sd = 0;
};

struct SummaryRow {
  std::string method, layer, source;
  SummaryCell auroc, aupr_in, aupr_out, de, fpr95;
  std::size_t repeats = 0;
};

// Mean and sample sd over repeats of each per-repeat balanced mean, grouped
// by (method, layer, source). Reads the per-repeat CSVs back from disk so the
// summary provably matches them.
inline std::vector<SummaryRow> aggregate_reports(
    const std::vector<fs::path>& report_csvs) {
  struct Acc {
    std::vector<metrics::MetricReport> reports;
  };
  std::map<std::tuple<std::string, std::string, std::string>, Acc> groups;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& path : report_csvs)
    for (const auto& row : read_report_csv(path)) {
      const auto key = std::make_tuple(row.method, row.layer, row.source);
      if (!groups.count(key)) order.push_back(key);
      groups[key].reports.push_back(row.report.mean);
    }

  std::vector<SummaryRow> out;
  for (const auto& key : order) {
    const auto& reports = groups[key].reports;
    SummaryRow row;
    std::tie(row.method, row.layer, row.source) = key;
    row.repeats = reports.size();
    const double n = static_cast<double>(reports.size());
    auto cell = [&](double metrics::MetricReport::* member) {
      SummaryCell c;
      for (const auto& rep : reports) c.mean += rep.*member;
      c.mean /= n;
      double var = 0;
      for (const auto& rep : reports)
        var += (rep.*member - c.mean) * (rep.*member - c.mean);
      c.sd = reports.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
      return c;
    };
    row.auroc = cell(&metrics::MetricReport::auroc);
    row.aupr_in = cell(&metrics::MetricReport::aupr_in);
    row.aupr_out = cell(&metrics::MetricReport::aupr_out);
    row.de = cell(&metrics::MetricReport::detection_error);
    row.fpr95 = cell(&metrics::MetricReport::fpr_at_95_tpr);
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_summary_csv(const std::vector<SummaryRow>& rows,
                              const fs::path& path) {
  std::ostringstream ss;
  ss << "method,layer,source,repeats,auroc,auroc_sd,aupr_in,aupr_in_sd,"
        "aupr_out,aupr_out_sd,de,de_sd,fpr95,fpr95_sd\n";
  for (const auto& r : rows)
    ss << r.method << ',' << r.layer << ',' << r.source << ',' << r.repeats
       << ',' << io::detail::fmt_float(r.auroc.mean) << ','
       << io::detail::fmt_float(r.auroc.sd) << ','
       << io::detail::fmt_float(r.aupr_in.mean) << ','
       << io::detail::fmt_float(r.aupr_in.sd) << ','
       << io::detail::fmt_float(r.aupr_out.mean) << ','
       << io::detail::fmt_float(r.aupr_out.sd) << ','
       << io::detail::fmt_float(r.de.mean) << ','
       << io::detail::fmt_float(r.de.sd) << ','
       << io::detail::fmt_float(r.fpr95.mean) << ','
       << io::detail::fmt_float(r.fpr95.sd) << '\n';
  io::detail::write_file(path, ss.str());
}

// Aligned text table, one block per source; rows = method x layer, columns =
// AUROC (up), AUPR-In (up), AUPR-Out (up), D_e (down), FPR@95TPR (down).
inline void write_summary_text(const std::vector<SummaryRow>& rows,
                               const fs::path& path) {
  std::set<std::string> sources;
  for (const auto& r : rows) sources.insert(r.source);
  auto fmt_cell = [](const SummaryCell& c) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%6.2f +- %4.2f", 100.0 * c.mean,
                  100.0 * c.sd);
    return std::string(buf);
  };
  std::ostringstream ss;
  for (const auto& src : sources) {
    ss << "== source: " << src << " ==\n";
    char header[160];
    std::snprintf(header, sizeof(header),
                  "%-20s %-10s %-15s %-15s %-15s %-15s %-15s\n", "method",
                  "layer", "AUROC", "AUPR-In", "AUPR-Out", "D_e", "FPR@95TPR");
    ss << header;
    for (const auto& r : rows) {
      if (r.source != src) continue;
      char line[192];
      std::snprintf(line, sizeof(line),
                    "%-20s %-10s %-15s %-15s %-15s %-15s %-15s\n",
                    r.method.c_str(), r.layer.c_str(),
                    fmt_cell(r.auroc).c_str(), fmt_cell(r.aupr_in).c_str(),
                    fmt_cell(r.aupr_out).c_str(), fmt_cell(r.de).c_str(),
                    fmt_cell(r.fpr95).c_str());
      ss << line;
    }
    ss << '\n';
  }
  io::detail::write_file(path, ss.str());
}

struct RunResult {
  std::vector<RepeatResult> repeats;
  std::vector<SummaryRow> summary;
};

// Full protocol: every repeat end to end, then the cross-repeat summary. A
// failing repeat is recorded and the others continue.
inline RunResult run_experiment(const ExperimentSpec& spec,
                                const fs::path& out_dir) {
  RunResult result;
  std::vector<fs::path> report_csvs;
  std::ostringstream errors;
  for (int r = 0; r < spec.repeats; ++r) {
    RepeatResult rr;
    try {
      rr = run_repeat(spec, out_dir, r);
    } catch (const std::exception& e) {
      rr.repeat = r;
      rr.ok = false;
      rr.error = e.what();
      errors << "repeat=" << r << " error=" << e.what() << '\n';
    }
    if (rr.ok) report_csvs.push_back(rr.report_csv);
    result.repeats.push_back(std::move(rr));
  }
  if (!errors.str().empty())
    io::detail::write_file(out_dir / "errors.txt", errors.str());
  if (report_csvs.empty())
    throw Error("every repeat failed; see errors.txt under " +
                out_dir.string());
  result.summary = aggregate_reports(report_csvs);
  write_summary_csv(result.summary, out_dir / "reports" / "summary.csv");
  write_summary_text(result.summary, out_dir / "reports" / "summary.txt");
  return result;
}

}  // namespace ood::pipeline
