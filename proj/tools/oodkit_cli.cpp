// oodkit command-line tool. Every subcommand is a thin adapter over one
// library operation; machine output goes to files under --out, the human
// summary to stdout. Exit codes: 0 success, 1 usage error, 2 data error.

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oodkit/config.hpp"
#include "oodkit/detector.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/flow.hpp"
#include "oodkit/inject.hpp"
#include "oodkit/io.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/mine.hpp"
#include "oodkit/pipeline.hpp"
#include "oodkit/scorers.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalOpts {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  int jobs = 1;
};

ood::config::ConfigMap load_config(const GlobalOpts& g) {
  if (g.config.empty()) return {};
  return ood::config::ConfigMap::from_file(g.config);
}

std::uint64_t require_seed(const GlobalOpts& g,
                           const ood::config::ConfigMap& cfg,
                           const std::string& key) {
  if (g.seed) return *g.seed;
  if (!key.empty() && cfg.has(key)) return cfg.get_u64(key, 0);
  throw ood::ConfigError("this command is randomized; pass --seed or set " +
                         (key.empty() ? std::string("a seed") : key) +
                         " in the config");
}

void summary(const GlobalOpts& g, const std::string& line) {
  if (!g.quiet) std::cout << line << '\n';
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  for (const auto& tok : ood::io::detail::split(csv, ','))
    out.push_back(std::stod(tok));
  return out;
}

// --- inject: generate an OOD-augmented dataset ------------------------------

int cmd_inject(const GlobalOpts& g) {
  const auto cfg = load_config(g);
  ood::DetectorConfig dc = ood::config::parse_detector_config(cfg);
  ood::inject::InjectConfig ic = ood::config::parse_inject_config(cfg);
  ic.rng_seed = require_seed(g, cfg, "inject.rng_seed");

  const fs::path base = fs::path(g.config).parent_path();
  const std::string dataset = cfg.get_string("dataset");
  const std::string db_dir = cfg.get_string("ood_db");
  if (dataset.empty() || db_dir.empty())
    throw ood::ConfigError("config needs dataset= and ood_db=");

  const ood::StubDetector det(dc);
  auto frames = ood::inject::load_frames(ood::io::read_manifest(base / dataset));
  const auto db = ood::inject::load_ood_db(base / db_dir);
  auto gen = ood::inject::generate_ood_dataset(std::move(frames), db, det, ic);

  const auto manifest = ood::io::read_manifest(base / dataset);
  ood::inject::write_dataset(gen.frames, manifest.classes, g.out);
  ood::inject::write_stats(gen.stats, fs::path(g.out) / "stats.txt");
  std::size_t inserted = 0;
  for (const auto& [cls, s] : gen.stats.per_class) inserted += s.inserted_count;
  summary(g, "inserted " + std::to_string(inserted) + " objects across " +
                 std::to_string(gen.frames.size()) + " frames");
  return 0;
}

// --- fit / score: one scorer on feature dumps -------------------------------

int cmd_fit(const GlobalOpts& g, const std::string& method,
            const std::string& features) {
  const auto cfg = load_config(g);
  const auto dump = ood::io::read_feature_dump(features);
  const std::string layer = dump.layer.empty() ? "-" : dump.layer;
  const fs::path out = fs::path(g.out) / (method + "-" + layer + ".bin");

  if (method == "mahalanobis") {
    ood::scorers::MahalanobisConfig mc;
    mc.batch_size = static_cast<int>(
        cfg.get_int("mahalanobis.batch_size", mc.batch_size));
    mc.epochs = static_cast<int>(cfg.get_int("mahalanobis.epochs", mc.epochs));
    ood::scorers::save_mahalanobis(
        ood::scorers::fit_mahalanobis(dump.samples, mc), layer, out);
  } else if (method == "ocsvm") {
    ood::scorers::OcSvmConfig oc;
    oc.nu = cfg.get_double("ocsvm.nu", oc.nu);
    oc.gamma = cfg.get_double("ocsvm.gamma", oc.gamma);
    oc.batch_size = static_cast<int>(cfg.get_int("ocsvm.batch_size", oc.batch_size));
    oc.epochs = static_cast<int>(cfg.get_int("ocsvm.epochs", oc.epochs));
    oc.num_features =
        static_cast<int>(cfg.get_int("ocsvm.num_features", oc.num_features));
    oc.lr0 = cfg.get_double("ocsvm.lr0", oc.lr0);
    oc.seed = require_seed(g, cfg, "ocsvm.seed");
    ood::scorers::save_ocsvm(ood::scorers::fit_ocsvm(dump.samples, oc), layer,
                             out);
  } else if (method == "flow") {
    if (dump.samples.empty()) throw ood::EmptySamples("empty feature dump");
    ood::flow::FlowConfig fc;
    fc.dim = static_cast<int>(dump.samples.front().vector.size());
    fc.num_layers =
        static_cast<int>(cfg.get_int("flow.num_layers", fc.num_layers));
    fc.hidden = static_cast<int>(cfg.get_int("flow.hidden", fc.hidden));
    ood::flow::TrainConfig tc;
    tc.batch_size =
        static_cast<int>(cfg.get_int("flow.batch_size", tc.batch_size));
    tc.steps = static_cast<int>(cfg.get_int("flow.steps", tc.steps));
    tc.lr = cfg.get_double("flow.lr", tc.lr);
    tc.seed = require_seed(g, cfg, "flow.seed");
    ood::flow::FlowModel model(fc);
    ood::Rng rng(ood::mix_seed(tc.seed, 1));
    model.init_random(rng);
    std::vector<Eigen::VectorXd> xs;
    for (const auto& s : dump.samples) {
      Eigen::VectorXd x(static_cast<Eigen::Index>(s.vector.size()));
      for (std::size_t i = 0; i < s.vector.size(); ++i)
        x[static_cast<Eigen::Index>(i)] = s.vector[i];
      xs.push_back(std::move(x));
    }
    const auto trace = ood::flow::fit(model, xs, tc);
    model.save(out);
    ood::flow::write_loss_trace(trace,
                                fs::path(g.out) / ("flow-" + layer + "-loss.csv"));
  } else {
    throw ood::ConfigError("fit supports mahalanobis, ocsvm, flow; got " +
                           method);
  }
  summary(g, "model written to " + out.string());
  return 0;
}

int cmd_score(const GlobalOpts& g, const std::string& method,
              const std::string& model_path, const std::string& features) {
  const auto dump = ood::io::read_feature_dump(features);
  const std::string layer = dump.layer.empty() ? "-" : dump.layer;
  std::vector<ood::io::ScoreRow> rows;
  auto add_row = [&](const ood::featx::FeatureSample& s, std::size_t i,
                     double score) {
    ood::io::ScoreRow r;
    r.frame_id = s.frame_id;
    r.detection_index = i;
    r.class_label = std::to_string(s.class_label);
    r.method = method;
    r.layer = layer;
    r.score = score;
    r.is_ood = s.is_ood;
    rows.push_back(std::move(r));
  };

  if (method == "mahalanobis") {
    const auto model = ood::scorers::load_mahalanobis(model_path);
    for (std::size_t i = 0; i < dump.samples.size(); ++i)
      add_row(dump.samples[i], i,
              ood::scorers::score_mahalanobis(model, dump.samples[i].vector));
  } else if (method == "ocsvm") {
    const auto model = ood::scorers::load_ocsvm(model_path);
    for (std::size_t i = 0; i < dump.samples.size(); ++i)
      add_row(dump.samples[i], i,
              ood::scorers::score_ocsvm(model, dump.samples[i].vector));
  } else if (method == "flow") {
    const auto model = ood::flow::FlowModel::load(model_path);
    for (std::size_t i = 0; i < dump.samples.size(); ++i)
      add_row(dump.samples[i], i,
              ood::scorers::score_flow(model, dump.samples[i].vector));
  } else {
    throw ood::ConfigError("score supports mahalanobis, ocsvm, flow; got " +
                           method);
  }
  const fs::path out = fs::path(g.out) / "scores.csv";
  ood::io::write_score_table(rows, out);
  summary(g, std::to_string(rows.size()) + " scores written to " + out.string());
  return 0;
}

// --- eval: metric suite over a score table ----------------------------------

int cmd_eval(const GlobalOpts& g, const std::string& scores_path,
             std::size_t balance_repeats) {
  const auto cfg = load_config(g);
  const std::uint64_t seed = require_seed(g, cfg, "seed");
  const auto rows = ood::io::read_score_table(scores_path);
  if (rows.empty()) throw ood::EmptySamples("empty score table");

  std::map<std::pair<std::string, std::string>, ood::metrics::ScoredSet> groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.method, r.layer);
    if (!groups.count(key)) order.push_back(key);
    ood::metrics::ScoredEntry e;
    e.score = r.score;
    e.is_ood = r.is_ood;
    e.class_label = r.class_label;
    e.frame_id = r.frame_id;
    groups[key].push_back(std::move(e));
  }

  std::vector<ood::pipeline::ReportRow> report;
  for (const auto& key : order) {
    ood::pipeline::ReportRow rr;
    rr.method = key.first;
    rr.layer = key.second;
    rr.source = "all";
    rr.report = ood::metrics::balanced_eval(
        groups[key], balance_repeats,
        ood::mix_seed(seed, ood::pipeline::stage_salt(key.first + "/" +
                                                      key.second)));
    report.push_back(std::move(rr));
  }
  const fs::path out = fs::path(g.out) / "report.csv";
  ood::pipeline::write_report_csv(report, out);
  summary(g, std::to_string(report.size()) + " rows written to " + out.string());
  return 0;
}

// --- sweep: removal-threshold performance impact ----------------------------

std::vector<ood::metrics::SweepDetection> read_sweep_detections(
    const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ood::IoError("cannot open " + path.string());
  std::vector<ood::metrics::SweepDetection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("class,", 0) == 0) continue;
    if (line.empty()) continue;
    const auto f = ood::io::detail::split(line, ',');
    if (f.size() != 10)
      throw ood::ParseError(path.string() + ":" + std::to_string(lineno) +
                            ": expected class,confidence,ood_score,l,w,h,x,y,z,yaw");
    ood::metrics::SweepDetection d;
    d.class_name = f[0];
    d.confidence = std::stod(f[1]);
    d.ood_score = std::stod(f[2]);
    d.box.length = std::stod(f[3]);
    d.box.width = std::stod(f[4]);
    d.box.height = std::stod(f[5]);
    d.box.cx = std::stod(f[6]);
    d.box.cy = std::stod(f[7]);
    d.box.cz = std::stod(f[8]);
    d.box.yaw = std::stod(f[9]);
    out.push_back(std::move(d));
  }
  return out;
}

int cmd_sweep(const GlobalOpts& g, const std::string& detections,
              const std::string& labels, const std::string& thresholds_csv,
              const std::string& classes_csv, int recall_points) {
  const auto dets = read_sweep_detections(detections);
  const auto gt = ood::io::read_labels(labels);
  std::vector<std::string> classes;
  if (!classes_csv.empty()) {
    classes = ood::io::detail::split(classes_csv, ',');
  } else {
    for (const auto& o : gt)
      if (!o.is_ood &&
          std::find(classes.begin(), classes.end(), o.class_name) ==
              classes.end())
        classes.push_back(o.class_name);
  }
  const auto points = ood::metrics::ood_threshold_sweep(
      dets, gt, classes, parse_doubles(thresholds_csv), recall_points);

  std::ostringstream ss;
  ss << "threshold,map,n_fp,n_removed,ood_recall\n";
  for (const auto& p : points)
    ss << ood::io::detail::fmt_float(p.threshold) << ','
       << ood::io::detail::fmt_float(p.map) << ',' << p.n_fp << ','
       << p.n_removed << ',' << ood::io::detail::fmt_float(p.ood_recall)
       << '\n';
  const fs::path out = fs::path(g.out) / "sweep.csv";
  ood::io::detail::write_file(out, ss.str());
  summary(g, std::to_string(points.size()) + " sweep points written to " +
                 out.string());
  return 0;
}

// --- mine: geometric outlier candidates -------------------------------------

int cmd_mine(const GlobalOpts& g, const std::string& manifest_path,
             const std::string& class_name, std::size_t min_pts) {
  const auto manifest = ood::io::read_manifest(manifest_path);
  std::vector<ood::Box3D> boxes;
  std::vector<std::pair<std::string, std::size_t>> origin;  // frame, index
  for (const auto& ref : manifest.frames) {
    const auto labels = ood::io::read_labels(ref.label_path);
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i].class_name == class_name) {
        boxes.push_back(labels[i].box);
        origin.emplace_back(ref.frame_id, i);
      }
  }
  const auto result = ood::mine::mine_outliers(boxes, min_pts);

  std::ostringstream ss;
  ss << "frame_id,object_index,length,width,height\n";
  for (std::size_t idx : result.outliers)
    ss << origin[idx].first << ',' << origin[idx].second << ','
       << ood::io::detail::fmt_float(boxes[idx].length) << ','
       << ood::io::detail::fmt_float(boxes[idx].width) << ','
       << ood::io::detail::fmt_float(boxes[idx].height) << '\n';
  const fs::path out = fs::path(g.out) / "outliers.csv";
  ood::io::detail::write_file(out, ss.str());

  std::ostringstream diag;
  for (const auto& d : result.diagnostics)
    diag << "feature_set=" << d.feature_set
         << " eps=" << ood::io::detail::fmt_float(d.eps)
         << " min_pts=" << d.min_pts << " outliers=" << d.outliers.size()
         << '\n';
  ood::io::detail::write_file(fs::path(g.out) / "diagnostics.txt", diag.str());
  summary(g, std::to_string(result.outliers.size()) + " outliers among " +
                 std::to_string(boxes.size()) + " " + class_name + " boxes");
  return 0;
}

// --- audit: post-hoc invariant check ----------------------------------------

int cmd_audit(const GlobalOpts& g, const std::string& manifest_path) {
  const auto cfg = load_config(g);
  ood::inject::InjectConfig ic = g.config.empty()
                                     ? ood::inject::InjectConfig{}
                                     : ood::config::parse_inject_config(cfg);
  const auto report =
      ood::pipeline::audit_dataset(ood::io::read_manifest(manifest_path), ic);
  ood::pipeline::write_audit(report, fs::path(g.out) / "audit.txt");
  summary(g, "checked " + std::to_string(report.objects_checked) +
                 " objects, " + std::to_string(report.violations.size()) +
                 " violations");
  return 0;
}

// --- run: whole experiment ---------------------------------------------------

int cmd_run(const GlobalOpts& g) {
  if (g.config.empty()) throw ood::ConfigError("run requires --config");
  auto cfg = load_config(g);
  if (g.seed) cfg.set("seed", std::to_string(*g.seed));
  const auto spec = ood::pipeline::spec_from_config(
      cfg, fs::path(g.config).parent_path());
  const auto result = ood::pipeline::run_experiment(spec, g.out);
  std::size_t ok = 0;
  for (const auto& r : result.repeats) ok += r.ok ? 1 : 0;
  summary(g, std::to_string(ok) + "/" + std::to_string(result.repeats.size()) +
                 " repeats complete; summary under " +
                 (fs::path(g.out) / "reports").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR OOD detection toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config, "structured-text config file");
  app.add_option("--out", g.out, "output directory");
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "RNG seed");
  app.add_flag("--quiet", g.quiet, "suppress the stdout summary");
  app.add_option("--jobs", g.jobs, "parallelism cap");

  auto* inject = app.add_subcommand("inject", "generate an OOD dataset");
  auto* fit = app.add_subcommand("fit", "train one scorer on a feature dump");
  std::string fit_method, fit_features;
  fit->add_option("--method", fit_method, "mahalanobis|ocsvm|flow")->required();
  fit->add_option("--features", fit_features, "training feature dump")->required();
  auto* score = app.add_subcommand("score", "score a feature dump");
  std::string score_method, score_model, score_features;
  score->add_option("--method", score_method, "mahalanobis|ocsvm|flow")->required();
  score->add_option("--model", score_model, "model file")->required();
  score->add_option("--features", score_features, "test feature dump")->required();
  auto* eval = app.add_subcommand("eval", "metric suite over a score table");
  std::string eval_scores;
  std::size_t eval_repeats = 10;
  eval->add_option("--scores", eval_scores, "score table CSV")->required();
  eval->add_option("--balance-repeats", eval_repeats, "resampling repeats");
  auto* sweep = app.add_subcommand("sweep", "removal-threshold sweep");
  std::string sweep_dets, sweep_labels, sweep_thresholds, sweep_classes;
  int sweep_recall = 40;
  sweep->add_option("--detections", sweep_dets, "detections CSV")->required();
  sweep->add_option("--labels", sweep_labels, "ground-truth label file")->required();
  sweep->add_option("--thresholds", sweep_thresholds, "comma-separated")->required();
  sweep->add_option("--classes", sweep_classes, "comma-separated FG classes");
  sweep->add_option("--recall-points", sweep_recall, "AP recall samples");
  auto* mine = app.add_subcommand("mine", "geometric outlier candidates");
  std::string mine_manifest, mine_class = "Car";
  std::size_t mine_min_pts = 5;
  mine->add_option("--manifest", mine_manifest, "dataset manifest")->required();
  mine->add_option("--class", mine_class, "vehicle class name");
  mine->add_option("--min-pts", mine_min_pts, "DBSCAN min_pts");
  auto* audit = app.add_subcommand("audit", "re-check insertion invariants");
  std::string audit_manifest;
  audit->add_option("--manifest", audit_manifest, "augmented manifest")->required();
  auto* run = app.add_subcommand("run", "full experiment protocol");

  // Global options (--config, --out, --seed, ...) may appear after the
  // subcommand name; let unmatched options fall through to the parent.
  for (auto* sub : {inject, fit, score, eval, sweep, mine, audit, run})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n' << app.help();
    return 1;
  }
  if (*seed_opt) g.seed = seed_value;

  if (g.out.empty()) {  // every subcommand writes its results under --out
    std::cerr << "--out is required\n";
    return 1;
  }

  try {
    if (inject->parsed()) return cmd_inject(g);
    if (fit->parsed()) return cmd_fit(g, fit_method, fit_features);
    if (score->parsed())
      return cmd_score(g, score_method, score_model, score_features);
    if (eval->parsed()) return cmd_eval(g, eval_scores, eval_repeats);
    if (sweep->parsed())
      return cmd_sweep(g, sweep_dets, sweep_labels, sweep_thresholds,
                       sweep_classes, sweep_recall);
    if (mine->parsed()) return cmd_mine(g, mine_manifest, mine_class, mine_min_pts);
    if (audit->parsed()) return cmd_audit(g, audit_manifest);
    if (run->parsed()) return cmd_run(g);
  } catch (const ood::Error& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  return 1;
}
