#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "helpers.hpp"
#include "oodkit/io.hpp"
#include "oodkit/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

// Exit code of the CLI binary for the given argument string.
int run_cli(const std::string& args) {
  const std::string cmd =
      std::string(OODKIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_base_config(const fs::path& path, const std::string& extra = "") {
  std::ostringstream ss;
  ss << "dataset=dataset/manifest.txt\n"
     << "ood_db=db\n"
     << "fov.x_min=0\nfov.x_max=40\n"
     << "fov.y_min=-20\nfov.y_max=20\n"
     << "fov.z_min=-3\nfov.z_max=1\n"
     << "detector.mc_samples=5\n"
     << "inject.zeta_max=2\n"
     << extra;
  ood::io::detail::write_file(path, ss.str());
}

void write_fixture_dataset(const fs::path& root, std::size_t n_frames = 4) {
  ood::inject::write_dataset(testfx::make_id_frames(n_frames, 401),
                             testfx::fg_classes(), root / "dataset");
  fs::create_directories(root / "db");
  testfx::make_ood_db(root / "db", 402);
}

std::vector<ood::featx::FeatureSample> dump_samples(std::size_t n, int d,
                                                    std::uint64_t seed) {
  ood::Rng rng(seed);
  std::vector<ood::featx::FeatureSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    ood::featx::FeatureSample s;
    s.class_label = static_cast<int>(i % 2);
    s.frame_id = "f" + std::to_string(i);
    s.layer = "conv4x";
    const double shift = s.class_label ? 3.0 : 0.0;
    for (int j = 0; j < d; ++j)
      s.vector.push_back(static_cast<float>(shift + rng.normal()));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with code 1") {
  testfx::TempDir tmp("cli-usage");
  CHECK(run_cli("frobnicate --out " + (tmp.path / "o").string()) == 1);
  CHECK(run_cli("") == 1);
  // --out is required for every subcommand.
  CHECK(run_cli("audit --manifest missing.txt") == 1);
  // missing required option of a subcommand
  CHECK(run_cli("fit --out " + (tmp.path / "o").string()) == 1);
}

TEST_CASE("help exits cleanly") {
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("inject writes a dataset, stats, and is seed-deterministic") {
  testfx::TempDir tmp("cli-inject");
  write_fixture_dataset(tmp.path);
  write_base_config(tmp.path / "run.cfg");
  const std::string base = "inject --config " + (tmp.path / "run.cfg").string();

  CHECK(run_cli(base + " --seed 5 --out " + (tmp.path / "a").string()) == 0);
  CHECK(fs::exists(tmp.path / "a" / "manifest.txt"));
  CHECK(fs::exists(tmp.path / "a" / "stats.txt"));

  CHECK(run_cli(base + " --seed 5 --out " + (tmp.path / "b").string()) == 0);
  // Same seed: byte-identical label files frame by frame.
  const auto ma = ood::io::read_manifest(tmp.path / "a" / "manifest.txt");
  const auto mb = ood::io::read_manifest(tmp.path / "b" / "manifest.txt");
  REQUIRE(ma.frames.size() == mb.frames.size());
  for (std::size_t i = 0; i < ma.frames.size(); ++i) {
    CHECK(ood::io::detail::read_file(ma.frames[i].cloud_path) ==
          ood::io::detail::read_file(mb.frames[i].cloud_path));
    CHECK(ood::io::detail::read_file(ma.frames[i].label_path) ==
          ood::io::detail::read_file(mb.frames[i].label_path));
  }

  // No seed anywhere: a data/config error, not a crash.
  CHECK(run_cli(base + " --out " + (tmp.path / "c").string()) == 2);
}

TEST_CASE("audit accepts the inject output with zero violations") {
  testfx::TempDir tmp("cli-audit");
  write_fixture_dataset(tmp.path);
  write_base_config(tmp.path / "run.cfg");
  REQUIRE(run_cli("inject --config " + (tmp.path / "run.cfg").string() +
                  " --seed 5 --out " + (tmp.path / "aug").string()) == 0);
  CHECK(run_cli("audit --config " + (tmp.path / "run.cfg").string() +
                " --manifest " + (tmp.path / "aug" / "manifest.txt").string() +
                " --out " + (tmp.path / "rep").string()) == 0);
  const std::string text =
      ood::io::detail::read_file(tmp.path / "rep" / "audit.txt");
  CHECK(text.find("violations=0") != std::string::npos);
}

TEST_CASE("fit and score round-trip through model files") {
  testfx::TempDir tmp("cli-fit");
  auto train = dump_samples(120, 4, 403);
  for (auto& s : train) s.is_ood = false;
  ood::io::write_feature_dump(train, tmp.path / "train.bin", 2);

  auto test = dump_samples(30, 4, 404);
  for (std::size_t i = 0; i < test.size(); ++i) {
    test[i].is_ood = i % 3 == 0;
    if (test[i].is_ood)  // push OOD samples far away
      for (auto& v : test[i].vector) v += 40.0f;
  }
  ood::io::write_feature_dump(test, tmp.path / "test.bin", 2);

  // Kernel width suited to the unit-variance fixture.
  ood::io::detail::write_file(tmp.path / "fit.cfg", "ocsvm.gamma=0.1\n");

  for (const std::string method : {"mahalanobis", "ocsvm"}) {
    const fs::path mdir = tmp.path / (method + "-model");
    CHECK(run_cli("fit --method " + method + " --config " +
                  (tmp.path / "fit.cfg").string() + " --features " +
                  (tmp.path / "train.bin").string() + " --seed 3 --out " +
                  mdir.string()) == 0);
    const fs::path model = mdir / (method + "-conv4x.bin");
    CHECK(fs::exists(model));

    const fs::path sdir = tmp.path / (method + "-scores");
    CHECK(run_cli("score --method " + method + " --model " + model.string() +
                  " --features " + (tmp.path / "test.bin").string() +
                  " --out " + sdir.string()) == 0);
    const auto rows = ood::io::read_score_table(sdir / "scores.csv");
    REQUIRE(rows.size() == test.size());
    // Far-away OOD samples score higher on average.
    double ood_mean = 0, id_mean = 0;
    std::size_t n_ood = 0, n_id = 0;
    for (const auto& r : rows)
      if (r.is_ood) {
        ood_mean += r.score;
        ++n_ood;
      } else {
        id_mean += r.score;
        ++n_id;
      }
    CHECK(ood_mean / static_cast<double>(n_ood) >
          id_mean / static_cast<double>(n_id));

    // eval over the produced score table
    const fs::path edir = tmp.path / (method + "-eval");
    CHECK(run_cli("eval --scores " + (sdir / "scores.csv").string() +
                  " --balance-repeats 3 --seed 9 --out " + edir.string()) == 0);
    const auto report = ood::pipeline::read_report_csv(edir / "report.csv");
    REQUIRE(report.size() == 1);
    CHECK(report[0].method == method);
    CHECK(report[0].report.mean.auroc > 0.9);
  }

  // Unknown method is a data error.
  CHECK(run_cli("fit --method kmeans --features " +
                (tmp.path / "train.bin").string() + " --out " +
                (tmp.path / "x").string()) == 2);
}

TEST_CASE("eval rejects a single-class score table with exit code 2") {
  testfx::TempDir tmp("cli-eval2");
  std::vector<ood::io::ScoreRow> rows(5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].frame_id = "f";
    rows[i].detection_index = i;
    rows[i].class_label = "Car";
    rows[i].method = "max_softmax";
    rows[i].layer = "-";
    rows[i].score = 0.1 * static_cast<double>(i);
    rows[i].is_ood = false;  // no OOD rows at all
  }
  ood::io::write_score_table(rows, tmp.path / "scores.csv");
  CHECK(run_cli("eval --scores " + (tmp.path / "scores.csv").string() +
                " --seed 1 --out " + (tmp.path / "o").string()) == 2);
}

TEST_CASE("sweep recounts removals over the detections CSV") {
  testfx::TempDir tmp("cli-sweep");
  std::vector<ood::LabeledObject> gt(2);
  gt[0].box = {10, 0, 0, 4, 2, 1.5, 0};
  gt[0].class_name = "Car";
  gt[1].box = {25, 5, 0, 2, 2, 1, 0};
  gt[1].class_name = "Barrier";
  gt[1].is_ood = true;
  gt[1].category = ood::OodCategory::kBgOutDistMisdetected;
  ood::io::write_labels(gt, tmp.path / "labels.txt");

  ood::io::detail::write_file(tmp.path / "dets.csv",
                              "class,confidence,ood_score,l,w,h,x,y,z,yaw\n"
                              "Car,0.9,0.1,4,2,1.5,10,0,0,0\n"
                              "Car,0.7,0.9,2,2,1,25,5,0,0\n"
                              "Car,0.5,0.5,4,2,1.5,35,-5,0,0\n");
  CHECK(run_cli("sweep --detections " + (tmp.path / "dets.csv").string() +
                " --labels " + (tmp.path / "labels.txt").string() +
                " --thresholds 0.3,0.6,0.95 --out " +
                (tmp.path / "o").string()) == 0);
  std::ifstream in(tmp.path / "o" / "sweep.csv");
  std::string header, l1, l2, l3;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(header == "threshold,map,n_fp,n_removed,ood_recall");
  // threshold 0.3 removes the 0.9 and 0.5 scored dets, incl. the OOD match.
  const auto f1 = ood::io::detail::split(l1, ',');
  REQUIRE(f1.size() == 5);
  CHECK(std::stoul(f1[3]) == 2);
  CHECK(std::stod(f1[4]) == doctest::Approx(1.0));
  const auto f3 = ood::io::detail::split(l3, ',');
  CHECK(std::stoul(f3[3]) == 0);
  CHECK(std::stod(f3[4]) == doctest::Approx(0.0));
}

TEST_CASE("mine flags planted oversize vehicles") {
  testfx::TempDir tmp("cli-mine");
  auto frames = testfx::make_id_frames(40, 405);
  // One absurd car in the last frame.
  ood::LabeledObject giant;
  giant.box = {15, 5, 0, 20, 8, 6, 0};
  giant.class_name = "Car";
  frames.back().labels.push_back(giant);
  ood::inject::write_dataset(frames, testfx::fg_classes(), tmp.path / "ds");

  CHECK(run_cli("mine --manifest " +
                (tmp.path / "ds" / "manifest.txt").string() +
                " --class Car --out " + (tmp.path / "o").string()) == 0);
  const std::string text =
      ood::io::detail::read_file(tmp.path / "o" / "outliers.csv");
  CHECK(text.find("000039") != std::string::npos);  // the giant's frame
  CHECK(fs::exists(tmp.path / "o" / "diagnostics.txt"));
}

TEST_CASE("run executes the full protocol from a config") {
  testfx::TempDir tmp("cli-run");
  write_fixture_dataset(tmp.path, 12);
  write_base_config(tmp.path / "run.cfg",
                    "seed=13\n"
                    "repeats=1\n"
                    "balance_repeats=2\n"
                    "inject.zeta_max=3\n"
                    "grid.methods=max_softmax,mahalanobis\n"
                    "grid.layers=conv4x\n"
                    "grid.mahalanobis_logits=0\n");
  CHECK(run_cli("run --config " + (tmp.path / "run.cfg").string() + " --out " +
                (tmp.path / "out").string()) == 0);
  CHECK(fs::exists(tmp.path / "out" / "reports" / "summary.csv"));
  CHECK(fs::exists(tmp.path / "out" / "reports" / "summary.txt"));
  const auto rows = ood::pipeline::read_report_csv(
      tmp.path / "out" / "reports" / "rep0.csv");
  CHECK_FALSE(rows.empty());
}

}  // TEST_SUITE
