#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "oodkit/metrics.hpp"
#include "oodkit/rng.hpp"

using ood::metrics::ScoredEntry;
using ood::metrics::ScoredSet;

namespace {

ScoredSet make_set(const std::vector<double>& id_scores,
                   const std::vector<double>& ood_scores) {
  ScoredSet s;
  for (double v : id_scores) s.push_back({v, false, "Car", "f"});
  for (double v : ood_scores) s.push_back({v, true, "Car", "f"});
  return s;
}

ScoredSet random_set(std::size_t n_id, std::size_t n_ood, ood::Rng& rng,
                     double ood_shift = 0.0) {
  ScoredSet s;
  for (std::size_t i = 0; i < n_id; ++i)
    s.push_back({rng.normal(), false, "Car", "f"});
  for (std::size_t i = 0; i < n_ood; ++i)
    s.push_back({rng.normal() + ood_shift, true, "Car", "f"});
  return s;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("perfect separation") {
  const ScoredSet s = make_set({0.1, 0.2, 0.3, 0.4}, {1.1, 1.2, 1.3, 1.4});
  CHECK(ood::metrics::auroc(s) == doctest::Approx(1.0));
  CHECK(ood::metrics::aupr(s, ood::metrics::Positive::OOD) ==
        doctest::Approx(1.0));
  CHECK(ood::metrics::aupr(s, ood::metrics::Positive::ID) ==
        doctest::Approx(1.0));
  CHECK(ood::metrics::fpr_at_95_tpr(s) == doctest::Approx(0.0));
  // 4 OOD entries: the smallest TPR >= 0.95 is 1.0, so D_e = 0.
  CHECK(ood::metrics::detection_error(s) == doctest::Approx(0.0));
}

TEST_CASE("identical score distributions") {
  // Every entry shares the same score: AUROC 0.5 by the tie convention, and
  // the only threshold flags everything (TPR 1, FPR 1).
  const ScoredSet s = make_set({0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
  CHECK(ood::metrics::auroc(s) == doctest::Approx(0.5));
  CHECK(ood::metrics::fpr_at_95_tpr(s) == doctest::Approx(1.0));
  CHECK(ood::metrics::detection_error(s) == doctest::Approx(0.5));
}

TEST_CASE("auroc counts pairs with mid-rank ties") {
  // Oracle: brute-force pair counting with half-credit ties.
  ood::Rng rng(131);
  for (int t = 0; t < 30; ++t) {
    ScoredSet s;
    for (int i = 0; i < 25; ++i)
      s.push_back({static_cast<double>(rng.uniform_index(6)), i % 2 == 0,
                   "Car", "f"});
    double pairs = 0, wins = 0;
    for (const auto& o : s) {
      if (!o.is_ood) continue;
      for (const auto& d : s) {
        if (d.is_ood) continue;
        pairs += 1;
        if (o.score > d.score) wins += 1;
        else if (o.score == d.score) wins += 0.5;
      }
    }
    CHECK(ood::metrics::auroc(s) == doctest::Approx(wins / pairs).epsilon(1e-12));
  }
}

TEST_CASE("metrics are invariant under monotone score transforms") {
  ood::Rng rng(132);
  const ScoredSet s = random_set(60, 40, rng, 1.0);
  ScoredSet t = s;
  for (auto& e : t) e.score = std::exp(0.5 * e.score) + 3.0;
  CHECK(ood::metrics::auroc(t) == doctest::Approx(ood::metrics::auroc(s)));
  CHECK(ood::metrics::aupr(t, ood::metrics::Positive::OOD) ==
        doctest::Approx(ood::metrics::aupr(s, ood::metrics::Positive::OOD)));
  CHECK(ood::metrics::fpr_at_95_tpr(t) ==
        doctest::Approx(ood::metrics::fpr_at_95_tpr(s)));
  CHECK(ood::metrics::detection_error(t) ==
        doctest::Approx(ood::metrics::detection_error(s)));
}

TEST_CASE("aupr approaches the positive prevalence for random scores") {
  ood::Rng rng(133);
  ScoredSet s;
  for (int i = 0; i < 20000; ++i)
    s.push_back({rng.uniform(), i % 4 == 0, "Car", "f"});  // 25% OOD
  CHECK(ood::metrics::aupr(s, ood::metrics::Positive::OOD) ==
        doctest::Approx(0.25).epsilon(0.05));
  CHECK(ood::metrics::aupr(s, ood::metrics::Positive::ID) ==
        doctest::Approx(0.75).epsilon(0.05));
  CHECK(ood::metrics::auroc(s) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("tpr95 picks the most conservative admissible threshold") {
  // 20 OOD scores 1..20, ID scores below 2. TPR >= 0.95 needs >= 19 OOD
  // flagged, so the threshold is the second-smallest OOD score.
  ScoredSet s;
  for (int i = 1; i <= 20; ++i)
    s.push_back({static_cast<double>(i), true, "Car", "f"});
  s.push_back({0.5, false, "Car", "f"});
  s.push_back({1.5, false, "Car", "f"});
  const auto op = ood::metrics::tpr95_operating_point(s);
  CHECK(op.threshold == doctest::Approx(2.0));
  CHECK(op.tpr == doctest::Approx(0.95));
  CHECK(op.fpr == doctest::Approx(0.0));
  CHECK(ood::metrics::detection_error(s) == doctest::Approx(0.025));
}

TEST_CASE("degenerate inputs are rejected") {
  CHECK_THROWS_AS(ood::metrics::auroc(make_set({1, 2}, {})),
                  ood::SingleClassSet);
  CHECK_THROWS_AS(ood::metrics::auroc(make_set({}, {1, 2})),
                  ood::SingleClassSet);
  ScoredSet nan = make_set({1}, {2});
  nan[0].score = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(ood::metrics::auroc(nan), ood::NonFiniteValue);
}

TEST_CASE("balanced_eval on an already balanced set matches direct metrics") {
  ood::Rng rng(134);
  ScoredSet s;
  // One class, 30 ID + 30 OOD: the minimum stratum is the whole stratum, so
  // each repeat evaluates the full set.
  for (int i = 0; i < 30; ++i) {
    s.push_back({rng.normal(), false, "Car", "f"});
    s.push_back({rng.normal() + 2.0, true, "Car", "f"});
  }
  const auto rep = ood::metrics::balanced_eval(s, 4, 99);
  const auto direct = ood::metrics::compute_report(s);
  CHECK(rep.stratum_size == 30);
  CHECK(rep.mean.auroc == doctest::Approx(direct.auroc));
  CHECK(rep.sd.auroc == doctest::Approx(0.0));
  CHECK(rep.mean.fpr_at_95_tpr == doctest::Approx(direct.fpr_at_95_tpr));
  CHECK(rep.mean.n_id == 30);
  CHECK(rep.mean.n_ood == 30);
}

TEST_CASE("balanced_eval downsamples to the smallest stratum") {
  ood::Rng rng(135);
  ScoredSet s;
  for (int i = 0; i < 100; ++i) s.push_back({rng.normal(), false, "Car", "f"});
  for (int i = 0; i < 40; ++i)
    s.push_back({rng.normal(), false, "Pedestrian", "f"});
  for (int i = 0; i < 7; ++i)
    s.push_back({rng.normal() + 3.0, true, "Barrier", "f"});
  const auto rep = ood::metrics::balanced_eval(s, 5, 100);
  CHECK(rep.stratum_size == 7);
  CHECK(rep.mean.n_id == 14);  // two ID strata at 7 each
  CHECK(rep.mean.n_ood == 7);
  CHECK(rep.mean.auroc > 0.8);
  // Deterministic in the seed.
  const auto rep2 = ood::metrics::balanced_eval(s, 5, 100);
  CHECK(rep.mean.auroc == rep2.mean.auroc);
  CHECK(rep.sd.auroc == rep2.sd.auroc);
}

TEST_CASE("threshold sweep recounts removals, FPs and OOD recall") {
  // Three GT objects (two ID cars, one OOD) and four detections:
  //  d0 matches car g0, d1 matches car g1, d2 matches the OOD box,
  //  d3 is a spatial FP. OOD scores: 0.1, 0.2, 0.9, 0.8.
  std::vector<ood::LabeledObject> gt(3);
  gt[0].box = {10, 0, 0, 4, 2, 1.5, 0};
  gt[0].class_name = "Car";
  gt[1].box = {20, 5, 0, 4, 2, 1.5, 0};
  gt[1].class_name = "Car";
  gt[2].box = {30, -5, 0, 2, 2, 1, 0};
  gt[2].class_name = "Barrier";
  gt[2].is_ood = true;

  std::vector<ood::metrics::SweepDetection> dets(4);
  dets[0] = {gt[0].box, "Car", 0.9, 0.1};
  dets[1] = {gt[1].box, "Car", 0.8, 0.2};
  dets[2] = {gt[2].box, "Car", 0.7, 0.9};
  dets[3] = {{40, 10, 0, 4, 2, 1.5, 0}, "Car", 0.6, 0.8};

  const std::vector<std::string> classes{"Car"};
  const auto sweep = ood::metrics::ood_threshold_sweep(
      dets, gt, classes, {-std::numeric_limits<double>::infinity(), 0.15, 0.85,
                          2.0});
  REQUIRE(sweep.size() == 4);

  // threshold -inf: everything removed.
  CHECK(sweep[0].n_removed == 4);
  CHECK(sweep[0].n_fp == 0);
  CHECK(sweep[0].ood_recall == doctest::Approx(1.0));
  CHECK(sweep[0].map == doctest::Approx(0.0));

  // threshold 0.15: d1, d2, d3 removed. Only d0 survives (a TP).
  CHECK(sweep[1].n_removed == 3);
  CHECK(sweep[1].n_fp == 0);
  CHECK(sweep[1].ood_recall == doctest::Approx(1.0));

  // threshold 0.85: only d2 (the OOD match) removed; d3 survives as FP.
  CHECK(sweep[2].n_removed == 1);
  CHECK(sweep[2].n_fp == 1);
  CHECK(sweep[2].ood_recall == doctest::Approx(1.0));

  // threshold 2.0: nothing removed; d2 is ignored (OOD match), d3 is FP.
  CHECK(sweep[3].n_removed == 0);
  CHECK(sweep[3].n_fp == 1);
  CHECK(sweep[3].ood_recall == doctest::Approx(0.0));
  // Both cars recovered at full precision before the FP enters: with 40
  // recall points and the FP at the lowest confidence, AP stays 1.
  CHECK(sweep[3].map == doctest::Approx(1.0));

  // Monotonicity: n_removed never increases with the threshold.
  for (std::size_t i = 1; i < sweep.size(); ++i)
    CHECK(sweep[i].n_removed <= sweep[i - 1].n_removed);

  CHECK_THROWS_AS(ood::metrics::ood_threshold_sweep(dets, gt, classes, {}),
                  ood::EmptyThresholds);
}

TEST_CASE("balanced_eval rejects sets missing a class") {
  ScoredSet s;
  s.push_back({1.0, false, "Car", "f"});
  CHECK_THROWS_AS(ood::metrics::balanced_eval(s, 2, 1), ood::SingleClassSet);
}

}  // TEST_SUITE
