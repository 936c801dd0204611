#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/rng.hpp"

// OOD-detection metric suite. Orientation throughout: larger score = more
// OOD, and OOD entries are the positives.
namespace ood::metrics {

struct ScoredEntry {
  double score = 0;
  bool is_ood = false;
  std::string class_label;
  std::string frame_id;
};

using ScoredSet = std::vector<ScoredEntry>;

namespace detail {

inline void check_two_sided(const ScoredSet& s) {
  std::size_t n_ood = 0;
  for (const auto& e : s) {
    if (!std::isfinite(e.score)) throw NonFiniteValue("score");
    n_ood += e.is_ood ? 1 : 0;
  }
  if (n_ood == 0 || n_ood == s.size())
    throw SingleClassSet("need at least one ID and one OOD entry");
}

}  // namespace detail

// AUROC = P(score_OOD > score_ID), ties counted 1/2, via the Mann-Whitney
// rank statistic with mid-rank ties.
inline double auroc(const ScoredSet& s) {
  detail::check_two_sided(s);
  std::vector<std::pair<double, bool>> v;
  v.reserve(s.size());
  std::size_t n_ood = 0, n_id = 0;
  for (const auto& e : s) {
    v.emplace_back(e.score, e.is_ood);
    (e.is_ood ? n_ood : n_id)++;
  }
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_ood = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (v[k].second) rank_sum_ood += mid_rank;
    i = j;
  }
  const double u = rank_sum_ood - 0.5 * static_cast<double>(n_ood) *
                                      static_cast<double>(n_ood + 1);
  return u / (static_cast<double>(n_ood) * static_cast<double>(n_id));
}

enum class Positive { ID, OOD };

// Area under the step-wise (non-interpolated) precision-recall curve over
// all thresholds. For positive = ID the score axis is negated first.
inline double aupr(const ScoredSet& s, Positive positive) {
  detail::check_two_sided(s);
  std::vector<std::pair<double, bool>> v;  // (score toward positive, is_pos)
  std::size_t n_pos = 0;
  for (const auto& e : s) {
    const bool is_pos = (positive == Positive::OOD) == e.is_ood;
    v.emplace_back(positive == Positive::OOD ? e.score : -e.score, is_pos);
    n_pos += is_pos ? 1 : 0;
  }
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  // Sweep thresholds at distinct score values, descending; ties enter as one
  // group. Area = sum over groups of (delta recall) * precision.
  double area = 0;
  std::size_t tp = 0, fp = 0;
  double prev_recall = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    for (std::size_t k = i; k < j; ++k) (v[k].second ? tp : fp)++;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision =
        static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

struct OperatingPoint {
  double threshold = 0;  // predict OOD iff score >= threshold
  double tpr = 0;
  double fpr = 0;
};

// The most conservative threshold (over the observed score values) whose TPR
// is still >= 0.95, with OOD as positive.
inline OperatingPoint tpr95_operating_point(const ScoredSet& s) {
  detail::check_two_sided(s);
  std::set<double> thresholds;
  std::size_t n_ood = 0, n_id = 0;
  for (const auto& e : s) {
    thresholds.insert(e.score);
    (e.is_ood ? n_ood : n_id)++;
  }
  OperatingPoint best;
  bool found = false;
  for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
    std::size_t tp = 0, fp = 0;
    for (const auto& e : s)
      if (e.score >= *it) (e.is_ood ? tp : fp)++;
    const double tpr = static_cast<double>(tp) / static_cast<double>(n_ood);
    if (tpr >= 0.95) {
      best.threshold = *it;
      best.tpr = tpr;
      best.fpr = static_cast<double>(fp) / static_cast<double>(n_id);
      found = true;
      break;  // thresholds descend; the first hit is the most conservative
    }
  }
  if (!found) {
    // Even flagging everything misses 0.95 only when n_ood == 0, which
    // check_two_sided excludes; flagging all entries always gives TPR 1.
    best.threshold = -std::numeric_limits<double>::infinity();
    best.tpr = 1.0;
    best.fpr = 1.0;
  }
  return best;
}

inline double fpr_at_95_tpr(const ScoredSet& s) {
  return tpr95_operating_point(s).fpr;
}

// D_e = 0.5 (1 - TPR) + 0.5 FPR at the TPR >= 0.95 operating point.
inline double detection_error(const ScoredSet& s) {
  const OperatingPoint op = tpr95_operating_point(s);
  return 0.5 * (1.0 - op.tpr) + 0.5 * op.fpr;
}

struct MetricReport {
  double auroc = 0, aupr_in = 0, aupr_out = 0;
  double detection_error = 0, fpr_at_95_tpr = 0;
  std::size_t n_id = 0, n_ood = 0;
};

inline MetricReport compute_report(const ScoredSet& s) {
  MetricReport r;
  r.auroc = auroc(s);
  r.aupr_in = aupr(s, Positive::ID);
  r.aupr_out = aupr(s, Positive::OOD);
  r.detection_error = detection_error(s);
  r.fpr_at_95_tpr = fpr_at_95_tpr(s);
  for (const auto& e : s) (e.is_ood ? r.n_ood : r.n_id)++;
  return r;
}

struct BalancedReport {
  MetricReport mean;
  MetricReport sd;
  std::size_t repeats = 0;
  std::size_t stratum_size = 0;
};

// Class-balanced resampling: every (class_label, is_ood) stratum is
// downsampled without replacement to the global minimum stratum size; the
// metric suite is averaged over R repeats.
inline BalancedReport balanced_eval(const ScoredSet& s, std::size_t repeats,
                                    std::uint64_t seed) {
  std::map<std::pair<std::string, bool>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < s.size(); ++i)
    strata[{s[i].class_label, s[i].is_ood}].push_back(i);
  if (strata.empty()) throw EmptyStratum("empty scored set");
  std::size_t min_size = std::numeric_limits<std::size_t>::max();
  for (const auto& [key, idx] : strata) {
    if (idx.empty()) throw EmptyStratum(key.first);
    min_size = std::min(min_size, idx.size());
  }

  std::vector<MetricReport> reports;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    Rng rng(mix_seed(seed, rep + 1));
    ScoredSet sub;
    for (const auto& [key, idx] : strata) {
      std::vector<std::size_t> pool = idx;
      rng.shuffle(pool);
      for (std::size_t i = 0; i < min_size; ++i) sub.push_back(s[pool[i]]);
    }
    reports.push_back(compute_report(sub));
  }

  BalancedReport out;
  out.repeats = repeats;
  out.stratum_size = min_size;
  const double n = static_cast<double>(repeats);
  auto accumulate = [&](auto member) {
    double mean = 0;
    for (const auto& r : reports) mean += r.*member;
    mean /= n;
    double var = 0;
    for (const auto& r : reports) var += (r.*member - mean) * (r.*member - mean);
    var = repeats > 1 ? var / (n - 1) : 0.0;
    out.mean.*member = mean;
    out.sd.*member = std::sqrt(var);
  };
  accumulate(&MetricReport::auroc);
  accumulate(&MetricReport::aupr_in);
  accumulate(&MetricReport::aupr_out);
  accumulate(&MetricReport::detection_error);
  accumulate(&MetricReport::fpr_at_95_tpr);
  out.mean.n_id = reports.front().n_id;
  out.mean.n_ood = reports.front().n_ood;
  return out;
}

// ---------------------------------------------------------------------------
// Performance-impact sweep: remove predictions whose OOD score exceeds a
// threshold and re-evaluate mAP / FP counts / OOD recall.
// ---------------------------------------------------------------------------

struct SweepDetection {
  Box3D box;
  std::string class_name;
  double confidence = 0;
  double ood_score = 0;
};

struct SweepPoint {
  double threshold = 0;
  double map = 0;            // over ID ground truth
  std::size_t n_fp = 0;      // surviving unmatched predictions
  std::size_t n_removed = 0;
  double ood_recall = 0;     // removed OOD-labeled / total OOD-labeled
};

inline double match_iou_threshold(const std::string& class_name) {
  return class_name == "Car" ? 0.7 : 0.5;
}

namespace detail {

// Greedy confidence-descending matching of detections to GT boxes of the
// same class. Returns per-detection matched GT index or -1.
inline std::vector<int> match_detections(
    const std::vector<SweepDetection>& dets,
    const std::vector<LabeledObject>& gt) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<int> match(dets.size(), -1);
  std::vector<bool> taken(gt.size(), false);
  for (std::size_t oi : order) {
    const auto& d = dets[oi];
    const double thr = match_iou_threshold(d.class_name);
    double best_iou = 0;
    int best_g = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      // OOD ground truth matches any FG class (the misdetection is the
      // point); ID ground truth requires the class to agree.
      if (!gt[g].is_ood && gt[g].class_name != d.class_name) continue;
      const double iou = bev_iou(d.box, gt[g].box);
      if (iou >= thr && iou > best_iou) {
        best_iou = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      match[oi] = best_g;
      taken[static_cast<std::size_t>(best_g)] = true;
    }
  }
  return match;
}

// 40-point interpolated average precision for one class over ID ground
// truth. Detections matched to OOD ground truth are ignored (neither TP nor
// FP); everything unmatched counts as FP.
inline double average_precision(const std::vector<SweepDetection>& dets,
                                const std::vector<int>& match,
                                const std::vector<LabeledObject>& gt,
                                const std::string& class_name,
                                const std::vector<bool>& kept,
                                int recall_points) {
  std::size_t n_gt = 0;
  for (const auto& g : gt)
    if (!g.is_ood && g.class_name == class_name) ++n_gt;
  if (n_gt == 0) return 0.0;

  struct Row {
    double confidence;
    bool tp;
  };
  std::vector<Row> rows;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (!kept[i] || dets[i].class_name != class_name) continue;
    if (match[i] >= 0 && gt[static_cast<std::size_t>(match[i])].is_ood)
      continue;  // ignored region
    rows.push_back({dets[i].confidence, match[i] >= 0});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) {
                     return a.confidence > b.confidence;
                   });
  std::vector<double> recalls, precisions;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : rows) {
    (r.tp ? tp : fp)++;
    recalls.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precisions.push_back(static_cast<double>(tp) /
                         static_cast<double>(tp + fp));
  }
  double ap = 0;
  for (int k = 1; k <= recall_points; ++k) {
    const double r_level =
        static_cast<double>(k) / static_cast<double>(recall_points);
    double p_max = 0;
    for (std::size_t i = 0; i < recalls.size(); ++i)
      if (recalls[i] >= r_level) p_max = std::max(p_max, precisions[i]);
    ap += p_max;
  }
  return ap / static_cast<double>(recall_points);
}

}  // namespace detail

// For each threshold: drop predictions with ood_score > threshold, then
// report mAP over ID classes, surviving FP count, removed count, and the
// recall of OOD-labeled detections among the removed.
inline std::vector<SweepPoint> ood_threshold_sweep(
    const std::vector<SweepDetection>& dets,
    const std::vector<LabeledObject>& gt,
    const std::vector<std::string>& classes,
    const std::vector<double>& thresholds, int recall_points = 40) {
  if (thresholds.empty()) throw EmptyThresholds("ood_threshold_sweep");
  const std::vector<int> match = detail::match_detections(dets, gt);
  std::size_t total_ood_labeled = 0;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (match[i] >= 0 && gt[static_cast<std::size_t>(match[i])].is_ood)
      ++total_ood_labeled;

  std::vector<SweepPoint> out;
  for (double thr : thresholds) {
    SweepPoint pt;
    pt.threshold = thr;
    std::vector<bool> kept(dets.size(), true);
    std::size_t removed_ood = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].ood_score > thr) {
        kept[i] = false;
        ++pt.n_removed;
        if (match[i] >= 0 && gt[static_cast<std::size_t>(match[i])].is_ood)
          ++removed_ood;
      }
    }
    double ap_sum = 0;
    for (const auto& cls : classes)
      ap_sum += detail::average_precision(dets, match, gt, cls, kept,
                                          recall_points);
    pt.map = classes.empty() ? 0.0
                             : ap_sum / static_cast<double>(classes.size());
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (kept[i] && match[i] < 0) ++pt.n_fp;
    pt.ood_recall = total_ood_labeled
                        ? static_cast<double>(removed_ood) /
                              static_cast<double>(total_ood_labeled)
                        : 0.0;
    out.push_back(pt);
  }
  return out;
}

}  // namespace ood::metrics
