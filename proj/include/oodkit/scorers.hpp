#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <numbers>
#include <string>
#include <vector>

#include "oodkit/core.hpp"
#include "oodkit/errors.hpp"
#include "oodkit/featx.hpp"
#include "oodkit/flow.hpp"
#include "oodkit/io.hpp"
#include "oodkit/rng.hpp"

// The six OOD scoring methods behind one orientation: larger = more OOD.
namespace ood::scorers {

// ---------------------------------------------------------------------------
// max-softmax baseline: OOD score = 1 - max FG probability
// ---------------------------------------------------------------------------

inline double score_max_softmax(const Detection& d) {
  if (d.class_probs.size() < 2)
    throw DimensionMismatch("class_probs needs FG entries plus background");
  double max_fg = 0;
  for (std::size_t c = 0; c + 1 < d.class_probs.size(); ++c)
    max_fg = std::max(max_fg, d.class_probs[c]);
  return 1.0 - max_fg;
}

// ---------------------------------------------------------------------------
// MC-dropout uncertainty: predictive entropy, aleatoric entropy, mutual
// information (natural log)
// ---------------------------------------------------------------------------

struct UncertaintyScores {
  double predictive_entropy = 0;
  double aleatoric_entropy = 0;
  double mutual_information = 0;
};

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

inline UncertaintyScores score_uncertainty(
    const std::vector<std::vector<double>>& mc_samples) {
  if (mc_samples.empty()) throw EmptySamples("no MC softmax samples");
  const std::size_t k = mc_samples.front().size();
  std::vector<double> mean(k, 0.0);
  double aleatoric = 0;
  for (const auto& p : mc_samples) {
    if (p.size() != k) throw DimensionMismatch("ragged MC sample set");
    for (std::size_t i = 0; i < k; ++i) mean[i] += p[i];
    aleatoric += entropy(p);
  }
  const double T = static_cast<double>(mc_samples.size());
  for (auto& v : mean) v /= T;
  UncertaintyScores s;
  s.predictive_entropy = entropy(mean);
  s.aleatoric_entropy = aleatoric / T;
  s.mutual_information = s.predictive_entropy - s.aleatoric_entropy;
  return s;
}

// ---------------------------------------------------------------------------
// Mahalanobis distance to the nearest class-conditional Gaussian
// ---------------------------------------------------------------------------

struct GaussianStats {
  std::size_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd scatter;  // sum of outer products of deviations (M2)
};

// Chan et al. parallel merge of (n, mean, M2) statistics.
inline void merge_stats(GaussianStats& a, const GaussianStats& b) {
  if (b.n == 0) return;
  if (a.n == 0) {
    a = b;
    return;
  }
  const double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
  const Eigen::VectorXd delta = b.mean - a.mean;
  const double n = na + nb;
  a.scatter += b.scatter + (na * nb / n) * (delta * delta.transpose());
  a.mean += (nb / n) * delta;
  a.n += b.n;
}

struct MahalanobisModel {
  struct ClassModel {
    int class_label = 0;
    std::size_t n = 0;
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;  // regularized
    Eigen::MatrixXd precision;
  };
  std::vector<ClassModel> classes;
  int dim = 0;
};

struct MahalanobisConfig {
  int batch_size = 64;
  int epochs = 5;
  double ridge_scale = 1e-3;   // epsilon = ridge_scale * trace(Sigma) / d
  double ridge_floor = 1e-9;   // keeps zero-scatter classes invertible
};

// Streaming per-class mean/covariance over batches. Statistics are reset per
// fit; extra epochs re-verify the merge and leave the result unchanged.
inline MahalanobisModel fit_mahalanobis(
    const std::vector<featx::FeatureSample>& samples,
    const MahalanobisConfig& cfg = {}) {
  if (samples.empty()) throw EmptySamples("fit_mahalanobis");
  const std::size_t d = samples.front().vector.size();
  std::map<int, std::vector<const featx::FeatureSample*>> by_class;
  for (const auto& s : samples) {
    if (s.vector.size() != d) throw DimensionMismatch("sample dim mismatch");
    by_class[s.class_label].push_back(&s);
  }

  MahalanobisModel model;
  model.dim = static_cast<int>(d);
  for (const auto& [label, rows] : by_class) {
    if (rows.size() < d + 1)
      throw InsufficientSamples("class " + std::to_string(label) + " has " +
                                std::to_string(rows.size()) +
                                " samples, needs >= " + std::to_string(d + 1));
    GaussianStats total;
    for (int epoch = 0; epoch < std::max(cfg.epochs, 1); ++epoch) {
      GaussianStats acc;
      for (std::size_t start = 0; start < rows.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(
            rows.size(), start + static_cast<std::size_t>(cfg.batch_size));
        GaussianStats batch;
        batch.n = end - start;
        batch.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
        for (std::size_t i = start; i < end; ++i)
          for (std::size_t j = 0; j < d; ++j)
            batch.mean[static_cast<Eigen::Index>(j)] += rows[i]->vector[j];
        batch.mean /= static_cast<double>(batch.n);
        batch.scatter = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d),
                                              static_cast<Eigen::Index>(d));
        for (std::size_t i = start; i < end; ++i) {
          Eigen::VectorXd x(static_cast<Eigen::Index>(d));
          for (std::size_t j = 0; j < d; ++j)
            x[static_cast<Eigen::Index>(j)] = rows[i]->vector[j];
          const Eigen::VectorXd dv = x - batch.mean;
          batch.scatter += dv * dv.transpose();
        }
        merge_stats(acc, batch);
      }
      total = acc;  // epochs are idempotent by construction
    }

    MahalanobisModel::ClassModel cm;
    cm.class_label = label;
    cm.n = total.n;
    cm.mean = total.mean;
    cm.covariance = total.scatter / static_cast<double>(total.n);
    const double eps = std::max(
        cfg.ridge_scale * cm.covariance.trace() / static_cast<double>(d),
        cfg.ridge_floor);
    cm.covariance +=
        eps * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d),
                                        static_cast<Eigen::Index>(d));
    cm.precision = cm.covariance.ldlt().solve(
        Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d),
                                  static_cast<Eigen::Index>(d)));
    model.classes.push_back(std::move(cm));
  }
  return model;
}

// min over classes of the squared Mahalanobis distance.
inline double score_mahalanobis(const MahalanobisModel& m,
                                const Eigen::VectorXd& x) {
  if (x.size() != m.dim) throw DimensionMismatch("mahalanobis query dim");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : m.classes) {
    const Eigen::VectorXd d = x - c.mean;
    best = std::min(best, d.dot(c.precision * d));
  }
  return std::max(best, 0.0);
}

inline double score_mahalanobis(const MahalanobisModel& m,
                                const std::vector<float>& v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    x[static_cast<Eigen::Index>(i)] = v[i];
  return score_mahalanobis(m, x);
}

// ---------------------------------------------------------------------------
// One-class SVM in the primal over random Fourier features
// ---------------------------------------------------------------------------

struct OcSvmConfig {
  double nu = 0.01;
  double gamma = 2.0;  // RBF kernel width exp(-gamma ||x - x'||^2)
  int batch_size = 64;
  int epochs = 5;
  int num_features = 256;  // D
  std::uint64_t seed = 0;
  double lr0 = 0.1;  // step size eta_t = lr0 / sqrt(t)
  // "use the highest score": negated best inlier margin by default; flip to
  // read it as the highest outlier score instead.
  bool highest_margin_reading = true;
};

struct OcSvmModel {
  struct ClassModel {
    int class_label = 0;
    Eigen::MatrixXd omega;  // D x d frequencies, N(0, 2*gamma*I)
    Eigen::VectorXd phase;  // D, U[0, 2pi)
    Eigen::VectorXd w;      // D primal weights
    double rho = 0;
  };
  std::vector<ClassModel> classes;
  int dim = 0;
  OcSvmConfig cfg;

  static Eigen::VectorXd feature_map(const ClassModel& c,
                                     const Eigen::VectorXd& x) {
    const double scale = std::sqrt(2.0 / static_cast<double>(c.omega.rows()));
    return scale * ((c.omega * x + c.phase).array().cos()).matrix();
  }

  double decision_value(const ClassModel& c, const Eigen::VectorXd& x) const {
    return c.w.dot(feature_map(c, x)) - c.rho;
  }
};

inline OcSvmModel fit_ocsvm(const std::vector<featx::FeatureSample>& samples,
                            const OcSvmConfig& cfg = {}) {
  if (samples.empty()) throw EmptySamples("fit_ocsvm");
  const std::size_t d = samples.front().vector.size();
  std::map<int, std::vector<const featx::FeatureSample*>> by_class;
  for (const auto& s : samples) {
    if (s.vector.size() != d) throw DimensionMismatch("sample dim mismatch");
    by_class[s.class_label].push_back(&s);
  }

  OcSvmModel model;
  model.dim = static_cast<int>(d);
  model.cfg = cfg;
  for (const auto& [label, rows] : by_class) {
    if (rows.size() < 10)
      throw InsufficientSamples("class " + std::to_string(label) +
                                " needs >= 10 samples");
    OcSvmModel::ClassModel cm;
    cm.class_label = label;
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(label) + 1));
    const Eigen::Index D = cfg.num_features;
    cm.omega.resize(D, static_cast<Eigen::Index>(d));
    const double freq_sd = std::sqrt(2.0 * cfg.gamma);
    for (Eigen::Index i = 0; i < D; ++i)
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j)
        cm.omega(i, j) = freq_sd * rng.normal();
    cm.phase.resize(D);
    for (Eigen::Index i = 0; i < D; ++i)
      cm.phase[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    cm.w = Eigen::VectorXd::Zero(D);
    cm.rho = 0;

    // Precompute feature vectors once; SGD over shuffled batches of the
    // primal objective 0.5||w||^2 - rho + 1/(nu n) sum hinge(rho - <w,phi>).
    std::vector<Eigen::VectorXd> phi;
    phi.reserve(rows.size());
    for (const auto* r : rows) {
      Eigen::VectorXd x(static_cast<Eigen::Index>(d));
      for (std::size_t j = 0; j < d; ++j)
        x[static_cast<Eigen::Index>(j)] = r->vector[j];
      phi.push_back(OcSvmModel::feature_map(cm, x));
    }
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      rng.shuffle(order);
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(
            order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        const double bsz = static_cast<double>(end - start);
        Eigen::VectorXd grad_w = cm.w;
        double grad_rho = -1.0;
        for (std::size_t i = start; i < end; ++i) {
          const Eigen::VectorXd& f = phi[order[i]];
          if (cm.rho - cm.w.dot(f) > 0) {
            grad_w -= f / (cfg.nu * bsz);
            grad_rho += 1.0 / (cfg.nu * bsz);
          }
        }
        ++step;
        const double eta = cfg.lr0 / std::sqrt(static_cast<double>(step));
        cm.w -= eta * grad_w;
        cm.rho -= eta * grad_rho;
      }
    }
    model.classes.push_back(std::move(cm));
  }
  return model;
}

// OOD score = -max_c (<w_c, phi_c(x)> - rho_c): the negated best-class
// inlier margin (or its flipped reading via config).
inline double score_ocsvm(const OcSvmModel& m, const Eigen::VectorXd& x) {
  if (x.size() != m.dim) throw DimensionMismatch("ocsvm query dim");
  if (m.classes.empty()) throw EmptySamples("unfitted ocsvm model");
  double best_margin = -std::numeric_limits<double>::infinity();
  double worst_margin = std::numeric_limits<double>::infinity();
  for (const auto& c : m.classes) {
    const double dv = m.decision_value(c, x);
    best_margin = std::max(best_margin, dv);
    worst_margin = std::min(worst_margin, dv);
  }
  return m.cfg.highest_margin_reading ? -best_margin : -worst_margin;
}

inline double score_ocsvm(const OcSvmModel& m, const std::vector<float>& v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    x[static_cast<Eigen::Index>(i)] = v[i];
  return score_ocsvm(m, x);
}

// ---------------------------------------------------------------------------
// Normalizing-flow score: negative log-likelihood
// ---------------------------------------------------------------------------

inline double score_flow(const flow::FlowModel& model,
                         const Eigen::VectorXd& x) {
  return -model.log_prob(x);
}

inline double score_flow(const flow::FlowModel& model,
                         const std::vector<float>& v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    x[static_cast<Eigen::Index>(i)] = v[i];
  return score_flow(model, x);
}

// ---------------------------------------------------------------------------
// Model persistence: versioned binary with method tag, layer tag, dim, and
// parameters (little-endian f64).
// ---------------------------------------------------------------------------

namespace detail {

inline void put_tag(std::string& out, const std::string& tag) {
  char buf[16] = {};
  std::memcpy(buf, tag.data(), std::min<std::size_t>(tag.size(), 16));
  out.append(buf, 16);
}

inline std::string get_tag(io::detail::Reader& r) {
  r.need(16);
  const char* p = r.data.data() + r.pos;
  std::size_t len = 0;
  while (len < 16 && p[len] != 0) ++len;
  r.pos += 16;
  return std::string(p, len);
}

inline void put_vec(std::string& out, const Eigen::VectorXd& v) {
  io::detail::put_u64(out, static_cast<std::uint64_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) io::detail::put_f64(out, v[i]);
}

inline Eigen::VectorXd get_vec(io::detail::Reader& r) {
  const std::uint64_t n = r.u64();
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i)
    v[static_cast<Eigen::Index>(i)] = r.f64();
  return v;
}

inline void put_mat(std::string& out, const Eigen::MatrixXd& m) {
  io::detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
  io::detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r2 = 0; r2 < m.rows(); ++r2)
      io::detail::put_f64(out, m(r2, c));
}

inline Eigen::MatrixXd get_mat(io::detail::Reader& r) {
  const auto rows = static_cast<Eigen::Index>(r.u64());
  const auto cols = static_cast<Eigen::Index>(r.u64());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r2 = 0; r2 < rows; ++r2) m(r2, c) = r.f64();
  return m;
}

}  // namespace detail

inline void save_mahalanobis(const MahalanobisModel& m,
                             const std::string& layer,
                             const std::filesystem::path& path) {
  std::string out("OODSCR1\0", 8);
  detail::put_tag(out, "mahalanobis");
  detail::put_tag(out, layer);
  io::detail::put_u32(out, static_cast<std::uint32_t>(m.dim));
  io::detail::put_u32(out, static_cast<std::uint32_t>(m.classes.size()));
  for (const auto& c : m.classes) {
    io::detail::put_u32(out, static_cast<std::uint32_t>(c.class_label));
    io::detail::put_u64(out, c.n);
    detail::put_vec(out, c.mean);
    detail::put_mat(out, c.covariance);
    detail::put_mat(out, c.precision);
  }
  io::detail::write_file(path, out);
}

inline MahalanobisModel load_mahalanobis(const std::filesystem::path& path,
                                         std::string* layer = nullptr) {
  const std::string data = io::detail::read_file(path);
  io::detail::Reader r{data, 8, path.string()};
  if (data.size() < 8 || data.compare(0, 7, "OODSCR1") != 0)
    throw ParseError(path.string() + ": bad scorer model magic");
  if (detail::get_tag(r) != "mahalanobis")
    throw ParseError(path.string() + ": wrong method tag");
  const std::string tag = detail::get_tag(r);
  if (layer) *layer = tag;
  MahalanobisModel m;
  m.dim = static_cast<int>(r.u32());
  const std::uint32_t k = r.u32();
  for (std::uint32_t i = 0; i < k; ++i) {
    MahalanobisModel::ClassModel c;
    c.class_label = static_cast<int>(r.u32());
    c.n = r.u64();
    c.mean = detail::get_vec(r);
    c.covariance = detail::get_mat(r);
    c.precision = detail::get_mat(r);
    m.classes.push_back(std::move(c));
  }
  return m;
}

inline void save_ocsvm(const OcSvmModel& m, const std::string& layer,
                       const std::filesystem::path& path) {
  std::string out("OODSCR1\0", 8);
  detail::put_tag(out, "ocsvm");
  detail::put_tag(out, layer);
  io::detail::put_u32(out, static_cast<std::uint32_t>(m.dim));
  io::detail::put_u32(out, static_cast<std::uint32_t>(m.classes.size()));
  io::detail::put_f64(out, m.cfg.nu);
  io::detail::put_f64(out, m.cfg.gamma);
  out.push_back(m.cfg.highest_margin_reading ? 1 : 0);
  for (const auto& c : m.classes) {
    io::detail::put_u32(out, static_cast<std::uint32_t>(c.class_label));
    detail::put_mat(out, c.omega);
    detail::put_vec(out, c.phase);
    detail::put_vec(out, c.w);
    io::detail::put_f64(out, c.rho);
  }
  io::detail::write_file(path, out);
}

inline OcSvmModel load_ocsvm(const std::filesystem::path& path,
                             std::string* layer = nullptr) {
  const std::string data = io::detail::read_file(path);
  io::detail::Reader r{data, 8, path.string()};
  if (data.size() < 8 || data.compare(0, 7, "OODSCR1") != 0)
    throw ParseError(path.string() + ": bad scorer model magic");
  if (detail::get_tag(r) != "ocsvm")
    throw ParseError(path.string() + ": wrong method tag");
  const std::string tag = detail::get_tag(r);
  if (layer) *layer = tag;
  OcSvmModel m;
  m.dim = static_cast<int>(r.u32());
  const std::uint32_t k = r.u32();
  m.cfg.nu = r.f64();
  m.cfg.gamma = r.f64();
  m.cfg.highest_margin_reading = r.u8() != 0;
  for (std::uint32_t i = 0; i < k; ++i) {
    OcSvmModel::ClassModel c;
    c.class_label = static_cast<int>(r.u32());
    c.omega = detail::get_mat(r);
    c.phase = detail::get_vec(r);
    c.w = detail::get_vec(r);
    c.rho = r.f64();
    m.classes.push_back(std::move(c));
  }
  return m;
}

}  // namespace ood::scorers
