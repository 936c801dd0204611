#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "oodkit/errors.hpp"
#include "oodkit/io.hpp"
#include "oodkit/rng.hpp"

namespace ood::flow {

// RealNVP with affine coupling layers. Each layer updates the unmasked half
// of the coordinates from scale/translate MLPs of the masked half:
//   y = b .* x + (1-b) .* (x .* exp(s(b.*x)) + t(b.*x))
// The scale output is alpha * tanh(raw) with a learnable clamp alpha, so the
// log-determinant stays bounded.

struct FlowConfig {
  int dim = 2;
  int num_layers = 6;  // K, alternating complementary half-masks
  int hidden = 128;    // width of the two hidden layers (tanh)
  double alpha_init = 2.0;
};

namespace detail {

// Parameter layout of one two-hidden-layer MLP: W1(h x d), b1(h), W2(h x h),
// b2(h), W3(d x h), b3(d).
struct MlpDims {
  int d = 0, h = 0;
  std::size_t size() const {
    const auto dd = static_cast<std::size_t>(d);
    const auto hh = static_cast<std::size_t>(h);
    return hh * dd + hh + hh * hh + hh + dd * hh + dd;
  }
};

struct MlpView {
  Eigen::Map<const Eigen::MatrixXd> W1, W2, W3;
  Eigen::Map<const Eigen::VectorXd> b1, b2, b3;
};
struct MlpViewMut {
  Eigen::Map<Eigen::MatrixXd> W1, W2, W3;
  Eigen::Map<Eigen::VectorXd> b1, b2, b3;
};

template <typename Scalar>
struct Views;
template <>
struct Views<const double> {
  using type = MlpView;
};
template <>
struct Views<double> {
  using type = MlpViewMut;
};

template <typename Scalar>
typename Views<Scalar>::type map_mlp(Scalar* p, const MlpDims& md) {
  const auto d = md.d, h = md.h;
  Scalar* q = p;
  auto W1 = q; q += h * d;
  auto b1 = q; q += h;
  auto W2 = q; q += h * h;
  auto b2 = q; q += h;
  auto W3 = q; q += d * h;
  auto b3 = q;
  return {{W1, h, d}, {W2, h, h}, {W3, d, h}, {b1, h}, {b2, h}, {b3, d}};
}

struct MlpCache {
  Eigen::VectorXd input;  // masked input
  Eigen::VectorXd h1, h2; // post-tanh activations
  Eigen::VectorXd out;    // raw output
};

inline Eigen::VectorXd mlp_forward(const MlpView& m, const Eigen::VectorXd& x,
                                   MlpCache* cache = nullptr) {
  Eigen::VectorXd h1 = (m.W1 * x + m.b1).array().tanh();
  Eigen::VectorXd h2 = (m.W2 * h1 + m.b2).array().tanh();
  Eigen::VectorXd out = m.W3 * h2 + m.b3;
  if (cache) {
    cache->input = x;
    cache->h1 = h1;
    cache->h2 = h2;
    cache->out = out;
  }
  return out;
}

// Accumulates parameter gradients into `grad` (same layout as the MLP) and
// returns the gradient w.r.t. the input.
inline Eigen::VectorXd mlp_backward(const MlpView& m, const MlpCache& cache,
                                    const Eigen::VectorXd& dout,
                                    MlpViewMut grad) {
  grad.W3 += dout * cache.h2.transpose();
  grad.b3 += dout;
  Eigen::VectorXd dh2 =
      (m.W3.transpose() * dout).array() * (1.0 - cache.h2.array().square());
  grad.W2 += dh2 * cache.h1.transpose();
  grad.b2 += dh2;
  Eigen::VectorXd dh1 =
      (m.W2.transpose() * dh2).array() * (1.0 - cache.h1.array().square());
  grad.W1 += dh1 * cache.input.transpose();
  grad.b1 += dh1;
  return m.W1.transpose() * dh1;
}

}  // namespace detail

class FlowModel {
 public:
  FlowModel() = default;

  explicit FlowModel(const FlowConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 2) throw DimensionMismatch("flow requires dim >= 2");
    if (cfg.num_layers < 2 || cfg.num_layers % 2 != 0)
      throw DimensionMismatch("num_layers must be even and >= 2");
    mlp_dims_ = {cfg.dim, cfg.hidden};
    layer_size_ = 2 * mlp_dims_.size() + 1;  // s-net, t-net, alpha
    params_ = Eigen::VectorXd::Zero(
        static_cast<Eigen::Index>(layer_size_ * cfg.num_layers));
    mu_ = Eigen::VectorXd::Zero(cfg.dim);
    sigma_ = Eigen::VectorXd::Ones(cfg.dim);
    for (int l = 0; l < cfg.num_layers; ++l)
      params_[alpha_offset(l)] = cfg.alpha_init;
  }

  // Hidden layers Glorot-uniform, final linear layers zero (identity flow).
  void init_random(Rng& rng) {
    for (int l = 0; l < cfg_.num_layers; ++l)
      for (std::size_t net = 0; net < 2; ++net) {
        auto m = detail::map_mlp<double>(
            params_.data() + layer_offset(l) + net * mlp_dims_.size(),
            mlp_dims_);
        const double lim1 =
            std::sqrt(6.0 / static_cast<double>(cfg_.dim + cfg_.hidden));
        const double lim2 =
            std::sqrt(6.0 / static_cast<double>(2 * cfg_.hidden));
        for (Eigen::Index i = 0; i < m.W1.size(); ++i)
          m.W1.data()[i] = rng.uniform(-lim1, lim1);
        for (Eigen::Index i = 0; i < m.W2.size(); ++i)
          m.W2.data()[i] = rng.uniform(-lim2, lim2);
        m.W3.setZero();
        m.b1.setZero();
        m.b2.setZero();
        m.b3.setZero();
      }
  }

  const FlowConfig& config() const { return cfg_; }
  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  const Eigen::VectorXd& input_mean() const { return mu_; }
  const Eigen::VectorXd& input_sigma() const { return sigma_; }

  void set_standardization(const Eigen::VectorXd& mu,
                           const Eigen::VectorXd& sigma) {
    if (mu.size() != cfg_.dim || sigma.size() != cfg_.dim)
      throw DimensionMismatch("standardization dim mismatch");
    mu_ = mu;
    sigma_ = sigma;
  }

  // Masked (pass-through) coordinates of layer l: the first ceil(d/2) dims
  // for even l, the rest for odd l.
  bool is_masked(int layer, int dim_index) const {
    const int half = (cfg_.dim + 1) / 2;
    const bool first_half = dim_index < half;
    return layer % 2 == 0 ? first_half : !first_half;
  }

  struct ForwardResult {
    Eigen::VectorXd z;
    double log_det = 0;  // includes the standardization diagonal
  };

  ForwardResult forward(const Eigen::VectorXd& x) const {
    check_dim(x);
    ForwardResult r;
    r.z = (x - mu_).cwiseQuotient(sigma_);
    r.log_det = -sigma_.array().log().sum();
    for (int l = 0; l < cfg_.num_layers; ++l) {
      Eigen::VectorXd masked = mask_vec(l).cwiseProduct(r.z);
      const Eigen::VectorXd s = scale(l, masked);
      const Eigen::VectorXd t = translate(l, masked);
      for (int j = 0; j < cfg_.dim; ++j) {
        if (is_masked(l, j)) continue;
        r.z[j] = r.z[j] * std::exp(s[j]) + t[j];
        r.log_det += s[j];
      }
      if (!r.z.allFinite())
        throw NonFiniteActivation("flow forward, layer " + std::to_string(l));
    }
    return r;
  }

  Eigen::VectorXd inverse(const Eigen::VectorXd& z) const {
    check_dim(z);
    Eigen::VectorXd x = z;
    for (int l = cfg_.num_layers - 1; l >= 0; --l) {
      Eigen::VectorXd masked = mask_vec(l).cwiseProduct(x);
      const Eigen::VectorXd s = scale(l, masked);
      const Eigen::VectorXd t = translate(l, masked);
      for (int j = 0; j < cfg_.dim; ++j) {
        if (is_masked(l, j)) continue;
        x[j] = (x[j] - t[j]) * std::exp(-s[j]);
      }
      if (!x.allFinite())
        throw NonFiniteActivation("flow inverse, layer " + std::to_string(l));
    }
    return x.cwiseProduct(sigma_) + mu_;
  }

  double log_prob(const Eigen::VectorXd& x) const {
    const ForwardResult r = forward(x);
    const double log_base = -0.5 * r.z.squaredNorm() -
                            0.5 * cfg_.dim * std::log(2.0 * std::numbers::pi);
    return log_base + r.log_det;
  }

  // Gradient of the mean negative log-likelihood over the batch, in the
  // parameter-vector layout. Returns the mean NLL.
  double grad_nll(const std::vector<Eigen::VectorXd>& batch,
                  Eigen::VectorXd& grad) const {
    if (batch.empty()) throw EmptySamples("grad_nll on empty batch");
    grad = Eigen::VectorXd::Zero(params_.size());
    double total_nll = 0;
    for (const auto& x : batch) total_nll += backward_one(x, grad);
    grad /= static_cast<double>(batch.size());
    if (!grad.allFinite()) throw NonFiniteGradient("flow grad_nll");
    return total_nll / static_cast<double>(batch.size());
  }

  // --- serialization: versioned binary, little-endian f64 parameters ---

  void save(const std::filesystem::path& path) const {
    std::string out("OODFLOW1", 8);
    io::detail::put_u32(out, static_cast<std::uint32_t>(cfg_.dim));
    io::detail::put_u32(out, static_cast<std::uint32_t>(cfg_.num_layers));
    io::detail::put_u32(out, static_cast<std::uint32_t>(cfg_.hidden));
    io::detail::put_u32(out, 0);
    for (int i = 0; i < cfg_.dim; ++i) io::detail::put_f64(out, mu_[i]);
    for (int i = 0; i < cfg_.dim; ++i) io::detail::put_f64(out, sigma_[i]);
    io::detail::put_u64(out, static_cast<std::uint64_t>(params_.size()));
    for (Eigen::Index i = 0; i < params_.size(); ++i)
      io::detail::put_f64(out, params_[i]);
    io::detail::write_file(path, out);
  }

  static FlowModel load(const std::filesystem::path& path) {
    const std::string data = io::detail::read_file(path);
    io::detail::Reader r{data, 0, path.string()};
    r.need(8);
    if (data.compare(0, 8, "OODFLOW1") != 0)
      throw ParseError(path.string() + ": bad flow model magic");
    r.pos = 8;
    FlowConfig cfg;
    cfg.dim = static_cast<int>(r.u32());
    cfg.num_layers = static_cast<int>(r.u32());
    cfg.hidden = static_cast<int>(r.u32());
    r.u32();
    FlowModel m(cfg);
    for (int i = 0; i < cfg.dim; ++i) m.mu_[i] = r.f64();
    for (int i = 0; i < cfg.dim; ++i) m.sigma_[i] = r.f64();
    const std::uint64_t n = r.u64();
    if (n != static_cast<std::uint64_t>(m.params_.size()))
      throw ParseError(path.string() + ": parameter count mismatch");
    for (std::uint64_t i = 0; i < n; ++i)
      m.params_[static_cast<Eigen::Index>(i)] = r.f64();
    return m;
  }

 private:
  void check_dim(const Eigen::VectorXd& x) const {
    if (x.size() != cfg_.dim)
      throw DimensionMismatch("flow input dim " + std::to_string(x.size()) +
                              " != " + std::to_string(cfg_.dim));
    if (!x.allFinite()) throw NonFiniteActivation("non-finite flow input");
  }

  Eigen::VectorXd mask_vec(int layer) const {
    Eigen::VectorXd m(cfg_.dim);
    for (int j = 0; j < cfg_.dim; ++j) m[j] = is_masked(layer, j) ? 1.0 : 0.0;
    return m;
  }

  std::size_t layer_offset(int layer) const {
    return static_cast<std::size_t>(layer) * layer_size_;
  }
  Eigen::Index alpha_offset(int layer) const {
    return static_cast<Eigen::Index>(layer_offset(layer) +
                                     2 * mlp_dims_.size());
  }

  detail::MlpView s_net(int layer) const {
    return detail::map_mlp<const double>(params_.data() + layer_offset(layer),
                                         mlp_dims_);
  }
  detail::MlpView t_net(int layer) const {
    return detail::map_mlp<const double>(
        params_.data() + layer_offset(layer) + mlp_dims_.size(), mlp_dims_);
  }

  Eigen::VectorXd scale(int layer, const Eigen::VectorXd& masked,
                        detail::MlpCache* cache = nullptr) const {
    const double alpha = params_[alpha_offset(layer)];
    return alpha *
           detail::mlp_forward(s_net(layer), masked, cache).array().tanh();
  }
  Eigen::VectorXd translate(int layer, const Eigen::VectorXd& masked,
                            detail::MlpCache* cache = nullptr) const {
    return detail::mlp_forward(t_net(layer), masked, cache);
  }

  // Accumulates dNLL/dparams for one sample into grad; returns its NLL.
  double backward_one(const Eigen::VectorXd& x, Eigen::VectorXd& grad) const {
    check_dim(x);
    const int K = cfg_.num_layers;
    std::vector<Eigen::VectorXd> inputs(K);  // layer input
    std::vector<detail::MlpCache> s_cache(K), t_cache(K);
    std::vector<Eigen::VectorXd> s_vals(K);

    Eigen::VectorXd z = (x - mu_).cwiseQuotient(sigma_);
    double log_det = -sigma_.array().log().sum();
    for (int l = 0; l < K; ++l) {
      inputs[l] = z;
      const Eigen::VectorXd masked = mask_vec(l).cwiseProduct(z);
      s_vals[l] = scale(l, masked, &s_cache[l]);
      translate(l, masked, &t_cache[l]);
      for (int j = 0; j < cfg_.dim; ++j) {
        if (is_masked(l, j)) continue;
        z[j] = z[j] * std::exp(s_vals[l][j]) + t_cache[l].out[j];
        log_det += s_vals[l][j];
      }
    }
    const double nll = 0.5 * z.squaredNorm() +
                       0.5 * cfg_.dim * std::log(2.0 * std::numbers::pi) -
                       log_det;

    Eigen::VectorXd g = z;  // d(0.5 ||z||^2)/dz
    for (int l = K - 1; l >= 0; --l) {
      const double alpha = params_[alpha_offset(l)];
      const Eigen::VectorXd& xin = inputs[l];
      Eigen::VectorXd ds = Eigen::VectorXd::Zero(cfg_.dim);
      Eigen::VectorXd dt = Eigen::VectorXd::Zero(cfg_.dim);
      Eigen::VectorXd gx = Eigen::VectorXd::Zero(cfg_.dim);
      for (int j = 0; j < cfg_.dim; ++j) {
        if (is_masked(l, j)) {
          gx[j] = g[j];
          continue;
        }
        const double es = std::exp(s_vals[l][j]);
        // -1: the NLL carries -log_det, and s_j adds to log_det.
        ds[j] = g[j] * xin[j] * es - 1.0;
        dt[j] = g[j];
        gx[j] = g[j] * es;
      }
      // s = alpha * tanh(raw)
      const Eigen::ArrayXd th = s_cache[l].out.array().tanh();
      double dalpha = 0;
      Eigen::VectorXd draw = Eigen::VectorXd::Zero(cfg_.dim);
      for (int j = 0; j < cfg_.dim; ++j) {
        if (is_masked(l, j)) continue;
        dalpha += ds[j] * th[j];
        draw[j] = ds[j] * alpha * (1.0 - th[j] * th[j]);
      }
      grad[alpha_offset(l)] += dalpha;

      auto s_grad = detail::map_mlp<double>(
          grad.data() + layer_offset(l), mlp_dims_);
      auto t_grad = detail::map_mlp<double>(
          grad.data() + layer_offset(l) + mlp_dims_.size(), mlp_dims_);
      const Eigen::VectorXd din_s =
          detail::mlp_backward(s_net(l), s_cache[l], draw, s_grad);
      const Eigen::VectorXd din_t =
          detail::mlp_backward(t_net(l), t_cache[l], dt, t_grad);
      for (int j = 0; j < cfg_.dim; ++j)
        if (is_masked(l, j)) gx[j] += din_s[j] + din_t[j];
      g = gx;
    }
    return nll;
  }

  FlowConfig cfg_;
  detail::MlpDims mlp_dims_;
  std::size_t layer_size_ = 0;
  Eigen::VectorXd params_;
  Eigen::VectorXd mu_, sigma_;
};

// ---------------------------------------------------------------------------
// Adam training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 8;
  int steps = 2320;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;
  bool standardize_inputs = true;
};

struct TraceEntry {
  int step = 0;
  double nll = 0;
};

// Fits the model in place; returns the per-step loss trace (batch mean NLL
// before each update).
inline std::vector<TraceEntry> fit(FlowModel& model,
                                   const std::vector<Eigen::VectorXd>& samples,
                                   const TrainConfig& cfg) {
  if (samples.empty()) throw EmptySamples("flow fit on empty sample set");
  const int d = model.config().dim;
  for (const auto& s : samples)
    if (s.size() != d) throw DimensionMismatch("flow fit sample dim");

  if (cfg.standardize_inputs) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& s : samples) mu += s;
    mu /= static_cast<double>(samples.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (const auto& s : samples) var += (s - mu).cwiseAbs2();
    var /= static_cast<double>(samples.size());
    Eigen::VectorXd sigma = var.cwiseSqrt().cwiseMax(1e-6);
    model.set_standardization(mu, sigma);
  }

  std::vector<TraceEntry> trace;
  if (cfg.steps <= 0) return trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t cursor = 0;

  Eigen::VectorXd m = Eigen::VectorXd::Zero(model.params().size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(model.params().size());
  Eigen::VectorXd grad;
  std::vector<Eigen::VectorXd> batch;
  for (int step = 1; step <= cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(samples[order[cursor++]]);
    }
    const double nll = model.grad_nll(batch, grad);
    trace.push_back({step, nll});

    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(cfg.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step);
    model.params() -=
        (cfg.lr * (m / bc1).array() /
         ((v / bc2).array().sqrt() + cfg.eps))
            .matrix();
  }
  return trace;
}

inline void write_loss_trace(const std::vector<TraceEntry>& trace,
                             const std::filesystem::path& path) {
  std::ostringstream ss;
  ss << "step,nll\n";
  for (const auto& e : trace)
    ss << e.step << ',' << io::detail::fmt_float(e.nll) << '\n';
  io::detail::write_file(path, ss.str());
}

}  // namespace ood::flow
