#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "helpers.hpp"
#include "oodkit/flow.hpp"

using ood::flow::FlowConfig;
using ood::flow::FlowModel;

namespace {

FlowModel random_model(const FlowConfig& cfg, std::uint64_t seed) {
  FlowModel m(cfg);
  ood::Rng rng(seed);
  m.init_random(rng);
  return m;
}

Eigen::VectorXd random_vec(int d, ood::Rng& rng, double lim = 2.0) {
  Eigen::VectorXd x(d);
  for (int i = 0; i < d; ++i) x[i] = rng.uniform(-lim, lim);
  return x;
}

// Offset of the s-net's final bias (b3) within one coupling layer's block.
std::size_t snet_b3_offset(const FlowConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  return h * d + h + h * h + h + d * h;
}

std::size_t layer_block_size(const FlowConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t mlp = h * d + h + h * h + h + d * h + d;
  return 2 * mlp + 1;
}

}  // namespace

TEST_SUITE("flow") {

TEST_CASE("constant scale nets give log_det = c * dim") {
  FlowConfig cfg;
  cfg.dim = 4;
  cfg.hidden = 6;
  cfg.num_layers = 2;
  cfg.alpha_init = 1.0;
  FlowModel m(cfg);
  // All weights are zero at construction, so the s-net raw output equals its
  // final bias. Setting that bias to atanh(c) makes every coupling scale c.
  const double c = 0.35;
  const std::size_t b3 = snet_b3_offset(cfg);
  const std::size_t block = layer_block_size(cfg);
  for (int l = 0; l < cfg.num_layers; ++l)
    for (int j = 0; j < cfg.dim; ++j)
      m.params()[static_cast<Eigen::Index>(l * block + b3 + j)] =
          std::atanh(c);

  ood::Rng rng(101);
  const auto r = m.forward(random_vec(cfg.dim, rng));
  // Both half-masks together touch each coordinate exactly once over K=2.
  CHECK(r.log_det == doctest::Approx(c * cfg.dim).epsilon(1e-12));
}

TEST_CASE("zero-initialized flow is the identity") {
  FlowConfig cfg;
  cfg.dim = 3;
  cfg.hidden = 5;
  cfg.num_layers = 4;
  const FlowModel m(cfg);
  ood::Rng rng(102);
  const Eigen::VectorXd x = random_vec(3, rng);
  const auto r = m.forward(x);
  CHECK((r.z - x).norm() < 1e-12);
  CHECK(r.log_det == doctest::Approx(0.0));
  CHECK(m.log_prob(x) ==
        doctest::Approx(-0.5 * x.squaredNorm() -
                        1.5 * std::log(2.0 * std::numbers::pi)));
}

TEST_CASE("inverse undoes forward") {
  FlowConfig cfg;
  cfg.dim = 5;
  cfg.hidden = 12;
  cfg.num_layers = 6;
  FlowModel m = random_model(cfg, 103);
  // Nonzero final layers so the couplings actually do something.
  ood::Rng prng(104);
  for (Eigen::Index i = 0; i < m.params().size(); ++i)
    m.params()[i] += prng.uniform(-0.3, 0.3);
  Eigen::VectorXd mu(5), sigma(5);
  for (int i = 0; i < 5; ++i) {
    mu[i] = prng.uniform(-1, 1);
    sigma[i] = prng.uniform(0.5, 2.0);
  }
  m.set_standardization(mu, sigma);

  ood::Rng rng(105);
  for (int t = 0; t < 50; ++t) {
    const Eigen::VectorXd x = random_vec(5, rng);
    const auto r = m.forward(x);
    CHECK((m.inverse(r.z) - x).norm() < 1e-9);
  }
}

TEST_CASE("mask pattern alternates complementary halves") {
  FlowConfig cfg;
  cfg.dim = 5;
  const FlowModel m(cfg);
  for (int j = 0; j < 5; ++j) {
    CHECK(m.is_masked(0, j) == (j < 3));
    CHECK(m.is_masked(1, j) == (j >= 3));
    CHECK(m.is_masked(0, j) != m.is_masked(1, j));
  }
}

TEST_CASE("analytic gradient matches central differences") {
  FlowConfig cfg;
  cfg.dim = 2;
  cfg.hidden = 4;
  cfg.num_layers = 2;
  FlowModel m = random_model(cfg, 106);
  ood::Rng prng(107);
  for (Eigen::Index i = 0; i < m.params().size(); ++i)
    m.params()[i] += prng.uniform(-0.2, 0.2);

  ood::Rng rng(108);
  std::vector<Eigen::VectorXd> batch;
  for (int b = 0; b < 3; ++b) batch.push_back(random_vec(2, rng, 1.0));

  Eigen::VectorXd grad;
  m.grad_nll(batch, grad);

  const auto nll_of = [&](FlowModel& model) {
    double total = 0;
    for (const auto& x : batch) total -= model.log_prob(x);
    return total / static_cast<double>(batch.size());
  };
  const double h = 1e-6;
  ood::Rng pick(109);
  for (int t = 0; t < 40; ++t) {
    const auto i = static_cast<Eigen::Index>(
        pick.uniform_index(static_cast<std::size_t>(m.params().size())));
    FlowModel plus = m, minus = m;
    plus.params()[i] += h;
    minus.params()[i] -= h;
    const double fd = (nll_of(plus) - nll_of(minus)) / (2 * h);
    CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
  }
}

TEST_CASE("save/load round-trips parameters exactly") {
  testfx::TempDir tmp("flow-io");
  FlowConfig cfg;
  cfg.dim = 6;
  cfg.hidden = 10;
  cfg.num_layers = 4;
  FlowModel m = random_model(cfg, 110);
  Eigen::VectorXd mu(6), sigma(6);
  ood::Rng rng(111);
  for (int i = 0; i < 6; ++i) {
    mu[i] = rng.uniform(-2, 2);
    sigma[i] = rng.uniform(0.1, 3.0);
  }
  m.set_standardization(mu, sigma);
  m.save(tmp.path / "m.bin");
  const FlowModel back = FlowModel::load(tmp.path / "m.bin");
  CHECK(back.config().dim == 6);
  CHECK(back.config().num_layers == 4);
  CHECK(back.config().hidden == 10);
  CHECK(back.params() == m.params());
  CHECK(back.input_mean() == mu);
  CHECK(back.input_sigma() == sigma);
  const Eigen::VectorXd x = random_vec(6, rng);
  CHECK(back.log_prob(x) == m.log_prob(x));
}

TEST_CASE("invalid configurations and inputs are rejected") {
  FlowConfig bad_dim;
  bad_dim.dim = 1;
  CHECK_THROWS_AS(FlowModel{bad_dim}, ood::DimensionMismatch);
  FlowConfig odd;
  odd.num_layers = 3;
  CHECK_THROWS_AS(FlowModel{odd}, ood::DimensionMismatch);

  FlowConfig cfg;
  cfg.dim = 2;
  const FlowModel m(cfg);
  Eigen::VectorXd wrong(3);
  wrong.setZero();
  CHECK_THROWS_AS(m.forward(wrong), ood::DimensionMismatch);
  Eigen::VectorXd nan(2);
  nan << std::numeric_limits<double>::quiet_NaN(), 0.0;
  CHECK_THROWS_AS(m.forward(nan), ood::NonFiniteActivation);
}

TEST_CASE("fit lowers the NLL on bimodal data") {
  ood::Rng rng(112);
  std::vector<Eigen::VectorXd> data;
  for (int i = 0; i < 500; ++i) {
    Eigen::VectorXd x(2);
    const double cx = i % 2 ? 2.0 : -2.0;
    x << cx + 0.4 * rng.normal(), 0.4 * rng.normal();
    data.push_back(x);
  }
  FlowConfig cfg;
  cfg.dim = 2;
  cfg.hidden = 16;
  cfg.num_layers = 4;
  FlowModel m = random_model(cfg, 113);
  ood::flow::TrainConfig tc;
  tc.steps = 300;
  tc.lr = 5e-3;
  tc.seed = 114;
  const auto trace = ood::flow::fit(m, data, tc);
  REQUIRE(trace.size() == 300);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += trace[static_cast<std::size_t>(i)].nll;
    tail += trace[trace.size() - 1 - static_cast<std::size_t>(i)].nll;
  }
  CHECK(tail < head);
  // Standardization captured the data moments.
  CHECK(m.input_mean()[0] == doctest::Approx(0.0).scale(1.0).epsilon(0.2));
  CHECK(m.input_sigma()[0] > 1.5);  // bimodal spread along x
}

TEST_CASE("fit rejects empty and mismatched samples") {
  FlowConfig cfg;
  cfg.dim = 2;
  FlowModel m(cfg);
  ood::flow::TrainConfig tc;
  CHECK_THROWS_AS(ood::flow::fit(m, {}, tc), ood::EmptySamples);
  std::vector<Eigen::VectorXd> bad{Eigen::VectorXd::Zero(3)};
  CHECK_THROWS_AS(ood::flow::fit(m, bad, tc), ood::DimensionMismatch);
}

}  // TEST_SUITE
