#include <doctest.h>

#include <cmath>

#include "pdquant/dist_correction.hpp"
#include "pdquant/log.hpp"
#include "test_util.hpp"

using namespace pdq;
using pdqtest::randn_tensor;

namespace {

// Model whose only block is a single batchnorm: the BN input IS the block
// input, so the Eq-style objective has a closed-form optimum.
ModelGraph identity_bn_model(int features, int classes, Rng& rng, float target_mean = 0.0f,
                             float target_var = 1.0f) {
  ModelGraph m;
  m.input_shape = {features};
  m.num_classes = classes;
  Tensor eye({features, features});
  for (int i = 0; i < features; ++i) eye.data()[i * features + i] = 1.0f;
  m.stem.push_back(make_linear(eye.clone(), Tensor::zeros({features})));
  Block b;
  b.index = 0;
  Layer bn = make_batchnorm(features);
  for (auto& v : bn.bn_mean.values_mut()) v = target_mean;
  for (auto& v : bn.bn_var.values_mut()) v = target_var;
  b.layers.push_back(std::move(bn));
  m.blocks.push_back(std::move(b));
  m.head.push_back(make_softmax_head(randn_tensor({classes, features}, rng, 0.4f),
                                     Tensor::zeros({classes})));
  m.validate();
  return m;
}

struct ChannelStats {
  double mean, stddev;
};

ChannelStats two_pass_stats(const Tensor& x, int64_t channel) {
  int64_t b = x.dim(0), c = x.dim(1);
  double mean = 0.0;
  for (int64_t i = 0; i < b; ++i) mean += x.at(i * c + channel);
  mean /= static_cast<double>(b);
  double var = 0.0;
  for (int64_t i = 0; i < b; ++i) {
    double d = x.at(i * c + channel) - mean;
    var += d * d;
  }
  return {mean, std::sqrt(var / static_cast<double>(b))};
}

}  // namespace

TEST_CASE("collect_bn_inputs: constants, fixed points and the two-pass oracle") {
  Rng rng(1);
  ModelGraph m = identity_bn_model(4, 3, rng);

  Tensor constant({8, 4});
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t c = 0; c < 4; ++c) constant.data()[i * 4 + c] = static_cast<float>(c);
  auto stats = collect_bn_inputs(m, 1, constant);
  REQUIRE(stats.size() == 1);
  for (int64_t c = 0; c < 4; ++c) {
    CHECK(stats[0].first.at(c) == doctest::Approx(static_cast<double>(c)));
    CHECK(stats[0].second.at(c) == 0.0f);
  }

  Tensor random = randn_tensor({32, 4}, rng);
  auto rs = collect_bn_inputs(m, 1, random);
  for (int64_t c = 0; c < 4; ++c) {
    ChannelStats want = two_pass_stats(random, c);
    CHECK(rs[0].first.at(c) == doctest::Approx(want.mean).epsilon(1e-5));
    CHECK(rs[0].second.at(c) == doctest::Approx(want.stddev).epsilon(1e-5));
  }

  // Batch of one cannot produce a variance.
  Tensor tiny({1, 4}, 0.5f);
  CHECK_THROWS_AS(collect_bn_inputs(m, 1, tiny), std::invalid_argument);

  // A unit without batchnorm reports no stats.
  CHECK(collect_bn_inputs(m, 0, random).empty());
}

TEST_CASE("identity block: optimizer lands on the closed-form optimum") {
  // Objective per channel, N elements, k = lambda_c / N:
  //   mean* = (mean_fp + k*mu) / (1+k),  std* = (std_fp + k*sigma) / (1+k),
  //   a*_i  = mean* + (a_i - mean_fp) * std* / std_fp.
  Rng rng(2);
  int features = 3;
  int64_t n = 64;
  ModelGraph m = identity_bn_model(features, 3, rng, /*mean=*/0.0f, /*var=*/1.0f);

  Tensor a_fp({n, features});
  for (int64_t i = 0; i < n; ++i)
    for (int f = 0; f < features; ++f) a_fp.data()[i * features + f] = 1.0f + 0.8f * rng.normal();

  float k = 19.0f;  // strong statistic pull so the optimum moves visibly
  float lambda_c = k * static_cast<float>(n);
  CorrectionState st = make_correction_state(a_fp, lambda_c, /*lr=*/0.02f, /*steps=*/800);
  DcResult res = correct_distribution(m, 1, st);
  REQUIRE(!res.reverted);

  // Objective is non-increasing along the trajectory.
  for (size_t s = 1; s < res.objective.size(); ++s) {
    CHECK(res.objective[s] <= res.objective[s - 1] * (1.0 + 1e-6));
  }
  // Statistic residual strictly pulled toward the running stats.
  CHECK(res.stat_final < 0.10 * res.stat_initial);

  double worst = 0.0;
  for (int f = 0; f < features; ++f) {
    ChannelStats fp = two_pass_stats(a_fp, f);
    double mean_star = (fp.mean + k * 0.0) / (1.0 + k);
    double std_star = (fp.stddev + k * 1.0) / (1.0 + k);
    for (int64_t i = 0; i < n; ++i) {
      double want = mean_star + (a_fp.at(i * features + f) - fp.mean) * std_star / fp.stddev;
      worst = std::max(worst,
                       std::abs(res.corrected.at(i * features + f) - want) / std::abs(want));
    }
    // And the realized statistics land on the trade-off point.
    ChannelStats got = two_pass_stats(res.corrected, f);
    CHECK(got.mean == doctest::Approx(mean_star).epsilon(0.05));
    CHECK(got.stddev == doctest::Approx(std_star).epsilon(0.05));
  }
  CHECK(worst < 0.05);  // within 5% of the analytic optimum
}

TEST_CASE("lambda_c = 0 leaves the activation unchanged exactly") {
  Rng rng(3);
  ModelGraph m = identity_bn_model(4, 3, rng);
  Tensor a_fp = randn_tensor({16, 4}, rng);
  CorrectionState st = make_correction_state(a_fp, 0.0f, 1e-3f, 200);
  DcResult res = correct_distribution(m, 1, st);
  for (int64_t i = 0; i < a_fp.size(); ++i) CHECK(res.corrected.at(i) == a_fp.at(i));
}

TEST_CASE("stationary point: matching stats keep the anchor at zero change") {
  Rng rng(4);
  int features = 2;
  int64_t n = 256;
  ModelGraph m = identity_bn_model(features, 3, rng, 0.0f, 1.0f);
  // Construct a batch with exactly zero mean and unit population std per
  // channel by symmetrizing and rescaling.
  Tensor a({n, features});
  for (int64_t i = 0; i < n / 2; ++i) {
    for (int f = 0; f < features; ++f) {
      float v = rng.normal();
      a.data()[(2 * i) * features + f] = v;
      a.data()[(2 * i + 1) * features + f] = -v;
    }
  }
  for (int f = 0; f < features; ++f) {
    ChannelStats s = two_pass_stats(a, f);
    for (int64_t i = 0; i < n; ++i) {
      a.data()[i * features + f] = static_cast<float>(a.at(i * features + f) / s.stddev);
    }
  }
  CorrectionState st = make_correction_state(a, 8.0f * n, 0.02f, 100);
  DcResult res = correct_distribution(m, 1, st);
  double drift = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) drift = std::max(drift, (double)std::abs(res.corrected.at(i) - a.at(i)));
  CHECK(drift < 1e-3);
}

TEST_CASE("anchoring: deviation from the original grows with lambda_c") {
  Rng rng(5);
  int features = 2;
  int64_t n = 64;
  ModelGraph m = identity_bn_model(features, 3, rng, 0.0f, 1.0f);
  Tensor a_fp({n, features});
  for (auto& v : a_fp.values_mut()) v = 1.0f + 0.5f * rng.normal();

  double prev = 0.0;
  for (float k : {0.0f, 1.0f, 4.0f, 16.0f}) {
    CorrectionState st = make_correction_state(a_fp, k * n, 0.02f, 600);
    DcResult res = correct_distribution(m, 1, st);
    double dev = 0.0;
    for (int64_t i = 0; i < a_fp.size(); ++i) {
      double d = res.corrected.at(i) - a_fp.at(i);
      dev += d * d;
    }
    if (k == 0.0f) {
      CHECK(dev == 0.0);
    } else {
      CHECK(dev > prev);
    }
    prev = dev;
  }
}

TEST_CASE("statistic pull: the mean residual shrinks whenever it starts nonzero") {
  Rng rng(6);
  ModelGraph m = identity_bn_model(3, 3, rng, 0.0f, 1.0f);
  Tensor a_fp({32, 3});
  for (auto& v : a_fp.values_mut()) v = 0.7f + 0.4f * rng.normal();
  CorrectionState st = make_correction_state(a_fp, 2.0f * 32, 0.02f, 400);
  DcResult res = correct_distribution(m, 1, st);
  for (int f = 0; f < 3; ++f) {
    double before = std::abs(two_pass_stats(a_fp, f).mean);
    double after = std::abs(two_pass_stats(res.corrected, f).mean);
    CHECK(after < before);
  }
}

TEST_CASE("divergent step size reverts to the original with a warning") {
  Rng rng(7);
  ModelGraph m = identity_bn_model(3, 3, rng, 0.0f, 1.0f);
  Tensor a_fp = randn_tensor({16, 3}, rng);
  int warnings = 0;
  set_warn_sink([&](const std::string&) { ++warnings; });
  CorrectionState st = make_correction_state(a_fp, 64.0f, /*lr=*/1e6f, 40);
  DcResult res = correct_distribution(m, 1, st);
  set_warn_sink(nullptr);
  CHECK(res.reverted);
  CHECK(warnings >= 1);
  for (int64_t i = 0; i < a_fp.size(); ++i) CHECK(res.corrected.at(i) == a_fp.at(i));
}

TEST_CASE("correction never touches model weights") {
  Rng rng(8);
  ModelGraph m = identity_bn_model(4, 3, rng);
  ModelGraph snapshot = m;
  Tensor a_fp = randn_tensor({32, 4}, rng);
  CorrectionState st = make_correction_state(a_fp, 32.0f, 0.02f, 50);
  correct_distribution(m, 1, st);
  for (int id = 0; id < m.num_layers(); ++id) {
    const Layer& a = m.layer_at(id);
    const Layer& b = snapshot.layer_at(id);
    if (a.weighted()) {
      for (int64_t i = 0; i < a.weight.size(); ++i) CHECK(a.weight.at(i) == b.weight.at(i));
    }
    if (a.kind == LayerKind::BatchNorm) {
      for (int64_t i = 0; i < a.bn_mean.size(); ++i) {
        CHECK(a.bn_mean.at(i) == b.bn_mean.at(i));
        CHECK(a.bn_var.at(i) == b.bn_var.at(i));
      }
    }
  }
}
