#include <doctest.h>

#include <cmath>

#include "pdquant/log.hpp"
#include "pdquant/metrics.hpp"
#include "pdquant/rng.hpp"
#include "test_util.hpp"

using namespace pdq;
using pdqtest::finite_diff_check;
using pdqtest::random_tensor;

TEST_CASE("prediction probabilities are a floored softmax") {
  Tensor logits({2, 3}, {0.0f, 0.0f, 0.0f, 5.0f, -40.0f, -40.0f});
  Prediction p = make_prediction(logits);
  for (int64_t i = 0; i < 2; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(p.probs.at(i * 3 + j) > 0.0f);
      row += p.probs.at(i * 3 + j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(p.probs.at(0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("local_mse examples and loop oracle") {
  Tensor x({1, 2}, {1.0f, 2.0f});
  CHECK(local_mse(x, x) == 0.0);
  CHECK(local_mse(x, Tensor({1, 2}, {1.0f, 4.0f})) == doctest::Approx(4.0));

  Rng rng(9);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({4, 6}, rng);
  double want = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a.at(i)) - b.at(i);
    want += d * d;
  }
  CHECK(local_mse(a, b) == doctest::Approx(want / 4.0));
  CHECK_THROWS_AS(local_mse(a, Tensor({4, 5}, 0.0f)), std::invalid_argument);
}

TEST_CASE("local_cosine examples") {
  Rng rng(10);
  Tensor x = random_tensor({2, 5}, rng, 0.1f, 1.0f);
  CHECK(local_cosine(x, x) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(local_cosine(x, mul(x, 2.0f)) == doctest::Approx(0.0).epsilon(1e-6));

  Tensor e1({1, 2}, {1.0f, 0.0f});
  Tensor e2({1, 2}, {0.0f, 1.0f});
  CHECK(local_cosine(e1, e2) == doctest::Approx(1.0));

  // Zero vector scores distance 1 and warns.
  int warnings = 0;
  set_warn_sink([&](const std::string&) { ++warnings; });
  CHECK(local_cosine(Tensor({1, 2}, 0.0f), e2) == doctest::Approx(1.0));
  set_warn_sink(nullptr);
  CHECK(warnings == 1);
}

TEST_CASE("pd_kl identities, limit case and summation oracle") {
  Tensor same({2, 4}, {1.0f, 2.0f, 3.0f, 4.0f, 0.5f, 0.5f, 0.5f, 0.5f});
  Prediction p = make_prediction(same);
  CHECK(pd_kl(p, p) == doctest::Approx(0.0).epsilon(1e-9));

  // Saturated FP distribution vs uniform over 2 classes: KL -> log 2.
  Tensor fp_logits({1, 2}, {60.0f, -60.0f});
  Tensor q_logits({1, 2}, {0.0f, 0.0f});
  double kl = pd_kl(make_prediction(fp_logits), make_prediction(q_logits));
  CHECK(kl == doctest::Approx(std::log(2.0)).epsilon(1e-4));

  Rng rng(21);
  Prediction a = make_prediction(random_tensor({3, 4}, rng, -2.0f, 2.0f));
  Prediction b = make_prediction(random_tensor({3, 4}, rng, -2.0f, 2.0f));
  double want = 0.0;
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double pf = a.probs.at(i * 4 + j);
      double pq = b.probs.at(i * 4 + j);
      want += pf * std::log(pf / pq);
    }
  CHECK(pd_kl(a, b) == doctest::Approx(want / 3.0).epsilon(1e-9));

  // Asymmetry: direction is KL(FP || quantized).
  CHECK(pd_kl(a, b) != doctest::Approx(pd_kl(b, a)).epsilon(1e-9));
}

TEST_CASE("temperature scales KL by T^2 over softened distributions") {
  Rng rng(23);
  Tensor la = random_tensor({2, 5}, rng, -3.0f, 3.0f);
  Tensor lb = random_tensor({2, 5}, rng, -3.0f, 3.0f);
  Prediction a4 = make_prediction(la, 4.0f);
  Prediction b4 = make_prediction(lb, 4.0f);
  Prediction a4_plain = make_prediction(mul(la, 0.25f));
  Prediction b4_plain = make_prediction(mul(lb, 0.25f));
  CHECK(pd_kl(a4, b4) == doctest::Approx(16.0 * pd_kl(a4_plain, b4_plain)).epsilon(1e-5));
  CHECK_THROWS_AS(pd_kl(a4, b4_plain), std::invalid_argument);
}

TEST_CASE("pd_mse and pd_cosine operate on softmax outputs") {
  Rng rng(31);
  Tensor la = random_tensor({3, 6}, rng, -2.0f, 2.0f);
  Prediction a = make_prediction(la);
  CHECK(pd_mse(a, a) == 0.0);
  CHECK(pd_cosine(a, a) == doctest::Approx(0.0).epsilon(1e-6));

  // Scale invariance on logits does NOT survive the softmax.
  Prediction a2 = make_prediction(mul(la, 2.0f));
  CHECK(pd_cosine(a, a2) > 1e-6);

  Prediction b = make_prediction(random_tensor({3, 6}, rng, -2.0f, 2.0f));
  CHECK(pd_mse(a, b) == doctest::Approx(local_mse(a.probs, b.probs)));
  CHECK(pd_mse(a, b) >= 0.0);
  CHECK(pd_cosine(a, b) >= 0.0);
}

TEST_CASE("metric evaluation is repeatable bit-exactly") {
  Rng rng(41);
  Prediction a = make_prediction(random_tensor({4, 8}, rng, -1.0f, 1.0f));
  Prediction b = make_prediction(random_tensor({4, 8}, rng, -1.0f, 1.0f));
  CHECK(pd_kl(a, b) == pd_kl(a, b));
  CHECK(pd_cosine(a, b) == pd_cosine(a, b));
}

TEST_CASE("tape loss heads agree with the pure metrics and pass gradient checks") {
  Rng rng(51);
  Tensor fp_logits = random_tensor({3, 5}, rng, -2.0f, 2.0f);
  Prediction fp = make_prediction(fp_logits);
  Tensor logits = random_tensor({3, 5}, rng, -2.0f, 2.0f);

  CHECK(kl_loss(fp.probs, logits).item() ==
        doctest::Approx(pd_kl(fp, make_prediction(logits))).epsilon(1e-5));
  CHECK(mse_loss(fp.probs, make_prediction(logits).probs).item() ==
        doctest::Approx(pd_mse(fp, make_prediction(logits))).epsilon(1e-5));
  CHECK(cosine_loss(fp.probs, make_prediction(logits).probs).item() ==
        doctest::Approx(pd_cosine(fp, make_prediction(logits))).epsilon(1e-4));

  for (MetricKind k : {MetricKind::PdKl, MetricKind::PdMse, MetricKind::PdCosine}) {
    CAPTURE(metric_name(k));
    Tensor p = logits.clone().set_requires_grad(true);
    {
      GradTape tape;
      tape.backward(pd_loss(k, fp.probs, p, 1.0f));
    }
    std::vector<float> analytic(p.grad().begin(), p.grad().end());
    auto value = [&]() { return static_cast<double>(pd_loss(k, fp.probs, p, 1.0f).item()); };
    auto res = finite_diff_check(p, value, analytic, 1e-2);
    CHECK_MESSAGE(res.max_rel_err < 1e-3, metric_name(k));
  }

  Tensor target = random_tensor({4, 7}, rng);
  Tensor x = random_tensor({4, 7}, rng);
  for (int pass = 0; pass < 2; ++pass) {
    Tensor p = x.clone().set_requires_grad(true);
    auto build = [&](Tensor& t) {
      return pass == 0 ? mse_loss(target, t) : cosine_loss(target, t);
    };
    {
      GradTape tape;
      tape.backward(build(p));
    }
    std::vector<float> analytic(p.grad().begin(), p.grad().end());
    auto value = [&]() { return static_cast<double>(build(p).item()); };
    auto res = finite_diff_check(p, value, analytic, 1e-2);
    CHECK(res.max_rel_err < 1e-3);
  }
}
