#include <doctest.h>

#include <cmath>
#include <set>

#include "pdquant/quantizer.hpp"
#include "pdquant/rng.hpp"
#include "test_util.hpp"

using namespace pdq;
using pdqtest::finite_diff_check;
using pdqtest::random_tensor;

namespace {

// Scalar reference for the uniform affine quantizer, written straight from
// the defining formulas and kept independent of the library path.
float ref_fake_quant(float x, float s, int32_t z, int bits) {
  long q = std::lround(static_cast<double>(std::round(x / s))) + z;
  long qmax = (1L << bits) - 1;
  if (q < 0) q = 0;
  if (q > qmax) q = qmax;
  return s * (static_cast<float>(q) - static_cast<float>(z));
}

// Independent piecewise evaluation of the scale gradient, following the
// library's stated precision contract (float32 terms, double accumulation).
double ref_scale_grad(const Tensor& x, float s, int bits, const Tensor& up) {
  float qmax = static_cast<float>((1 << bits) - 1);
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    float v = x.at(i) / s;
    float c;
    if (v >= qmax) {
      c = qmax;
    } else if (v <= 0.0f) {
      c = 0.0f;
    } else {
      c = std::roundf(v) - v;
    }
    acc += static_cast<double>(up.at(i)) * static_cast<double>(c);
  }
  return acc;
}

QuantParams per_tensor(float s, int32_t z, int bits) {
  QuantParams p;
  p.scales = {s};
  p.zero_points = {z};
  p.bits = bits;
  return p;
}

RoundingVars vars_with_h(const Tensor& w, const QuantParams& p, float theta_value) {
  RoundingVars r = init_rounding_vars(w, p);
  for (auto& t : r.theta.values_mut()) t = theta_value;
  return r;
}

}  // namespace

TEST_CASE("compute_range_scale matches the min-max formula") {
  Tensor a({2}, {0.0f, 3.0f});
  QuantParams p = compute_range_scale(a, 2);
  CHECK(p.scales[0] == 1.0f);
  CHECK(p.zero_points[0] == 0);
  CHECK(p.q_min() == 0);
  CHECK(p.q_max() == 3);

  Tensor b({2}, {0.0f, 1.0f});
  CHECK(compute_range_scale(b, 8).scales[0] == doctest::Approx(1.0f / 255.0f));

  Tensor c({2}, {-1.0f, 1.0f});
  QuantParams pc = compute_range_scale(c, 4);
  CHECK(pc.scales[0] == doctest::Approx(2.0f / 15.0f));
  CHECK(pc.zero_points[0] == 8);  // round(1/(2/15)) = round(7.5), halves away from zero
}

TEST_CASE("compute_range_scale per-channel groups along axis 0") {
  Tensor w({2, 3}, {0.0f, 1.0f, 2.0f, -4.0f, 0.0f, 4.0f});
  QuantParams p = compute_range_scale(w, 4, 0);
  CHECK(p.scales.size() == 2);
  CHECK(p.scales[0] == doctest::Approx(2.0f / 15.0f));
  CHECK(p.scales[1] == doctest::Approx(8.0f / 15.0f));
}

TEST_CASE("degenerate range errors unless the fallback is requested") {
  Tensor c({3}, {2.0f, 2.0f, 2.0f});
  CHECK_THROWS_AS(compute_range_scale(c, 4), DegenerateRangeError);
  QuantParams p = compute_range_scale(c, 4, std::nullopt, true);
  CHECK(p.scales[0] == 1e-8f);
}

TEST_CASE("fake_quantize worked examples") {
  Tensor x1({1}, {0.5f});
  CHECK(fake_quantize(x1, per_tensor(1.0f / 3.0f, 0, 2)).at(0) ==
        doctest::Approx(2.0f / 3.0f));  // round(1.5) = 2

  Tensor x2({1}, {10.0f});
  CHECK(fake_quantize(x2, per_tensor(1.0f, 0, 2)).at(0) == 3.0f);  // clamped to q_max

  Tensor x3({1}, {-0.2f});
  CHECK(fake_quantize(x3, per_tensor(0.1f, 0, 4)).at(0) == 0.0f);  // clamped to q_min

  Tensor bad({1}, {std::numeric_limits<float>::infinity()});
  CHECK_THROWS_AS(fake_quantize(bad, per_tensor(1.0f, 0, 4)), NonFiniteError);
}

TEST_CASE("fake_quantize agrees with the scalar reference, is idempotent, bounded") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    int bits = 2 + static_cast<int>(rng.below(7));
    Tensor x = random_tensor({64}, rng, -4.0f, 4.0f);
    float s = rng.uniform(0.01f, 1.5f);
    int32_t z = static_cast<int32_t>(rng.below((1 << bits)));
    QuantParams p = per_tensor(s, z, bits);
    Tensor y = fake_quantize(x, p);
    std::set<float> levels;
    for (int64_t i = 0; i < x.size(); ++i) {
      float want = ref_fake_quant(x.at(i), s, z, bits);
      CHECK(y.at(i) == want);  // bit-exact
      levels.insert(y.at(i));
    }
    CHECK(static_cast<int>(levels.size()) <= (1 << bits));
    Tensor y2 = fake_quantize(y, p);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(y2.at(i) == y.at(i));  // exact fixed point
  }
}

TEST_CASE("fake_quantize is monotone for per-tensor params") {
  Rng rng(55);
  QuantParams p = per_tensor(0.17f, 3, 3);
  for (int trial = 0; trial < 50; ++trial) {
    float a = rng.uniform(-3.0f, 3.0f);
    float b = rng.uniform(-3.0f, 3.0f);
    if (a > b) std::swap(a, b);
    Tensor ta({1}, {a});
    Tensor tb({1}, {b});
    CHECK(fake_quantize(ta, p).at(0) <= fake_quantize(tb, p).at(0));
  }
}

TEST_CASE("scale_gradient worked branch examples") {
  QuantParams p = per_tensor(1.0f, 0, 2);
  Tensor up({1}, {2.0f});

  Tensor low({1}, {-0.5f});  // x/S <= q_min = 0
  CHECK(scale_gradient(low, p, up) == 0.0);

  Tensor high({1}, {3.9f});  // x/S >= q_max = 3
  CHECK(scale_gradient(high, p, up) == doctest::Approx(2.0 * 3.0));

  Tensor mid({1}, {1.4f});  // round(1.4) - 1.4 = -0.4
  CHECK(scale_gradient(mid, p, up) == doctest::Approx(2.0 * -0.4).epsilon(1e-6));
}

TEST_CASE("scale_gradient matches the symbolic piecewise form exactly") {
  Rng rng(202);
  for (int trial = 0; trial < 100; ++trial) {
    int bits = 2 + static_cast<int>(rng.below(7));
    float s = rng.uniform(0.05f, 1.0f);
    // Cover all three branches: spread inputs well past both clamp edges.
    float span = s * static_cast<float>((1 << bits) + 2);
    Tensor x = random_tensor({128}, rng, -span, span);
    Tensor up = random_tensor({128}, rng, -2.0f, 2.0f);
    QuantParams p = per_tensor(s, 0, bits);
    CHECK(scale_gradient(x, p, up) == ref_scale_grad(x, s, bits, up));
  }
}

TEST_CASE("adaround rounding direction follows h") {
  Tensor w({1}, {0.4f});
  QuantParams p = per_tensor(1.0f, 0, 4);

  RoundingVars down = vars_with_h(w, p, -12.0f);  // h = 0
  CHECK(adaround_fake_quantize(w, p, down, RoundMode::Soft).at(0) == 0.0f);

  RoundingVars upv = vars_with_h(w, p, 12.0f);  // h = 1
  CHECK(adaround_fake_quantize(w, p, upv, RoundMode::Soft).at(0) == 1.0f);

  RoundingVars mid = vars_with_h(w, p, 0.0f);  // h = 0.5
  CHECK(adaround_fake_quantize(w, p, mid, RoundMode::Soft).at(0) == doctest::Approx(0.5f));
  // Hard mode binarizes h at 0.5.
  CHECK(adaround_fake_quantize(w, p, mid, RoundMode::Hard).at(0) == 1.0f);
}

TEST_CASE("theta init reproduces nearest rounding and hard==soft at saturation") {
  Rng rng(77);
  Tensor w = random_tensor({6, 8}, rng, -1.5f, 1.5f);
  QuantParams p = compute_range_scale(w, 4, 0);
  RoundingVars r = init_rounding_vars(w, p);
  Tensor h = rectified_sigmoid(r);
  for (int64_t i = 0; i < w.size(); ++i) {
    float s = p.scales[static_cast<size_t>(i / 8)];
    float frac = w.at(i) / s - std::floor(w.at(i) / s);
    CHECK(h.at(i) == doctest::Approx(frac).epsilon(1e-4));
  }

  RoundingVars sat = vars_with_h(w, p, 9.0f);  // saturated up everywhere
  Tensor hard = adaround_fake_quantize(w, p, sat, RoundMode::Hard);
  Tensor soft = adaround_fake_quantize(w, p, sat, RoundMode::Soft);
  for (int64_t i = 0; i < w.size(); ++i) CHECK(hard.at(i) == soft.at(i));
  CHECK(rounding_saturation(sat) == 1.0);
}

TEST_CASE("rounding regularizer values and monotone pull toward {0,1}") {
  Tensor w({4}, {0.3f, 0.4f, 0.6f, 0.7f});
  QuantParams p = per_tensor(1.0f, 0, 4);

  RoundingVars half = vars_with_h(w, p, 0.0f);
  half.beta = 2.0f;
  CHECK(rounding_regularizer(half).item() == doctest::Approx(4.0f));  // N elements

  RoundingVars conv = vars_with_h(w, p, 14.0f);
  conv.beta = 2.0f;
  CHECK(rounding_regularizer(conv).item() == 0.0f);

  Tensor w1({1}, {0.3f});
  RoundingVars nine = vars_with_h(w1, per_tensor(1.0f, 0, 4), std::log(5.0f));  // h = 0.9
  nine.beta = 2.0f;
  CHECK(rounding_regularizer(nine).item() == doctest::Approx(0.36f).epsilon(1e-4));

  // Strictly decreasing as h moves toward the endpoints with beta fixed.
  float prev = 4.0f;
  for (float t : {0.5f, 1.0f, 1.5f, 2.0f}) {
    RoundingVars r = vars_with_h(w, p, t);
    r.beta = 4.0f;
    float v = rounding_regularizer(r).item();
    CHECK(v < prev);
    CHECK(v >= 0.0f);
    prev = v;
  }
}

TEST_CASE("soft adaround and regularizer gradients match finite differences") {
  Rng rng(303);
  // Keep every grid value interior and every theta away from the rectified
  // sigmoid's clip points, so central differences stay on a smooth branch.
  Tensor w({5, 4});
  for (auto& v : w.values_mut()) v = 0.05f * (1.0f + rng.below(9)) + 0.05f * rng.uniform(0.35f, 0.65f);
  QuantParams p;
  p.scales = {0.05f};
  p.zero_points = {0};
  p.bits = 6;
  RoundingVars r = init_rounding_vars(w, p);
  for (auto& t : r.theta.values_mut()) t = rng.uniform(-0.8f, 0.8f);
  Tensor weights = random_tensor({5, 4}, rng);

  {
    r.theta.set_requires_grad(true);
    {
      GradTape tape;
      Tensor out = adaround_fake_quantize(w, p, r, RoundMode::Soft);
      tape.backward(sum_all(mul(out, weights)));
    }
    std::vector<float> analytic(r.theta.grad().begin(), r.theta.grad().end());
    auto value = [&]() {
      Tensor out = adaround_fake_quantize(w, p, r, RoundMode::Soft);
      return static_cast<double>(sum_all(mul(out, weights)).item());
    };
    auto res = finite_diff_check(r.theta, value, analytic, 1e-2);
    CHECK(res.max_rel_err < 1e-3);
    r.theta.zero_grad();
  }

  {
    r.beta = 2.0f;
    for (auto& t : r.theta.values_mut()) t = rng.uniform(1.0f, 2.0f) * (rng.uniform() < 0.5f ? -1.0f : 1.0f);
    {
      GradTape tape;
      tape.backward(rounding_regularizer(r));
    }
    std::vector<float> analytic(r.theta.grad().begin(), r.theta.grad().end());
    auto value = [&]() { return static_cast<double>(rounding_regularizer(r).item()); };
    auto res = finite_diff_check(r.theta, value, analytic, 1e-2);
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("learnable activation quantizer routes the Eq-style scale gradient") {
  Rng rng(404);
  Tensor x = random_tensor({40}, rng, -1.0f, 5.0f);
  Tensor up = random_tensor({40}, rng);
  Tensor scale = Tensor({1}, {0.9f}).set_requires_grad(true);
  Tensor xin = x.clone().set_requires_grad(true);
  {
    GradTape tape;
    Tensor out = fake_quantize_learnable(xin, scale, 0, 3);
    tape.backward(sum_all(mul(out, up)));
  }
  QuantParams p = per_tensor(0.9f, 0, 3);
  CHECK(scale.grad()[0] == doctest::Approx(scale_gradient(x, p, up)).epsilon(1e-5));
  // Input gradient passes through only inside the unclamped range.
  for (int64_t i = 0; i < x.size(); ++i) {
    float v = x.at(i) / 0.9f;
    float expect = (v > 0.0f && v < 7.0f) ? up.at(i) : 0.0f;
    CHECK(xin.grad()[static_cast<size_t>(i)] == expect);
  }
}
