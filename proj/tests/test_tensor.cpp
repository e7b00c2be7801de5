#include <doctest.h>

#include <cmath>

#include "pdquant/rng.hpp"
#include "pdquant/tensor.hpp"
#include "test_util.hpp"

using namespace pdq;
using pdqtest::finite_diff_check;
using pdqtest::random_tensor;

namespace {

// Independent triple-loop reference for matmul.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i * k + p)) * b.at(p * n + j);
      out.data()[i * n + j] = static_cast<float>(acc);
    }
  return out;
}

// Independent 6-loop direct convolution reference.
Tensor conv_oracle(const Tensor& x, const Tensor& w, int stride, int pad) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t oh = (H + 2 * pad - kh) / stride + 1;
  int64_t ow = (W + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{B, O, oh, ow});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) {
                int64_t si = i * stride + u - pad;
                int64_t sj = j * stride + v - pad;
                if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
                acc += static_cast<double>(x.at(((b * C + c) * H + si) * W + sj)) *
                       w.at(((o * C + c) * kh + u) * kw + v);
              }
          out.data()[((b * O + o) * oh + i) * ow + j] = static_cast<float>(acc);
        }
  return out;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double denom = std::max(1e-6, std::abs(static_cast<double>(b.at(i))));
    worst = std::max(worst, std::abs(static_cast<double>(a.at(i)) - b.at(i)) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise basics") {
  Tensor a({2}, {1.0f, 2.0f});
  Tensor b({2}, {3.0f, 4.0f});
  Tensor s = add(a, b);
  CHECK(s.at(0) == 4.0f);
  CHECK(s.at(1) == 6.0f);

  Tensor m = mul(Tensor({3}, {1.0f, 2.0f, 3.0f}), 0.0f);
  for (int i = 0; i < 3; ++i) CHECK(m.at(i) == 0.0f);

  Tensor x({4}, {0.5f, -1.0f, 2.0f, 7.0f});
  Tensor z = sub(x, x);
  for (int i = 0; i < 4; ++i) CHECK(z.at(i) == 0.0f);

  CHECK_THROWS_AS(add(a, Tensor({3}, 0.0f)), std::invalid_argument);
}

TEST_CASE("non-finite outputs are an error state") {
  Tensor big({1}, {3e38f});
  CHECK_THROWS_AS(add(big, big), NonFiniteError);
  CHECK_THROWS_AS(log(Tensor({1}, {0.0f})), NonFiniteError);
}

TEST_CASE("matmul identity and zero cases") {
  Tensor eye({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  Tensor m({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tensor p = matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(p.at(i) == m.at(i));

  Tensor r = matmul(Tensor({1, 2}, {1.0f, 0.0f}), Tensor({2, 1}, {0.0f, 5.0f}));
  CHECK(r.at(0) == 0.0f);

  CHECK_THROWS_AS(matmul(Tensor({2, 3}, 1.0f), Tensor({2, 3}, 1.0f)), std::invalid_argument);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  CHECK(max_rel_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-5);
}

TEST_CASE("conv2d trivial kernels") {
  // 1x1 kernel, stride 1, pad 0: per-pixel linear map across channels
  Rng rng(11);
  Tensor x = random_tensor({1, 2, 3, 3}, rng);
  Tensor w({1, 2, 1, 1}, {2.0f, -1.0f});
  Tensor y = conv2d(x, w, 1, 0);
  for (int64_t i = 0; i < 9; ++i) {
    CHECK(y.at(i) == doctest::Approx(2.0f * x.at(i) - x.at(9 + i)).epsilon(1e-6));
  }

  Tensor ones_x = Tensor::ones({1, 1, 5, 5});
  Tensor ones_k = Tensor::ones({1, 1, 3, 3});
  Tensor s = conv2d(ones_x, ones_k, 1, 0);
  CHECK(s.shape() == Shape{1, 1, 3, 3});
  for (int64_t i = 0; i < s.size(); ++i) CHECK(s.at(i) == 9.0f);

  CHECK_THROWS_AS(conv2d(ones_x, ones_k, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(ones_x, ones_k, 1, -1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(ones_x, Tensor::ones({1, 1, 8, 8}), 1, 0), std::invalid_argument);
}

TEST_CASE("conv2d matches 6-loop oracle") {
  Rng rng(13);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    CHECK(max_rel_diff(conv2d(x, w, stride, pad), conv_oracle(x, w, stride, pad)) < 1e-5);
  }
}

TEST_CASE("backward on sum gives ones") {
  Tensor x = Tensor({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}).set_requires_grad(true);
  GradTape tape;
  Tensor loss = sum_all(x);
  tape.backward(loss);
  for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward through elementwise square") {
  Tensor x = Tensor({2}, {1.0f, 2.0f}).set_requires_grad(true);
  GradTape tape;
  tape.backward(sum_all(mul(x, x)));
  CHECK(x.grad()[0] == 2.0f);
  CHECK(x.grad()[1] == 4.0f);
}

TEST_CASE("backward rejects non-scalar loss and empty tape") {
  Tensor x = Tensor({2}, {1.0f, 2.0f}).set_requires_grad(true);
  {
    GradTape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  {
    GradTape tape;
    CHECK_THROWS_AS(tape.backward(Tensor::scalar(0.0f)), std::logic_error);
  }
}

TEST_CASE("backward is additive over losses") {
  Rng rng(3);
  Tensor x = random_tensor({6}, rng);
  Tensor c = random_tensor({6}, rng);

  auto grad_of = [&](auto&& build) {
    Tensor p = x.clone().set_requires_grad(true);
    GradTape tape;
    tape.backward(build(p));
    std::vector<float> g(p.grad().begin(), p.grad().end());
    return g;
  };

  auto l1 = [&](Tensor& p) { return sum_all(mul(p, p)); };
  auto l2 = [&](Tensor& p) { return sum_all(mul(p, c)); };
  auto g1 = grad_of(l1);
  auto g2 = grad_of(l2);

  // Accumulate both losses into the same tensor with two tapes.
  Tensor p = x.clone().set_requires_grad(true);
  {
    GradTape tape;
    tape.backward(l1(p));
  }
  {
    GradTape tape;
    tape.backward(l2(p));
  }
  for (size_t i = 0; i < g1.size(); ++i) {
    CHECK(p.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-6));
  }
}

TEST_CASE("finite differences validate analytic gradients of every op") {
  Rng rng(42);

  auto check_op = [&](const std::string& name, Shape shape, auto&& build, float lo = -1.0f,
                      float hi = 1.0f) {
    CAPTURE(name);
    Tensor p = random_tensor(shape, rng, lo, hi);
    p.set_requires_grad(true);
    {
      GradTape tape;
      tape.backward(build(p));
    }
    std::vector<float> analytic(p.grad().begin(), p.grad().end());
    auto value = [&]() {
      Tensor out = build(p);
      return static_cast<double>(out.item());
    };
    auto res = finite_diff_check(p, value, analytic, 1e-2);
    CHECK_MESSAGE(res.max_rel_err < 1e-3, name, " worst entry ", res.worst_index);
  };

  Rng aux(43);
  Tensor other = random_tensor({3, 4}, aux, 0.5f, 1.5f);
  Tensor other4 = random_tensor({2, 3, 4, 4}, aux);
  Tensor bias_c = random_tensor({3}, aux);

  check_op("add", {3, 4}, [&](Tensor& p) { return sum_all(mul(add(p, other), other)); });
  check_op("sub", {3, 4}, [&](Tensor& p) { return sum_all(mul(sub(p, other), other)); });
  check_op("mul", {3, 4}, [&](Tensor& p) { return sum_all(mul(mul(p, other), other)); });
  check_op("div", {3, 4}, [&](Tensor& p) { return sum_all(mul(div(p, other), other)); });
  check_op("relu_smooth", {3, 4}, [&](Tensor& p) { return sum_all(mul(relu(p), other)); }, 0.2f,
           1.0f);
  check_op("log", {3, 4}, [&](Tensor& p) { return sum_all(mul(log(p), other)); }, 0.5f, 2.0f);
  check_op("sqrt", {3, 4}, [&](Tensor& p) { return sum_all(mul(sqrt(p), other)); }, 0.5f, 2.0f);
  check_op("clamp_min", {3, 4}, [&](Tensor& p) { return sum_all(mul(clamp_min(p, 0.0f), other)); },
           0.3f, 1.0f);
  check_op("reshape", {3, 4}, [&](Tensor& p) {
    return sum_all(mul(reshape(p, {4, 3}), Tensor::ones({4, 3})));
  });
  check_op("matmul_lhs", {3, 4},
           [&](Tensor& p) { return sum_all(mul(matmul(p, transpose(other)), Tensor::ones({3, 3}))); });
  check_op("matmul_rhs", {4, 3},
           [&](Tensor& p) { return sum_all(mul(matmul(other, p), Tensor::ones({3, 3}))); });
  check_op("transpose", {3, 4},
           [&](Tensor& p) { return sum_all(mul(transpose(p), transpose(other))); });
  check_op("conv2d_x", {2, 3, 4, 4}, [&](Tensor& p) {
    Tensor w = Tensor({2, 3, 3, 3}, 0.1f);
    return sum_all(mul(conv2d(p, w, 1, 1), Tensor::ones({2, 2, 4, 4})));
  });
  check_op("conv2d_w", {2, 3, 3, 3}, [&](Tensor& p) {
    return sum_all(mul(conv2d(other4, p, 2, 1), Tensor::ones({2, 2, 2, 2})));
  });
  check_op("add_row_bias_x", {3, 4},
           [&](Tensor& p) { return sum_all(mul(add_row_bias(p, Tensor({4}, 0.5f)), other)); });
  check_op("add_row_bias_b", {4}, [&](Tensor& p) {
    return sum_all(mul(add_row_bias(other, p), other));
  });
  check_op("add_channel_bias", {3}, [&](Tensor& p) {
    return sum_all(mul(add_channel_bias(other4, p), other4));
  });
  check_op("avgpool_global", {2, 3, 4, 4},
           [&](Tensor& p) { return sum_all(mul(avgpool_global(p), Tensor::ones({2, 3}))); });
  check_op("softmax_rows", {3, 4}, [&](Tensor& p) {
    return sum_all(mul(softmax_rows(p), other));
  });
  check_op("row_sum", {3, 4},
           [&](Tensor& p) { return sum_all(mul(row_sum(p), Tensor({3}, {1.0f, -2.0f, 0.5f}))); });
  check_op("channel_mean", {2, 3, 4, 4},
           [&](Tensor& p) { return sum_all(mul(channel_mean(p), bias_c)); });
  check_op("channel_std", {2, 3, 4, 4},
           [&](Tensor& p) { return sum_all(mul(channel_std(p), bias_c)); });
  check_op("batchnorm_infer", {2, 3, 4, 4}, [&](Tensor& p) {
    Tensor gm({3}, {1.0f, 2.0f, 0.5f});
    Tensor bt({3}, {0.1f, -0.2f, 0.0f});
    Tensor mn({3}, {0.2f, -0.1f, 0.0f});
    Tensor vr({3}, {1.0f, 0.5f, 2.0f});
    return sum_all(mul(batchnorm_infer(p, gm, bt, mn, vr, 1e-5f), other4));
  });
  check_op("batchnorm_train_x", {4, 3}, [&](Tensor& p) {
    Tensor gm({3}, {1.0f, 2.0f, 0.5f});
    Tensor bt({3}, {0.1f, -0.2f, 0.0f});
    Tensor tgt = Tensor({4, 3}, {0.3f, -0.2f, 0.5f, 1.0f, 0.2f, -0.4f, 0.0f, 0.7f, -0.3f, 0.9f,
                                 -0.6f, 0.25f});
    Tensor y = batchnorm_train(p, gm, bt, 1e-5f);
    Tensor d = sub(y, tgt);
    return sum_all(mul(d, d));
  });
  check_op("batchnorm_train_gamma", {3}, [&](Tensor& p) {
    Tensor bt({3}, {0.1f, -0.2f, 0.0f});
    Tensor x4 = other4;
    Tensor y = batchnorm_train(x4, p, bt, 1e-5f);
    return sum_all(mul(y, other4));
  });
}

TEST_CASE("batchnorm train normalizes and reports batch stats") {
  Rng rng(5);
  Tensor x = pdqtest::randn_tensor({64, 4}, rng);
  for (int64_t i = 0; i < x.size(); ++i) x.data()[i] = x.at(i) * 3.0f + 2.0f;
  Tensor mean, var;
  Tensor y = batchnorm_train(x, Tensor::ones({4}), Tensor::zeros({4}), 1e-5f, &mean, &var);
  Tensor ym = channel_mean(y);
  Tensor ys = channel_std(y);
  for (int64_t c = 0; c < 4; ++c) {
    CHECK(std::abs(ym.at(c)) < 1e-5);
    CHECK(ys.at(c) == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(mean.at(c) == doctest::Approx(2.0).epsilon(0.5));
  }
}

TEST_CASE("mix_by_mask selects and routes gradients") {
  Tensor q = Tensor({4}, {1.0f, 2.0f, 3.0f, 4.0f}).set_requires_grad(true);
  Tensor fp({4}, {10.0f, 20.0f, 30.0f, 40.0f});
  Tensor mask({4}, {1.0f, 0.0f, 1.0f, 0.0f});
  GradTape tape;
  Tensor out = mix_by_mask(q, fp, mask);
  CHECK(out.at(0) == 10.0f);
  CHECK(out.at(1) == 2.0f);
  tape.backward(sum_all(out));
  CHECK(q.grad()[0] == 0.0f);
  CHECK(q.grad()[1] == 1.0f);
  CHECK(q.grad()[2] == 0.0f);
  CHECK(q.grad()[3] == 1.0f);
}

TEST_CASE("take_rows gathers leading-axis slices") {
  Tensor x({3, 2}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f});
  std::vector<int> idx{2, 0};
  Tensor g = take_rows(x, idx);
  CHECK(g.shape() == Shape{2, 2});
  CHECK(g.at(0) == 5.0f);
  CHECK(g.at(3) == 2.0f);
}
