#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "pdquant/model.hpp"
#include "pdquant/rng.hpp"
#include "test_util.hpp"

using namespace pdq;
using pdqtest::random_tensor;
using pdqtest::randn_tensor;

namespace {

// Small CNN: conv stem, one plain block, one residual block, avgpool head.
ModelGraph tiny_cnn(Rng& rng, int classes = 4) {
  ModelGraph m;
  m.input_shape = {1, 8, 8};
  m.num_classes = classes;

  m.stem.push_back(make_conv(randn_tensor({4, 1, 3, 3}, rng, 0.4f), randn_tensor({4}, rng, 0.1f),
                             1, 1));
  m.stem.push_back(make_batchnorm(4));
  m.stem.push_back(make_relu());

  Block b0;
  b0.index = 0;
  b0.layers.push_back(make_conv(randn_tensor({6, 4, 3, 3}, rng, 0.3f),
                                randn_tensor({6}, rng, 0.1f), 2, 1));
  b0.layers.push_back(make_batchnorm(6));
  b0.layers.push_back(make_relu());
  m.blocks.push_back(std::move(b0));

  Block b1;
  b1.index = 1;
  b1.residual = true;
  b1.layers.push_back(make_conv(randn_tensor({6, 6, 3, 3}, rng, 0.3f),
                                randn_tensor({6}, rng, 0.1f), 1, 1));
  b1.layers.push_back(make_batchnorm(6));
  b1.layers.push_back(make_residual_add());
  b1.layers.push_back(make_relu());
  m.blocks.push_back(std::move(b1));

  m.head.push_back(make_avgpool());
  m.head.push_back(make_softmax_head(randn_tensor({classes, 6}, rng, 0.5f),
                                     randn_tensor({classes}, rng, 0.1f)));

  // Non-trivial running statistics.
  for (Block& b : m.blocks) {
    for (Layer& l : b.layers) {
      if (l.kind == LayerKind::BatchNorm) {
        for (auto& v : l.bn_mean.values_mut()) v = rng.uniform(-0.3f, 0.3f);
        for (auto& v : l.bn_var.values_mut()) v = rng.uniform(0.5f, 1.5f);
        for (auto& v : l.bn_gamma.values_mut()) v = rng.uniform(0.7f, 1.3f);
        for (auto& v : l.bn_beta.values_mut()) v = rng.uniform(-0.2f, 0.2f);
      }
    }
  }
  m.validate();
  return m;
}

}  // namespace

TEST_CASE("zero-weight head yields uniform softmax") {
  Rng rng(1);
  ModelGraph m = tiny_cnn(rng);
  Layer& headl = m.head.back();
  for (auto& v : headl.weight.values_mut()) v = 0.0f;
  for (auto& v : headl.bias.values_mut()) v = 0.0f;
  Tensor x = random_tensor({3, 1, 8, 8}, rng);
  Prediction p = forward_fp(m, x);
  for (int64_t i = 0; i < p.logits.size(); ++i) CHECK(p.logits.at(i) == 0.0f);
  for (int64_t i = 0; i < p.probs.size(); ++i) CHECK(p.probs.at(i) == doctest::Approx(0.25));
}

TEST_CASE("forward is deterministic and validates input shape") {
  Rng rng(2);
  ModelGraph m = tiny_cnn(rng);
  Tensor x = random_tensor({2, 1, 8, 8}, rng);
  Prediction a = forward_fp(m, x);
  Prediction b = forward_fp(m, x);
  for (int64_t i = 0; i < a.logits.size(); ++i) CHECK(a.logits.at(i) == b.logits.at(i));
  CHECK_THROWS_AS(forward_fp(m, random_tensor({2, 1, 7, 8}, rng)), std::invalid_argument);
}

TEST_CASE("forward matches a layer-by-layer hand computation") {
  Rng rng(3);
  ModelGraph m = tiny_cnn(rng);
  Tensor x = random_tensor({2, 1, 8, 8}, rng);

  const Layer& c0 = m.stem[0];
  Tensor cur = add_channel_bias(conv2d(x, c0.weight, c0.stride, c0.pad), c0.bias);
  const Layer& bn0 = m.stem[1];
  cur = batchnorm_infer(cur, bn0.bn_gamma, bn0.bn_beta, bn0.bn_mean, bn0.bn_var, bn0.bn_eps);
  cur = relu(cur);

  const Layer& c1 = m.blocks[0].layers[0];
  cur = add_channel_bias(conv2d(cur, c1.weight, c1.stride, c1.pad), c1.bias);
  const Layer& bn1 = m.blocks[0].layers[1];
  cur = batchnorm_infer(cur, bn1.bn_gamma, bn1.bn_beta, bn1.bn_mean, bn1.bn_var, bn1.bn_eps);
  cur = relu(cur);

  Tensor block_in = cur;
  const Layer& c2 = m.blocks[1].layers[0];
  cur = add_channel_bias(conv2d(cur, c2.weight, c2.stride, c2.pad), c2.bias);
  const Layer& bn2 = m.blocks[1].layers[1];
  cur = batchnorm_infer(cur, bn2.bn_gamma, bn2.bn_beta, bn2.bn_mean, bn2.bn_var, bn2.bn_eps);
  cur = add(cur, block_in);
  cur = relu(cur);

  cur = avgpool_global(cur);
  const Layer& hd = m.head[1];
  Tensor logits = add_row_bias(matmul(cur, transpose(hd.weight)), hd.bias);

  Prediction p = forward_fp(m, x);
  for (int64_t i = 0; i < logits.size(); ++i) CHECK(p.logits.at(i) == logits.at(i));
}

TEST_CASE("forward_partial composes with the prefix") {
  Rng rng(4);
  ModelGraph m = tiny_cnn(rng);
  Tensor x = random_tensor({2, 1, 8, 8}, rng);
  Prediction full = forward_fp(m, x);

  Tensor stem_out = forward_unit(m, 0, x);
  Prediction via0 = forward_partial(m, 0, stem_out);
  for (int64_t i = 0; i < full.logits.size(); ++i) CHECK(via0.logits.at(i) == full.logits.at(i));

  // Chain: run blocks [0, k) manually, resume at k.
  for (int k = 0; k <= m.num_blocks(); ++k) {
    Tensor a = stem_out;
    for (int b = 0; b < k; ++b) a = forward_unit(m, 1 + b, a);
    Prediction res = forward_partial(m, k, a);
    for (int64_t i = 0; i < full.logits.size(); ++i) CHECK(res.logits.at(i) == full.logits.at(i));
  }

  CHECK_THROWS_AS(forward_partial(m, m.num_blocks() + 1, stem_out), std::invalid_argument);
}

TEST_CASE("batchnorm at its own running stats reproduces (beta, gamma^2)") {
  Rng rng(5);
  // Feed a BN layer a large batch drawn from N(mean, var): the output should
  // be distributed around (beta, gamma^2).
  int64_t n = 4096, c = 3;
  Layer bn = make_batchnorm(static_cast<int>(c));
  bn.bn_mean = Tensor({c}, {0.5f, -1.0f, 2.0f});
  bn.bn_var = Tensor({c}, {0.25f, 1.0f, 4.0f});
  bn.bn_gamma = Tensor({c}, {2.0f, 0.5f, 1.5f});
  bn.bn_beta = Tensor({c}, {1.0f, 0.0f, -2.0f});
  Tensor x({n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j)
      x.data()[i * c + j] = bn.bn_mean.at(j) + rng.normal() * std::sqrt(bn.bn_var.at(j));
  Tensor y = batchnorm_infer(x, bn.bn_gamma, bn.bn_beta, bn.bn_mean, bn.bn_var, bn.bn_eps);
  Tensor mean = channel_mean(y);
  Tensor stddev = channel_std(y);
  for (int64_t j = 0; j < c; ++j) {
    // 3-sigma statistical bounds for 4096 samples.
    double se = bn.bn_gamma.at(j) / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mean.at(j) - bn.bn_beta.at(j)) < 3.5 * se);
    CHECK(stddev.at(j) == doctest::Approx(std::abs(bn.bn_gamma.at(j))).epsilon(0.1));
  }
}

TEST_CASE("model file round-trips bit-exactly, with quantizer state") {
  Rng rng(6);
  ModelGraph m = tiny_cnn(rng);

  // Attach quantizers to the first conv.
  ModelQuant mq;
  {
    LayerQuant lq;
    QuantParams wq = compute_range_scale(m.stem[0].weight, 4, 0);
    WeightQuant w;
    w.qp = wq;
    w.round_mask = Tensor(m.stem[0].weight.shape());
    for (auto& v : w.round_mask.values_mut()) v = rng.uniform() < 0.5f ? 0.0f : 1.0f;
    lq.weight = std::move(w);
    ActQuant aq;
    aq.qp.bits = 8;
    aq.qp.scales = {0.0123456f};
    aq.qp.zero_points = {7};
    lq.act = std::move(aq);
    mq.layers.emplace(0, std::move(lq));
  }
  m.quant = std::move(mq);

  std::string path = "/tmp/pdq_test_model.pdqm";
  save_model(m, path);
  ModelGraph r = load_model(path);

  CHECK(r.input_shape == m.input_shape);
  CHECK(r.num_classes == m.num_classes);
  CHECK(r.num_layers() == m.num_layers());
  for (int id = 0; id < m.num_layers(); ++id) {
    const Layer& a = m.layer_at(id);
    const Layer& b = r.layer_at(id);
    CHECK(a.kind == b.kind);
    if (a.weighted()) {
      for (int64_t i = 0; i < a.weight.size(); ++i) CHECK(a.weight.at(i) == b.weight.at(i));
      for (int64_t i = 0; i < a.bias.size(); ++i) CHECK(a.bias.at(i) == b.bias.at(i));
    }
    if (a.kind == LayerKind::BatchNorm) {
      for (int64_t i = 0; i < a.bn_var.size(); ++i) {
        CHECK(a.bn_var.at(i) == b.bn_var.at(i));
        CHECK(a.bn_mean.at(i) == b.bn_mean.at(i));
      }
    }
  }
  REQUIRE(r.quant.has_value());
  const LayerQuant& lq = r.quant->layers.at(0);
  CHECK(lq.act->qp.scales[0] == 0.0123456f);
  CHECK(lq.act->qp.zero_points[0] == 7);
  CHECK(lq.weight->qp.scales == m.quant->layers.at(0).weight->qp.scales);
  for (int64_t i = 0; i < lq.weight->round_mask.size(); ++i) {
    CHECK(lq.weight->round_mask.at(i) == m.quant->layers.at(0).weight->round_mask.at(i));
  }

  // Quantized forward is identical from memory and from disk.
  Tensor x = random_tensor({2, 1, 8, 8}, rng);
  Prediction pm = forward_quant(m, x);
  Prediction pr = forward_quant(r, x);
  for (int64_t i = 0; i < pm.logits.size(); ++i) CHECK(pm.logits.at(i) == pr.logits.at(i));

  // Saving the reloaded model reproduces the same bytes.
  std::string path2 = "/tmp/pdq_test_model2.pdqm";
  save_model(r, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove(path2.c_str());
  std::remove(path.c_str());
}

TEST_CASE("corrupt model files are rejected") {
  Rng rng(7);
  ModelGraph m = tiny_cnn(rng);
  std::string path = "/tmp/pdq_test_corrupt.pdqm";
  save_model(m, path);

  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();

  {  // truncation -> checksum error
    std::ofstream t(path, std::ios::binary | std::ios::trunc);
    t.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("checksum"), std::runtime_error);

  {  // flipped payload byte -> checksum mismatch
    std::string bad = bytes;
    bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x5a);
    std::ofstream t(path, std::ios::binary | std::ios::trunc);
    t.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("checksum"), std::runtime_error);

  {  // version bump -> explicit unsupported-version error
    std::string bad = bytes;
    bad[5] = '9';  // "PDQM 1" -> "PDQM 9"
    std::ofstream t(path, std::ios::binary | std::ios::trunc);
    t.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_WITH_AS(load_model(path), doctest::Contains("unsupported"), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("validate rejects inconsistent graphs") {
  Rng rng(8);
  ModelGraph m = tiny_cnn(rng);
  m.blocks[0].layers[0].weight = Tensor({6, 5, 3, 3}, 0.1f);  // wrong in-channels
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);

  ModelGraph m2 = tiny_cnn(rng);
  m2.blocks[1].residual = false;  // flag out of sync with the layer list
  CHECK_THROWS_AS(m2.validate(), std::invalid_argument);

  ModelGraph m3 = tiny_cnn(rng);
  for (auto& v : m3.blocks[0].layers[1].bn_var.values_mut()) v = 0.0f;
  CHECK_THROWS_AS(m3.validate(), std::invalid_argument);
}
