#include "pdquant/train.hpp"

#include <algorithm>
#include <cmath>

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Tensor kaiming(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(shape);
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (auto& v : t.values_mut()) v = std * rng.normal();
  return t;
}

ModelGraph make_mlp(const DatasetSpec& spec, Rng& rng) {
  const int hidden = 48;
  ModelGraph m;
  m.input_shape = {spec.dim};
  m.num_classes = spec.classes;
  m.stem.push_back(make_linear(kaiming({hidden, spec.dim}, spec.dim, rng), Tensor::zeros({hidden})));
  m.stem.push_back(make_batchnorm(hidden));
  m.stem.push_back(make_relu());
  for (int b = 0; b < 3; ++b) {
    Block blk;
    blk.index = b;
    blk.layers.push_back(make_linear(kaiming({hidden, hidden}, hidden, rng), Tensor::zeros({hidden})));
    blk.layers.push_back(make_batchnorm(hidden));
    blk.layers.push_back(make_relu());
    m.blocks.push_back(std::move(blk));
  }
  m.head.push_back(make_softmax_head(kaiming({spec.classes, hidden}, hidden, rng),
                                     Tensor::zeros({spec.classes})));
  m.validate();
  return m;
}

ModelGraph make_cnn(const DatasetSpec& spec, Rng& rng) {
  ModelGraph m;
  m.input_shape = {1, spec.image_size, spec.image_size};
  m.num_classes = spec.classes;
  auto conv = [&](int cout, int cin, int k, int stride, int pad) {
    return make_conv(kaiming({cout, cin, k, k}, static_cast<int64_t>(cin) * k * k, rng),
                     Tensor::zeros({cout}), stride, pad);
  };
  m.stem.push_back(conv(8, 1, 3, 1, 1));
  m.stem.push_back(make_batchnorm(8));
  m.stem.push_back(make_relu());

  Block b0;
  b0.index = 0;
  b0.layers.push_back(conv(16, 8, 3, 2, 1));
  b0.layers.push_back(make_batchnorm(16));
  b0.layers.push_back(make_relu());
  m.blocks.push_back(std::move(b0));

  Block b1;
  b1.index = 1;
  b1.residual = true;
  b1.layers.push_back(conv(16, 16, 3, 1, 1));
  b1.layers.push_back(make_batchnorm(16));
  b1.layers.push_back(make_relu());
  b1.layers.push_back(conv(16, 16, 3, 1, 1));
  b1.layers.push_back(make_batchnorm(16));
  b1.layers.push_back(make_residual_add());
  b1.layers.push_back(make_relu());
  m.blocks.push_back(std::move(b1));

  Block b2;
  b2.index = 2;
  b2.layers.push_back(conv(32, 16, 3, 2, 1));
  b2.layers.push_back(make_batchnorm(32));
  b2.layers.push_back(make_relu());
  m.blocks.push_back(std::move(b2));

  m.head.push_back(make_avgpool());
  m.head.push_back(make_softmax_head(kaiming({spec.classes, 32}, 32, rng),
                                     Tensor::zeros({spec.classes})));
  m.validate();
  return m;
}

/// Training-mode forward: batchnorm uses batch statistics and updates the
/// running buffers in place.
Tensor train_forward(ModelGraph& m, const Tensor& x, float bn_momentum) {
  Tensor cur = x;
  for (int u = 0; u < m.num_units(); ++u) {
    Tensor unit_in = cur;
    for (Layer& l : m.unit_layers_mut(u)) {
      if (l.kind == LayerKind::ResidualAdd) {
        cur = add(cur, unit_in);
      } else if (l.kind == LayerKind::BatchNorm) {
        Tensor bmean, bvar;
        cur = batchnorm_train(cur, l.bn_gamma, l.bn_beta, l.bn_eps, &bmean, &bvar);
        for (int64_t c = 0; c < bmean.size(); ++c) {
          l.bn_mean.data()[c] = (1.0f - bn_momentum) * l.bn_mean.at(c) + bn_momentum * bmean.at(c);
          l.bn_var.data()[c] = (1.0f - bn_momentum) * l.bn_var.at(c) + bn_momentum * bvar.at(c);
        }
      } else {
        cur = layer_apply(l, cur);
      }
    }
  }
  return cur;
}

struct ParamRef {
  Tensor tensor;
  std::vector<float> velocity;
  bool decay;  // weight decay applies to weights, not biases or BN params
};

std::vector<ParamRef> trainable_params(ModelGraph& m) {
  std::vector<ParamRef> params;
  auto push = [&](Tensor& t, bool decay) {
    if (!t.defined()) return;
    t.set_requires_grad(true);
    params.push_back(ParamRef{t, std::vector<float>(static_cast<size_t>(t.size()), 0.0f), decay});
  };
  for (int u = 0; u < m.num_units(); ++u) {
    for (Layer& l : m.unit_layers_mut(u)) {
      if (l.weighted()) {
        push(l.weight, true);
        push(l.bias, false);
      } else if (l.kind == LayerKind::BatchNorm) {
        push(l.bn_gamma, false);
        push(l.bn_beta, false);
      }
    }
  }
  return params;
}

Tensor one_hot(std::span<const int> y, int classes) {
  Tensor t({static_cast<int64_t>(y.size()), classes});
  for (size_t i = 0; i < y.size(); ++i) t.data()[static_cast<int64_t>(i) * classes + y[i]] = 1.0f;
  return t;
}

}  // namespace

ModelGraph make_toy_model(const DatasetSpec& spec, Rng& rng) {
  return spec.kind == TaskKind::Shapes ? make_cnn(spec, rng) : make_mlp(spec, rng);
}

TrainResult train_toy_fp(const ToyDataset& data, const TrainConfig& cfg, uint64_t seed) {
  require(cfg.epochs > 0 && cfg.batch_size > 0, "train_toy_fp: bad epochs/batch");
  Rng rng(seed);
  Rng init_rng = rng.fork(1);
  Rng shuffle_rng = rng.fork(2);

  TrainResult res;
  res.model = make_toy_model(data.spec, init_rng);
  std::vector<ParamRef> params = trainable_params(res.model);

  int64_t n = data.train_size();
  int classes = data.spec.classes;
  std::vector<int> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);
  int drop_epoch = cfg.lr_drop_epoch >= 0 ? cfg.lr_drop_epoch : cfg.epochs * 2 / 3;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    float lr = epoch >= drop_epoch ? cfg.lr * 0.1f : cfg.lr;
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t batches = 0;
    for (int64_t at = 0; at < n; at += cfg.batch_size) {
      int64_t take = std::min<int64_t>(cfg.batch_size, n - at);
      if (take < 2) continue;  // batchnorm needs at least two samples
      std::vector<int> idx(order.begin() + at, order.begin() + at + take);
      Tensor xb = take_rows(data.train_x, idx);
      std::vector<int> yb(static_cast<size_t>(take));
      for (int64_t i = 0; i < take; ++i) yb[static_cast<size_t>(i)] = data.train_y[static_cast<size_t>(idx[static_cast<size_t>(i)])];

      {
        GradTape tape;
        Tensor logits = train_forward(res.model, xb, cfg.bn_momentum);
        Tensor probs = clamp_min(softmax_rows(logits), 1e-12f);
        Tensor picked = mul(one_hot(yb, classes), log(probs));
        Tensor loss = mul(sum_all(picked), -1.0f / static_cast<float>(take));
        epoch_loss += loss.item();
        tape.backward(loss);
      }
      for (ParamRef& p : params) {
        if (!p.tensor.has_grad()) continue;
        auto g = p.tensor.grad();
        float* v = p.velocity.data();
        float* w = p.tensor.data();
        for (size_t i = 0; i < g.size(); ++i) {
          float grad = g[i] + (p.decay ? cfg.weight_decay * w[i] : 0.0f);
          v[i] = cfg.momentum * v[i] + grad;
          w[i] -= lr * v[i];
        }
        p.tensor.zero_grad();
      }
      ++batches;
    }
    res.train_loss_curve.push_back(epoch_loss / static_cast<double>(std::max<int64_t>(1, batches)));
    res.val_acc_curve.push_back(
        evaluate_accuracy(res.model, data.val_x, data.val_y, false) / 100.0);
  }

  for (ParamRef& p : params) p.tensor.set_requires_grad(false);
  res.model.validate();

  if (res.val_acc_curve.back() < cfg.accuracy_floor) {
    std::string msg = "train_toy_fp: validation accuracy " +
                      std::to_string(res.val_acc_curve.back() * 100.0) + "% is below the floor " +
                      std::to_string(cfg.accuracy_floor * 100.0) + "%";
    throw TrainingFloorError(msg, res.val_acc_curve);
  }
  return res;
}

double evaluate_accuracy(const ModelGraph& m, const Tensor& x, std::span<const int> y,
                         bool quantized, int batch_size) {
  require(x.dim(0) == static_cast<int64_t>(y.size()), "evaluate_accuracy: label count mismatch");
  require(x.dim(0) > 0, "evaluate_accuracy: empty split");
  int64_t n = x.dim(0);
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += batch_size) {
    int64_t take = std::min<int64_t>(batch_size, n - at);
    std::vector<int> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(at + i);
    Tensor xb = take_rows(x, idx);
    Prediction p = quantized ? forward_quant(m, xb) : forward_fp(m, xb);
    int64_t c = p.classes();
    for (int64_t i = 0; i < take; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < c; ++j) {
        if (p.logits.at(i * c + j) > p.logits.at(i * c + best)) best = j;
      }
      if (best == y[static_cast<size_t>(at + i)]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

double task_cross_entropy_oracle(const ModelGraph& m, const Tensor& x, std::span<const int> y,
                                 bool quantized, int batch_size) {
  require(x.dim(0) == static_cast<int64_t>(y.size()), "task_ce: label count mismatch");
  int64_t n = x.dim(0);
  double acc = 0.0;
  for (int64_t at = 0; at < n; at += batch_size) {
    int64_t take = std::min<int64_t>(batch_size, n - at);
    std::vector<int> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(at + i);
    Tensor xb = take_rows(x, idx);
    Prediction p = quantized ? forward_quant(m, xb) : forward_fp(m, xb);
    for (int64_t i = 0; i < take; ++i) {
      acc -= std::log(static_cast<double>(p.probs.at(i * p.classes() + y[static_cast<size_t>(at + i)])));
    }
  }
  return acc / static_cast<double>(n);
}

}  // namespace pdq
