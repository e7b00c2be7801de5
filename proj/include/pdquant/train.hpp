#pragma once

#include <span>
#include <string>
#include <vector>

#include "pdquant/dataset.hpp"
#include "pdquant/model.hpp"

namespace pdq {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  float bn_momentum = 0.1f;
  int lr_drop_epoch = -1;       // < 0: two thirds of the way through
  float accuracy_floor = 0.90f; // required validation accuracy (fraction)
};

/// Raised when training cannot reach the declared accuracy floor; carries
/// the per-epoch validation curve for diagnosis.
struct TrainingFloorError : std::runtime_error {
  std::vector<double> val_acc_curve;
  TrainingFloorError(const std::string& what, std::vector<double> curve)
      : std::runtime_error(what), val_acc_curve(std::move(curve)) {}
};

struct TrainResult {
  ModelGraph model;
  std::vector<double> train_loss_curve;
  std::vector<double> val_acc_curve;
};

/// Architecture preset for a dataset: cluster tasks get a 3-block MLP
/// with batchnorm, the shapes task a 3-block CNN with batchnorm and one
/// residual block.
ModelGraph make_toy_model(const DatasetSpec& spec, Rng& rng);

/// SGD-with-momentum training of the FP teacher; batchnorm runs in batch
/// mode and accumulates running statistics. Deterministic in `seed`.
TrainResult train_toy_fp(const ToyDataset& data, const TrainConfig& cfg, uint64_t seed);

/// Top-1 accuracy in percent. `quantized` applies the model's stored
/// quantizers.
double evaluate_accuracy(const ModelGraph& m, const Tensor& x, std::span<const int> y,
                         bool quantized, int batch_size = 256);

/// Cross-entropy of predictions against real labels (harness oracle; the
/// quantizer itself never sees labels).
double task_cross_entropy_oracle(const ModelGraph& m, const Tensor& x, std::span<const int> y,
                                 bool quantized, int batch_size = 256);

}  // namespace pdq
