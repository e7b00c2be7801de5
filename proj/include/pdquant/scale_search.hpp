#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pdquant/metrics.hpp"
#include "pdquant/model.hpp"

namespace pdq {

/// Candidate activation scales expressed as fractions of the min-max scale
/// (x_max - x_min) / (2^b - 1).
struct ScaleGrid {
  std::vector<float> factors;  // strictly ascending, all in (0, 1]

  /// n uniform points {1/n, 2/n, ..., 1}.
  static ScaleGrid uniform(int n = 64);
  void validate() const;
};

/// Grid-searches the input quantizer of one weighted layer. Layers before
/// `layer_flat_id` must already carry their final quantizers in m.quant;
/// later layers stay full precision. Local metrics compare the activation
/// before and after quantization at the site; pd_* metrics propagate the
/// quantized activation through the remaining FP network and compare final
/// predictions. Ties break toward the larger factor.
QuantParams search_activation_scale(const ModelGraph& m, int layer_flat_id, const Tensor& calib_x,
                                    const ScaleGrid& grid, MetricKind metric, int act_bits);

struct SweepRecord {
  int layer = 0;
  float n_s = 0.0f;
  std::string metric;
  double value = 0.0;
  double value_normalized = 0.0;
};

/// Full grid x metric table for one layer's activation quantizer. When
/// `labels` is supplied an extra "task_ce" oracle column (cross-entropy
/// against the real labels) is appended - harness-only use. Each metric
/// column is min-normalized to 1.0.
std::vector<SweepRecord> sweep_metrics(const ModelGraph& m, int layer_flat_id,
                                       const Tensor& calib_x, const ScaleGrid& grid,
                                       const std::vector<MetricKind>& metrics, int act_bits,
                                       const int* labels = nullptr, int64_t num_labels = 0);

enum class WeightSweepScope { SingleLayer, AllLayers };

/// Weight-only counterpart: candidate factors scale the per-channel min-max
/// weight scales; activations stay full precision. Emits pd_* metrics, a
/// local_mse column on the swept layer's output (single-layer scope), and
/// the task_ce oracle when labels are given.
std::vector<SweepRecord> sweep_weight_metrics(const ModelGraph& m, int layer_flat_id,
                                              const Tensor& calib_x, const ScaleGrid& grid,
                                              WeightSweepScope scope, int weight_bits,
                                              const int* labels = nullptr, int64_t num_labels = 0);

void write_sweep_csv(const std::string& path, const std::vector<SweepRecord>& records);
std::vector<SweepRecord> read_sweep_csv(const std::string& path);

}  // namespace pdq
