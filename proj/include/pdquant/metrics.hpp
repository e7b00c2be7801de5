#pragma once

#include <string>

#include "pdquant/tensor.hpp"

namespace pdq {

/// Classifier output for a batch: raw logits and temperature-softened
/// probabilities, floor-clamped at 1e-12 so logs stay finite.
struct Prediction {
  Tensor logits;  // [B, C]
  Tensor probs;   // [B, C]
  float temperature = 1.0f;

  int64_t batch() const { return logits.dim(0); }
  int64_t classes() const { return logits.dim(1); }
};

Prediction make_prediction(const Tensor& logits, float temperature = 1.0f);

enum class MetricKind { LocalMse, LocalCosine, PdMse, PdCosine, PdKl };

const char* metric_name(MetricKind k);
MetricKind parse_metric(const std::string& name);
bool metric_is_local(MetricKind k);

// ----- pure scoring functions (double precision, no gradient tracking) -----

/// Sum of squared differences per sample, averaged over the batch.
double local_mse(const Tensor& a, const Tensor& a_q);

/// 1 - cos(a, a_q) per sample on flattened activations, averaged over the
/// batch. A zero vector scores distance 1 and emits a warning.
double local_cosine(const Tensor& a, const Tensor& a_q);

/// mean_b sum_c p_fp(c) * log(p_fp(c) / p_q(c)), scaled by T^2. Direction
/// is fixed as KL(FP || quantized).
double pd_kl(const Prediction& fp, const Prediction& q);

double pd_mse(const Prediction& fp, const Prediction& q);
double pd_cosine(const Prediction& fp, const Prediction& q);

double eval_pd_metric(MetricKind k, const Prediction& fp, const Prediction& q);

// ----- tape-aware loss heads used by the reconstruction optimizer -----

/// KL(fp_probs || softmax(logits / T)) * T^2, batch mean. fp_probs is a
/// constant target; gradients flow into logits.
Tensor kl_loss(const Tensor& fp_probs, const Tensor& logits, float temperature = 1.0f);

/// Squared L2 distance to a constant target, batch mean.
Tensor mse_loss(const Tensor& target, const Tensor& x);

/// Batch mean of 1 - cos(target_row, x_row).
Tensor cosine_loss(const Tensor& target, const Tensor& x);

/// Dispatch over the pd_* metric kinds; target is FP probs for PdKl/PdMse/
/// PdCosine, logits are the live prediction.
Tensor pd_loss(MetricKind k, const Tensor& fp_probs, const Tensor& logits, float temperature);

}  // namespace pdq
