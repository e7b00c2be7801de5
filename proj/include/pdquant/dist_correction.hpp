#pragma once

#include <utility>
#include <vector>

#include "pdquant/model.hpp"
#include "pdquant/tensor.hpp"

namespace pdq {

/// Per-channel batch statistics (mean, population std) of every batchnorm
/// layer's input inside one unit, computed by a prefix forward from the
/// unit input `a`. Empty when the unit has no batchnorm layer.
std::vector<std::pair<Tensor, Tensor>> collect_bn_inputs(const ModelGraph& m, int unit,
                                                         const Tensor& a);

struct CorrectionState {
  Tensor a_dc;            // learnable corrected activation
  Tensor a_fp;            // frozen original
  float lambda_c = 0.02f; // weight of the statistic-matching term
  float lr = 1e-3f;
  int steps = 500;
};

CorrectionState make_correction_state(const Tensor& a_fp, float lambda_c, float lr, int steps);

struct DcResult {
  Tensor corrected;
  std::vector<double> objective;  // objective value per step, front() = initial
  double stat_initial = 0.0;      // sum of squared stat residuals before/after
  double stat_final = 0.0;
  bool reverted = false;  // optimization diverged; corrected == a_fp
};

/// Gradient descent on the corrected activation: lambda_c * sum over BN
/// layers of (||mu_hat - mu||^2 + ||sigma_hat - sigma||^2) plus the anchor
/// ||a_dc - a_fp||^2. Statistics are recomputed from the current iterate at
/// every step. Units without batchnorm pass the activation through
/// unchanged; lambda_c == 0 leaves it unchanged exactly.
DcResult correct_distribution(const ModelGraph& m, int unit, CorrectionState state);

/// Objective value at a given activation (no optimization); test hook.
double dc_objective(const ModelGraph& m, int unit, const Tensor& a, const Tensor& a_fp,
                    float lambda_c);

}  // namespace pdq
