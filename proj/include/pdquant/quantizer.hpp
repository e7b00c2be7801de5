#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "pdquant/tensor.hpp"

namespace pdq {

/// Thrown by compute_range_scale when a quantization group is constant
/// (x_max == x_min) and the epsilon fallback was not requested.
struct DegenerateRangeError : std::runtime_error {
  explicit DegenerateRangeError(const std::string& what) : std::runtime_error(what) {}
};

/// Uniform unsigned affine quantizer state. scales/zero_points hold one
/// entry for per-tensor quantization or one per output channel (axis 0)
/// for weights.
struct QuantParams {
  std::vector<float> scales;
  std::vector<int32_t> zero_points;
  int bits = 8;
  int axis = -1;  // -1: per-tensor, 0: per-output-channel

  int32_t q_min() const { return 0; }
  int32_t q_max() const { return (1 << bits) - 1; }
  bool per_channel() const { return axis >= 0; }
  void validate() const;
};

/// Round-to-nearest with halves away from zero. The fixed rounding rule of
/// every quantizer in this library.
inline float round_half_away(float v) { return std::round(v); }

/// Min-max scale and zero-point: S = (x_max - x_min) / (2^b - 1),
/// Z = clamp(round(-x_min / S), 0, 2^b - 1). With per_channel_axis == 0
/// the range is taken per leading-dimension slice. A constant group
/// raises DegenerateRangeError unless eps_fallback is set, in which case
/// S = 1e-8.
QuantParams compute_range_scale(const Tensor& x, int bits,
                                std::optional<int> per_channel_axis = std::nullopt,
                                bool eps_fallback = false);

/// Quantize-then-dequantize: S * (clamp(round(x/S) + Z, q_min, q_max) - Z).
/// Pure transform, no gradient tracking; idempotent.
Tensor fake_quantize(const Tensor& x, const QuantParams& p);

/// dL/dS for a per-tensor activation quantizer:
///   upstream * q_max                    where x/S >= q_max
///   upstream * (round(x/S) - x/S)       where q_min < x/S < q_max
///   upstream * q_min                    where x/S <= q_min
/// summed over elements.
double scale_gradient(const Tensor& x, const QuantParams& p, const Tensor& upstream);

/// Tape-aware per-tensor fake quantization with a learnable scale. The
/// scale is a positive scalar tensor; its gradient follows the piecewise
/// form of scale_gradient, and the input gradient passes straight through
/// inside the unclamped range.
Tensor fake_quantize_learnable(const Tensor& x, const Tensor& scale, int32_t zero_point, int bits);

enum class RoundMode { Soft, Hard };

/// Continuous rounding variables: one theta per weight entry, mapped to
/// [0,1] by the rectified sigmoid h(theta) = clip(sigmoid(theta) *
/// (zeta - gamma) + gamma, 0, 1).
struct RoundingVars {
  Tensor theta;
  float beta = 20.0f;
  float gamma_r = -0.1f;
  float zeta_r = 1.1f;
};

/// theta initialized so that h(theta) equals the fractional part of w/S,
/// i.e. soft quantization starts at round-to-nearest.
RoundingVars init_rounding_vars(const Tensor& w, const QuantParams& p);

/// h(theta) as a plain tensor (no tracking).
Tensor rectified_sigmoid(const RoundingVars& r);

/// Weight quantization with learned rounding:
/// S * (clamp(floor(w/S) + h(theta) + Z, q_min, q_max) - Z).
/// Soft mode uses continuous h(theta) and routes gradients to theta; hard
/// mode binarizes h at 0.5 and is not differentiable.
Tensor adaround_fake_quantize(const Tensor& w, const QuantParams& p, const RoundingVars& r,
                              RoundMode mode);

/// sum(1 - |2 h(theta) - 1|^beta); zero exactly when every h is 0 or 1.
/// Tape-aware in theta.
Tensor rounding_regularizer(const RoundingVars& r);

/// Fraction of rounding variables with |2 h(theta) - 1| > threshold.
double rounding_saturation(const RoundingVars& r, double threshold = 0.99);

}  // namespace pdq
