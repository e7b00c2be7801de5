#include "pdquant/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/// Group index of element i: 0 for per-tensor params, leading-dimension
/// slice for per-channel params.
struct GroupMap {
  int64_t group_stride;  // elements per channel slice; 0 means per-tensor
  size_t group_of(int64_t i) const {
    return group_stride == 0 ? 0 : static_cast<size_t>(i / group_stride);
  }
};

GroupMap group_map(const Tensor& x, const QuantParams& p) {
  if (!p.per_channel()) return {0};
  require(p.axis == 0, "quantizer: only per-output-channel (axis 0) grouping is supported");
  require(x.ndim() >= 1 && x.dim(0) == static_cast<int64_t>(p.scales.size()),
          "quantizer: per-channel parameter count does not match leading extent");
  return {x.size() / x.dim(0)};
}

}  // namespace

void QuantParams::validate() const {
  require(bits >= 2 && bits <= 24, "QuantParams: bits must be in [2, 24]");
  require(!scales.empty() && scales.size() == zero_points.size(),
          "QuantParams: scales/zero_points must be non-empty and equally sized");
  for (float s : scales) require(s > 0.0f, "QuantParams: scale must be positive");
  for (int32_t z : zero_points)
    require(z >= q_min() && z <= q_max(), "QuantParams: zero_point outside [q_min, q_max]");
}

QuantParams compute_range_scale(const Tensor& x, int bits, std::optional<int> per_channel_axis,
                                bool eps_fallback) {
  require(x.defined() && x.size() > 0, "compute_range_scale: empty tensor");
  require(bits >= 2 && bits <= 24, "compute_range_scale: bits must be in [2, 24]");
  QuantParams p;
  p.bits = bits;
  p.axis = per_channel_axis.value_or(-1);
  int64_t groups = 1;
  int64_t stride = x.size();
  if (p.per_channel()) {
    require(p.axis == 0, "compute_range_scale: only axis 0 grouping is supported");
    groups = x.dim(0);
    stride = x.size() / groups;
  }
  const float levels = static_cast<float>((1 << bits) - 1);
  const float* px = x.data();
  for (int64_t g = 0; g < groups; ++g) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (int64_t i = g * stride; i < (g + 1) * stride; ++i) {
      lo = std::min(lo, px[i]);
      hi = std::max(hi, px[i]);
    }
    float scale;
    if (hi > lo) {
      scale = (hi - lo) / levels;
    } else if (eps_fallback) {
      scale = 1e-8f;
    } else {
      throw DegenerateRangeError("compute_range_scale: constant tensor (x_max == x_min) in group " +
                                 std::to_string(g));
    }
    // -x_min/S = -x_min*(2^b-1)/(x_max-x_min), evaluated in double from the
    // raw range so that exact halves (e.g. range [-1,1]) round the way the
    // formula says instead of through the float-rounded scale.
    double z = hi > lo ? std::round(-static_cast<double>(lo) * levels /
                                    (static_cast<double>(hi) - static_cast<double>(lo)))
                       : std::round(-static_cast<double>(lo) / static_cast<double>(scale));
    z = std::clamp(z, 0.0, static_cast<double>(levels));
    p.scales.push_back(scale);
    p.zero_points.push_back(static_cast<int32_t>(z));
  }
  return p;
}

Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
  p.validate();
  check_finite(x, "fake_quantize(input)");
  GroupMap gm = group_map(x, p);
  const float qmax = static_cast<float>(p.q_max());
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    size_t g = gm.group_of(i);
    float s = p.scales[g];
    float z = static_cast<float>(p.zero_points[g]);
    float q = round_half_away(px[i] / s) + z;
    q = std::clamp(q, 0.0f, qmax);
    po[i] = s * (q - z);
  }
  check_finite(out, "fake_quantize");
  return out;
}

double scale_gradient(const Tensor& x, const QuantParams& p, const Tensor& upstream) {
  p.validate();
  require(!p.per_channel(), "scale_gradient: per-tensor activation quantizers only");
  require(x.shape() == upstream.shape(), "scale_gradient: upstream shape mismatch");
  const float s = p.scales[0];
  const float qmin = static_cast<float>(p.q_min());
  const float qmax = static_cast<float>(p.q_max());
  const float* px = x.data();
  const float* pu = upstream.data();
  // Contract: elementwise terms in float32, accumulation in double, in
  // element order.
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    float v = px[i] / s;
    float contrib;
    if (v >= qmax) {
      contrib = qmax;
    } else if (v <= qmin) {
      contrib = qmin;
    } else {
      contrib = round_half_away(v) - v;
    }
    acc += static_cast<double>(pu[i]) * static_cast<double>(contrib);
  }
  return acc;
}

Tensor fake_quantize_learnable(const Tensor& x, const Tensor& scale, int32_t zero_point, int bits) {
  require(scale.size() == 1, "fake_quantize_learnable: scale must be a single-element tensor");
  QuantParams p;
  p.bits = bits;
  p.scales = {scale.item()};
  p.zero_points = {zero_point};
  Tensor out = fake_quantize(x, p);

  GradTape* tape = GradTape::active();
  if (tape == nullptr) return out;
  int64_t xn = tape->input_node(x);
  int64_t sn = tape->input_node(scale);
  if (xn < 0 && sn < 0) return out;
  const float s = p.scales[0];
  const float qmin = static_cast<float>(p.q_min());
  const float qmax = static_cast<float>(p.q_max());
  tape->record(out, [x, s, qmin, qmax, xn, sn](std::span<const float> adj, GradTape& t) {
    const float* px = x.data();
    std::span<float> gx = xn >= 0 ? t.adjoint(xn) : std::span<float>{};
    double gs = 0.0;
    for (size_t i = 0; i < adj.size(); ++i) {
      float v = px[i] / s;
      if (v >= qmax) {
        gs += static_cast<double>(adj[i]) * qmax;
      } else if (v <= qmin) {
        gs += static_cast<double>(adj[i]) * qmin;
      } else {
        gs += static_cast<double>(adj[i]) * (round_half_away(v) - v);
        if (xn >= 0) gx[i] += adj[i];  // straight-through inside the grid
      }
    }
    if (sn >= 0) t.adjoint(sn)[0] += static_cast<float>(gs);
  });
  return out;
}

namespace {

float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

/// h and, when requested, dh/dtheta (zero where the rectified sigmoid is
/// clipped).
void eval_h(const RoundingVars& r, std::vector<float>& h, std::vector<float>* dh) {
  const float span = r.zeta_r - r.gamma_r;
  const float* pt = r.theta.data();
  int64_t n = r.theta.size();
  h.resize(static_cast<size_t>(n));
  if (dh) dh->resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    float sg = sigmoidf(pt[i]);
    float raw = sg * span + r.gamma_r;
    float hv = std::clamp(raw, 0.0f, 1.0f);
    h[static_cast<size_t>(i)] = hv;
    if (dh) (*dh)[static_cast<size_t>(i)] = (raw > 0.0f && raw < 1.0f) ? span * sg * (1.0f - sg) : 0.0f;
  }
}

}  // namespace

RoundingVars init_rounding_vars(const Tensor& w, const QuantParams& p) {
  p.validate();
  GroupMap gm = group_map(w, p);
  RoundingVars r;
  r.theta = Tensor(w.shape());
  const float span = r.zeta_r - r.gamma_r;
  const float* pw = w.data();
  float* pt = r.theta.data();
  for (int64_t i = 0; i < w.size(); ++i) {
    float s = p.scales[gm.group_of(i)];
    float v = pw[i] / s;
    float frac = v - std::floor(v);
    float target = (frac - r.gamma_r) / span;  // in (0, 1) for frac in [0, 1)
    pt[i] = std::log(target / (1.0f - target));
  }
  check_finite(r.theta, "init_rounding_vars");
  return r;
}

Tensor rectified_sigmoid(const RoundingVars& r) {
  std::vector<float> h;
  eval_h(r, h, nullptr);
  return Tensor(r.theta.shape(), std::move(h));
}

Tensor adaround_fake_quantize(const Tensor& w, const QuantParams& p, const RoundingVars& r,
                              RoundMode mode) {
  p.validate();
  require(w.shape() == r.theta.shape(), "adaround_fake_quantize: theta must be shaped like w");
  GroupMap gm = group_map(w, p);
  std::vector<float> h, dh;
  eval_h(r, h, mode == RoundMode::Soft ? &dh : nullptr);
  const float qmax = static_cast<float>(p.q_max());
  Tensor out(w.shape());
  const float* pw = w.data();
  float* po = out.data();
  std::vector<uint8_t> interior(mode == RoundMode::Soft ? static_cast<size_t>(w.size()) : 0);
  for (int64_t i = 0; i < w.size(); ++i) {
    size_t g = gm.group_of(i);
    float s = p.scales[g];
    float z = static_cast<float>(p.zero_points[g]);
    float hv = h[static_cast<size_t>(i)];
    if (mode == RoundMode::Hard) hv = hv >= 0.5f ? 1.0f : 0.0f;
    float q = std::floor(pw[i] / s) + hv + z;
    bool inside = q > 0.0f && q < qmax;
    q = std::clamp(q, 0.0f, qmax);
    po[i] = s * (q - z);
    if (mode == RoundMode::Soft) interior[static_cast<size_t>(i)] = inside ? 1 : 0;
  }
  check_finite(out, "adaround_fake_quantize");

  if (mode == RoundMode::Soft) {
    GradTape* tape = GradTape::active();
    if (tape != nullptr) {
      int64_t tn = tape->input_node(r.theta);
      if (tn >= 0) {
        std::vector<float> scale_of(static_cast<size_t>(w.size()));
        for (int64_t i = 0; i < w.size(); ++i) scale_of[static_cast<size_t>(i)] = p.scales[gm.group_of(i)];
        tape->record(out, [tn, dh, interior, scale_of](std::span<const float> adj, GradTape& t) {
          auto g = t.adjoint(tn);
          for (size_t i = 0; i < adj.size(); ++i) {
            if (interior[i]) g[i] += adj[i] * scale_of[i] * dh[i];
          }
        });
      }
    }
  }
  return out;
}

Tensor rounding_regularizer(const RoundingVars& r) {
  require(r.beta > 0.0f, "rounding_regularizer: beta must be positive");
  std::vector<float> h, dh;
  eval_h(r, h, &dh);
  double acc = 0.0;
  for (float hv : h) acc += 1.0 - std::pow(std::abs(2.0 * hv - 1.0), static_cast<double>(r.beta));
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  check_finite(out, "rounding_regularizer");

  GradTape* tape = GradTape::active();
  if (tape != nullptr) {
    int64_t tn = tape->input_node(r.theta);
    if (tn >= 0) {
      float beta = r.beta;
      tape->record(out, [tn, h, dh, beta](std::span<const float> adj, GradTape& t) {
        auto g = t.adjoint(tn);
        for (size_t i = 0; i < h.size(); ++i) {
          float u = 2.0f * h[i] - 1.0f;
          float au = std::abs(u);
          float d_h = -beta * std::pow(au, beta - 1.0f) * (u >= 0.0f ? 1.0f : -1.0f) * 2.0f;
          g[i] += adj[0] * d_h * dh[i];
        }
      });
    }
  }
  return out;
}

double rounding_saturation(const RoundingVars& r, double threshold) {
  std::vector<float> h;
  eval_h(r, h, nullptr);
  if (h.empty()) return 1.0;
  int64_t sat = 0;
  for (float hv : h) {
    if (std::abs(2.0 * hv - 1.0) > threshold) ++sat;
  }
  return static_cast<double>(sat) / static_cast<double>(h.size());
}

}  // namespace pdq
