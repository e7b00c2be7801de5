#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pdquant/log.hpp"
#include "pdquant/metrics.hpp"
#include "pdquant/model.hpp"
#include "pdquant/quantizer.hpp"
#include "pdquant/rng.hpp"

namespace pdq {

/// Thrown when a block optimization produces a non-finite loss; carries a
/// diagnostic snapshot of the failing iteration.
struct ReconDivergenceError : std::runtime_error {
  int unit;
  int iteration;
  ReconDivergenceError(int unit_, int iter_, const std::string& what)
      : std::runtime_error(what), unit(unit_), iteration(iter_) {}
};

struct BetaSchedule {
  float beta_start = 20.0f;
  float beta_end = 2.0f;
  float warmup = 0.2f;  // fraction of iterations before the rounding regularizer engages

  bool reg_active(int iter, int total) const {
    return static_cast<float>(iter) >= warmup * static_cast<float>(total);
  }
  /// Linear decay start -> end over the post-warmup stretch.
  float beta_at(int iter, int total) const {
    float t0 = warmup * static_cast<float>(total);
    if (static_cast<float>(iter) < t0) return beta_start;
    float span = static_cast<float>(total) - t0;
    float p = span > 0.0f ? (static_cast<float>(iter) - t0) / span : 1.0f;
    return beta_start + (beta_end - beta_start) * p;
  }
};

struct BitPolicy {
  int weight_bits = 2;
  int act_bits = 2;
  bool first_last_8bit = true;          // first and last weighted layers run at 8-bit
  bool extra_first_output_8bit = false; // additionally keep the first layer's output at 8-bit
};

struct ReconConfig {
  float lambda_r = 0.2f;   // 0.2 for residual nets, 0.1 otherwise
  float drop_prob = 0.5f;
  float lr_scale = 4e-5f;
  float lr_round = 3e-3f;
  int iterations = 20000;
  int batch_size = 32;
  BitPolicy bits;
  float round_weight = 0.01f;
  BetaSchedule beta;
  float pd_temperature = 1.0f;
  MetricKind pd_metric = MetricKind::PdKl;
  int log_every = 100;

  void validate() const;
};

/// Ablation switches of the pipeline. Reg-only with drop reproduces the
/// feature-reconstruction baseline objective; PD adds the prediction
/// difference term; DC corrects the regularization targets.
struct QuantOptions {
  bool use_pd = true;
  bool use_reg = true;
  bool use_dc = true;
  bool use_drop = true;
  float dc_lambda_c = 0.02f;
  float dc_lr = 1e-3f;
  int dc_steps = 500;
  size_t cache_budget_mb = 512;  // FP/quant caches spill to disk beyond this
  std::string scratch_dir;       // where spilled caches live; empty disables spilling
};

/// Per-layer bit widths resolved from the policy.
struct LayerBits {
  int weight_bits;
  int act_bits;
};
std::map<int, LayerBits> plan_bits(const ModelGraph& m, const BitPolicy& policy);

// ----- optimizer -----

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  int64_t t = 0;
};

/// Bias-corrected adaptive-moment update, beta1=0.9, beta2=0.999, eps=1e-8.
void adam_step(Tensor& param, std::span<const float> grad, AdamState& state, float lr);

/// Elementwise: keep the full-precision value with probability p, the
/// quantized value otherwise. Gradients flow into a_q where it is kept.
Tensor random_drop_mix(const Tensor& a_q, const Tensor& a_fp, float p, Rng& rng);

// ----- calibration caches -----

/// Row-addressable activation cache. Stays in memory up to a byte budget,
/// beyond which it spills to a raw little-endian float32 file (the same
/// encoding as the model file payload) and rows are read back on demand.
class RowCache {
 public:
  RowCache() = default;
  RowCache(Tensor data, size_t budget_bytes, const std::string& spill_path);
  ~RowCache();
  RowCache(RowCache&&) noexcept;
  RowCache& operator=(RowCache&&) noexcept;
  RowCache(const RowCache&) = delete;
  RowCache& operator=(const RowCache&) = delete;

  bool defined() const { return rows_ > 0; }
  bool spilled() const { return !path_.empty(); }
  int64_t rows() const { return rows_; }
  const Shape& row_shape() const { return row_shape_; }

  Tensor gather(std::span<const int> idx) const;
  /// Contiguous row range [at, at+count).
  Tensor slice(int64_t at, int64_t count) const;

 private:
  Tensor ram_;
  std::string path_;
  Shape row_shape_;
  int64_t rows_ = 0;
  int64_t row_elems_ = 0;
};

// ----- block reconstruction -----

/// Frozen per-unit inputs/targets for one reconstruction.
struct ReconInputs {
  RowCache input_q;    // unit inputs under the already-quantized prefix
  RowCache target_out; // FP unit outputs (regularization target), possibly from DC-corrected inputs
  const RowCache* o_fp_probs = nullptr;  // FP predictions of the calibration set (PD mode only)
};

struct BlockState {
  int unit = 0;
  std::map<int, LayerQuant> finalized;  // flat layer id -> hardened quantizers
  double final_pd = 0.0;
  double final_reg = 0.0;
  double final_round = 0.0;
  double saturation = 0.0;  // fraction of h(theta) driven to {0,1}
  bool divergence_flagged = false;
  int iterations_run = 0;
};

/// Optimizes rounding variables and activation scales of one unit against
/// PD + lambda_r * reg + rounding regularizer, then hardens the rounders.
BlockState reconstruct_unit(const ModelGraph& m, int unit, const ReconInputs& inputs,
                            const ReconConfig& cfg, const QuantOptions& opts, Rng& rng,
                            const LogSink& progress = {});

/// Spec-level entry point for one block (blocks are units 1..num_blocks).
/// Prefix layers must already carry final quantizers in m.quant; caches and
/// O_fp are derived here.
BlockState reconstruct_block(const ModelGraph& m, int block_index, const Tensor& calib_x,
                             const ReconConfig& cfg, const QuantOptions& opts, uint64_t seed,
                             const LogSink& progress = {});

struct QuantizeResult {
  ModelGraph model;  // carries the full quantizer state
  std::vector<BlockState> units;
  bool divergence_flagged = false;
};

/// Full pipeline over every unit, shallow to deep: optional distribution
/// correction of the FP reg targets, then block-wise reconstruction, then
/// finalization into a serializable quantized model.
QuantizeResult quantize_model(const ModelGraph& fp, const Tensor& calib_x, const ReconConfig& cfg,
                              const QuantOptions& opts, uint64_t seed,
                              const LogSink& progress = {});

}  // namespace pdq
