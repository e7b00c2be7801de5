#include "pdquant/reconstruction.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pdquant/dist_correction.hpp"

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int64_t spill_counter = 0;

}  // namespace

// ---------------------------------------------------------------- RowCache

RowCache::RowCache(Tensor data, size_t budget_bytes, const std::string& spill_path) {
  require(data.defined() && data.ndim() >= 1, "RowCache: need a row-major tensor");
  rows_ = data.dim(0);
  row_shape_ = Shape(data.shape().begin() + 1, data.shape().end());
  row_elems_ = rows_ > 0 ? data.size() / rows_ : 0;
  size_t bytes = static_cast<size_t>(data.size()) * 4;
  if (bytes <= budget_bytes || spill_path.empty()) {
    ram_ = std::move(data);
    return;
  }
  path_ = spill_path + "/cache_" + std::to_string(spill_counter++) + ".raw";
  std::ofstream f(path_, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("RowCache: cannot open spill file " + path_);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(bytes));  // little-endian float32 payload
  if (!f) throw std::runtime_error("RowCache: spill write failed");
}

RowCache::~RowCache() {
  if (!path_.empty()) std::remove(path_.c_str());
}

RowCache::RowCache(RowCache&& o) noexcept { *this = std::move(o); }

RowCache& RowCache::operator=(RowCache&& o) noexcept {
  if (this != &o) {
    if (!path_.empty()) std::remove(path_.c_str());
    ram_ = std::move(o.ram_);
    path_ = std::move(o.path_);
    o.path_.clear();
    row_shape_ = std::move(o.row_shape_);
    rows_ = o.rows_;
    row_elems_ = o.row_elems_;
    o.rows_ = 0;
  }
  return *this;
}

Tensor RowCache::slice(int64_t at, int64_t count) const {
  require(at >= 0 && count >= 0 && at + count <= rows_, "RowCache::slice: range out of bounds");
  Shape s = row_shape_;
  s.insert(s.begin(), count);
  if (!spilled()) {
    Tensor out(s);
    std::copy(ram_.data() + at * row_elems_, ram_.data() + (at + count) * row_elems_, out.data());
    return out;
  }
  Tensor out(s);
  std::ifstream f(path_, std::ios::binary);
  if (!f) throw std::runtime_error("RowCache: cannot reopen spill file " + path_);
  f.seekg(at * row_elems_ * 4);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * row_elems_ * 4));
  if (!f) throw std::runtime_error("RowCache: spill read failed");
  return out;
}

Tensor RowCache::gather(std::span<const int> idx) const {
  if (!spilled()) return take_rows(ram_, idx);
  Shape s = row_shape_;
  s.insert(s.begin(), static_cast<int64_t>(idx.size()));
  Tensor out(s);
  std::ifstream f(path_, std::ios::binary);
  if (!f) throw std::runtime_error("RowCache: cannot reopen spill file " + path_);
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < rows_, "RowCache::gather: index out of range");
    f.seekg(static_cast<int64_t>(idx[i]) * row_elems_ * 4);
    f.read(reinterpret_cast<char*>(out.data() + static_cast<int64_t>(i) * row_elems_),
           static_cast<std::streamsize>(row_elems_ * 4));
    if (!f) throw std::runtime_error("RowCache: spill read failed");
  }
  return out;
}

// ---------------------------------------------------------------- config

void ReconConfig::validate() const {
  require(lambda_r >= 0.0f, "ReconConfig: lambda_r must be >= 0");
  require(drop_prob >= 0.0f && drop_prob <= 1.0f, "ReconConfig: drop_prob must lie in [0,1]");
  require(iterations > 0, "ReconConfig: iterations must be positive");
  require(batch_size > 0, "ReconConfig: batch_size must be positive");
  require(lr_scale > 0.0f && lr_round > 0.0f, "ReconConfig: learning rates must be positive");
  require(round_weight >= 0.0f, "ReconConfig: round_weight must be >= 0");
}

std::map<int, LayerBits> plan_bits(const ModelGraph& m, const BitPolicy& policy) {
  std::vector<int> ids = m.quantizable_layers();
  require(!ids.empty(), "plan_bits: model has no quantizable layers");
  std::map<int, LayerBits> plan;
  for (int id : ids) plan[id] = LayerBits{policy.weight_bits, policy.act_bits};
  if (policy.first_last_8bit) {
    plan[ids.front()] = LayerBits{8, 8};
    plan[ids.back()] = LayerBits{8, 8};
  }
  if (policy.extra_first_output_8bit && ids.size() >= 2) {
    plan[ids[1]].act_bits = 8;  // the first layer's output feeds the second layer's input
  }
  return plan;
}

void adam_step(Tensor& param, std::span<const float> grad, AdamState& state, float lr) {
  require(param.size() == static_cast<int64_t>(grad.size()), "adam_step: gradient shape mismatch");
  for (float g : grad) {
    if (!std::isfinite(g)) throw NonFiniteError("adam_step: non-finite gradient");
  }
  const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  size_t n = grad.size();
  if (state.m.size() != n) {
    state.m.assign(n, 0.0f);
    state.v.assign(n, 0.0f);
    state.t = 0;
  }
  state.t += 1;
  float c1 = 1.0f - std::pow(b1, static_cast<float>(state.t));
  float c2 = 1.0f - std::pow(b2, static_cast<float>(state.t));
  float* p = param.data();
  for (size_t i = 0; i < n; ++i) {
    state.m[i] = b1 * state.m[i] + (1.0f - b1) * grad[i];
    state.v[i] = b2 * state.v[i] + (1.0f - b2) * grad[i] * grad[i];
    float mhat = state.m[i] / c1;
    float vhat = state.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

Tensor random_drop_mix(const Tensor& a_q, const Tensor& a_fp, float p, Rng& rng) {
  require(p >= 0.0f && p <= 1.0f, "random_drop_mix: p must lie in [0,1]");
  if (p == 0.0f) return a_q;
  Tensor mask(a_q.shape());
  for (auto& v : mask.values_mut()) v = rng.uniform() < p ? 1.0f : 0.0f;
  return mix_by_mask(a_q, a_fp, mask);
}

// ---------------------------------------------------------------- live state

namespace {

/// Live (learnable) quantizer state for one weighted layer.
struct LiveLayer {
  int flat_id = 0;
  QuantParams weight_qp;  // per-channel scales, fixed during optimization
  RoundingVars rounding;  // theta is the learnable tensor
  AdamState theta_opt;
  Tensor act_scale;  // [1], learnable
  int32_t act_zp = 0;
  int act_bits = 8;
  AdamState scale_opt;
};

/// Forward hook during optimization: soft rounding on weights, learnable
/// scales on activations, optional drop mixing on the regularization path.
struct LiveHook : LayerHook {
  std::map<int, LiveLayer>* live;
  float drop_prob = 0.0f;  // > 0 only on the regularization path
  Rng* rng = nullptr;

  Tensor transform_input(int flat_id, const Tensor& x) override {
    auto it = live->find(flat_id);
    if (it == live->end()) return x;
    LiveLayer& ll = it->second;
    Tensor q = fake_quantize_learnable(x, ll.act_scale, ll.act_zp, ll.act_bits);
    if (drop_prob > 0.0f) q = random_drop_mix(q, x, drop_prob, *rng);
    return q;
  }

  Tensor transform_weight(int flat_id, const Layer& layer) override {
    auto it = live->find(flat_id);
    if (it == live->end()) return layer.weight;
    LiveLayer& ll = it->second;
    return adaround_fake_quantize(layer.weight, ll.weight_qp, ll.rounding, RoundMode::Soft);
  }
};

/// Logits of the network resumed after `unit` (identity for the head).
Tensor resume_logits(const ModelGraph& m, int unit, const Tensor& a) {
  return unit + 1 < m.num_units() ? forward_units(m, unit + 1, a) : a;
}

QuantParams act_params_from_range(float lo, float hi, int bits) {
  QuantParams p;
  p.bits = bits;
  double levels = static_cast<double>((1 << bits) - 1);
  if (hi > lo) {
    p.scales = {static_cast<float>((static_cast<double>(hi) - lo) / levels)};
    double z = std::round(-static_cast<double>(lo) * levels /
                          (static_cast<double>(hi) - static_cast<double>(lo)));
    p.zero_points = {static_cast<int32_t>(std::clamp(z, 0.0, levels))};
  } else {
    log_warn("activation range is degenerate, falling back to eps scale");
    p.scales = {1e-8f};
    p.zero_points = {0};
  }
  return p;
}

/// Initializes the unit's live quantizers: per-channel min-max weight
/// params with nearest-rounding theta, then min-max activation scales from
/// the per-site input ranges observed under the soft-quantized weights.
std::map<int, LiveLayer> init_live_layers(const ModelGraph& m, int unit, const RowCache& input_q,
                                          int chunk, const std::map<int, LayerBits>& bits) {
  std::map<int, LiveLayer> live;
  auto layers = m.unit_layers(unit);
  int base = m.unit_flat_base(unit);
  for (size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].weighted()) continue;
    int id = base + static_cast<int>(i);
    LiveLayer ll;
    ll.flat_id = id;
    auto bit_it = bits.find(id);
    require(bit_it != bits.end(), "reconstruct: no bit plan for layer " + std::to_string(id));
    ll.weight_qp = compute_range_scale(layers[i].weight, bit_it->second.weight_bits, 0,
                                       /*eps_fallback=*/true);
    ll.rounding = init_rounding_vars(layers[i].weight, ll.weight_qp);
    ll.act_bits = bit_it->second.act_bits;
    live.emplace(id, std::move(ll));
  }

  struct RangeHook : LayerHook {
    std::map<int, LiveLayer>* live;
    std::map<int, std::pair<float, float>> ranges;
    Tensor transform_input(int flat_id, const Tensor& x) override {
      if (live->count(flat_id)) {
        auto [it, fresh] = ranges.try_emplace(flat_id, x.at(0), x.at(0));
        for (float v : x.values()) {
          it->second.first = std::min(it->second.first, v);
          it->second.second = std::max(it->second.second, v);
        }
      }
      return x;
    }
    Tensor transform_weight(int flat_id, const Layer& layer) override {
      auto it = live->find(flat_id);
      if (it == live->end()) return layer.weight;
      return adaround_fake_quantize(layer.weight, it->second.weight_qp, it->second.rounding,
                                    RoundMode::Soft);
    }
  };
  RangeHook rh;
  rh.live = &live;
  for (int64_t at = 0; at < input_q.rows(); at += chunk) {
    int64_t take = std::min<int64_t>(chunk, input_q.rows() - at);
    forward_unit(m, unit, input_q.slice(at, take), &rh);
  }

  for (auto& [id, ll] : live) {
    auto r = rh.ranges.at(id);
    QuantParams p = act_params_from_range(r.first, r.second, ll.act_bits);
    ll.act_scale = Tensor({1}, {p.scales[0]});
    ll.act_zp = p.zero_points[0];
  }
  return live;
}

std::map<int, LayerQuant> finalize_live(const std::map<int, LiveLayer>& live) {
  std::map<int, LayerQuant> out;
  for (const auto& [id, ll] : live) {
    LayerQuant lq;
    WeightQuant wq;
    wq.qp = ll.weight_qp;
    Tensor h = rectified_sigmoid(ll.rounding);
    Tensor mask(h.shape());
    for (int64_t i = 0; i < h.size(); ++i) mask.data()[i] = h.at(i) >= 0.5f ? 1.0f : 0.0f;
    wq.round_mask = std::move(mask);
    lq.weight = std::move(wq);
    ActQuant aq;
    aq.qp.bits = ll.act_bits;
    aq.qp.scales = {ll.act_scale.item()};
    aq.qp.zero_points = {ll.act_zp};
    lq.act = std::move(aq);
    out.emplace(id, std::move(lq));
  }
  return out;
}

}  // namespace

BlockState reconstruct_unit(const ModelGraph& m, int unit, const ReconInputs& inputs,
                            const ReconConfig& cfg, const QuantOptions& opts, Rng& rng,
                            const LogSink& progress) {
  cfg.validate();
  require(opts.use_pd || opts.use_reg,
          "reconstruct: at least one of the PD and regularization terms must be enabled");
  require(!opts.use_pd || (inputs.o_fp_probs != nullptr && inputs.o_fp_probs->defined()),
          "reconstruct: PD mode requires cached FP predictions");
  require(inputs.input_q.defined() && inputs.target_out.defined(),
          "reconstruct: missing cached inputs/targets");
  int64_t n = inputs.input_q.rows();
  require(inputs.target_out.rows() == n, "reconstruct: cache row mismatch");

  std::map<int, LayerBits> bits = plan_bits(m, cfg.bits);
  std::map<int, LiveLayer> live = init_live_layers(m, unit, inputs.input_q, cfg.batch_size, bits);

  BlockState state;
  state.unit = unit;
  if (live.empty()) return state;

  for (auto& [id, ll] : live) {
    ll.rounding.theta.set_requires_grad(true);
    ll.act_scale.set_requires_grad(true);
  }

  const int total = cfg.iterations;
  const int batch = static_cast<int>(std::min<int64_t>(cfg.batch_size, n));
  std::vector<double> window;
  std::vector<double> smoothed;
  double pd_v = 0.0, reg_v = 0.0, round_v = 0.0;

  for (int iter = 0; iter < total; ++iter) {
    std::vector<int> idx = rng.sample_indices(static_cast<int>(n), batch);
    Tensor x_q = inputs.input_q.gather(idx);
    Tensor target = inputs.target_out.gather(idx);

    float beta = cfg.beta.beta_at(iter, total);
    bool round_on = cfg.beta.reg_active(iter, total) && cfg.round_weight > 0.0f;
    for (auto& [id, ll] : live) ll.rounding.beta = beta;

    double total_v = 0.0;
    try {
      GradTape tape;
      Tensor loss;
      Tensor soft_out;  // unit output without drop, shared by PD and no-drop reg

      if (opts.use_pd) {
        LiveHook hook;
        hook.live = &live;
        soft_out = forward_unit(m, unit, x_q, &hook);
        Tensor logits = resume_logits(m, unit, soft_out);
        Tensor o_fp = inputs.o_fp_probs->gather(idx);
        Tensor pd = pd_loss(cfg.pd_metric, o_fp, logits, cfg.pd_temperature);
        pd_v = pd.item();
        loss = pd;
      }
      if (opts.use_reg) {
        Tensor reg_out;
        if (opts.use_drop && cfg.drop_prob > 0.0f) {
          LiveHook hook;
          hook.live = &live;
          hook.drop_prob = cfg.drop_prob;
          hook.rng = &rng;
          reg_out = forward_unit(m, unit, x_q, &hook);
        } else if (soft_out.defined()) {
          reg_out = soft_out;
        } else {
          LiveHook hook;
          hook.live = &live;
          reg_out = forward_unit(m, unit, x_q, &hook);
        }
        Tensor reg = mul(mse_loss(target, reg_out), cfg.lambda_r);
        reg_v = reg.item();
        loss = loss.defined() ? add(loss, reg) : reg;
      }
      if (round_on) {
        Tensor rr;
        for (auto& [id, ll] : live) {
          Tensor r = rounding_regularizer(ll.rounding);
          rr = rr.defined() ? add(rr, r) : r;
        }
        rr = mul(rr, cfg.round_weight);
        round_v = rr.item();
        loss = add(loss, rr);
      } else {
        round_v = 0.0;
      }

      total_v = loss.item();
      tape.backward(loss);

      for (auto& [id, ll] : live) {
        if (ll.rounding.theta.has_grad()) {
          adam_step(ll.rounding.theta, ll.rounding.theta.grad(), ll.theta_opt, cfg.lr_round);
          ll.rounding.theta.zero_grad();
        }
        if (ll.act_scale.has_grad()) {
          adam_step(ll.act_scale, ll.act_scale.grad(), ll.scale_opt, cfg.lr_scale);
          if (ll.act_scale.data()[0] < 1e-8f) ll.act_scale.data()[0] = 1e-8f;
          ll.act_scale.zero_grad();
        }
      }
    } catch (const NonFiniteError& e) {
      std::ostringstream snap;
      snap << "reconstruction diverged at unit " << unit << " iteration " << iter
           << " (pd=" << pd_v << " reg=" << reg_v << " round=" << round_v << "): " << e.what();
      throw ReconDivergenceError(unit, iter, snap.str());
    }

    window.push_back(total_v);
    if (static_cast<int>(window.size()) == 100) {
      double avg = 0.0;
      for (double v : window) avg += v;
      smoothed.push_back(avg / static_cast<double>(window.size()));
      window.clear();
    }

    if (progress && (iter % cfg.log_every == 0 || iter == total - 1)) {
      char line[256];
      std::snprintf(line, sizeof(line),
                    "{\"unit\":%d,\"iter\":%d,\"pd\":%.6g,\"reg\":%.6g,\"round\":%.6g,"
                    "\"beta\":%.4g,\"total\":%.6g}",
                    unit, iter, pd_v, reg_v, round_v, beta, total_v);
      progress(line);
    }
  }

  // Monotone-tooling check: the smoothed objective over the final half of
  // the run should not climb back above its running minimum.
  if (smoothed.size() >= 4) {
    size_t half = smoothed.size() / 2;
    double run_min = smoothed[half];
    for (size_t i = half; i < smoothed.size(); ++i) {
      run_min = std::min(run_min, smoothed[i]);
      if (smoothed[i] > run_min * 1.10 + 1e-9) {
        state.divergence_flagged = true;
        log_warn("unit " + std::to_string(unit) +
                 ": smoothed objective rose over the final half of the run");
        break;
      }
    }
  }

  double sat_sum = 0.0;
  int64_t sat_n = 0;
  for (auto& [id, ll] : live) {
    ll.rounding.theta.set_requires_grad(false);
    ll.act_scale.set_requires_grad(false);
    sat_sum += rounding_saturation(ll.rounding) * static_cast<double>(ll.rounding.theta.size());
    sat_n += ll.rounding.theta.size();
  }
  state.saturation = sat_n > 0 ? sat_sum / static_cast<double>(sat_n) : 1.0;
  if (state.saturation < 0.99) {
    log_warn("unit " + std::to_string(unit) + ": hard rounding requested with only " +
             std::to_string(state.saturation * 100.0) + "% of rounding variables saturated");
  }

  state.finalized = finalize_live(live);
  state.final_pd = pd_v;
  state.final_reg = reg_v;
  state.final_round = round_v;
  state.iterations_run = total;
  return state;
}

// ---------------------------------------------------------------- pipeline

namespace {

const ModelQuant& quant_or_empty(const ModelGraph& m) {
  static const ModelQuant empty;
  return m.quant.has_value() ? *m.quant : empty;
}

size_t budget_bytes(const QuantOptions& opts) {
  return opts.scratch_dir.empty() ? static_cast<size_t>(-1) : opts.cache_budget_mb * (1 << 20);
}

/// Streams `src` rows through fn(chunk) and assembles the outputs into a
/// RowCache under the configured budget.
RowCache map_rows(const RowCache& src, int64_t chunk, const QuantOptions& opts,
                  const std::function<Tensor(const Tensor&)>& fn) {
  Tensor out;
  int64_t at = 0;
  int64_t row_elems = 0;
  while (at < src.rows()) {
    int64_t take = std::min<int64_t>(chunk, src.rows() - at);
    Tensor part = fn(src.slice(at, take));
    if (!out.defined()) {
      Shape s = part.shape();
      row_elems = part.size() / take;
      s[0] = src.rows();
      out = Tensor(s);
    }
    std::copy(part.values().begin(), part.values().end(), out.data() + at * row_elems);
    at += take;
  }
  return RowCache(std::move(out), budget_bytes(opts), opts.scratch_dir);
}

/// FP targets for one unit: optionally distribution-corrects the FP unit
/// input chunk-by-chunk, then runs the FP unit forward.
RowCache reg_targets_for_unit(const ModelGraph& m, int unit, const RowCache& input_fp,
                              const ReconConfig& cfg, const QuantOptions& opts) {
  return map_rows(input_fp, cfg.batch_size, opts, [&](const Tensor& part) {
    Tensor src = part;
    if (opts.use_dc) {
      CorrectionState st = make_correction_state(part, opts.dc_lambda_c, opts.dc_lr, opts.dc_steps);
      src = correct_distribution(m, unit, std::move(st)).corrected;
    }
    return forward_unit(m, unit, src);
  });
}

}  // namespace

BlockState reconstruct_block(const ModelGraph& m, int block_index, const Tensor& calib_x,
                             const ReconConfig& cfg, const QuantOptions& opts, uint64_t seed,
                             const LogSink& progress) {
  require(block_index >= 0 && block_index < m.num_blocks(),
          "reconstruct_block: block index out of range");
  int unit = 1 + block_index;

  size_t budget = budget_bytes(opts);
  RowCache input_q(calib_x.clone(), budget, opts.scratch_dir);
  RowCache input_fp(calib_x.clone(), budget, opts.scratch_dir);
  StoredQuantHook prefix(quant_or_empty(m));
  for (int u = 0; u < unit; ++u) {
    input_q = map_rows(input_q, cfg.batch_size, opts,
                       [&](const Tensor& part) { return forward_unit(m, u, part, &prefix); });
    input_fp = map_rows(input_fp, cfg.batch_size, opts,
                        [&](const Tensor& part) { return forward_unit(m, u, part); });
  }

  ReconInputs inputs;
  inputs.target_out = reg_targets_for_unit(m, unit, input_fp, cfg, opts);
  inputs.input_q = std::move(input_q);
  RowCache o_fp;
  if (opts.use_pd) {
    o_fp = RowCache(forward_fp(m, calib_x, cfg.pd_temperature).probs, budget, opts.scratch_dir);
    inputs.o_fp_probs = &o_fp;
  }

  Rng rng(seed);
  return reconstruct_unit(m, unit, inputs, cfg, opts, rng, progress);
}

QuantizeResult quantize_model(const ModelGraph& fp, const Tensor& calib_x, const ReconConfig& cfg,
                              const QuantOptions& opts, uint64_t seed, const LogSink& progress) {
  cfg.validate();
  fp.validate();
  if (opts.use_dc) {
    bool any_bn = false;
    for (int u = 0; u < fp.num_units(); ++u) {
      for (const Layer& l : fp.unit_layers(u)) any_bn = any_bn || l.kind == LayerKind::BatchNorm;
    }
    require(any_bn, "quantize_model: distribution correction requires batchnorm layers");
  }

  Rng master(seed);
  QuantizeResult result;
  result.model = fp;
  result.model.quant = ModelQuant{};

  size_t budget = budget_bytes(opts);
  RowCache o_fp;
  if (opts.use_pd) {
    RowCache calib_view(calib_x.clone(), budget, opts.scratch_dir);
    o_fp = map_rows(calib_view, cfg.batch_size, opts, [&](const Tensor& part) {
      return make_prediction(forward_units(fp, 0, part), cfg.pd_temperature).probs;
    });
  }

  RowCache input_q(calib_x.clone(), budget, opts.scratch_dir);
  RowCache input_fp(calib_x.clone(), budget, opts.scratch_dir);
  for (int unit = 0; unit < fp.num_units(); ++unit) {
    ReconInputs inputs;
    inputs.target_out = reg_targets_for_unit(fp, unit, input_fp, cfg, opts);
    inputs.input_q = std::move(input_q);
    if (opts.use_pd) inputs.o_fp_probs = &o_fp;

    Rng unit_rng = master.fork(static_cast<uint64_t>(unit) + 1);
    BlockState bs = reconstruct_unit(fp, unit, inputs, cfg, opts, unit_rng, progress);
    result.divergence_flagged = result.divergence_flagged || bs.divergence_flagged;

    for (auto& [id, lq] : bs.finalized) result.model.quant->layers[id] = lq;

    // Advance the cached activations: quantized chain under the hardened
    // quantizers, FP chain from the original inputs.
    StoredQuantHook hook(*result.model.quant);
    input_q = map_rows(inputs.input_q, cfg.batch_size, opts,
                       [&](const Tensor& part) { return forward_unit(fp, unit, part, &hook); });
    input_fp = map_rows(input_fp, cfg.batch_size, opts,
                        [&](const Tensor& part) { return forward_unit(fp, unit, part); });
    result.units.push_back(std::move(bs));
  }

  result.model.validate();
  return result;
}

}  // namespace pdq
