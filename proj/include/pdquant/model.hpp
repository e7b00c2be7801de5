#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pdquant/metrics.hpp"
#include "pdquant/quantizer.hpp"
#include "pdquant/tensor.hpp"

namespace pdq {

enum class LayerKind { Conv, Linear, BatchNorm, Relu, ResidualAdd, AvgPool, SoftmaxHead };

const char* layer_kind_name(LayerKind k);
LayerKind parse_layer_kind(const std::string& name);

/// One network layer. Which fields are meaningful depends on kind:
/// conv carries weight [Cout,Cin,kh,kw] (+bias, stride, pad), linear and
/// softmax_head carry weight [out,in] (+bias), batchnorm carries per-channel
/// gamma/beta and running mean/var.
struct Layer {
  LayerKind kind = LayerKind::Relu;
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int pad = 0;
  Tensor bn_gamma, bn_beta, bn_mean, bn_var;
  float bn_eps = 1e-5f;

  bool weighted() const {
    return kind == LayerKind::Conv || kind == LayerKind::Linear || kind == LayerKind::SoftmaxHead;
  }
};

Layer make_conv(Tensor weight, Tensor bias, int stride, int pad);
Layer make_linear(Tensor weight, Tensor bias);
Layer make_softmax_head(Tensor weight, Tensor bias);
Layer make_batchnorm(int channels, float eps = 1e-5f);
Layer make_relu();
Layer make_residual_add();
Layer make_avgpool();

/// A reconstruction unit: an ordered run of layers, optionally closed by a
/// residual add of the block input.
struct Block {
  std::vector<Layer> layers;
  bool residual = false;
  int index = 0;
};

// ----- quantizer state attached to a model -----

struct ActQuant {
  QuantParams qp;  // per-tensor
};

struct WeightQuant {
  QuantParams qp;         // per-output-channel
  Tensor round_mask;      // 0 = round down, 1 = round up; shaped like the weight
};

struct LayerQuant {
  std::optional<ActQuant> act;      // applied to the layer input
  std::optional<WeightQuant> weight;
};

struct ModelQuant {
  std::map<int, LayerQuant> layers;  // keyed by flat layer id
};

/// Hardened weight: S * (clamp(floor(w/S) + mask + Z, q_min, q_max) - Z).
Tensor apply_hard_weight_quant(const Tensor& w, const WeightQuant& wq);

/// A small feed-forward classifier: stem layers, a linear chain of blocks,
/// and a head ending in a softmax_head layer that emits logits.
struct ModelGraph {
  std::vector<Layer> stem;
  std::vector<Block> blocks;
  std::vector<Layer> head;
  Shape input_shape;  // per-sample, without the batch dimension
  int num_classes = 0;
  std::optional<ModelQuant> quant;

  int num_blocks() const { return static_cast<int>(blocks.size()); }
  /// stem, blocks and head count as units 0, 1..n, n+1.
  int num_units() const { return num_blocks() + 2; }
  std::span<const Layer> unit_layers(int unit) const;
  std::span<Layer> unit_layers_mut(int unit);
  bool unit_residual(int unit) const;
  /// Flat id of the first layer of a unit; layers are numbered stem first,
  /// then blocks in order, then head.
  int unit_flat_base(int unit) const;
  int num_layers() const;
  const Layer& layer_at(int flat_id) const;

  /// Flat ids of conv/linear/softmax_head layers, in execution order.
  std::vector<int> quantizable_layers() const;

  /// Shape and wiring checks; throws on inconsistency.
  void validate() const;
};

/// Per-layer interception points for instrumented forward passes.
struct LayerHook {
  virtual ~LayerHook() = default;
  /// Replace the input of a weighted layer (activation quantization, drop).
  virtual Tensor transform_input(int /*flat_id*/, const Tensor& x) { return x; }
  /// Replace the weight of a weighted layer (weight quantization).
  virtual Tensor transform_weight(int /*flat_id*/, const Layer& layer) { return layer.weight; }
};

/// Applies the model's stored (hard) quantizers.
struct StoredQuantHook : LayerHook {
  const ModelQuant* q;
  explicit StoredQuantHook(const ModelQuant& mq) : q(&mq) {}
  Tensor transform_input(int flat_id, const Tensor& x) override;
  Tensor transform_weight(int flat_id, const Layer& layer) override;
};

/// Applies one non-residual layer to x with an explicit weight (which may
/// be a quantized stand-in for layer.weight).
Tensor layer_apply(const Layer& layer, const Tensor& x, const Tensor& weight);
inline Tensor layer_apply(const Layer& layer, const Tensor& x) {
  return layer_apply(layer, x, layer.weight);
}

/// Runs one unit. `x` is the unit input; the residual add (when present)
/// adds `x` back in.
Tensor forward_unit(const ModelGraph& m, int unit, const Tensor& x, LayerHook* hook = nullptr);

/// Runs units from_unit..end and returns logits.
Tensor forward_units(const ModelGraph& m, int from_unit, const Tensor& x, LayerHook* hook = nullptr);

/// Full-precision forward (running BN statistics, quantizers ignored).
Prediction forward_fp(const ModelGraph& m, const Tensor& x, float temperature = 1.0f);

/// Resumes the FP network from a block boundary: runs blocks >= from_block
/// and the head on activation `a`. from_block == num_blocks() runs the head
/// only.
Prediction forward_partial(const ModelGraph& m, int from_block, const Tensor& a,
                           float temperature = 1.0f);

/// Forward applying the model's stored quantizers.
Prediction forward_quant(const ModelGraph& m, const Tensor& x, float temperature = 1.0f);

// ----- serialization -----

/// Writes the model file: a text magic/version line, a structured-text
/// topology header, a raw little-endian float32 tensor payload in manifest
/// order, and a trailing CRC-32 line. load(save(m)) is bit-identical.
void save_model(const ModelGraph& m, const std::string& path);
ModelGraph load_model(const std::string& path);

}  // namespace pdq
