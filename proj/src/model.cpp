#include "pdquant/model.hpp"

#include <algorithm>
#include <cmath>

#include "pdquant/container.hpp"

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Linear: return "linear";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::ResidualAdd: return "residual_add";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::SoftmaxHead: return "softmax_head";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::Linear, LayerKind::BatchNorm, LayerKind::Relu,
                      LayerKind::ResidualAdd, LayerKind::AvgPool, LayerKind::SoftmaxHead}) {
    if (name == layer_kind_name(k)) return k;
  }
  throw std::invalid_argument("unknown layer kind: " + name);
}

Layer make_conv(Tensor weight, Tensor bias, int stride, int pad) {
  require(weight.ndim() == 4, "make_conv: weight must be [Cout,Cin,kh,kw]");
  Layer l;
  l.kind = LayerKind::Conv;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.stride = stride;
  l.pad = pad;
  return l;
}

Layer make_linear(Tensor weight, Tensor bias) {
  require(weight.ndim() == 2, "make_linear: weight must be [out,in]");
  Layer l;
  l.kind = LayerKind::Linear;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

Layer make_softmax_head(Tensor weight, Tensor bias) {
  Layer l = make_linear(std::move(weight), std::move(bias));
  l.kind = LayerKind::SoftmaxHead;
  return l;
}

Layer make_batchnorm(int channels, float eps) {
  Layer l;
  l.kind = LayerKind::BatchNorm;
  l.bn_gamma = Tensor::ones({channels});
  l.bn_beta = Tensor::zeros({channels});
  l.bn_mean = Tensor::zeros({channels});
  l.bn_var = Tensor::ones({channels});
  l.bn_eps = eps;
  return l;
}

Layer make_relu() { return Layer{}; }

Layer make_residual_add() {
  Layer l;
  l.kind = LayerKind::ResidualAdd;
  return l;
}

Layer make_avgpool() {
  Layer l;
  l.kind = LayerKind::AvgPool;
  return l;
}

Tensor apply_hard_weight_quant(const Tensor& w, const WeightQuant& wq) {
  wq.qp.validate();
  require(wq.round_mask.shape() == w.shape(), "apply_hard_weight_quant: mask shape mismatch");
  const float qmax = static_cast<float>(wq.qp.q_max());
  int64_t stride = wq.qp.per_channel() ? w.size() / w.dim(0) : w.size();
  Tensor out(w.shape());
  const float* pw = w.data();
  const float* pm = wq.round_mask.data();
  float* po = out.data();
  for (int64_t i = 0; i < w.size(); ++i) {
    size_t g = wq.qp.per_channel() ? static_cast<size_t>(i / stride) : 0;
    float s = wq.qp.scales[g];
    float z = static_cast<float>(wq.qp.zero_points[g]);
    float q = std::floor(pw[i] / s) + (pm[i] != 0.0f ? 1.0f : 0.0f) + z;
    q = std::clamp(q, 0.0f, qmax);
    po[i] = s * (q - z);
  }
  return out;
}

// ---------------------------------------------------------------- layout

std::span<const Layer> ModelGraph::unit_layers(int unit) const {
  require(unit >= 0 && unit < num_units(), "unit index out of range");
  if (unit == 0) return stem;
  if (unit == num_units() - 1) return head;
  return blocks[static_cast<size_t>(unit - 1)].layers;
}

std::span<Layer> ModelGraph::unit_layers_mut(int unit) {
  require(unit >= 0 && unit < num_units(), "unit index out of range");
  if (unit == 0) return stem;
  if (unit == num_units() - 1) return head;
  return blocks[static_cast<size_t>(unit - 1)].layers;
}

bool ModelGraph::unit_residual(int unit) const {
  if (unit <= 0 || unit >= num_units() - 1) return false;
  return blocks[static_cast<size_t>(unit - 1)].residual;
}

int ModelGraph::unit_flat_base(int unit) const {
  require(unit >= 0 && unit < num_units(), "unit index out of range");
  int base = 0;
  for (int u = 0; u < unit; ++u) base += static_cast<int>(unit_layers(u).size());
  return base;
}

int ModelGraph::num_layers() const {
  return unit_flat_base(num_units() - 1) + static_cast<int>(head.size());
}

const Layer& ModelGraph::layer_at(int flat_id) const {
  require(flat_id >= 0 && flat_id < num_layers(), "flat layer id out of range");
  for (int u = 0; u < num_units(); ++u) {
    auto layers = unit_layers(u);
    int base = unit_flat_base(u);
    if (flat_id < base + static_cast<int>(layers.size())) {
      return layers[static_cast<size_t>(flat_id - base)];
    }
  }
  throw std::logic_error("layer_at: unreachable");
}

std::vector<int> ModelGraph::quantizable_layers() const {
  std::vector<int> ids;
  for (int u = 0; u < num_units(); ++u) {
    auto layers = unit_layers(u);
    int base = unit_flat_base(u);
    for (size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].weighted()) ids.push_back(base + static_cast<int>(i));
    }
  }
  return ids;
}

namespace {

/// Static shape walk used by validate(); batch extent is symbolic (1).
Shape infer_layer_output(const Layer& l, const Shape& in, const std::string& where) {
  switch (l.kind) {
    case LayerKind::Conv: {
      require(in.size() == 4, where + ": conv expects 4-D input, got " + shape_str(in));
      require(l.weight.dim(1) == in[1], where + ": conv in-channels " +
                                            std::to_string(l.weight.dim(1)) +
                                            " do not match input channels " + std::to_string(in[1]));
      int64_t kh = l.weight.dim(2), kw = l.weight.dim(3);
      require(kh <= in[2] + 2 * l.pad && kw <= in[3] + 2 * l.pad, where + ": kernel does not fit");
      require(l.stride >= 1 && l.pad >= 0, where + ": invalid stride/pad");
      if (l.bias.defined()) require(l.bias.size() == l.weight.dim(0), where + ": bias length");
      return {in[0], l.weight.dim(0), (in[2] + 2 * l.pad - kh) / l.stride + 1,
              (in[3] + 2 * l.pad - kw) / l.stride + 1};
    }
    case LayerKind::Linear:
    case LayerKind::SoftmaxHead: {
      require(in.size() == 2, where + ": linear expects 2-D input, got " + shape_str(in));
      require(l.weight.dim(1) == in[1], where + ": linear in-features " +
                                            std::to_string(l.weight.dim(1)) +
                                            " do not match input features " + std::to_string(in[1]));
      if (l.bias.defined()) require(l.bias.size() == l.weight.dim(0), where + ": bias length");
      return {in[0], l.weight.dim(0)};
    }
    case LayerKind::BatchNorm: {
      require(in.size() == 2 || in.size() == 4, where + ": batchnorm expects 2-D or 4-D input");
      int64_t c = in[1];
      require(l.bn_gamma.size() == c && l.bn_beta.size() == c && l.bn_mean.size() == c &&
                  l.bn_var.size() == c,
              where + ": batchnorm parameter length does not match " + std::to_string(c) +
                  " channels");
      for (float v : l.bn_var.values())
        require(v > 0.0f, where + ": batchnorm running_var must be strictly positive");
      return in;
    }
    case LayerKind::Relu:
      return in;
    case LayerKind::ResidualAdd:
      return in;  // checked against the block input by the caller
    case LayerKind::AvgPool:
      require(in.size() == 4, where + ": avgpool expects 4-D input");
      return {in[0], in[1]};
  }
  throw std::logic_error("infer_layer_output: unreachable");
}

}  // namespace

void ModelGraph::validate() const {
  require(num_classes >= 2, "model: num_classes must be >= 2");
  require(!input_shape.empty(), "model: input_shape missing");
  Shape cur = input_shape;
  cur.insert(cur.begin(), 1);  // symbolic batch
  for (int u = 0; u < num_units(); ++u) {
    Shape unit_in = cur;
    auto layers = unit_layers(u);
    bool has_res = false;
    std::string uname = u == 0 ? "stem" : (u == num_units() - 1 ? "head" : "block" + std::to_string(u - 1));
    for (size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      std::string where = uname + "." + std::to_string(i);
      if (l.kind == LayerKind::ResidualAdd) {
        require(u > 0 && u < num_units() - 1, where + ": residual add outside a block");
        require(cur == unit_in, where + ": residual add shape " + shape_str(cur) +
                                    " does not match block input " + shape_str(unit_in));
        has_res = true;
      }
      cur = infer_layer_output(l, cur, where);
    }
    if (u > 0 && u < num_units() - 1) {
      require(blocks[static_cast<size_t>(u - 1)].residual == has_res,
              uname + ": residual flag does not match layer list");
      require(blocks[static_cast<size_t>(u - 1)].index == u - 1, uname + ": block index mismatch");
    }
  }
  require(cur.size() == 2 && cur[1] == num_classes,
          "model: forward output " + shape_str(cur) + " does not produce " +
              std::to_string(num_classes) + " logits");
  require(!head.empty() && head.back().kind == LayerKind::SoftmaxHead,
          "model: head must end in a softmax_head layer");
  if (quant.has_value()) {
    for (const auto& [id, lq] : quant->layers) {
      require(id >= 0 && id < num_layers() && layer_at(id).weighted(),
              "model: quantizer attached to non-weighted layer " + std::to_string(id));
      if (lq.act) lq.act->qp.validate();
      if (lq.weight) {
        lq.weight->qp.validate();
        require(lq.weight->round_mask.shape() == layer_at(id).weight.shape(),
                "model: rounding mask shape mismatch at layer " + std::to_string(id));
      }
    }
  }
}

// ---------------------------------------------------------------- forward

Tensor StoredQuantHook::transform_input(int flat_id, const Tensor& x) {
  auto it = q->layers.find(flat_id);
  if (it == q->layers.end() || !it->second.act) return x;
  return fake_quantize(x, it->second.act->qp);
}

Tensor StoredQuantHook::transform_weight(int flat_id, const Layer& layer) {
  auto it = q->layers.find(flat_id);
  if (it == q->layers.end() || !it->second.weight) return layer.weight;
  return apply_hard_weight_quant(layer.weight, *it->second.weight);
}

Tensor layer_apply(const Layer& l, const Tensor& x, const Tensor& weight) {
  switch (l.kind) {
    case LayerKind::Conv: {
      Tensor y = conv2d(x, weight, l.stride, l.pad);
      return l.bias.defined() ? add_channel_bias(y, l.bias) : y;
    }
    case LayerKind::Linear:
    case LayerKind::SoftmaxHead: {
      Tensor y = matmul(x, transpose(weight));
      return l.bias.defined() ? add_row_bias(y, l.bias) : y;
    }
    case LayerKind::BatchNorm:
      return batchnorm_infer(x, l.bn_gamma, l.bn_beta, l.bn_mean, l.bn_var, l.bn_eps);
    case LayerKind::Relu:
      return relu(x);
    case LayerKind::AvgPool:
      return avgpool_global(x);
    case LayerKind::ResidualAdd:
      throw std::logic_error("layer_apply: residual add is handled by the unit runner");
  }
  throw std::logic_error("layer_apply: unreachable");
}

Tensor forward_unit(const ModelGraph& m, int unit, const Tensor& x, LayerHook* hook) {
  auto layers = m.unit_layers(unit);
  int base = m.unit_flat_base(unit);
  Tensor cur = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.kind == LayerKind::ResidualAdd) {
      cur = add(cur, x);
      continue;
    }
    if (l.weighted() && hook != nullptr) {
      int flat = base + static_cast<int>(i);
      Tensor in = hook->transform_input(flat, cur);
      Tensor w = hook->transform_weight(flat, l);
      cur = layer_apply(l, in, w);
    } else {
      cur = layer_apply(l, cur, l.weight);
    }
  }
  return cur;
}

Tensor forward_units(const ModelGraph& m, int from_unit, const Tensor& x, LayerHook* hook) {
  require(from_unit >= 0 && from_unit < m.num_units(), "forward_units: unit index out of range");
  Tensor cur = x;
  for (int u = from_unit; u < m.num_units(); ++u) cur = forward_unit(m, u, cur, hook);
  return cur;
}

namespace {

void require_batch_shape(const ModelGraph& m, const Tensor& x) {
  Shape expect = m.input_shape;
  expect.insert(expect.begin(), x.ndim() >= 1 ? x.dim(0) : 0);
  require(x.shape() == expect, "forward: input shape " + shape_str(x.shape()) +
                                   " does not match model input " + shape_str(expect));
}

}  // namespace

Prediction forward_fp(const ModelGraph& m, const Tensor& x, float temperature) {
  require_batch_shape(m, x);
  return make_prediction(forward_units(m, 0, x), temperature);
}

Prediction forward_partial(const ModelGraph& m, int from_block, const Tensor& a,
                           float temperature) {
  require(from_block >= 0 && from_block <= m.num_blocks(),
          "forward_partial: block index out of range");
  return make_prediction(forward_units(m, 1 + from_block, a), temperature);
}

Prediction forward_quant(const ModelGraph& m, const Tensor& x, float temperature) {
  require_batch_shape(m, x);
  if (!m.quant.has_value()) return forward_fp(m, x, temperature);
  StoredQuantHook hook(*m.quant);
  return make_prediction(forward_units(m, 0, x, &hook), temperature);
}

// ---------------------------------------------------------------- serialization

namespace {

using nlohmann::json;

json layer_to_json(const Layer& l) {
  json j;
  j["kind"] = layer_kind_name(l.kind);
  switch (l.kind) {
    case LayerKind::Conv:
      j["out"] = l.weight.dim(0);
      j["in"] = l.weight.dim(1);
      j["kh"] = l.weight.dim(2);
      j["kw"] = l.weight.dim(3);
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      j["bias"] = l.bias.defined();
      break;
    case LayerKind::Linear:
    case LayerKind::SoftmaxHead:
      j["out"] = l.weight.dim(0);
      j["in"] = l.weight.dim(1);
      j["bias"] = l.bias.defined();
      break;
    case LayerKind::BatchNorm:
      j["ch"] = l.bn_gamma.size();
      j["eps"] = l.bn_eps;
      break;
    default:
      break;
  }
  return j;
}

Layer layer_from_json(const json& j) {
  Layer l;
  l.kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (l.kind) {
    case LayerKind::Conv:
      l.stride = j.at("stride").get<int>();
      l.pad = j.at("pad").get<int>();
      break;
    case LayerKind::BatchNorm:
      l.bn_eps = j.at("eps").get<float>();
      break;
    default:
      break;
  }
  return l;
}

/// Declared (json) vs actual (payload) shape consistency for weights.
void check_declared_shape(const json& lj, const Layer& l, const std::string& where) {
  if (l.kind == LayerKind::Conv) {
    Shape expect{lj.at("out").get<int64_t>(), lj.at("in").get<int64_t>(),
                 lj.at("kh").get<int64_t>(), lj.at("kw").get<int64_t>()};
    require(l.weight.shape() == expect, where + ": weight payload does not match declared shape");
  } else if (l.kind == LayerKind::Linear || l.kind == LayerKind::SoftmaxHead) {
    Shape expect{lj.at("out").get<int64_t>(), lj.at("in").get<int64_t>()};
    require(l.weight.shape() == expect, where + ": weight payload does not match declared shape");
  } else if (l.kind == LayerKind::BatchNorm) {
    require(l.bn_gamma.size() == lj.at("ch").get<int64_t>(),
            where + ": batchnorm payload does not match declared channels");
  }
}

}  // namespace

void save_model(const ModelGraph& m, const std::string& path) {
  m.validate();
  json header;
  header["input_shape"] = m.input_shape;
  header["classes"] = m.num_classes;
  std::vector<NamedTensor> payload;

  auto emit_layers = [&](std::span<const Layer> layers, const std::string& uname) {
    json arr = json::array();
    for (size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      arr.push_back(layer_to_json(l));
      std::string prefix = uname + "." + std::to_string(i) + ".";
      if (l.weighted()) {
        payload.push_back({prefix + "weight", l.weight});
        if (l.bias.defined()) payload.push_back({prefix + "bias", l.bias});
      } else if (l.kind == LayerKind::BatchNorm) {
        payload.push_back({prefix + "bn_gamma", l.bn_gamma});
        payload.push_back({prefix + "bn_beta", l.bn_beta});
        payload.push_back({prefix + "bn_mean", l.bn_mean});
        payload.push_back({prefix + "bn_var", l.bn_var});
      }
    }
    return arr;
  };

  header["stem"] = emit_layers(m.stem, "stem");
  json jblocks = json::array();
  for (const Block& b : m.blocks) {
    json jb;
    jb["residual"] = b.residual;
    jb["layers"] = emit_layers(b.layers, "block" + std::to_string(b.index));
    jblocks.push_back(std::move(jb));
  }
  header["blocks"] = std::move(jblocks);
  header["head"] = emit_layers(m.head, "head");

  if (m.quant.has_value()) {
    json jq;
    for (const auto& [id, lq] : m.quant->layers) {
      json e;
      if (lq.act) {
        e["act"] = {{"bits", lq.act->qp.bits},
                    {"scale", lq.act->qp.scales.at(0)},
                    {"zp", lq.act->qp.zero_points.at(0)}};
      }
      if (lq.weight) {
        const QuantParams& qp = lq.weight->qp;
        e["weight"] = {{"bits", qp.bits}, {"axis", qp.axis}};
        std::string prefix = "quant." + std::to_string(id) + ".";
        int64_t c = static_cast<int64_t>(qp.scales.size());
        Tensor sc({c});
        Tensor zp({c});
        for (int64_t i = 0; i < c; ++i) {
          sc.data()[i] = qp.scales[static_cast<size_t>(i)];
          zp.data()[i] = static_cast<float>(qp.zero_points[static_cast<size_t>(i)]);
        }
        payload.push_back({prefix + "wscales", sc});
        payload.push_back({prefix + "wzps", zp});
        payload.push_back({prefix + "mask", lq.weight->round_mask});
      }
      jq[std::to_string(id)] = std::move(e);
    }
    header["quant"] = std::move(jq);
  }

  write_container(path, "PDQM", 1, std::move(header), payload);
}

ModelGraph load_model(const std::string& path) {
  Container c = read_container(path, "PDQM", 1);
  const json& header = c.header;

  ModelGraph m;
  m.input_shape = header.at("input_shape").get<Shape>();
  m.num_classes = header.at("classes").get<int>();

  auto load_layers = [&](const json& arr, const std::string& uname) {
    std::vector<Layer> layers;
    for (size_t i = 0; i < arr.size(); ++i) {
      Layer l = layer_from_json(arr[i]);
      std::string prefix = uname + "." + std::to_string(i) + ".";
      if (l.weighted()) {
        l.weight = c.tensor(prefix + "weight");
        if (arr[i].at("bias").get<bool>()) l.bias = c.tensor(prefix + "bias");
      } else if (l.kind == LayerKind::BatchNorm) {
        l.bn_gamma = c.tensor(prefix + "bn_gamma");
        l.bn_beta = c.tensor(prefix + "bn_beta");
        l.bn_mean = c.tensor(prefix + "bn_mean");
        l.bn_var = c.tensor(prefix + "bn_var");
      }
      check_declared_shape(arr[i], l, path + ": " + uname + "." + std::to_string(i));
      layers.push_back(std::move(l));
    }
    return layers;
  };

  m.stem = load_layers(header.at("stem"), "stem");
  int bi = 0;
  for (const json& jb : header.at("blocks")) {
    Block b;
    b.index = bi;
    b.residual = jb.at("residual").get<bool>();
    b.layers = load_layers(jb.at("layers"), "block" + std::to_string(bi));
    m.blocks.push_back(std::move(b));
    ++bi;
  }
  m.head = load_layers(header.at("head"), "head");

  if (header.contains("quant")) {
    ModelQuant mq;
    for (const auto& [key, e] : header.at("quant").items()) {
      int id = std::stoi(key);
      LayerQuant lq;
      if (e.contains("act")) {
        ActQuant aq;
        aq.qp.bits = e.at("act").at("bits").get<int>();
        aq.qp.axis = -1;
        aq.qp.scales = {e.at("act").at("scale").get<float>()};
        aq.qp.zero_points = {e.at("act").at("zp").get<int32_t>()};
        lq.act = std::move(aq);
      }
      if (e.contains("weight")) {
        WeightQuant wq;
        wq.qp.bits = e.at("weight").at("bits").get<int>();
        wq.qp.axis = e.at("weight").at("axis").get<int>();
        std::string prefix = "quant." + key + ".";
        const Tensor& sc = c.tensor(prefix + "wscales");
        const Tensor& zp = c.tensor(prefix + "wzps");
        for (int64_t i = 0; i < sc.size(); ++i) {
          wq.qp.scales.push_back(sc.at(i));
          wq.qp.zero_points.push_back(static_cast<int32_t>(zp.at(i)));
        }
        wq.round_mask = c.tensor(prefix + "mask");
        lq.weight = std::move(wq);
      }
      mq.layers.emplace(id, std::move(lq));
    }
    m.quant = std::move(mq);
  }

  m.validate();
  return m;
}

}  // namespace pdq
