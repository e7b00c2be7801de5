#include "pdquant/scale_search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "pdquant/parallel.hpp"

namespace pdq {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

const ModelQuant& quant_or_empty(const ModelGraph& m) {
  static const ModelQuant empty;
  return m.quant.has_value() ? *m.quant : empty;
}

/// Forward hook for scale search: stored quantizers apply strictly before
/// the searched site, the candidate (if any) applies at the site, and
/// everything downstream stays full precision.
struct SiteHook : LayerHook {
  const ModelQuant* stored;
  int site;
  const QuantParams* candidate = nullptr;
  Tensor* capture = nullptr;

  SiteHook(const ModelQuant& mq, int site_id) : stored(&mq), site(site_id) {}

  Tensor transform_input(int flat_id, const Tensor& x) override {
    if (flat_id == site) {
      if (capture != nullptr) *capture = x;
      return candidate != nullptr ? fake_quantize(x, *candidate) : x;
    }
    if (flat_id < site) {
      auto it = stored->layers.find(flat_id);
      if (it != stored->layers.end() && it->second.act) return fake_quantize(x, it->second.act->qp);
    }
    return x;
  }

  Tensor transform_weight(int flat_id, const Layer& layer) override {
    if (flat_id < site) {
      auto it = stored->layers.find(flat_id);
      if (it != stored->layers.end() && it->second.weight) {
        return apply_hard_weight_quant(layer.weight, *it->second.weight);
      }
    }
    return layer.weight;
  }
};

struct Range {
  float lo, hi;
};

Range range_of(std::span<const float> v) {
  Range r{std::numeric_limits<float>::infinity(), -std::numeric_limits<float>::infinity()};
  for (float x : v) {
    r.lo = std::min(r.lo, x);
    r.hi = std::max(r.hi, x);
  }
  return r;
}

/// Per-tensor candidate params for a clipped range [ns*lo, ns*hi].
QuantParams candidate_params(Range r, float ns, int bits) {
  double levels = static_cast<double>((1 << bits) - 1);
  QuantParams p;
  p.bits = bits;
  float base = static_cast<float>((static_cast<double>(r.hi) - r.lo) / levels);
  float clo = ns * r.lo;
  float scale = ns * base;
  double z = std::round(-static_cast<double>(clo) / static_cast<double>(scale));
  z = std::clamp(z, 0.0, levels);
  p.scales = {scale};
  p.zero_points = {static_cast<int32_t>(z)};
  return p;
}

double task_cross_entropy(const Prediction& pred, const int* labels, int64_t n) {
  require(n == pred.batch(), "task_ce: label count does not match batch");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < pred.classes(), "task_ce: label out of range");
    acc -= std::log(static_cast<double>(pred.probs.at(i * pred.classes() + labels[i])));
  }
  return acc / static_cast<double>(n);
}

/// Min-normalizes one metric column so its minimum is exactly 1.0. A zero
/// minimum (lossless candidates) falls back to an offset so values remain
/// finite.
void normalize_column(std::vector<SweepRecord>& records, size_t begin, size_t end) {
  double vmin = std::numeric_limits<double>::infinity();
  for (size_t i = begin; i < end; ++i) vmin = std::min(vmin, records[i].value);
  for (size_t i = begin; i < end; ++i) {
    const double v = records[i].value;
    records[i].value_normalized = v == vmin ? 1.0 : (vmin > 0.0 ? v / vmin : 1.0 + v);
  }
}

}  // namespace

ScaleGrid ScaleGrid::uniform(int n) {
  require(n >= 1, "ScaleGrid::uniform: need at least one point");
  ScaleGrid g;
  g.factors.reserve(static_cast<size_t>(n));
  for (int i = 1; i <= n; ++i) g.factors.push_back(static_cast<float>(i) / static_cast<float>(n));
  return g;
}

void ScaleGrid::validate() const {
  require(!factors.empty(), "ScaleGrid: empty grid");
  float prev = 0.0f;
  for (float f : factors) {
    require(f > prev, "ScaleGrid: factors must be strictly ascending and positive");
    require(f <= 1.0f, "ScaleGrid: factors must lie in (0, 1]");
    prev = f;
  }
}

QuantParams search_activation_scale(const ModelGraph& m, int layer_flat_id, const Tensor& calib_x,
                                    const ScaleGrid& grid, MetricKind metric, int act_bits) {
  grid.validate();
  require(calib_x.defined() && calib_x.dim(0) > 0, "search_activation_scale: empty calibration set");
  require(m.layer_at(layer_flat_id).weighted(),
          "search_activation_scale: layer has no activation quantizer site");

  SiteHook hook(quant_or_empty(m), layer_flat_id);
  Tensor site_input;
  hook.capture = &site_input;
  Tensor target_logits = forward_units(m, 0, calib_x, &hook);
  Prediction target = make_prediction(target_logits);
  hook.capture = nullptr;
  require(site_input.defined(), "search_activation_scale: forward never reached the layer");

  Range r = range_of(site_input.values());
  if (!(r.hi > r.lo)) {
    throw DegenerateRangeError("search_activation_scale: degenerate activation range");
  }

  const size_t n = grid.factors.size();
  std::vector<double> scores(n);
  parallel_for_indexed(static_cast<int64_t>(n), [&](int64_t i) {
    QuantParams cand = candidate_params(r, grid.factors[static_cast<size_t>(i)], act_bits);
    if (metric_is_local(metric)) {
      Tensor a_q = fake_quantize(site_input, cand);
      scores[static_cast<size_t>(i)] = metric == MetricKind::LocalMse
                                           ? local_mse(site_input, a_q)
                                           : local_cosine(site_input, a_q);
    } else {
      SiteHook h(quant_or_empty(m), layer_flat_id);
      h.candidate = &cand;
      Prediction cand_pred = make_prediction(forward_units(m, 0, calib_x, &h));
      scores[static_cast<size_t>(i)] = eval_pd_metric(metric, target, cand_pred);
    }
  });

  size_t best = 0;
  for (size_t i = 1; i < n; ++i) {
    if (scores[i] <= scores[best]) best = i;  // ties break toward the larger factor
  }
  return candidate_params(r, grid.factors[best], act_bits);
}

std::vector<SweepRecord> sweep_metrics(const ModelGraph& m, int layer_flat_id,
                                       const Tensor& calib_x, const ScaleGrid& grid,
                                       const std::vector<MetricKind>& metrics, int act_bits,
                                       const int* labels, int64_t num_labels) {
  grid.validate();
  require(!metrics.empty(), "sweep_metrics: no metrics requested");

  SiteHook hook(quant_or_empty(m), layer_flat_id);
  Tensor site_input;
  hook.capture = &site_input;
  Prediction target = make_prediction(forward_units(m, 0, calib_x, &hook));
  hook.capture = nullptr;

  Range r = range_of(site_input.values());
  if (!(r.hi > r.lo)) throw DegenerateRangeError("sweep_metrics: degenerate activation range");

  bool need_pred = labels != nullptr;
  for (MetricKind k : metrics) need_pred = need_pred || !metric_is_local(k);

  const size_t n = grid.factors.size();
  const size_t cols = metrics.size() + (labels != nullptr ? 1 : 0);
  std::vector<double> table(n * cols);
  parallel_for_indexed(static_cast<int64_t>(n), [&](int64_t i) {
    QuantParams cand = candidate_params(r, grid.factors[static_cast<size_t>(i)], act_bits);
    Tensor a_q = fake_quantize(site_input, cand);
    Prediction cand_pred;
    if (need_pred) {
      SiteHook h(quant_or_empty(m), layer_flat_id);
      h.candidate = &cand;
      cand_pred = make_prediction(forward_units(m, 0, calib_x, &h));
    }
    for (size_t c = 0; c < metrics.size(); ++c) {
      double v;
      switch (metrics[c]) {
        case MetricKind::LocalMse: v = local_mse(site_input, a_q); break;
        case MetricKind::LocalCosine: v = local_cosine(site_input, a_q); break;
        default: v = eval_pd_metric(metrics[c], target, cand_pred); break;
      }
      table[static_cast<size_t>(i) * cols + c] = v;
    }
    if (labels != nullptr) {
      table[static_cast<size_t>(i) * cols + metrics.size()] =
          task_cross_entropy(cand_pred, labels, num_labels);
    }
  });

  std::vector<SweepRecord> records;
  records.reserve(n * cols);
  for (size_t c = 0; c < cols; ++c) {
    std::string name = c < metrics.size() ? metric_name(metrics[c]) : "task_ce";
    size_t begin = records.size();
    for (size_t i = 0; i < n; ++i) {
      records.push_back(SweepRecord{layer_flat_id, grid.factors[i], name, table[i * cols + c], 0.0});
    }
    normalize_column(records, begin, records.size());
  }
  return records;
}

std::vector<SweepRecord> sweep_weight_metrics(const ModelGraph& m, int layer_flat_id,
                                              const Tensor& calib_x, const ScaleGrid& grid,
                                              WeightSweepScope scope, int weight_bits,
                                              const int* labels, int64_t num_labels) {
  grid.validate();
  std::vector<int> swept =
      scope == WeightSweepScope::AllLayers ? m.quantizable_layers() : std::vector<int>{layer_flat_id};

  // Per-channel base ranges for every swept layer.
  struct LayerRanges {
    int id;
    std::vector<Range> ranges;
  };
  std::vector<LayerRanges> bases;
  for (int id : swept) {
    const Tensor& w = m.layer_at(id).weight;
    LayerRanges lr;
    lr.id = id;
    int64_t c = w.dim(0);
    int64_t stride = w.size() / c;
    for (int64_t ch = 0; ch < c; ++ch) {
      lr.ranges.push_back(range_of(w.values().subspan(static_cast<size_t>(ch * stride),
                                                      static_cast<size_t>(stride))));
      require(lr.ranges.back().hi > lr.ranges.back().lo,
              "sweep_weight_metrics: degenerate weight channel range");
    }
    bases.push_back(std::move(lr));
  }

  struct WeightHook : LayerHook {
    const std::vector<LayerRanges>* bases;
    float ns;
    int bits;
    Tensor transform_weight(int flat_id, const Layer& layer) override {
      for (const LayerRanges& lr : *bases) {
        if (lr.id != flat_id) continue;
        QuantParams p;
        p.bits = bits;
        p.axis = 0;
        double levels = static_cast<double>((1 << bits) - 1);
        for (const Range& r : lr.ranges) {
          float base = static_cast<float>((static_cast<double>(r.hi) - r.lo) / levels);
          float scale = ns * base;
          double z = std::round(-static_cast<double>(ns * r.lo) / static_cast<double>(scale));
          p.scales.push_back(scale);
          p.zero_points.push_back(static_cast<int32_t>(std::clamp(z, 0.0, levels)));
        }
        return fake_quantize(layer.weight, p);
      }
      return layer.weight;
    }
  };

  // FP target and the swept layer's FP input/output for the local column.
  SiteHook capture_hook(quant_or_empty(m), layer_flat_id);
  Tensor site_input;
  capture_hook.capture = &site_input;
  Prediction target = make_prediction(forward_units(m, 0, calib_x, &capture_hook));

  const std::vector<MetricKind> pd_cols{MetricKind::PdMse, MetricKind::PdCosine, MetricKind::PdKl};
  const bool with_local = scope == WeightSweepScope::SingleLayer;
  const size_t n = grid.factors.size();
  const size_t cols = pd_cols.size() + (with_local ? 1 : 0) + (labels != nullptr ? 1 : 0);
  std::vector<double> table(n * cols);
  parallel_for_indexed(static_cast<int64_t>(n), [&](int64_t i) {
    WeightHook h;
    h.bases = &bases;
    h.ns = grid.factors[static_cast<size_t>(i)];
    h.bits = weight_bits;
    Prediction cand_pred = make_prediction(forward_units(m, 0, calib_x, &h));
    size_t c = 0;
    for (MetricKind k : pd_cols) {
      table[static_cast<size_t>(i) * cols + c++] = eval_pd_metric(k, target, cand_pred);
    }
    if (with_local) {
      const Layer& l = m.layer_at(layer_flat_id);
      Tensor wq = h.transform_weight(layer_flat_id, l);
      Tensor out_fp = layer_apply(l, site_input);
      Tensor out_q = layer_apply(l, site_input, wq);
      table[static_cast<size_t>(i) * cols + c++] = local_mse(out_fp, out_q);
    }
    if (labels != nullptr) {
      table[static_cast<size_t>(i) * cols + c] = task_cross_entropy(cand_pred, labels, num_labels);
    }
  });

  std::vector<std::string> names;
  for (MetricKind k : pd_cols) names.push_back(metric_name(k));
  if (with_local) names.push_back("local_mse");
  if (labels != nullptr) names.push_back("task_ce");

  std::vector<SweepRecord> records;
  for (size_t c = 0; c < cols; ++c) {
    size_t begin = records.size();
    for (size_t i = 0; i < n; ++i) {
      records.push_back(SweepRecord{layer_flat_id, grid.factors[i], names[c], table[i * cols + c], 0.0});
    }
    normalize_column(records, begin, records.size());
  }
  return records;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRecord>& records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "layer,n_s,metric,value,value_normalized\n";
  char line[256];
  for (const SweepRecord& r : records) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%s,%.17g,%.17g\n", r.layer,
                  static_cast<double>(r.n_s), r.metric.c_str(), r.value, r.value_normalized);
    f << line;
  }
}

std::vector<SweepRecord> read_sweep_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::string line;
  if (!std::getline(f, line) || line != "layer,n_s,metric,value,value_normalized") {
    throw std::runtime_error(path + ": bad sweep CSV header");
  }
  std::vector<SweepRecord> records;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    SweepRecord r;
    std::getline(ss, field, ',');
    r.layer = std::stoi(field);
    std::getline(ss, field, ',');
    r.n_s = std::strtof(field.c_str(), nullptr);
    std::getline(ss, r.metric, ',');
    std::getline(ss, field, ',');
    r.value = std::strtod(field.c_str(), nullptr);
    std::getline(ss, field, ',');
    r.value_normalized = std::strtod(field.c_str(), nullptr);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace pdq
