#include "pdquant/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>

#include "pdquant/log.hpp"

namespace pdq {

namespace {

constexpr float kProbFloor = 1e-12f;

LogSink& warn_sink() {
  static LogSink sink;
  return sink;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int64_t batch_of(const Tensor& t) { return t.ndim() >= 1 ? t.dim(0) : 1; }

}  // namespace

void set_warn_sink(LogSink sink) { warn_sink() = std::move(sink); }

void log_warn(const std::string& msg) {
  if (warn_sink()) {
    warn_sink()(msg);
  } else {
    std::cerr << "[warn] " << msg << "\n";
  }
}

Prediction make_prediction(const Tensor& logits, float temperature) {
  require(logits.ndim() == 2, "make_prediction: logits must be [B, C]");
  require(temperature > 0.0f, "make_prediction: temperature must be positive");
  Prediction p;
  p.logits = logits;
  p.temperature = temperature;
  Tensor scaled = temperature == 1.0f ? logits : mul(logits, 1.0f / temperature);
  p.probs = clamp_min(softmax_rows(scaled), kProbFloor);
  return p;
}

const char* metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::LocalMse: return "local_mse";
    case MetricKind::LocalCosine: return "local_cosine";
    case MetricKind::PdMse: return "pd_mse";
    case MetricKind::PdCosine: return "pd_cosine";
    case MetricKind::PdKl: return "pd_kl";
  }
  return "?";
}

MetricKind parse_metric(const std::string& name) {
  for (MetricKind k : {MetricKind::LocalMse, MetricKind::LocalCosine, MetricKind::PdMse,
                       MetricKind::PdCosine, MetricKind::PdKl}) {
    if (name == metric_name(k)) return k;
  }
  throw std::invalid_argument("unknown metric: " + name);
}

bool metric_is_local(MetricKind k) {
  return k == MetricKind::LocalMse || k == MetricKind::LocalCosine;
}

double local_mse(const Tensor& a, const Tensor& a_q) {
  require(a.shape() == a_q.shape(), "local_mse: shape mismatch");
  const float* pa = a.data();
  const float* pb = a_q.data();
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(pa[i]) - pb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(batch_of(a));
}

double local_cosine(const Tensor& a, const Tensor& a_q) {
  require(a.shape() == a_q.shape(), "local_cosine: shape mismatch");
  int64_t b = batch_of(a);
  int64_t f = a.size() / b;
  const float* pa = a.data();
  const float* pb = a_q.data();
  double acc = 0.0;
  for (int64_t i = 0; i < b; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t j = 0; j < f; ++j) {
      double x = pa[i * f + j], y = pb[i * f + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) {
      log_warn("local_cosine: zero vector in sample " + std::to_string(i) +
               ", scoring distance 1");
      acc += 1.0;
    } else {
      acc += 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
    }
  }
  return acc / static_cast<double>(b);
}

namespace {

void require_comparable(const Prediction& fp, const Prediction& q, const char* op) {
  require(fp.probs.shape() == q.probs.shape(), std::string(op) + ": class count mismatch");
  require(fp.temperature == q.temperature, std::string(op) + ": temperature mismatch");
}

}  // namespace

double pd_kl(const Prediction& fp, const Prediction& q) {
  require_comparable(fp, q, "pd_kl");
  int64_t b = fp.batch(), c = fp.classes();
  const float* pf = fp.probs.data();
  const float* pq = q.probs.data();
  double acc = 0.0;
  for (int64_t i = 0; i < b * c; ++i) {
    acc += static_cast<double>(pf[i]) * (std::log(static_cast<double>(pf[i])) -
                                         std::log(static_cast<double>(pq[i])));
  }
  double t2 = static_cast<double>(fp.temperature) * fp.temperature;
  return t2 * acc / static_cast<double>(b);
}

double pd_mse(const Prediction& fp, const Prediction& q) {
  require_comparable(fp, q, "pd_mse");
  return local_mse(fp.probs, q.probs);
}

double pd_cosine(const Prediction& fp, const Prediction& q) {
  require_comparable(fp, q, "pd_cosine");
  return local_cosine(fp.probs, q.probs);
}

double eval_pd_metric(MetricKind k, const Prediction& fp, const Prediction& q) {
  switch (k) {
    case MetricKind::PdKl: return pd_kl(fp, q);
    case MetricKind::PdMse: return pd_mse(fp, q);
    case MetricKind::PdCosine: return pd_cosine(fp, q);
    default: throw std::invalid_argument("eval_pd_metric: not a prediction-difference metric");
  }
}

Tensor kl_loss(const Tensor& fp_probs, const Tensor& logits, float temperature) {
  require(fp_probs.shape() == logits.shape(), "kl_loss: shape mismatch");
  require(temperature > 0.0f, "kl_loss: temperature must be positive");
  int64_t b = fp_probs.dim(0);
  // sum p_fp log p_fp is a constant w.r.t. the logits.
  double c0 = 0.0;
  for (float v : fp_probs.values()) c0 += static_cast<double>(v) * std::log(static_cast<double>(v));
  Tensor scaled = temperature == 1.0f ? logits : mul(logits, 1.0f / temperature);
  Tensor q = clamp_min(softmax_rows(scaled), kProbFloor);
  Tensor cross = sum_all(mul(fp_probs, log(q)));
  float t2_over_b = temperature * temperature / static_cast<float>(b);
  return mul(add(mul(cross, -1.0f), static_cast<float>(c0)), t2_over_b);
}

Tensor mse_loss(const Tensor& target, const Tensor& x) {
  require(target.shape() == x.shape(), "mse_loss: shape mismatch");
  Tensor d = sub(x, target);
  return mul(sum_all(mul(d, d)), 1.0f / static_cast<float>(batch_of(x)));
}

Tensor cosine_loss(const Tensor& target, const Tensor& x) {
  require(target.shape() == x.shape(), "cosine_loss: shape mismatch");
  int64_t b = batch_of(x);
  int64_t f = x.size() / b;
  Tensor xf = reshape(x, {b, f});
  Tensor tf = reshape(target, {b, f});
  Tensor dots = row_sum(mul(xf, tf));
  Tensor nx = sqrt(clamp_min(row_sum(mul(xf, xf)), 1e-24f));
  Tensor nt = sqrt(clamp_min(row_sum(mul(tf, tf)), 1e-24f));
  Tensor cos = div(dots, mul(nx, nt));
  return mul(sum_all(add(mul(cos, -1.0f), 1.0f)), 1.0f / static_cast<float>(b));
}

Tensor pd_loss(MetricKind k, const Tensor& fp_probs, const Tensor& logits, float temperature) {
  switch (k) {
    case MetricKind::PdKl: return kl_loss(fp_probs, logits, temperature);
    case MetricKind::PdMse: {
      Tensor scaled = temperature == 1.0f ? logits : mul(logits, 1.0f / temperature);
      return mse_loss(fp_probs, clamp_min(softmax_rows(scaled), kProbFloor));
    }
    case MetricKind::PdCosine: {
      Tensor scaled = temperature == 1.0f ? logits : mul(logits, 1.0f / temperature);
      return cosine_loss(fp_probs, clamp_min(softmax_rows(scaled), kProbFloor));
    }
    default: throw std::invalid_argument("pd_loss: not a prediction-difference metric");
  }
}

}  // namespace pdq
