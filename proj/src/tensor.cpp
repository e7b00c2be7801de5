#include "pdquant/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace pdq {

namespace {

thread_local GradTape* g_active_tape = nullptr;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, float fill) {
  int64_t n = shape_numel(shape);
  require(n >= 0, "Tensor: negative extent in shape " + shape_str(shape));
  d_ = std::make_shared<Data>();
  d_->shape = std::move(shape);
  d_->values.assign(static_cast<size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) {
  require(shape_numel(shape) == static_cast<int64_t>(values.size()),
          "Tensor: data length " + std::to_string(values.size()) + " does not match shape " +
              shape_str(shape));
  d_ = std::make_shared<Data>();
  d_->shape = std::move(shape);
  d_->values = std::move(values);
}

const Shape& Tensor::shape() const {
  require(defined(), "Tensor: undefined");
  return d_->shape;
}

int64_t Tensor::size() const { return defined() ? static_cast<int64_t>(d_->values.size()) : 0; }

int64_t Tensor::dim(int i) const {
  const Shape& s = shape();
  require(i >= 0 && i < static_cast<int>(s.size()), "Tensor::dim: axis out of range");
  return s[i];
}

const float* Tensor::data() const {
  require(defined(), "Tensor: undefined");
  return d_->values.data();
}

float* Tensor::data() {
  require(defined(), "Tensor: undefined");
  return d_->values.data();
}

float Tensor::at(int64_t i) const {
  require(i >= 0 && i < size(), "Tensor::at: index out of range");
  return d_->values[static_cast<size_t>(i)];
}

float Tensor::item() const {
  require(size() == 1, "Tensor::item: tensor is not a scalar");
  return d_->values[0];
}

bool Tensor::requires_grad() const { return defined() && d_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  require(defined(), "Tensor: undefined");
  d_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return defined() && !d_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  require(has_grad(), "Tensor::grad: no gradient accumulated");
  return {d_->grad.data(), d_->grad.size()};
}

std::span<float> Tensor::grad_mut() {
  require(defined(), "Tensor: undefined");
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0f);
  return {d_->grad.data(), d_->grad.size()};
}

void Tensor::zero_grad() {
  if (defined()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  require(defined(), "Tensor: undefined");
  return Tensor(d_->shape, d_->values);
}

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.values()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(op) + ": produced a non-finite value");
    }
  }
}

// ---------------------------------------------------------------- GradTape

namespace {
std::atomic<uint64_t> g_tape_counter{1};
}  // namespace

GradTape::GradTape() : id_(g_tape_counter.fetch_add(1)) {
  if (g_active_tape != nullptr) {
    throw std::logic_error("GradTape: another tape is already active on this thread");
  }
  g_active_tape = this;
}

GradTape::~GradTape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

GradTape* GradTape::active() { return g_active_tape; }

int64_t GradTape::input_node(const Tensor& t) {
  if (!t.defined()) return -1;
  Tensor::Data* d = t.d_.get();
  if (d->tape_id == id_ && d->node >= 0) return d->node;
  if (!d->requires_grad) return -1;
  // Register a leaf: its backward accumulates the adjoint into the tensor.
  int64_t id = static_cast<int64_t>(nodes_.size());
  auto keep = t.d_;
  nodes_.push_back(Node{[keep](std::span<const float> adj, GradTape&) {
                          if (keep->grad.empty()) keep->grad.assign(keep->values.size(), 0.0f);
                          for (size_t i = 0; i < adj.size(); ++i) keep->grad[i] += adj[i];
                        },
                        static_cast<int64_t>(d->values.size())});
  adjoints_.emplace_back();
  d->tape_id = id_;
  d->node = id;
  return id;
}

void GradTape::record(Tensor& out, BackwardFn fn) {
  int64_t id = static_cast<int64_t>(nodes_.size());
  nodes_.push_back(Node{std::move(fn), out.size()});
  adjoints_.emplace_back();
  out.d_->tape_id = id_;
  out.d_->node = id;
}

std::span<float> GradTape::adjoint(int64_t node) {
  auto& buf = adjoints_[static_cast<size_t>(node)];
  if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0f);
  return {buf.data(), buf.size()};
}

void GradTape::backward(const Tensor& loss) {
  require(loss.defined() && loss.size() == 1, "backward: loss must be a scalar tensor");
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  if (loss.d_->tape_id != id_ || loss.d_->node < 0) {
    throw std::invalid_argument("backward: loss was not recorded on this tape");
  }
  adjoint(loss.d_->node)[0] = 1.0f;
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    auto& buf = adjoints_[static_cast<size_t>(i)];
    if (buf.empty()) continue;  // not reachable from the loss
    nodes_[static_cast<size_t>(i)].fn({buf.data(), buf.size()}, *this);
  }
  consumed_ = true;
}

namespace {

/// Records `out = op(inputs...)` when a tape is active and any input is
/// tracked. `make_fn` receives the input node ids and builds the backward.
template <typename MakeFn>
void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs, MakeFn make_fn) {
  GradTape* tape = GradTape::active();
  if (tape == nullptr) return;
  std::vector<int64_t> ids;
  ids.reserve(inputs.size());
  bool any = false;
  for (const Tensor* t : inputs) {
    int64_t id = tape->input_node(*t);
    ids.push_back(id);
    any = any || id >= 0;
  }
  if (!any) return;
  tape->record(out, make_fn(ids));
}

void axpy(GradTape& tape, int64_t node, std::span<const float> v, float k = 1.0f) {
  if (node < 0) return;
  auto a = tape.adjoint(node);
  for (size_t i = 0; i < v.size(); ++i) a[i] += k * v[i];
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  maybe_record(out, {&a, &b}, [](const std::vector<int64_t>& in) {
    return [in](std::span<const float> adj, GradTape& t) {
      axpy(t, in[0], adj);
      axpy(t, in[1], adj);
    };
  });
  return out;
}

Tensor add(const Tensor& a, float s) {
  Tensor out(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + s;
  check_finite(out, "add");
  maybe_record(out, {&a}, [](const std::vector<int64_t>& in) {
    return [in](std::span<const float> adj, GradTape& t) { axpy(t, in[0], adj); };
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  maybe_record(out, {&a, &b}, [](const std::vector<int64_t>& in) {
    return [in](std::span<const float> adj, GradTape& t) {
      axpy(t, in[0], adj);
      axpy(t, in[1], adj, -1.0f);
    };
  });
  return out;
}

Tensor sub(const Tensor& a, float s) { return add(a, -s); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  maybe_record(out, {&a, &b}, [&](const std::vector<int64_t>& in) {
    return [in, a, b](std::span<const float> adj, GradTape& t) {
      if (in[0] >= 0) {
        auto ga = t.adjoint(in[0]);
        const float* pb2 = b.data();
        for (size_t i = 0; i < adj.size(); ++i) ga[i] += adj[i] * pb2[i];
      }
      if (in[1] >= 0) {
        auto gb = t.adjoint(in[1]);
        const float* pa2 = a.data();
        for (size_t i = 0; i < adj.size(); ++i) gb[i] += adj[i] * pa2[i];
      }
    };
  });
  return out;
}

Tensor mul(const Tensor& a, float s) {
  Tensor out(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  check_finite(out, "mul");
  maybe_record(out, {&a}, [s](const std::vector<int64_t>& in) {
    return [in, s](std::span<const float> adj, GradTape& t) { axpy(t, in[0], adj, s); };
  });
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] / pb[i];
  check_finite(out, "div");
  maybe_record(out, {&a, &b}, [&](const std::vector<int64_t>& in) {
    return [in, a, b, out](std::span<const float> adj, GradTape& t) {
      const float* pb2 = b.data();
      if (in[0] >= 0) {
        auto ga = t.adjoint(in[0]);
        for (size_t i = 0; i < adj.size(); ++i) ga[i] += adj[i] / pb2[i];
      }
      if (in[1] >= 0) {
        auto gb = t.adjoint(in[1]);
        const float* po2 = out.data();
        for (size_t i = 0; i < adj.size(); ++i) gb[i] -= adj[i] * po2[i] / pb2[i];
      }
    };
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] > 0.0f ? px[i] : 0.0f;
  maybe_record(out, {&x}, [&](const std::vector<int64_t>& in) {
    return [in, x](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      const float* px2 = x.data();
      for (size_t i = 0; i < adj.size(); ++i) {
        if (px2[i] > 0.0f) g[i] += adj[i];
      }
    };
  });
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = std::log(px[i]);
  check_finite(out, "log");
  maybe_record(out, {&x}, [&](const std::vector<int64_t>& in) {
    return [in, x](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      const float* px2 = x.data();
      for (size_t i = 0; i < adj.size(); ++i) g[i] += adj[i] / px2[i];
    };
  });
  return out;
}

Tensor sqrt(const Tensor& x) {
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = std::sqrt(px[i]);
  check_finite(out, "sqrt");
  maybe_record(out, {&x}, [&](const std::vector<int64_t>& in) {
    return [in, out](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      const float* po2 = out.data();
      for (size_t i = 0; i < adj.size(); ++i) g[i] += adj[i] * 0.5f / po2[i];
    };
  });
  return out;
}

Tensor clamp_min(const Tensor& x, float lo) {
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] < lo ? lo : px[i];
  check_finite(out, "clamp_min");
  maybe_record(out, {&x}, [&, lo](const std::vector<int64_t>& in) {
    return [in, x, lo](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      const float* px2 = x.data();
      for (size_t i = 0; i < adj.size(); ++i) {
        if (px2[i] >= lo) g[i] += adj[i];
      }
    };
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape s) {
  require(shape_numel(s) == x.size(),
          "reshape: element count mismatch for shape " + shape_str(s));
  Tensor out(std::move(s), std::vector<float>(x.values().begin(), x.values().end()));
  maybe_record(out, {&x}, [](const std::vector<int64_t>& in) {
    return [in](std::span<const float> adj, GradTape& t) { axpy(t, in[0], adj); };
  });
  return out;
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  check_finite(out, "sum_all");
  maybe_record(out, {&x}, [&](const std::vector<int64_t>& in) {
    int64_t n = x.size();
    return [in, n](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += adj[0];
    };
  });
  return out;
}

Tensor row_sum(const Tensor& x) {
  require(x.ndim() == 2, "row_sum: expected a [B,C] tensor, got " + shape_str(x.shape()));
  int64_t b = x.dim(0), c = x.dim(1);
  Tensor out(Shape{b});
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < c; ++j) acc += px[i * c + j];
    po[i] = static_cast<float>(acc);
  }
  check_finite(out, "row_sum");
  maybe_record(out, {&x}, [b, c](const std::vector<int64_t>& in) {
    return [in, b, c](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < c; ++j) g[static_cast<size_t>(i * c + j)] += adj[static_cast<size_t>(i)];
    };
  });
  return out;
}

namespace {

/// Channel reduction geometry: [B,C,H,W] reduces over (B,H,W) per channel,
/// [B,F] reduces over B per feature.
struct ChannelGeom {
  int64_t channels = 0;
  int64_t group = 0;  // elements reduced per channel
};

ChannelGeom channel_geom(const Tensor& x, const char* op) {
  if (x.ndim() == 4) return {x.dim(1), x.dim(0) * x.dim(2) * x.dim(3)};
  if (x.ndim() == 2) return {x.dim(1), x.dim(0)};
  throw std::invalid_argument(std::string(op) + ": expected a 2-D or 4-D tensor, got " +
                              shape_str(x.shape()));
}

template <typename Fn>
void for_each_channel_element(const Shape& s, int64_t c, Fn fn) {
  if (s.size() == 4) {
    int64_t spatial = s[2] * s[3];
    for (int64_t b = 0; b < s[0]; ++b) {
      int64_t base = (b * s[1] + c) * spatial;
      for (int64_t k = 0; k < spatial; ++k) fn(base + k);
    }
  } else {
    for (int64_t b = 0; b < s[0]; ++b) fn(b * s[1] + c);
  }
}

}  // namespace

Tensor channel_mean(const Tensor& x) {
  ChannelGeom g = channel_geom(x, "channel_mean");
  Tensor out(Shape{g.channels});
  const float* px = x.data();
  float* po = out.data();
  for (int64_t c = 0; c < g.channels; ++c) {
    double acc = 0.0;
    for_each_channel_element(x.shape(), c, [&](int64_t i) { acc += px[i]; });
    po[c] = static_cast<float>(acc / static_cast<double>(g.group));
  }
  check_finite(out, "channel_mean");
  maybe_record(out, {&x}, [&, g](const std::vector<int64_t>& in) {
    Shape xs = x.shape();
    return [in, g, xs](std::span<const float> adj, GradTape& t) {
      auto gr = t.adjoint(in[0]);
      float inv = 1.0f / static_cast<float>(g.group);
      for (int64_t c = 0; c < g.channels; ++c) {
        float a = adj[static_cast<size_t>(c)] * inv;
        for_each_channel_element(xs, c, [&](int64_t i) { gr[static_cast<size_t>(i)] += a; });
      }
    };
  });
  return out;
}

Tensor channel_std(const Tensor& x) {
  ChannelGeom g = channel_geom(x, "channel_std");
  require(g.group >= 2, "channel_std: need at least 2 elements per channel");
  Tensor out(Shape{g.channels});
  std::vector<float> means(static_cast<size_t>(g.channels));
  const float* px = x.data();
  float* po = out.data();
  for (int64_t c = 0; c < g.channels; ++c) {
    double acc = 0.0;
    for_each_channel_element(x.shape(), c, [&](int64_t i) { acc += px[i]; });
    double m = acc / static_cast<double>(g.group);
    double sq = 0.0;
    for_each_channel_element(x.shape(), c, [&](int64_t i) {
      double d = px[i] - m;
      sq += d * d;
    });
    means[static_cast<size_t>(c)] = static_cast<float>(m);
    po[c] = static_cast<float>(std::sqrt(sq / static_cast<double>(g.group)));
  }
  check_finite(out, "channel_std");
  maybe_record(out, {&x}, [&, g](const std::vector<int64_t>& in) {
    Shape xs = x.shape();
    return [in, g, xs, x, out, means](std::span<const float> adj, GradTape& t) {
      // d(std_c)/dx_i = (x_i - mean_c) / (N * std_c); guarded near std==0.
      auto gr = t.adjoint(in[0]);
      const float* px2 = x.data();
      const float* ps = out.data();
      for (int64_t c = 0; c < g.channels; ++c) {
        float denom = static_cast<float>(g.group) * std::max(ps[c], 1e-12f);
        float a = adj[static_cast<size_t>(c)] / denom;
        float m = means[static_cast<size_t>(c)];
        for_each_channel_element(xs, c, [&](int64_t i) {
          gr[static_cast<size_t>(i)] += a * (px2[i] - m);
        });
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------- matmul & friends

namespace {

/// C[m,n] += A[m,k] . B[k,n]. Row-major, j-innermost so the compiler can
/// vectorize; accumulation runs in double (per C entry, in k order), which
/// keeps results deterministic and lets the loop oracles hold to tight
/// per-element tolerances.
void gemm_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
  std::vector<double> acc(static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t p = 0; p < k; ++p) {
      double aik = a[i * k + p];
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += aik * brow[j];
    }
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += static_cast<float>(acc[static_cast<size_t>(j)]);
  }
}

std::vector<float> transposed(const float* src, int64_t rows, int64_t cols) {
  std::vector<float> out(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(j * rows + i)] = src[i * cols + j];
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul: expected 2-D operands");
  require(a.dim(1) == b.dim(0), "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  check_finite(out, "matmul");
  maybe_record(out, {&a, &b}, [&](const std::vector<int64_t>& in) {
    return [in, a, b, m, k, n](std::span<const float> adj, GradTape& t) {
      if (in[0] >= 0) {  // dA = dC . B^T
        auto ga = t.adjoint(in[0]);
        std::vector<float> bt = transposed(b.data(), k, n);  // [n,k]
        gemm_acc(adj.data(), bt.data(), ga.data(), m, n, k);
      }
      if (in[1] >= 0) {  // dB = A^T . dC
        auto gb = t.adjoint(in[1]);
        std::vector<float> at = transposed(a.data(), m, k);  // [k,m]
        gemm_acc(at.data(), adj.data(), gb.data(), k, m, n);
      }
    };
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, "transpose: expected a 2-D tensor");
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  maybe_record(out, {&a}, [m, n](const std::vector<int64_t>& in) {
    return [in, m, n](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) g[static_cast<size_t>(i * n + j)] += adj[static_cast<size_t>(j * m + i)];
    };
  });
  return out;
}

namespace {

struct ConvGeom {
  int64_t batch, cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad) {
  require(x.ndim() == 4, "conv2d: input must be [B,Cin,H,W]");
  require(w.ndim() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw]");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch between input and kernel");
  ConvGeom g;
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  require(g.kh <= g.h + 2 * pad && g.kw <= g.w + 2 * pad, "conv2d: kernel does not fit padded input");
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// im2col for one sample: out is [Cin*kh*kw, OH*OW].
void im2col(const float* x, const ConvGeom& g, float* col) {
  int64_t ohw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        int64_t row = (c * g.kh + ki) * g.kw + kj;
        for (int64_t oi = 0; oi < g.oh; ++oi) {
          int64_t si = oi * g.stride + ki - g.pad;
          for (int64_t oj = 0; oj < g.ow; ++oj) {
            int64_t sj = oj * g.stride + kj - g.pad;
            float v = 0.0f;
            if (si >= 0 && si < g.h && sj >= 0 && sj < g.w) v = x[(c * g.h + si) * g.w + sj];
            col[row * ohw + oi * g.ow + oj] = v;
          }
        }
      }
    }
  }
}

// Scatter-add of a column matrix back onto one sample's input gradient.
void col2im_add(const float* col, const ConvGeom& g, float* gx) {
  int64_t ohw = g.oh * g.ow;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        int64_t row = (c * g.kh + ki) * g.kw + kj;
        for (int64_t oi = 0; oi < g.oh; ++oi) {
          int64_t si = oi * g.stride + ki - g.pad;
          if (si < 0 || si >= g.h) continue;
          for (int64_t oj = 0; oj < g.ow; ++oj) {
            int64_t sj = oj * g.stride + kj - g.pad;
            if (sj < 0 || sj >= g.w) continue;
            gx[(c * g.h + si) * g.w + sj] += col[row * ohw + oi * g.ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvGeom g = conv_geom(x, w, stride, pad);
  int64_t ck = g.cin * g.kh * g.kw;
  int64_t ohw = g.oh * g.ow;
  Tensor out(Shape{g.batch, g.cout, g.oh, g.ow});
  std::vector<float> col(static_cast<size_t>(ck * ohw));
  const float* px = x.data();
  const float* pw = w.data();
  float* po = out.data();
  for (int64_t b = 0; b < g.batch; ++b) {
    im2col(px + b * g.cin * g.h * g.w, g, col.data());
    gemm_acc(pw, col.data(), po + b * g.cout * ohw, g.cout, ck, ohw);
  }
  check_finite(out, "conv2d");
  maybe_record(out, {&x, &w}, [&, g, ck, ohw](const std::vector<int64_t>& in) {
    return [in, x, w, g, ck, ohw](std::span<const float> adj, GradTape& t) {
      std::vector<float> col(static_cast<size_t>(ck * ohw));
      const float* px2 = x.data();
      std::span<float> gx = in[0] >= 0 ? t.adjoint(in[0]) : std::span<float>{};
      std::span<float> gw = in[1] >= 0 ? t.adjoint(in[1]) : std::span<float>{};
      std::vector<float> gcol(in[0] >= 0 ? static_cast<size_t>(ck * ohw) : 0);
      std::vector<float> wt;
      if (in[0] >= 0) wt = transposed(w.data(), g.cout, ck);  // [ck, cout]
      for (int64_t b = 0; b < g.batch; ++b) {
        const float* dy = adj.data() + b * g.cout * ohw;
        im2col(px2 + b * g.cin * g.h * g.w, g, col.data());
        if (in[1] >= 0) {  // dW += dY . col^T
          std::vector<float> colt = transposed(col.data(), ck, ohw);  // [ohw, ck]
          gemm_acc(dy, colt.data(), gw.data(), g.cout, ohw, ck);
        }
        if (in[0] >= 0) {  // dcol = W^T . dY, then scatter
          std::fill(gcol.begin(), gcol.end(), 0.0f);
          gemm_acc(wt.data(), dy, gcol.data(), ck, g.cout, ohw);
          col2im_add(gcol.data(), g, gx.data() + b * g.cin * g.h * g.w);
        }
      }
    };
  });
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0),
          "add_row_bias: expected [B,F] + [F]");
  int64_t rows = x.dim(0), f = x.dim(1);
  Tensor out(x.shape());
  const float* px = x.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < f; ++j) po[i * f + j] = px[i * f + j] + pb[j];
  check_finite(out, "add_row_bias");
  maybe_record(out, {&x, &b}, [rows, f](const std::vector<int64_t>& in) {
    return [in, rows, f](std::span<const float> adj, GradTape& t) {
      axpy(t, in[0], adj);
      if (in[1] >= 0) {
        auto gb = t.adjoint(in[1]);
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < f; ++j) gb[static_cast<size_t>(j)] += adj[static_cast<size_t>(i * f + j)];
      }
    };
  });
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 4 && b.ndim() == 1 && x.dim(1) == b.dim(0),
          "add_channel_bias: expected [B,C,H,W] + [C]");
  int64_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  const float* px = x.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      float bias = pb[ch];
      int64_t base = (i * c + ch) * spatial;
      for (int64_t s = 0; s < spatial; ++s) po[base + s] = px[base + s] + bias;
    }
  check_finite(out, "add_channel_bias");
  maybe_record(out, {&x, &b}, [n, c, spatial](const std::vector<int64_t>& in) {
    return [in, n, c, spatial](std::span<const float> adj, GradTape& t) {
      axpy(t, in[0], adj);
      if (in[1] >= 0) {
        auto gb = t.adjoint(in[1]);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t ch = 0; ch < c; ++ch) {
            int64_t base = (i * c + ch) * spatial;
            double acc = 0.0;
            for (int64_t s = 0; s < spatial; ++s) acc += adj[static_cast<size_t>(base + s)];
            gb[static_cast<size_t>(ch)] += static_cast<float>(acc);
          }
      }
    };
  });
  return out;
}

Tensor avgpool_global(const Tensor& x) {
  require(x.ndim() == 4, "avgpool_global: expected [B,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor out(Shape{n, c});
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (int64_t s = 0; s < spatial; ++s) acc += px[i * spatial + s];
    po[i] = static_cast<float>(acc / static_cast<double>(spatial));
  }
  check_finite(out, "avgpool_global");
  maybe_record(out, {&x}, [n, c, spatial](const std::vector<int64_t>& in) {
    return [in, n, c, spatial](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      float inv = 1.0f / static_cast<float>(spatial);
      for (int64_t i = 0; i < n * c; ++i)
        for (int64_t s = 0; s < spatial; ++s)
          g[static_cast<size_t>(i * spatial + s)] += adj[static_cast<size_t>(i)] * inv;
    };
  });
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require(x.ndim() == 2, "softmax_rows: expected [B,C]");
  int64_t b = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (int64_t i = 0; i < b; ++i) {
    const float* row = px + i * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    for (int64_t j = 0; j < c; ++j)
      po[i * c + j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
  }
  check_finite(out, "softmax_rows");
  maybe_record(out, {&x}, [b, c, out](const std::vector<int64_t>& in) {
    return [in, b, c, out](std::span<const float> adj, GradTape& t) {
      // dx_j = y_j * (dy_j - sum_k dy_k * y_k), per row
      auto g = t.adjoint(in[0]);
      const float* py = out.data();
      for (int64_t i = 0; i < b; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j)
          dot += static_cast<double>(adj[static_cast<size_t>(i * c + j)]) * py[i * c + j];
        for (int64_t j = 0; j < c; ++j) {
          size_t k = static_cast<size_t>(i * c + j);
          g[k] += py[i * c + j] * (adj[k] - static_cast<float>(dot));
        }
      }
    };
  });
  return out;
}

Tensor mix_by_mask(const Tensor& a_q, const Tensor& a_fp, const Tensor& mask) {
  require_same_shape(a_q, a_fp, "mix_by_mask");
  require_same_shape(a_q, mask, "mix_by_mask");
  Tensor out(a_q.shape());
  const float* pq = a_q.data();
  const float* pf = a_fp.data();
  const float* pm = mask.data();
  float* po = out.data();
  for (int64_t i = 0; i < out.size(); ++i) po[i] = pm[i] != 0.0f ? pf[i] : pq[i];
  check_finite(out, "mix_by_mask");
  maybe_record(out, {&a_q}, [&](const std::vector<int64_t>& in) {
    return [in, mask](std::span<const float> adj, GradTape& t) {
      auto g = t.adjoint(in[0]);
      const float* pm2 = mask.data();
      for (size_t i = 0; i < adj.size(); ++i) {
        if (pm2[i] == 0.0f) g[i] += adj[i];
      }
    };
  });
  return out;
}

Tensor take_rows(const Tensor& x, std::span<const int> idx) {
  require(x.ndim() >= 1, "take_rows: expected at least 1-D");
  int64_t rows = x.dim(0);
  int64_t stride = rows > 0 ? x.size() / rows : 0;
  Shape s = x.shape();
  s[0] = static_cast<int64_t>(idx.size());
  Tensor out(s);
  const float* px = x.data();
  float* po = out.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < rows, "take_rows: index out of range");
    std::copy(px + idx[i] * stride, px + (idx[i] + 1) * stride, po + static_cast<int64_t>(i) * stride);
  }
  return out;
}

Tensor batchnorm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, float eps) {
  ChannelGeom g = channel_geom(x, "batchnorm_infer");
  require(gamma.size() == g.channels && beta.size() == g.channels && mean.size() == g.channels &&
              var.size() == g.channels,
          "batchnorm_infer: parameter length does not match channel count");
  for (float v : var.values()) require(v > 0.0f || eps > 0.0f, "batchnorm_infer: var must be positive");
  Tensor out(x.shape());
  const float* px = x.data();
  float* po = out.data();
  std::vector<float> k(static_cast<size_t>(g.channels)), b0(static_cast<size_t>(g.channels));
  for (int64_t c = 0; c < g.channels; ++c) {
    float inv = 1.0f / std::sqrt(var.at(c) + eps);
    k[static_cast<size_t>(c)] = gamma.at(c) * inv;
    b0[static_cast<size_t>(c)] = beta.at(c) - gamma.at(c) * mean.at(c) * inv;
  }
  for (int64_t c = 0; c < g.channels; ++c) {
    float kc = k[static_cast<size_t>(c)], bc = b0[static_cast<size_t>(c)];
    for_each_channel_element(x.shape(), c, [&](int64_t i) { po[i] = px[i] * kc + bc; });
  }
  check_finite(out, "batchnorm_infer");
  maybe_record(out, {&x}, [&, g, k](const std::vector<int64_t>& in) {
    Shape xs = x.shape();
    return [in, g, k, xs](std::span<const float> adj, GradTape& t) {
      auto gr = t.adjoint(in[0]);
      for (int64_t c = 0; c < g.channels; ++c) {
        float kc = k[static_cast<size_t>(c)];
        for_each_channel_element(xs, c, [&](int64_t i) {
          gr[static_cast<size_t>(i)] += adj[static_cast<size_t>(i)] * kc;
        });
      }
    };
  });
  return out;
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                       Tensor* batch_mean, Tensor* batch_var) {
  ChannelGeom g = channel_geom(x, "batchnorm_train");
  require(gamma.size() == g.channels && beta.size() == g.channels,
          "batchnorm_train: parameter length does not match channel count");
  require(g.group >= 2, "batchnorm_train: need at least 2 elements per channel");
  const float* px = x.data();
  std::vector<float> mu(static_cast<size_t>(g.channels)), var(static_cast<size_t>(g.channels)),
      inv(static_cast<size_t>(g.channels));
  for (int64_t c = 0; c < g.channels; ++c) {
    double acc = 0.0;
    for_each_channel_element(x.shape(), c, [&](int64_t i) { acc += px[i]; });
    double m = acc / static_cast<double>(g.group);
    double sq = 0.0;
    for_each_channel_element(x.shape(), c, [&](int64_t i) {
      double d = px[i] - m;
      sq += d * d;
    });
    double v = sq / static_cast<double>(g.group);
    mu[static_cast<size_t>(c)] = static_cast<float>(m);
    var[static_cast<size_t>(c)] = static_cast<float>(v);
    inv[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(v + eps));
  }
  Tensor out(x.shape());
  float* po = out.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  for (int64_t c = 0; c < g.channels; ++c) {
    float m = mu[static_cast<size_t>(c)], ic = inv[static_cast<size_t>(c)];
    float ga = pg[c], be = pb[c];
    for_each_channel_element(x.shape(), c, [&](int64_t i) { po[i] = (px[i] - m) * ic * ga + be; });
  }
  check_finite(out, "batchnorm_train");
  if (batch_mean) *batch_mean = Tensor(Shape{g.channels}, std::vector<float>(mu));
  if (batch_var) *batch_var = Tensor(Shape{g.channels}, std::vector<float>(var));
  maybe_record(out, {&x, &gamma, &beta}, [&, g, mu, inv](const std::vector<int64_t>& in) {
    Shape xs = x.shape();
    return [in, g, mu, inv, x, gamma, xs](std::span<const float> adj, GradTape& t) {
      const float* px2 = x.data();
      const float* pg2 = gamma.data();
      int64_t n = g.group;
      for (int64_t c = 0; c < g.channels; ++c) {
        float m = mu[static_cast<size_t>(c)], ic = inv[static_cast<size_t>(c)];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for_each_channel_element(xs, c, [&](int64_t i) {
          float xhat = (px2[i] - m) * ic;
          float dy = adj[static_cast<size_t>(i)];
          sum_dy += dy;
          sum_dy_xhat += static_cast<double>(dy) * xhat;
        });
        if (in[1] >= 0) t.adjoint(in[1])[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
        if (in[2] >= 0) t.adjoint(in[2])[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
        if (in[0] >= 0) {
          auto gx = t.adjoint(in[0]);
          float kg = pg2[c] * ic;
          float mean_dy = static_cast<float>(sum_dy / static_cast<double>(n));
          float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(n));
          for_each_channel_element(xs, c, [&](int64_t i) {
            float xhat = (px2[i] - m) * ic;
            gx[static_cast<size_t>(i)] +=
                kg * (adj[static_cast<size_t>(i)] - mean_dy - xhat * mean_dy_xhat);
          });
        }
      }
    };
  });
  return out;
}

}  // namespace pdq
