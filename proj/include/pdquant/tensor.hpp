#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdq {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Thrown when an operation produces NaN or Inf. Finite values are an
/// invariant of every public tensor operation.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

class GradTape;

/// Dense float32 tensor with shape metadata. Copies are cheap and share
/// storage. Data is immutable once produced, except for gradient
/// accumulation and in-place parameter updates between optimizer steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int64_t dim(int i) const;
  int ndim() const { return static_cast<int>(shape().size()); }

  const float* data() const;
  float* data();
  std::span<const float> values() const { return {data(), static_cast<size_t>(size())}; }
  std::span<float> values_mut() { return {data(), static_cast<size_t>(size())}; }
  float at(int64_t i) const;
  /// Value of a scalar (single-element) tensor.
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();

  /// Deep copy; the copy is untracked and carries no gradient.
  Tensor clone() const;

  friend class GradTape;

 private:
  struct Data {
    Shape shape;
    std::vector<float> values;
    bool requires_grad = false;
    std::vector<float> grad;  // empty until first accumulation
    uint64_t tape_id = 0;     // 0: not recorded on any tape
    int64_t node = -1;
  };
  std::shared_ptr<Data> d_;
};

/// Reverse-mode tape. One tape is active per thread at a time; it records
/// the differentiable operations of a single optimization step and is
/// consumed by backward(). Gradients accumulate (+=) into tensors flagged
/// requires_grad.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  /// Seeds d(loss)=1 and replays the tape in reverse. loss must be a
  /// scalar recorded on this tape. The tape is consumed afterwards.
  void backward(const Tensor& loss);

  size_t num_nodes() const { return nodes_.size(); }

  // --- recording interface, used by tensor operations ---
  using BackwardFn = std::function<void(std::span<const float> out_adj, GradTape& tape)>;
  /// Node id of t as an input: its op node if produced on this tape, a
  /// fresh leaf node if t requires grad, -1 otherwise.
  int64_t input_node(const Tensor& t);
  /// Registers out as the product of a recorded op.
  void record(Tensor& out, BackwardFn fn);
  /// Adjoint buffer of a node, zero-initialized on first access.
  std::span<float> adjoint(int64_t node);

 private:
  struct Node {
    BackwardFn fn;  // empty for leaves
    int64_t numel = 0;
  };
  uint64_t id_;  // process-unique, guards against stale tape references
  std::vector<Node> nodes_;
  std::vector<std::vector<float>> adjoints_;
  bool consumed_ = false;
};

// ----- elementwise (scalar-with-tensor or equal shapes; no broadcasting) -----
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float s);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, float s);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, float s);
Tensor div(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor clamp_min(const Tensor& x, float lo);
Tensor reshape(const Tensor& x, Shape s);

// ----- reductions -----
Tensor sum_all(const Tensor& x);            // -> scalar
Tensor row_sum(const Tensor& x);            // [B,C] -> [B]
Tensor channel_mean(const Tensor& x);       // [B,C,H,W] over (B,H,W), [B,F] over B -> [C]
Tensor channel_std(const Tensor& x);        // population std, same reduction -> [C]

// ----- linear algebra / network primitives -----
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
Tensor transpose(const Tensor& a);                // [M,N] -> [N,M]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor add_row_bias(const Tensor& x, const Tensor& b);      // [B,F] + [F]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // [B,C,H,W] + [C]
Tensor avgpool_global(const Tensor& x);                     // [B,C,H,W] -> [B,C]
Tensor softmax_rows(const Tensor& x);                       // [B,C] row softmax

Tensor batchnorm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var, float eps);
/// Training-mode batch norm; writes the batch statistics used for
/// normalization to batch_mean/batch_var (population variance).
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                       Tensor* batch_mean = nullptr, Tensor* batch_var = nullptr);

/// Elementwise mix: mask==1 selects a_fp, mask==0 selects a_q. The mask is
/// a constant; gradients flow into a_q where mask==0.
Tensor mix_by_mask(const Tensor& a_q, const Tensor& a_fp, const Tensor& mask);

/// Row gather: out[i] = x[idx[i]] along the leading axis.
Tensor take_rows(const Tensor& x, std::span<const int> idx);

void check_finite(const Tensor& t, const char* op);

}  // namespace pdq
