#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "codac/common.hpp"

namespace codac {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Values are held as doubles but rounded to the float32 grid after every
// op, so storage is 32-bit precision while reductions accumulate in
// 64-bit. FullPrecisionGuard lifts the rounding for finite-difference
// oracles, which need a 64-bit evaluation of the same graph.
bool full_precision_mode();

class FullPrecisionGuard {
 public:
  FullPrecisionGuard();
  ~FullPrecisionGuard();
  FullPrecisionGuard(const FullPrecisionGuard&) = delete;
  FullPrecisionGuard& operator=(const FullPrecisionGuard&) = delete;

 private:
  bool prev_;
};

double quantize_value(double v);
void quantize_span(std::span<double> vals);

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // same size as values once touched, else empty
  bool requires_grad = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  int dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return data_->numel(); }
  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool rg);

  std::span<const double> values() const { return data_->values; }
  std::span<double> values_mut() { return data_->values; }
  double at(int i) const;
  double at(int i, int j) const;
  double at(int i, int j, int k) const;
  double item() const;

  bool has_grad() const { return !data_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();
  void accumulate_grad(std::span<const double> g);

  // Value copy detached from any tape, never requiring grad.
  Tensor detached() const;

  TensorData* node() const { return data_.get(); }
  std::shared_ptr<TensorData> handle() const { return data_; }

  explicit Tensor(std::shared_ptr<TensorData> d) : data_(std::move(d)) {}

 private:
  std::shared_ptr<TensorData> data_;
};

// Execution-ordered op record. Ops append themselves while a Tape is
// active on the current thread; backward() replays the records once in
// reverse. Execution order is a topological order by construction.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  std::size_t op_count() const { return ops_.size(); }

  // Seeds d(loss)/d(loss)=1 and replays records in reverse. loss must be
  // scalar and finite; calling backward twice on one tape throws.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// True when an active tape exists and any input requires grad.
bool grad_enabled(std::initializer_list<const Tensor*> inputs);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // [r x c] + [c]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);  // 2-D
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_cols(const Tensor& x, int first, int count);  // 2-D column block
Tensor conv1d_dilated(const Tensor& x, const Tensor& kernels, int dilation);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor global_mean_pool(const Tensor& x);  // [t x d] -> [d]
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor rowwise_scale(const Tensor& x, const Tensor& w);  // [t x d] * w[t]
Tensor l2_normalize_rows(const Tensor& x);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor concat_cols(const std::vector<Tensor>& parts);  // [n] or [n x d_i]
Tensor stack_rows(const std::vector<Tensor>& rows);    // k vectors [d] -> [k x d]
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

struct AttentionResult {
  Tensor output;
  Tensor weights;
};
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Convenience for the common "backward through active tape" call.
void backward(const Tensor& loss);

// ---- finite-difference oracle ---------------------------------------------

// Central differences at step 1e-3 against the tape gradient, both
// evaluated in full precision. Pass criterion per element:
// |ad - fd| <= max(abs_floor, tol * max(|ad|, |fd|)).
struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "input#i[j]" of the worst element
};

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           std::span<Tensor> inputs, double tol = 1e-4,
                           double fd_step = 1e-3, double abs_floor = 1e-6);
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double tol = 1e-4);

}  // namespace codac
