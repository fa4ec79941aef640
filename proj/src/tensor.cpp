#include "codac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "codac/kernels.hpp"

namespace codac {

namespace {

thread_local bool g_full_precision = false;
thread_local Tape* g_active_tape = nullptr;

using DataPtr = std::shared_ptr<TensorData>;

void check_shape_match(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_rank(const char* op, const Tensor& x, int rank) {
  if (x.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

// Quantize to storage precision (unless lifted) and reject non-finite
// outputs with the op name attached.
void finalize(const char* op, TensorData& d) {
  if (!g_full_precision) quantize_span(d.values);
  for (double v : d.values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite output");
    }
  }
}

Tensor make_out(const char* op, Shape shape, std::vector<double> vals, bool rg) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(vals);
  d->requires_grad = rg;
  finalize(op, *d);
  return Tensor(std::move(d));
}

// Output grad of a node, or nullptr if the node never received one (not
// an ancestor of the loss).
const double* out_grad(const DataPtr& d) {
  return d->grad.empty() ? nullptr : d->grad.data();
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool full_precision_mode() { return g_full_precision; }

FullPrecisionGuard::FullPrecisionGuard() : prev_(g_full_precision) {
  g_full_precision = true;
}

FullPrecisionGuard::~FullPrecisionGuard() { g_full_precision = prev_; }

double quantize_value(double v) {
  return static_cast<double>(static_cast<float>(v));
}

void quantize_span(std::span<double> vals) {
  for (double& v : vals) v = static_cast<double>(static_cast<float>(v));
}

void TensorData::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
              requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
              requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor::from: non-positive dim in " + shape_str(shape));
  }
  return make_out("from", std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool rg) { data_->requires_grad = rg; }

double Tensor::at(int i) const {
  if (rank() != 1) throw std::invalid_argument("at(i): tensor is " + shape_str(shape()));
  return data_->values[static_cast<std::size_t>(i)];
}

double Tensor::at(int i, int j) const {
  if (rank() != 2) throw std::invalid_argument("at(i,j): tensor is " + shape_str(shape()));
  return data_->values[static_cast<std::size_t>(i) * shape()[1] + j];
}

double Tensor::at(int i, int j, int k) const {
  if (rank() != 3) throw std::invalid_argument("at(i,j,k): tensor is " + shape_str(shape()));
  const auto& s = shape();
  return data_->values[(static_cast<std::size_t>(i) * s[1] + j) * s[2] + k];
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor is " + shape_str(shape()));
  return data_->values[0];
}

std::span<const double> Tensor::grad() const {
  if (data_->grad.empty()) throw std::logic_error("grad: not populated");
  return data_->grad;
}

std::span<double> Tensor::grad_mut() {
  data_->ensure_grad();
  return data_->grad;
}

void Tensor::zero_grad() {
  std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != data_->values.size()) {
    throw std::invalid_argument("accumulate_grad: size mismatch");
  }
  data_->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) data_->grad[i] += g[i];
}

Tensor Tensor::detached() const {
  auto d = std::make_shared<TensorData>();
  d->shape = data_->shape;
  d->values = data_->values;
  d->requires_grad = false;
  return Tensor(std::move(d));
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) throw NumericError("backward: non-finite loss");
  consumed_ = true;
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void backward(const Tensor& loss) {
  if (!g_active_tape) throw std::logic_error("backward: no active tape");
  g_active_tape->backward(loss);
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_shape_match("add", a, b);
  const bool rg = grad_enabled({&a, &b});
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> vals(av.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = av[i] + bv[i];
  Tensor out = make_out("add", a.shape(), std::move(vals), rg);
  if (rg) {
    auto ad = a.handle(), bd = b.handle(), od = out.handle();
    Tape::active()->record([ad, bd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_shape_match("sub", a, b);
  const bool rg = grad_enabled({&a, &b});
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> vals(av.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = av[i] - bv[i];
  Tensor out = make_out("sub", a.shape(), std::move(vals), rg);
  if (rg) {
    auto ad = a.handle(), bd = b.handle(), od = out.handle();
    Tape::active()->record([ad, bd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_shape_match("mul", a, b);
  const bool rg = grad_enabled({&a, &b});
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> vals(av.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = av[i] * bv[i];
  Tensor out = make_out("mul", a.shape(), std::move(vals), rg);
  if (rg) {
    auto ad = a.handle(), bd = b.handle(), od = out.handle();
    Tape::active()->record([ad, bd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g[i] * bd->values[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] += g[i] * ad->values[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = xv[i] * c;
  Tensor out = make_out("scale", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, c] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i] * c;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& x, double c) {
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = xv[i] + c;
  Tensor out = make_out("add_scalar", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i];
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  check_rank("add_rowvec", x, 2);
  check_rank("add_rowvec", bias, 1);
  const int r = x.dim(0), c = x.dim(1);
  if (bias.dim(0) != c) {
    throw std::invalid_argument("add_rowvec: bias " + shape_str(bias.shape()) +
                                " vs matrix " + shape_str(x.shape()));
  }
  const bool rg = grad_enabled({&x, &bias});
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> vals(xv.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) vals[i * c + j] = xv[i * c + j] + bv[j];
  }
  Tensor out = make_out("add_rowvec", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), bd = bias.handle(), od = out.handle();
    Tape::active()->record([xd, bd, od, r, c] {
      const double* g = out_grad(od);
      if (!g) return;
      if (xd->requires_grad) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (int j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int i = 0; i < r; ++i) acc += g[i * c + j];
          bd->grad[j] += acc;
        }
      }
    });
  }
  return out;
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank("matmul", a, 2);
  check_rank("matmul", b, 2);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  const bool rg = grad_enabled({&a, &b});
  std::vector<double> vals(static_cast<std::size_t>(m) * n);
  kernels::matmul_nn(a.values().data(), b.values().data(), vals.data(), m, k, n);
  Tensor out = make_out("matmul", {m, n}, std::move(vals), rg);
  if (rg) {
    auto ad = a.handle(), bd = b.handle(), od = out.handle();
    Tape::active()->record([ad, bd, od, m, k, n] {
      const double* g = out_grad(od);
      if (!g) return;
      if (ad->requires_grad) {
        ad->ensure_grad();
        std::vector<double> tmp(static_cast<std::size_t>(m) * k);
        kernels::matmul_nt(g, bd->values.data(), tmp.data(), m, n, k);
        for (std::size_t i = 0; i < tmp.size(); ++i) ad->grad[i] += tmp[i];
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        std::vector<double> tmp(static_cast<std::size_t>(k) * n);
        kernels::matmul_tn(ad->values.data(), g, tmp.data(), m, k, n);
        for (std::size_t i = 0; i < tmp.size(); ++i) bd->grad[i] += tmp[i];
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  check_rank("transpose", x, 2);
  const int r = x.dim(0), c = x.dim(1);
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) vals[static_cast<std::size_t>(j) * r + i] = xv[i * c + j];
  }
  Tensor out = make_out("transpose", {c, r}, std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, r, c] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) xd->grad[static_cast<std::size_t>(i) * c + j] += g[j * r + i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const bool rg = grad_enabled({&x});
  std::vector<double> vals(x.values().begin(), x.values().end());
  Tensor out = make_out("reshape", std::move(shape), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int first, int count) {
  check_rank("slice_cols", x, 2);
  const int r = x.dim(0), c = x.dim(1);
  if (first < 0 || count <= 0 || first + count > c) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") of " + shape_str(x.shape()));
  }
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(static_cast<std::size_t>(r) * count);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < count; ++j) vals[static_cast<std::size_t>(i) * count + j] = xv[i * c + first + j];
  }
  Tensor out = make_out("slice_cols", {r, count}, std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, r, c, first, count] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < count; ++j) {
          xd->grad[static_cast<std::size_t>(i) * c + first + j] += g[i * count + j];
        }
      }
    });
  }
  return out;
}

Tensor conv1d_dilated(const Tensor& x, const Tensor& kernels_w, int dilation) {
  check_rank("conv1d_dilated", x, 2);
  check_rank("conv1d_dilated", kernels_w, 3);
  const int t_len = x.dim(0), c_in = x.dim(1);
  const int c_out = kernels_w.dim(0), ksize = kernels_w.dim(2);
  if (kernels_w.dim(1) != c_in) {
    throw std::invalid_argument("conv1d_dilated: x " + shape_str(x.shape()) + " vs w " +
                                shape_str(kernels_w.shape()));
  }
  if (dilation < 1) throw std::invalid_argument("conv1d_dilated: dilation < 1");
  if (ksize % 2 == 0) throw std::invalid_argument("conv1d_dilated: kernel size must be odd");
  const bool rg = grad_enabled({&x, &kernels_w});
  std::vector<double> vals(static_cast<std::size_t>(t_len) * c_out);
  kernels::conv1d(x.values().data(), kernels_w.values().data(), vals.data(),
                  t_len, c_in, c_out, ksize, dilation);
  Tensor out = make_out("conv1d_dilated", {t_len, c_out}, std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), wd = kernels_w.handle(), od = out.handle();
    Tape::active()->record([xd, wd, od, t_len, c_in, c_out, ksize, dilation] {
      const double* g = out_grad(od);
      if (!g) return;
      if (xd->requires_grad) {
        xd->ensure_grad();
        kernels::conv1d_grad_x(g, wd->values.data(), xd->grad.data(),
                               t_len, c_in, c_out, ksize, dilation);
      }
      if (wd->requires_grad) {
        wd->ensure_grad();
        kernels::conv1d_grad_w(g, xd->values.data(), wd->grad.data(),
                               t_len, c_in, c_out, ksize, dilation);
      }
    });
  }
  return out;
}

// ---- normalizations and activations ---------------------------------------

namespace {

// Iteration plan over 1-D runs of a rank-1/rank-2 tensor along an axis.
struct RunPlan {
  int runs;
  int len;
  std::size_t start_stride;  // offset between run starts
  std::size_t step;          // stride within a run
};

RunPlan axis_runs(const char* op, const Tensor& x, int axis) {
  if (x.rank() == 1) return {1, x.dim(0), 0, 1};
  if (x.rank() == 2) {
    const int r = x.dim(0), c = x.dim(1);
    if (axis == 1) return {r, c, static_cast<std::size_t>(c), 1};
    if (axis == 0) return {c, r, 1, static_cast<std::size_t>(c)};
    throw std::invalid_argument(std::string(op) + ": axis must be 0 or 1");
  }
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " +
                              shape_str(x.shape()));
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const RunPlan p = axis_runs("softmax", x, axis);
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (int run = 0; run < p.runs; ++run) {
    const std::size_t base = run * p.start_stride;
    double mx = xv[base];
    for (int i = 1; i < p.len; ++i) mx = std::max(mx, xv[base + i * p.step]);
    double denom = 0.0;
    for (int i = 0; i < p.len; ++i) {
      const double e = std::exp(xv[base + i * p.step] - mx);
      vals[base + i * p.step] = e;
      denom += e;
    }
    for (int i = 0; i < p.len; ++i) vals[base + i * p.step] /= denom;
  }
  Tensor out = make_out("softmax", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, p] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      const auto& y = od->values;
      for (int run = 0; run < p.runs; ++run) {
        const std::size_t base = run * p.start_stride;
        double dot = 0.0;
        for (int i = 0; i < p.len; ++i) dot += g[base + i * p.step] * y[base + i * p.step];
        for (int i = 0; i < p.len; ++i) {
          const std::size_t idx = base + i * p.step;
          xd->grad[idx] += y[idx] * (g[idx] - dot);
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  const RunPlan p = axis_runs("log_softmax", x, axis);
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (int run = 0; run < p.runs; ++run) {
    const std::size_t base = run * p.start_stride;
    double mx = xv[base];
    for (int i = 1; i < p.len; ++i) mx = std::max(mx, xv[base + i * p.step]);
    double denom = 0.0;
    for (int i = 0; i < p.len; ++i) denom += std::exp(xv[base + i * p.step] - mx);
    const double log_denom = mx + std::log(denom);
    for (int i = 0; i < p.len; ++i) {
      vals[base + i * p.step] = xv[base + i * p.step] - log_denom;
    }
  }
  Tensor out = make_out("log_softmax", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, p] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      const auto& y = od->values;
      for (int run = 0; run < p.runs; ++run) {
        const std::size_t base = run * p.start_stride;
        double gsum = 0.0;
        for (int i = 0; i < p.len; ++i) gsum += g[base + i * p.step];
        for (int i = 0; i < p.len; ++i) {
          const std::size_t idx = base + i * p.step;
          xd->grad[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int rank = x.rank();
  if (rank != 1 && rank != 2) {
    throw std::invalid_argument("layer_norm: expected rank 1 or 2, got " + shape_str(x.shape()));
  }
  const int rows = rank == 2 ? x.dim(0) : 1;
  const int c = rank == 2 ? x.dim(1) : x.dim(0);
  check_rank("layer_norm", gain, 1);
  check_rank("layer_norm", bias, 1);
  if (gain.dim(0) != c || bias.dim(0) != c) {
    throw std::invalid_argument("layer_norm: gain/bias width mismatch for " + shape_str(x.shape()));
  }
  const bool rg = grad_enabled({&x, &gain, &bias});
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> vals(xv.size());
  std::vector<double> mu(rows), inv_s(rows);
  for (int i = 0; i < rows; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += xv[base + j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xv[base + j] - m;
      var += d * d;
    }
    var /= c;
    mu[i] = m;
    inv_s[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      vals[base + j] = gv[j] * (xv[base + j] - m) * inv_s[i] + bv[j];
    }
  }
  Tensor out = make_out("layer_norm", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), gd = gain.handle(), bd = bias.handle(), od = out.handle();
    Tape::active()->record([xd, gd, bd, od, rows, c, mu = std::move(mu),
                            inv_s = std::move(inv_s)] {
      const double* g = out_grad(od);
      if (!g) return;
      for (int i = 0; i < rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double mean_gdy = 0.0, mean_gdy_xhat = 0.0;
        for (int j = 0; j < c; ++j) {
          const double xhat = (xd->values[base + j] - mu[i]) * inv_s[i];
          const double gdy = gd->values[j] * g[base + j];
          mean_gdy += gdy;
          mean_gdy_xhat += gdy * xhat;
        }
        mean_gdy /= c;
        mean_gdy_xhat /= c;
        for (int j = 0; j < c; ++j) {
          const double xhat = (xd->values[base + j] - mu[i]) * inv_s[i];
          if (xd->requires_grad) {
            xd->ensure_grad();
            const double gdy = gd->values[j] * g[base + j];
            xd->grad[base + j] += (gdy - mean_gdy - xhat * mean_gdy_xhat) * inv_s[i];
          }
          if (gd->requires_grad) {
            gd->ensure_grad();
            gd->grad[j] += g[base + j] * xhat;
          }
          if (bd->requires_grad) {
            bd->ensure_grad();
            bd->grad[j] += g[base + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double v = xv[i];
    if (v >= 0.0) {
      vals[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      vals[i] = e / (1.0 + e);
    }
  }
  Tensor out = make_out("sigmoid", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) {
        const double y = od->values[i];
        xd->grad[i] += g[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor out = make_out("relu", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) {
        if (xd->values[i] > 0.0) xd->grad[i] += g[i];
      }
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::log(xv[i]);
  Tensor out = make_out("log", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i] / xd->values[i];
    });
  }
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = std::clamp(xv[i], lo, hi);
  Tensor out = make_out("clamp", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, lo, hi] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) {
        const double v = xd->values[i];
        if (v >= lo && v <= hi) xd->grad[i] += g[i];
      }
    });
  }
  return out;
}

// ---- reductions and reweighting -------------------------------------------

Tensor global_mean_pool(const Tensor& x) {
  check_rank("global_mean_pool", x, 2);
  const int r = x.dim(0), c = x.dim(1);
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(static_cast<std::size_t>(c), 0.0);
  for (int j = 0; j < c; ++j) {
    double acc = 0.0;
    for (int i = 0; i < r; ++i) acc += xv[static_cast<std::size_t>(i) * c + j];
    vals[static_cast<std::size_t>(j)] = acc / r;
  }
  Tensor out = make_out("global_mean_pool", {c}, std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, r, c] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) xd->grad[static_cast<std::size_t>(i) * c + j] += g[j] / r;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool rg = grad_enabled({&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = make_out("sum", {}, {acc}, rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const bool rg = grad_enabled({&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double n = static_cast<double>(x.numel());
  Tensor out = make_out("mean", {}, {acc / n}, rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, n] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[0] / n;
    });
  }
  return out;
}

Tensor rowwise_scale(const Tensor& x, const Tensor& w) {
  check_rank("rowwise_scale", x, 2);
  check_rank("rowwise_scale", w, 1);
  const int r = x.dim(0), c = x.dim(1);
  if (w.dim(0) != r) {
    throw std::invalid_argument("rowwise_scale: weights " + shape_str(w.shape()) +
                                " vs matrix " + shape_str(x.shape()));
  }
  const bool rg = grad_enabled({&x, &w});
  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> vals(xv.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      vals[static_cast<std::size_t>(i) * c + j] = xv[static_cast<std::size_t>(i) * c + j] * wv[i];
    }
  }
  Tensor out = make_out("rowwise_scale", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), wd = w.handle(), od = out.handle();
    Tape::active()->record([xd, wd, od, r, c] {
      const double* g = out_grad(od);
      if (!g) return;
      if (xd->requires_grad) {
        xd->ensure_grad();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) {
            xd->grad[static_cast<std::size_t>(i) * c + j] += g[i * c + j] * wd->values[i];
          }
        }
      }
      if (wd->requires_grad) {
        wd->ensure_grad();
        for (int i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int j = 0; j < c; ++j) acc += g[i * c + j] * xd->values[static_cast<std::size_t>(i) * c + j];
          wd->grad[i] += acc;
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  const int rank = x.rank();
  if (rank != 1 && rank != 2) {
    throw std::invalid_argument("l2_normalize_rows: expected rank 1 or 2, got " +
                                shape_str(x.shape()));
  }
  const int rows = rank == 2 ? x.dim(0) : 1;
  const int c = rank == 2 ? x.dim(1) : x.dim(0);
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(xv.size());
  std::vector<double> norms(rows);
  for (int i = 0; i < rows; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * c;
    double sq = 0.0;
    for (int j = 0; j < c; ++j) sq += xv[base + j] * xv[base + j];
    const double n = std::sqrt(sq);
    if (n == 0.0) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms[i] = n;
    for (int j = 0; j < c; ++j) vals[base + j] = xv[base + j] / n;
  }
  Tensor out = make_out("l2_normalize_rows", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, rows, c, norms = std::move(norms)] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += g[base + j] * od->values[base + j];
        for (int j = 0; j < c; ++j) {
          xd->grad[base + j] += (g[base + j] - od->values[base + j] * dot) / norms[i];
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  check_rank("gather_rows", x, 2);
  const int r = x.dim(0), c = x.dim(1);
  for (int idx : rows) {
    if (idx < 0 || idx >= r) {
      throw std::invalid_argument("gather_rows: row " + std::to_string(idx) + " out of " +
                                  std::to_string(r));
    }
  }
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> vals(rows.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t src = static_cast<std::size_t>(rows[i]) * c;
    for (int j = 0; j < c; ++j) vals[i * c + j] = xv[src + j];
  }
  Tensor out = make_out("gather_rows", {static_cast<int>(rows.size()), c}, std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, rows, c] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t dst = static_cast<std::size_t>(rows[i]) * c;
        for (int j = 0; j < c; ++j) xd->grad[dst + j] += g[i * c + j];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  int r = -1;
  int total = 0;
  std::vector<int> widths(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& t = parts[p];
    int rows, cols;
    if (t.rank() == 1) {
      rows = t.dim(0);
      cols = 1;
    } else if (t.rank() == 2) {
      rows = t.dim(0);
      cols = t.dim(1);
    } else {
      throw std::invalid_argument("concat_cols: part rank " + shape_str(t.shape()));
    }
    if (r == -1) r = rows;
    if (rows != r) throw std::invalid_argument("concat_cols: row count mismatch");
    widths[p] = cols;
    total += cols;
  }
  bool rg = false;
  {
    std::vector<const Tensor*> ptrs;
    for (const Tensor& t : parts) ptrs.push_back(&t);
    if (Tape::active()) {
      for (const Tensor* t : ptrs) {
        if (t->requires_grad()) {
          rg = true;
          break;
        }
      }
    }
  }
  std::vector<double> vals(static_cast<std::size_t>(r) * total);
  int col0 = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pv = parts[p].values();
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < widths[p]; ++j) {
        vals[static_cast<std::size_t>(i) * total + col0 + j] = pv[static_cast<std::size_t>(i) * widths[p] + j];
      }
    }
    col0 += widths[p];
  }
  Tensor out = make_out("concat_cols", {r, total}, std::move(vals), rg);
  if (rg) {
    std::vector<DataPtr> handles;
    for (const Tensor& t : parts) handles.push_back(t.handle());
    auto od = out.handle();
    Tape::active()->record([handles = std::move(handles), widths, od, r, total] {
      const double* g = out_grad(od);
      if (!g) return;
      int col0 = 0;
      for (std::size_t p = 0; p < handles.size(); ++p) {
        if (handles[p]->requires_grad) {
          handles[p]->ensure_grad();
          for (int i = 0; i < r; ++i) {
            for (int j = 0; j < widths[p]; ++j) {
              handles[p]->grad[static_cast<std::size_t>(i) * widths[p] + j] +=
                  g[static_cast<std::size_t>(i) * total + col0 + j];
            }
          }
        }
        col0 += widths[p];
      }
    });
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const int c = rows[0].rank() == 1 ? rows[0].dim(0) : -1;
  if (c <= 0) throw std::invalid_argument("stack_rows: parts must be rank 1");
  for (const Tensor& t : rows) {
    if (t.rank() != 1 || t.dim(0) != c) {
      throw std::invalid_argument("stack_rows: part " + shape_str(t.shape()) +
                                  " does not match width " + std::to_string(c));
    }
  }
  bool rg = false;
  if (Tape::active()) {
    for (const Tensor& t : rows) {
      if (t.requires_grad()) {
        rg = true;
        break;
      }
    }
  }
  const int k = static_cast<int>(rows.size());
  std::vector<double> vals(static_cast<std::size_t>(k) * c);
  for (int i = 0; i < k; ++i) {
    auto rv = rows[static_cast<std::size_t>(i)].values();
    for (int j = 0; j < c; ++j) vals[static_cast<std::size_t>(i) * c + j] = rv[j];
  }
  Tensor out = make_out("stack_rows", {k, c}, std::move(vals), rg);
  if (rg) {
    std::vector<DataPtr> handles;
    for (const Tensor& t : rows) handles.push_back(t.handle());
    auto od = out.handle();
    Tape::active()->record([handles = std::move(handles), od, c] {
      const double* g = out_grad(od);
      if (!g) return;
      for (std::size_t i = 0; i < handles.size(); ++i) {
        if (!handles[i]->requires_grad) continue;
        handles[i]->ensure_grad();
        for (int j = 0; j < c; ++j) handles[i]->grad[j] += g[i * c + j];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const bool rg = grad_enabled({&x});
  auto xv = x.values();
  std::vector<double> mask(xv.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u < rate ? 0.0 : keep_scale;
  }
  std::vector<double> vals(xv.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = xv[i] * mask[i];
  Tensor out = make_out("dropout", x.shape(), std::move(vals), rg);
  if (rg) {
    auto xd = x.handle(), od = out.handle();
    Tape::active()->record([xd, od, mask = std::move(mask)] {
      const double* g = out_grad(od);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g[i] * mask[i];
    });
  }
  return out;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_rank("scaled_dot_attention", q, 2);
  check_rank("scaled_dot_attention", k, 2);
  check_rank("scaled_dot_attention", v, 2);
  const int dh = q.dim(1);
  if (k.dim(1) != dh || k.dim(0) != v.dim(0)) {
    throw std::invalid_argument("scaled_dot_attention: q " + shape_str(q.shape()) + ", k " +
                                shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = softmax(scores, 1);
  Tensor output = matmul(weights, v);
  return {output, weights};
}

// ---- finite-difference oracle ---------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> inputs,
                           double tol, double fd_step, double abs_floor) {
  FullPrecisionGuard fp;
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.grad_mut();
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (Tensor& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult res;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    Tensor& t = inputs[which];
    auto vals = t.values_mut();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      vals[j] = saved + fd_step;
      const double lp = loss_fn().item();
      vals[j] = saved - fd_step;
      const double lm = loss_fn().item();
      vals[j] = saved;
      const double fd = (lp - lm) / (2.0 * fd_step);
      const double ad = analytic[which][j];
      const double diff = std::abs(ad - fd);
      const double scale_ref = std::max(std::abs(ad), std::abs(fd));
      const double rel = diff / std::max(scale_ref, abs_floor);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input#" + std::to_string(which) + "[" + std::to_string(j) + "]";
      }
      if (diff > std::max(abs_floor, tol * scale_ref)) res.ok = false;
    }
  }
  return res;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double tol) {
  Tensor input = x;
  std::vector<Tensor> inputs{input};
  return grad_check([&] { return f(inputs[0]); }, inputs, tol);
}

}  // namespace codac
