#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "codac/tensor.hpp"

namespace codac {

// Named trainable tensors in insertion order. Names are unique; iteration
// order is the creation order, so optimizer sweeps and checkpoints are
// deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape);
  Tensor& put(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  void zero_grad();
  void set_requires_grad(bool rg);

  // FNV-1a over names and storage-precision values; detects any drift in
  // a parameter set, e.g. an encoder that must stay frozen.
  std::uint64_t checksum() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

double uniform_draw(std::mt19937_64& rng);  // [0, 1)
double gauss_draw(std::mt19937_64& rng);    // standard normal via Box-Muller
void fill_uniform(Tensor& t, double lo, double hi, std::mt19937_64& rng);
void xavier_init(Tensor& t, int fan_in, int fan_out, std::mt19937_64& rng);

// Deterministic in-place Fisher-Yates driven by uniform_draw.
void shuffle_indices(std::vector<int>& v, std::mt19937_64& rng);

// Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8). Moments
// are kept in 64-bit; updated parameters are rounded back to storage
// precision. Parameters with requires_grad=false or no accumulated
// gradient are skipped. A non-finite gradient raises NumericError naming
// the offending parameter.
class Adam {
 public:
  Adam(ParamStore& store, double lr);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int steps_taken() const { return t_; }

  void step();

 private:
  ParamStore* store_;
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace codac
