#include "codac/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "codac/common.hpp"

namespace codac {

Tensor& ParamStore::create(const std::string& name, Shape shape) {
  return put(name, Tensor::zeros(std::move(shape), true));
}

Tensor& ParamStore::put(const std::string& name, Tensor t) {
  if (has(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  names_.push_back(name);
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

Tensor& ParamStore::get(const std::string& name) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw std::invalid_argument("ParamStore: no parameter named " + name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw std::invalid_argument("ParamStore: no parameter named " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const std::string& n : names_) {
    if (n == name) return true;
  }
  return false;
}

void ParamStore::zero_grad() {
  for (Tensor& t : tensors_) t.zero_grad();
}

void ParamStore::set_requires_grad(bool rg) {
  for (Tensor& t : tensors_) t.set_requires_grad(rg);
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    h = fnv1a64(names_[i], h);
    const unsigned char zero = 0;
    h = fnv1a64(&zero, 1, h);
    for (double v : tensors_[i].values()) {
      const float f = static_cast<float>(v);
      unsigned char bytes[4];
      std::memcpy(bytes, &f, 4);
      h = fnv1a64(bytes, 4, h);
    }
  }
  return h;
}

double uniform_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double gauss_draw(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform_draw(rng);  // (0, 1]
  const double u2 = uniform_draw(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

void fill_uniform(Tensor& t, double lo, double hi, std::mt19937_64& rng) {
  auto vals = t.values_mut();
  for (double& v : vals) v = lo + (hi - lo) * uniform_draw(rng);
  quantize_span(vals);
}

void xavier_init(Tensor& t, int fan_in, int fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  fill_uniform(t, -limit, limit, rng);
}

void shuffle_indices(std::vector<int>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_draw(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

Adam::Adam(ParamStore& store, double lr) : store_(&store), lr_(lr) {
  m_.resize(store.size());
  v_.resize(store.size());
}

void Adam::step() {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, t_);
  const double bc2 = 1.0 - std::pow(kBeta2, t_);
  if (m_.size() < store_->size()) {  // params registered after construction
    m_.resize(store_->size());
    v_.resize(store_->size());
  }
  for (std::size_t i = 0; i < store_->size(); ++i) {
    Tensor& p = store_->get(store_->names()[i]);
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(p.numel()), 0.0);
      v.assign(static_cast<std::size_t>(p.numel()), 0.0);
    }
    const auto g = p.grad();
    auto vals = p.values_mut();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient for parameter " + store_->names()[i]);
      }
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
      vals[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps);
    }
    quantize_span(vals);
  }
}

}  // namespace codac
