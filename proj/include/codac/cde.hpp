#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "codac/encoder.hpp"
#include "codac/params.hpp"
#include "codac/signal.hpp"
#include "codac/tensor.hpp"

namespace codac {

// Transformer autoencoder that learns healthy signal structure: input
// projection + positional encoding + attention blocks, squeezed through a
// narrow latent bottleneck and decoded back to the input space by one
// affine map. Scores deviation per timestep from the reconstruction
// residual and the shape of the attention it received.
struct CdeConfig {
  int d_in = 2;
  int d_model = 32;
  int n_blocks = 2;
  int n_heads = 4;
  int d_ff = 64;
  int d_latent = 16;
  double dropout_rate = 0.1;

  void validate() const;
};

struct AttentionSummary {
  Tensor a_bar;  // [T x T], attention averaged over every block and head
};

struct AnomalyScoreVector {
  std::vector<double> e;  // per-timestep squared reconstruction error, >= 0
  std::vector<double> a;  // attention concentration indicator, in [0, 1]
  std::vector<double> s;  // fused score
};

struct CdeModel {
  CdeConfig cfg;
  ParamStore params;

  CdeModel() = default;
  CdeModel(const CdeConfig& config, std::uint64_t seed);
};

// Reconstruction plus the layer/head-averaged attention summary. Training
// mode applies dropout from `rng`; eval mode never touches it.
std::pair<Tensor, AttentionSummary> reconstruct(const CdeModel& model, const Tensor& x,
                                                bool train = false,
                                                std::mt19937_64* rng = nullptr);

// e_t = squared L2 norm of the residual row t.
std::vector<double> recon_error(const Tensor& x, const Tensor& x_hat);

// a_t = 1 - H(column t of A_bar, renormalized) / ln T. Columns measure
// attention *received*; a one-timestep sequence scores 1 by convention.
std::vector<double> attention_indicator(const AttentionSummary& summary);

// s_t = z(e)_t + beta * z(a)_t with population-std standardization and
// z(constant) = 0.
std::vector<double> anomaly_score(const std::vector<double>& e, const std::vector<double>& a,
                                  double beta);

AnomalyScoreVector score_segment(const CdeModel& model, const Tensor& x, double beta);

// Adam on the reconstruction objective over healthy segments only (any
// diseased input is rejected). Returns the per-epoch mean training loss.
std::vector<double> train_cde(CdeModel& model, const std::vector<TimeSeriesSegment>& healthy,
                              int epochs, double lr, std::uint64_t seed);

}  // namespace codac
