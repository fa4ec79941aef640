#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "codac/encoder.hpp"
#include "codac/params.hpp"
#include "codac/tensor.hpp"

namespace codac {

// Cropped views keep their native length; downstream weighting aligns by
// the crop offset instead of resampling back to T.
struct AugmentationSpec {
  double crop_frac = 0.5;
  double jitter_sigma = 0.1;
  double scale_lo = 0.8;
  double scale_hi = 1.2;

  void validate() const;
  bool is_identity() const;
};

struct AugmentedView {
  Tensor x;  // [len x D], len = round(crop_frac * T)
  int crop_offset = 0;
};

// Crop -> jitter -> one scalar scale, all drawn from streams derived from
// `seed`. An identity spec returns the input bit-exactly.
AugmentedView augment(const Tensor& x, const AugmentationSpec& spec, std::uint64_t seed);

// The anomaly-score slice covering a cropped view: rows offset..offset+len
// of the source segment's score vector, as a [len x 1] constant tensor.
Tensor score_slice(const std::vector<double>& scores, int offset, int len);

// Scalar-score MLP 1 -> 8 -> 1 (relu hidden), squashed by sigmoid.
void init_weight_head(ParamStore& store, const std::string& prefix, std::mt19937_64& rng);
Tensor weights_from_scores(const ParamStore& store, const std::string& prefix,
                           const Tensor& score_col);  // [len x 1] -> [len], in (0,1)

// h'_t = w_t * h_t rowwise.
Tensor apply_weights(const Tensor& h, const Tensor& w);

// Global average pool over time, then a 2-layer relu perceptron
// d_hidden -> d_hidden -> d_project.
void init_projection(ParamStore& store, const std::string& prefix, int d_hidden, int d_project,
                     std::mt19937_64& rng);
Tensor pool_and_project(const ParamStore& store, const std::string& prefix, const Tensor& h);

// Cross-view contrastive loss over two aligned batches of projections
// [N x d_project]: mean over items of the two directional InfoNCE terms,
// cosine similarity at temperature tau, denominators over the opposite
// view only. Zero-norm rows raise NumericError.
Tensor loss_inter(const Tensor& z1, const Tensor& z2, double tau);

// One anchor/positive/negatives InfoNCE cell at temperature tau: rows are
// cosine-compared to the anchor, the positive sits against the sampled
// negatives.
Tensor intra_pair_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                       double tau);

// Temporal InfoNCE within one (weighted) view: n_pairs random anchors,
// one positive within `delta` steps, 8 negatives farther than 2*delta;
// mean per-anchor loss. Deterministic in `seed`.
Tensor loss_intra(const Tensor& h_view, double tau, int delta, int n_pairs, std::uint64_t seed);

// l_inter + lambda * l_intra.
Tensor loss_total(const Tensor& l_inter, const Tensor& l_intra, double lambda);

}  // namespace codac
