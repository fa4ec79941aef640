#include "codac/dmcf.hpp"

#include <cmath>
#include <stdexcept>

#include "codac/common.hpp"

namespace codac {

void AugmentationSpec::validate() const {
  if (!(crop_frac > 0.0 && crop_frac <= 1.0)) {
    throw std::invalid_argument("augmentation: crop_frac must be in (0, 1]");
  }
  if (jitter_sigma < 0.0) throw std::invalid_argument("augmentation: negative jitter_sigma");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) {
    throw std::invalid_argument("augmentation: need 0 < scale_lo <= scale_hi");
  }
}

bool AugmentationSpec::is_identity() const {
  return crop_frac == 1.0 && jitter_sigma == 0.0 && scale_lo == 1.0 && scale_hi == 1.0;
}

AugmentedView augment(const Tensor& x, const AugmentationSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (x.rank() != 2) throw std::invalid_argument("augment: input must be [T x D]");
  const int t_len = x.dim(0), d = x.dim(1);
  const int len = static_cast<int>(std::lround(spec.crop_frac * t_len));
  if (len < 8) {
    throw std::invalid_argument("augment: crop of " + std::to_string(len) +
                                " timesteps is shorter than 8");
  }
  auto rng = rng_stream(seed, "augment");

  int offset = 0;
  if (len < t_len) {
    offset = std::min(t_len - len, static_cast<int>(uniform_draw(rng) * (t_len - len + 1)));
  }

  std::vector<double> vals(static_cast<std::size_t>(len) * d);
  const auto src = x.values();
  for (int t = 0; t < len; ++t) {
    for (int c = 0; c < d; ++c) {
      vals[static_cast<std::size_t>(t) * d + c] =
          src[static_cast<std::size_t>(offset + t) * d + c];
    }
  }
  bool touched = false;
  if (spec.jitter_sigma > 0.0) {
    for (double& v : vals) v += spec.jitter_sigma * gauss_draw(rng);
    touched = true;
  }
  const double scale_c = spec.scale_lo == spec.scale_hi
                             ? spec.scale_lo
                             : spec.scale_lo + (spec.scale_hi - spec.scale_lo) * uniform_draw(rng);
  if (scale_c != 1.0) {
    for (double& v : vals) v *= scale_c;
    touched = true;
  }
  if (touched) quantize_span(vals);
  return {Tensor::from({len, d}, std::move(vals)), offset};
}

Tensor score_slice(const std::vector<double>& scores, int offset, int len) {
  if (offset < 0 || len < 1 ||
      static_cast<std::size_t>(offset) + static_cast<std::size_t>(len) > scores.size()) {
    throw std::invalid_argument("score_slice: window [" + std::to_string(offset) + ", " +
                                std::to_string(offset + len) + ") outside score vector of " +
                                std::to_string(scores.size()));
  }
  std::vector<double> vals(scores.begin() + offset, scores.begin() + offset + len);
  return Tensor::from({len, 1}, std::move(vals));
}

void init_weight_head(ParamStore& store, const std::string& prefix, std::mt19937_64& rng) {
  xavier_init(store.create(prefix + "l1.w", {1, 8}), 1, 8, rng);
  store.create(prefix + "l1.b", {8});
  xavier_init(store.create(prefix + "l2.w", {8, 1}), 8, 1, rng);
  store.create(prefix + "l2.b", {1});
}

Tensor weights_from_scores(const ParamStore& store, const std::string& prefix,
                           const Tensor& score_col) {
  if (score_col.rank() != 2 || score_col.dim(1) != 1) {
    throw std::invalid_argument("weights_from_scores: scores must be [len x 1]");
  }
  Tensor hid = relu(add_rowvec(matmul(score_col, store.get(prefix + "l1.w")),
                               store.get(prefix + "l1.b")));
  Tensor out = add_rowvec(matmul(hid, store.get(prefix + "l2.w")), store.get(prefix + "l2.b"));
  return reshape(sigmoid(out), {score_col.dim(0)});
}

Tensor apply_weights(const Tensor& h, const Tensor& w) {
  if (h.rank() != 2 || w.rank() != 1 || h.dim(0) != w.dim(0)) {
    throw std::invalid_argument("apply_weights: weight length does not match rows");
  }
  return rowwise_scale(h, w);
}

void init_projection(ParamStore& store, const std::string& prefix, int d_hidden, int d_project,
                     std::mt19937_64& rng) {
  if (d_hidden < 1 || d_project < 1) throw std::invalid_argument("projection: bad widths");
  xavier_init(store.create(prefix + "l1.w", {d_hidden, d_hidden}), d_hidden, d_hidden, rng);
  store.create(prefix + "l1.b", {d_hidden});
  xavier_init(store.create(prefix + "l2.w", {d_hidden, d_project}), d_hidden, d_project, rng);
  store.create(prefix + "l2.b", {d_project});
}

Tensor pool_and_project(const ParamStore& store, const std::string& prefix, const Tensor& h) {
  const int d = h.dim(1);
  Tensor pooled = reshape(global_mean_pool(h), {1, d});
  Tensor hid = relu(add_rowvec(matmul(pooled, store.get(prefix + "l1.w")),
                               store.get(prefix + "l1.b")));
  Tensor out = add_rowvec(matmul(hid, store.get(prefix + "l2.w")), store.get(prefix + "l2.b"));
  return reshape(out, {out.dim(1)});
}

Tensor loss_inter(const Tensor& z1, const Tensor& z2, double tau) {
  if (z1.rank() != 2 || z1.shape() != z2.shape()) {
    throw std::invalid_argument("loss_inter: views must share an [N x d] shape");
  }
  if (tau <= 0.0) throw std::invalid_argument("loss_inter: tau must be positive");
  const int n = z1.dim(0);

  const Tensor s = scale(matmul(l2_normalize_rows(z1), transpose(l2_normalize_rows(z2))),
                         1.0 / tau);
  // Row softmax: view-1 anchors against all view-2 candidates; column
  // softmax: the symmetric direction. Both positives sit on the diagonal.
  const Tensor both = add(log_softmax(s, 1), log_softmax(s, 0));
  Tensor diag_mask = Tensor::zeros({n, n});
  {
    auto m = diag_mask.values_mut();
    for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i) * n + i] = 1.0;
  }
  return scale(sum(mul(both, diag_mask)), -1.0 / (2.0 * n));
}

Tensor intra_pair_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                       double tau) {
  if (tau <= 0.0) throw std::invalid_argument("intra_pair_loss: tau must be positive");
  const Tensor an = l2_normalize_rows(anchor);
  const Tensor sims_pos = matmul(an, transpose(l2_normalize_rows(positive)));    // [1 x 1]
  const Tensor sims_neg = matmul(an, transpose(l2_normalize_rows(negatives)));   // [1 x k]
  const Tensor row = scale(concat_cols({sims_pos, sims_neg}), 1.0 / tau);
  const Tensor ls = log_softmax(row, 1);
  Tensor first = Tensor::zeros({1, row.dim(1)});
  first.values_mut()[0] = 1.0;
  return scale(sum(mul(ls, first)), -1.0);
}

Tensor loss_intra(const Tensor& h_view, double tau, int delta, int n_pairs, std::uint64_t seed) {
  if (h_view.rank() != 2) throw std::invalid_argument("loss_intra: view must be [T x d]");
  if (delta < 1 || n_pairs < 1) throw std::invalid_argument("loss_intra: bad delta or n_pairs");
  const int t_len = h_view.dim(0);
  // Anchors need at least one timestep farther away than 2*delta.
  if (t_len - 1 <= 2 * delta) {
    throw std::invalid_argument("loss_intra: sequence of " + std::to_string(t_len) +
                                " timesteps is too short for delta " + std::to_string(delta));
  }
  auto rng = rng_stream(seed, "intra");
  auto draw_index = [&](int n) { return std::min(n - 1, static_cast<int>(uniform_draw(rng) * n)); };

  Tensor total = Tensor::scalar(0.0);
  for (int pair = 0; pair < n_pairs; ++pair) {
    int t;
    do {
      t = draw_index(t_len);
    } while (t <= 2 * delta && t_len - 1 - t <= 2 * delta);

    std::vector<int> pos_candidates;
    for (int d = 1; d <= delta; ++d) {
      if (t - d >= 0) pos_candidates.push_back(t - d);
      if (t + d < t_len) pos_candidates.push_back(t + d);
    }
    const int t_pos = pos_candidates[static_cast<std::size_t>(
        draw_index(static_cast<int>(pos_candidates.size())))];

    std::vector<int> neg_candidates;
    for (int u = 0; u < t_len; ++u) {
      if (std::abs(u - t) > 2 * delta) neg_candidates.push_back(u);
    }
    std::vector<int> negs(8);
    for (int& u : negs) {
      u = neg_candidates[static_cast<std::size_t>(
          draw_index(static_cast<int>(neg_candidates.size())))];
    }

    total = add(total, intra_pair_loss(gather_rows(h_view, {t}), gather_rows(h_view, {t_pos}),
                                       gather_rows(h_view, negs), tau));
  }
  return scale(total, 1.0 / n_pairs);
}

Tensor loss_total(const Tensor& l_inter, const Tensor& l_intra, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("loss_total: lambda must be >= 0");
  return add(l_inter, scale(l_intra, lambda));
}

}  // namespace codac
