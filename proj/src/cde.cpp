#include "codac/cde.hpp"

#include <cmath>
#include <stdexcept>

#include "codac/common.hpp"

namespace codac {

void CdeConfig::validate() const {
  if (d_in < 1) throw std::invalid_argument("cde config: d_in must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("cde config: d_model must be divisible by n_heads");
  }
  if (n_blocks < 1) throw std::invalid_argument("cde config: need at least one block");
  if (d_ff < 1 || d_latent < 1) throw std::invalid_argument("cde config: widths must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("cde config: dropout_rate must be in [0, 1)");
  }
}

CdeModel::CdeModel(const CdeConfig& config, std::uint64_t seed) : cfg(config) {
  cfg.validate();
  auto rng = rng_stream(seed, "cde_init");
  xavier_init(params.create("cde.in.w", {cfg.d_in, cfg.d_model}), cfg.d_in, cfg.d_model, rng);
  params.create("cde.in.b", {cfg.d_model});
  for (int j = 0; j < cfg.n_blocks; ++j) {
    init_attention_block(params, "cde.blk" + std::to_string(j) + ".", cfg.d_model, cfg.d_ff,
                         rng);
  }
  xavier_init(params.create("cde.bott.w", {cfg.d_model, cfg.d_latent}), cfg.d_model,
              cfg.d_latent, rng);
  params.create("cde.bott.b", {cfg.d_latent});
  xavier_init(params.create("cde.dec.w", {cfg.d_latent, cfg.d_in}), cfg.d_latent, cfg.d_in, rng);
  params.create("cde.dec.b", {cfg.d_in});
}

std::pair<Tensor, AttentionSummary> reconstruct(const CdeModel& model, const Tensor& x,
                                                bool train, std::mt19937_64* rng) {
  if (x.rank() != 2 || x.dim(1) != model.cfg.d_in) {
    throw std::invalid_argument("reconstruct: input has " +
                                std::to_string(x.rank() == 2 ? x.dim(1) : -1) +
                                " channels, model expects " + std::to_string(model.cfg.d_in));
  }
  if (train && rng == nullptr) {
    throw std::invalid_argument("reconstruct: training mode needs an rng");
  }
  const int t_len = x.dim(0);
  std::mt19937_64 unused(0);
  std::mt19937_64& r = rng ? *rng : unused;

  // Context reconstruction: each timestep is rebuilt by a pass in which its
  // own input values are hidden (the position carries only the input bias
  // and the positional code), so x̂_t can never be a copy of x_t and the
  // error measures disagreement with what the surrounding signal predicts.
  // Two complementary passes cover all timesteps: pass 0 hides the even
  // positions, pass 1 the odd ones, and every hidden position keeps its
  // immediate neighbours visible.
  std::vector<double> even_rows(static_cast<std::size_t>(t_len), 0.0);
  std::vector<double> odd_rows(static_cast<std::size_t>(t_len), 0.0);
  for (int t = 0; t < t_len; ++t) ((t % 2 == 0) ? even_rows : odd_rows)[static_cast<std::size_t>(t)] = 1.0;
  const Tensor even_sel = Tensor::from({t_len}, std::vector<double>(even_rows));
  const Tensor odd_sel = Tensor::from({t_len}, std::vector<double>(odd_rows));

  std::vector<Tensor> maps;
  auto pass = [&](const Tensor& visible) {
    Tensor h = add_rowvec(matmul(rowwise_scale(x, visible), model.params.get("cde.in.w")),
                          model.params.get("cde.in.b"));
    h = add(h, positional_encoding(t_len, model.cfg.d_model));
    for (int j = 0; j < model.cfg.n_blocks; ++j) {
      h = attention_block(model.params, "cde.blk" + std::to_string(j) + ".", h,
                          model.cfg.n_heads, model.cfg.d_ff, model.cfg.dropout_rate, train, r,
                          &maps);
    }
    Tensor z = add_rowvec(matmul(h, model.params.get("cde.bott.w")),
                          model.params.get("cde.bott.b"));
    return add_rowvec(matmul(z, model.params.get("cde.dec.w")), model.params.get("cde.dec.b"));
  };
  // Keep rows of each pass's output only where that pass hid the input.
  Tensor x_hat = add(rowwise_scale(pass(odd_sel), even_sel),
                     rowwise_scale(pass(even_sel), odd_sel));

  // The summary is observational: average the collected maps outside any
  // tape so scoring never grows the autodiff graph.
  Tensor a_bar = Tensor::zeros({t_len, t_len});
  {
    auto acc = a_bar.values_mut();
    for (const Tensor& m : maps) {
      const auto mv = m.values();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += mv[i];
    }
    for (double& v : acc) v /= static_cast<double>(maps.size());
    quantize_span(acc);
  }
  return {x_hat, AttentionSummary{a_bar}};
}

std::vector<double> recon_error(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw std::invalid_argument("recon_error: shape mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(x_hat.shape()));
  }
  const int t_len = x.dim(0), d = x.dim(1);
  std::vector<double> e(static_cast<std::size_t>(t_len), 0.0);
  for (int t = 0; t < t_len; ++t) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dv = x.at(t, c) - x_hat.at(t, c);
      acc += dv * dv;
    }
    e[static_cast<std::size_t>(t)] = acc;
  }
  return e;
}

std::vector<double> attention_indicator(const AttentionSummary& summary) {
  const Tensor& a_bar = summary.a_bar;
  if (a_bar.rank() != 2 || a_bar.dim(0) != a_bar.dim(1)) {
    throw std::invalid_argument("attention_indicator: summary must be square");
  }
  const int t_len = a_bar.dim(0);
  std::vector<double> a(static_cast<std::size_t>(t_len), 1.0);
  if (t_len == 1) return a;  // ln 1 = 0: a single timestep is fully concentrated

  const double log_t = std::log(static_cast<double>(t_len));
  for (int t = 0; t < t_len; ++t) {
    double col_sum = 0.0;
    for (int i = 0; i < t_len; ++i) col_sum += a_bar.at(i, t);
    double entropy = 0.0;
    if (col_sum < 1e-30) {
      entropy = log_t;  // nothing attends here: treat as uninformative
    } else {
      for (int i = 0; i < t_len; ++i) {
        const double p = a_bar.at(i, t) / col_sum;
        if (p > 0.0) entropy -= p * std::log(p);
      }
    }
    a[static_cast<std::size_t>(t)] = 1.0 - entropy / log_t;
  }
  return a;
}

namespace {

// (v - mean) / population std, or all zeros for a constant vector.
std::vector<double> standardize(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> z(v.size(), 0.0);
  if (sd < 1e-12) return z;
  for (std::size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - mean) / sd;
  return z;
}

}  // namespace

std::vector<double> anomaly_score(const std::vector<double>& e, const std::vector<double>& a,
                                  double beta) {
  if (e.size() != a.size()) throw std::invalid_argument("anomaly_score: length mismatch");
  if (beta < 0.0) throw std::invalid_argument("anomaly_score: beta must be >= 0");
  const auto ze = standardize(e);
  const auto za = standardize(a);
  std::vector<double> s(e.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = ze[i] + beta * za[i];
  return s;
}

AnomalyScoreVector score_segment(const CdeModel& model, const Tensor& x, double beta) {
  const auto [x_hat, summary] = reconstruct(model, x);
  AnomalyScoreVector out;
  out.e = recon_error(x, x_hat);
  out.a = attention_indicator(summary);
  out.s = anomaly_score(out.e, out.a, beta);
  return out;
}

std::vector<double> train_cde(CdeModel& model, const std::vector<TimeSeriesSegment>& healthy,
                              int epochs, double lr, std::uint64_t seed) {
  if (healthy.empty()) throw std::invalid_argument("train_cde: empty training set");
  for (const auto& seg : healthy) {
    if (seg.label() != 0) {
      throw std::invalid_argument("train_cde: diseased segment " + seg.patient_id() +
                                  " in healthy-only training set");
    }
  }
  model.params.set_requires_grad(true);
  Adam opt(model.params, lr);
  auto order_rng = rng_stream(seed, "cde_train_order");
  auto drop_rng = rng_stream(seed, "cde_train_dropout");

  std::vector<int> order(healthy.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(epochs));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_indices(order, order_rng);
    double total = 0.0;
    for (int idx : order) {
      const Tensor& x = healthy[static_cast<std::size_t>(idx)].x();
      Tape tape;
      const auto [x_hat, summary] = reconstruct(model, x, true, &drop_rng);
      (void)summary;
      // Mean over timesteps of the squared residual row norm.
      const Tensor residual = sub(x, x_hat);
      Tensor loss = scale(sum(mul(residual, residual)), 1.0 / x.dim(0));
      total += loss.item();
      model.params.zero_grad();
      tape.backward(loss);
      opt.step();
    }
    curve.push_back(total / static_cast<double>(healthy.size()));
  }
  return curve;
}

}  // namespace codac
