#include "codac/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "codac/common.hpp"

namespace codac {

// ---- classification metrics -----------------------------------------------

ConfusionMetrics confusion_metrics(const std::vector<int>& y, const std::vector<double>& y_prob,
                                   double threshold) {
  if (y.empty() || y.size() != y_prob.size()) {
    throw std::invalid_argument("confusion_metrics: need matching, non-empty labels and scores");
  }
  int tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pred = y_prob[i] >= threshold;
    const bool pos = y[i] == 1;
    if (pred && pos) ++tp;
    else if (pred && !pos) ++fp;
    else if (!pred && pos) ++fn;
    else ++tn;
  }
  ConfusionMetrics m;
  const double n = static_cast<double>(y.size());
  m.acc = (tp + tn) / n;
  m.prec = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  m.rec = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  m.f1 = (m.prec + m.rec) > 0.0 ? 2.0 * m.prec * m.rec / (m.prec + m.rec) : 0.0;
  return m;
}

double auroc(const std::vector<int>& y, const std::vector<double>& scores) {
  if (y.empty() || y.size() != scores.size()) {
    throw std::invalid_argument("auroc: need matching, non-empty labels and scores");
  }
  std::int64_t n_pos = 0, n_neg = 0;
  for (int v : y) (v == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: needs both classes");

  // Rank formulation with midranks for ties: U = R_pos - n_pos*(n_pos+1)/2.
  const std::size_t n = y.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (y[idx[k]] == 1) rank_sum_pos += mid_rank;
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const std::vector<int>& y, const std::vector<double>& scores) {
  if (y.empty() || y.size() != scores.size()) {
    throw std::invalid_argument("auprc: need matching, non-empty labels and scores");
  }
  std::int64_t n_pos = 0;
  for (int v : y) n_pos += v == 1;
  if (n_pos == 0) throw std::invalid_argument("auprc: needs at least one positive");

  // Average precision over descending unique thresholds, ties grouped.
  const std::size_t n = y.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) (y[idx[k]] == 1 ? tp : fp)++;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double rep_sep_score(const std::vector<std::vector<double>>& embeddings,
                     const std::vector<int>& labels) {
  const std::size_t n = embeddings.size();
  if (n < 2 || labels.size() != n) {
    throw std::invalid_argument("rep_sep_score: need at least two labeled embeddings");
  }
  std::int64_t n_pos = 0, n_neg = 0;
  for (int v : labels) (v == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("rep_sep_score: needs both classes");
  const std::size_t d = embeddings[0].size();
  for (const auto& e : embeddings) {
    if (e.size() != d || d == 0) {
      throw std::invalid_argument("rep_sep_score: embeddings must share a non-zero dimension");
    }
  }

  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : embeddings[i]) s += v * v;
    norm[i] = std::sqrt(s);
  }
  // Cosine distance; a zero-norm embedding is treated as orthogonal to
  // everything (distance 1) so the score stays defined.
  auto dist = [&](std::size_t i, std::size_t j) {
    if (norm[i] < 1e-12 || norm[j] < 1e-12) return 1.0;
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += embeddings[i][k] * embeddings[j][k];
    return 1.0 - dot / (norm[i] * norm[j]);
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double same_sum = 0.0, other_sum = 0.0;
    std::int64_t same_cnt = 0, other_cnt = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dij = dist(i, j);
      if (labels[j] == labels[i]) {
        same_sum += dij;
        ++same_cnt;
      } else {
        other_sum += dij;
        ++other_cnt;
      }
    }
    const double a = same_cnt > 0 ? same_sum / same_cnt : 0.0;  // singleton cluster: a = 0
    const double b = other_sum / other_cnt;
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  const double mean_sil = total / static_cast<double>(n);
  return 100.0 * (mean_sil + 1.0) / 2.0;
}

// ---- aggregation ----------------------------------------------------------

namespace {

std::vector<double> row_values(const MetricRow& r) {
  return {r.acc, r.prec, r.rec, r.f1, r.auroc, r.auprc, r.rep_sep};
}

MetricRow row_from_values(const std::vector<double>& v) {
  MetricRow r;
  r.acc = v[0];
  r.prec = v[1];
  r.rec = v[2];
  r.f1 = v[3];
  r.auroc = v[4];
  r.auprc = v[5];
  r.rep_sep = v[6];
  return r;
}

}  // namespace

MetricsReport aggregate(const std::string& variant, const std::vector<std::uint64_t>& seeds,
                        const std::vector<MetricRow>& rows) {
  if (rows.empty() || seeds.size() != rows.size()) {
    throw std::invalid_argument("aggregate: need one metric row per seed, at least one");
  }
  MetricsReport rep;
  rep.variant = variant;
  rep.seeds = seeds;
  rep.per_seed = rows;
  rep.single_seed = rows.size() == 1;
  const std::size_t k = 7;
  std::vector<double> mean(k, 0.0), sd(k, 0.0);
  for (const auto& r : rows) {
    const auto v = row_values(r);
    for (std::size_t i = 0; i < k; ++i) mean[i] += v[i];
  }
  for (std::size_t i = 0; i < k; ++i) mean[i] /= static_cast<double>(rows.size());
  if (rows.size() > 1) {
    for (const auto& r : rows) {
      const auto v = row_values(r);
      for (std::size_t i = 0; i < k; ++i) sd[i] += (v[i] - mean[i]) * (v[i] - mean[i]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      sd[i] = std::sqrt(sd[i] / static_cast<double>(rows.size() - 1));
    }
  }
  rep.mean = row_from_values(mean);
  rep.stddev = row_from_values(sd);
  return rep;
}

// ---- ablation harness -----------------------------------------------------

std::string variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::cde_vanilla_ae: return "cde_vanilla_ae";
    case AblationVariant::cde_none: return "cde_none";
    case AblationVariant::dmcf_static: return "dmcf_static";
    case AblationVariant::dmcf_fixed_views: return "dmcf_fixed_views";
  }
  throw std::invalid_argument("unknown ablation variant");
}

AblationVariant variant_from(const std::string& name) {
  if (name == "full") return AblationVariant::full;
  if (name == "cde_vanilla_ae") return AblationVariant::cde_vanilla_ae;
  if (name == "cde_none") return AblationVariant::cde_none;
  if (name == "dmcf_static") return AblationVariant::dmcf_static;
  if (name == "dmcf_fixed_views") return AblationVariant::dmcf_fixed_views;
  throw std::invalid_argument("unknown ablation variant '" + name + "'");
}

namespace {

// Plain per-timestep autoencoder used by the vanilla-scorer variant:
// rows pass independently through affine -> relu -> affine, no attention,
// so the concentration indicator is identically zero.
Tensor vanilla_forward(const ParamStore& ps, const Tensor& x) {
  Tensor h = relu(add_rowvec(matmul(x, ps.get("cde.vae.l1.w")), ps.get("cde.vae.l1.b")));
  return add_rowvec(matmul(h, ps.get("cde.vae.l2.w")), ps.get("cde.vae.l2.b"));
}

StageResult train_vanilla_scorer(const TrainConfig& cfg,
                                 const std::vector<TimeSeriesSegment>& healthy) {
  if (healthy.empty()) throw std::invalid_argument("vanilla scorer: empty training set");
  for (const auto& seg : healthy) {
    if (seg.label() != 0) {
      throw std::invalid_argument("vanilla scorer: diseased segment " + seg.patient_id() +
                                  " in healthy-only training set");
    }
  }
  const int d = cfg.d_chan;
  const int hdim = cfg.cde_latent;
  ParamStore ps;
  auto init_rng = rng_stream(cfg.run_seed, "vae_init");
  xavier_init(ps.create("cde.vae.l1.w", {d, hdim}), d, hdim, init_rng);
  ps.create("cde.vae.l1.b", {hdim});
  xavier_init(ps.create("cde.vae.l2.w", {hdim, d}), hdim, d, init_rng);
  ps.create("cde.vae.l2.b", {d});
  ps.set_requires_grad(true);

  Adam opt(ps, cfg.lr_stage1);
  auto order_rng = rng_stream(cfg.run_seed, "vae_train_order");
  std::vector<int> order(healthy.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  StageResult r;
  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    shuffle_indices(order, order_rng);
    double total = 0.0;
    for (int idx : order) {
      const Tensor& x = healthy[static_cast<std::size_t>(idx)].x();
      Tape tape;
      const Tensor residual = sub(x, vanilla_forward(ps, x));
      Tensor loss = scale(sum(mul(residual, residual)), 1.0 / x.dim(0));
      total += loss.item();
      ps.zero_grad();
      tape.backward(loss);
      opt.step();
    }
    r.epoch_losses.push_back(total / static_cast<double>(healthy.size()));
  }
  r.checkpoint.version = kCheckpointVersion;
  r.checkpoint.stage = StageTag::cde;
  r.checkpoint.config = cfg;
  copy_params(ps, "", r.checkpoint.params);
  return r;
}

std::function<std::vector<double>(const TimeSeriesSegment&)> vanilla_score_fn(
    const Checkpoint& ckpt, double beta) {
  auto ps = std::make_shared<ParamStore>();
  copy_params(ckpt.params, "cde.vae.", *ps);
  return [ps, beta](const TimeSeriesSegment& seg) {
    const Tensor x_hat = vanilla_forward(*ps, seg.x());
    const std::vector<double> e = recon_error(seg.x(), x_hat);
    const std::vector<double> a(e.size(), 0.0);
    return anomaly_score(e, a, beta);
  };
}

}  // namespace

MetricRow evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<TimeSeriesSegment>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate_checkpoint: empty test set");
  std::vector<int> ys;
  std::vector<double> probs;
  std::vector<std::vector<double>> embs;
  ys.reserve(test.size());
  probs.reserve(test.size());
  embs.reserve(test.size());
  for (const auto& seg : test) {
    ys.push_back(seg.label());
    probs.push_back(classify_prob(ckpt, seg.x()));
    const Tensor emb = pooled_embedding(ckpt, seg.x());
    embs.emplace_back(emb.values().begin(), emb.values().end());
  }
  const ConfusionMetrics cm = confusion_metrics(ys, probs);
  MetricRow row;
  row.acc = cm.acc;
  row.prec = cm.prec;
  row.rec = cm.rec;
  row.f1 = cm.f1;
  row.auroc = auroc(ys, probs);
  row.auprc = auprc(ys, probs);
  row.rep_sep = rep_sep_score(embs, ys);
  return row;
}

VariantRun run_variant_seed(AblationVariant v, const TrainConfig& cfg0, std::uint64_t seed,
                            const ExperimentData& data, const Checkpoint* stage1_reuse) {
  TrainConfig cfg = cfg0;
  cfg.run_seed = seed;
  cfg.validate();

  VariantRun run;
  run.seed = seed;

  Stage2Options opts;
  switch (v) {
    case AblationVariant::full:
    case AblationVariant::dmcf_static: {
      if (stage1_reuse != nullptr) {
        if (stage1_reuse->stage != StageTag::cde) {
          throw DataError("stage-1 reuse checkpoint has stage '" +
                          stage_name(stage1_reuse->stage) + "'");
        }
        run.s1.checkpoint = *stage1_reuse;
      } else {
        run.s1 = stage1(cfg, data.external_healthy);
      }
      opts.weight_mode =
          v == AblationVariant::full ? WeightMode::learned : WeightMode::constant_half;
      break;
    }
    case AblationVariant::cde_vanilla_ae: {
      run.s1 = train_vanilla_scorer(cfg, data.external_healthy);
      opts.weight_mode = WeightMode::learned;
      opts.score_override = vanilla_score_fn(run.s1.checkpoint, cfg.beta);
      break;
    }
    case AblationVariant::cde_none:
    case AblationVariant::dmcf_fixed_views: {
      TrainConfig c1 = cfg;
      c1.epochs_stage1 = 0;  // the scorer is never consulted in these variants
      run.s1 = stage1(c1, data.external_healthy);
      run.s1.checkpoint.config = cfg;
      if (v == AblationVariant::cde_none) {
        opts.weight_mode = WeightMode::constant_half;
      } else {
        opts.weight_mode = WeightMode::constant_one;
        opts.fixed_views = true;
        opts.use_intra = false;
      }
      break;
    }
  }

  run.s2 = stage2(cfg, run.s1.checkpoint, data.external_healthy, data.target.train, opts);
  run.s3 = stage3(cfg, run.s2.checkpoint, data.target.train, data.target.val);
  run.metrics = evaluate_checkpoint(run.s3.checkpoint, data.target.test);
  return run;
}

MetricsReport run_ablation(AblationVariant v, const TrainConfig& cfg,
                           const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: needs at least one seed");
  std::vector<MetricRow> rows;
  rows.reserve(seeds.size());
  for (std::uint64_t s : seeds) {
    TrainConfig cs = cfg;
    cs.run_seed = s;
    const ExperimentData data = make_experiment_data(cs);
    rows.push_back(run_variant_seed(v, cfg, s, data).metrics);
  }
  return aggregate(variant_name(v), seeds, rows);
}

// ---- report emission ------------------------------------------------------

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write report: " + path);
  return f;
}

}  // namespace

void write_runs_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
  auto f = open_out(path);
  f << "variant,seed,acc,prec,rec,f1,auroc,auprc,rep_sep\n";
  for (const auto& rep : reports) {
    for (std::size_t i = 0; i < rep.per_seed.size(); ++i) {
      const auto& r = rep.per_seed[i];
      f << rep.variant << ',' << rep.seeds[i] << ',' << fmt6(r.acc) << ',' << fmt6(r.prec) << ','
        << fmt6(r.rec) << ',' << fmt6(r.f1) << ',' << fmt6(r.auroc) << ',' << fmt6(r.auprc) << ','
        << fmt6(r.rep_sep) << '\n';
    }
  }
  f.flush();
  if (!f) throw DataError("cannot write report: " + path);
}

void write_summary_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
  auto f = open_out(path);
  f << "variant,acc_mean,acc_std,prec_mean,prec_std,rec_mean,rec_std,f1_mean,f1_std,"
       "auroc_mean,auroc_std,auprc_mean,auprc_std,rep_sep_mean,rep_sep_std\n";
  for (const auto& rep : reports) {
    f << rep.variant << ',' << fmt6(rep.mean.acc) << ',' << fmt6(rep.stddev.acc) << ','
      << fmt6(rep.mean.prec) << ',' << fmt6(rep.stddev.prec) << ',' << fmt6(rep.mean.rec) << ','
      << fmt6(rep.stddev.rec) << ',' << fmt6(rep.mean.f1) << ',' << fmt6(rep.stddev.f1) << ','
      << fmt6(rep.mean.auroc) << ',' << fmt6(rep.stddev.auroc) << ',' << fmt6(rep.mean.auprc)
      << ',' << fmt6(rep.stddev.auprc) << ',' << fmt6(rep.mean.rep_sep) << ','
      << fmt6(rep.stddev.rep_sep) << '\n';
  }
  f.flush();
  if (!f) throw DataError("cannot write report: " + path);
}

std::string render_table(const std::vector<MetricsReport>& reports) {
  // Classification metrics as percentages, rep-sep already on [0, 100].
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-18s %14s %14s %14s %14s %14s %14s %14s\n", "variant", "Acc",
                "Prec", "Rec", "F1", "AUROC", "AUPRC", "RepSep");
  out += line;
  for (const auto& rep : reports) {
    auto cell = [](double mean, double sd, bool pct) {
      const double k = pct ? 100.0 : 1.0;
      return fmt2(mean * k) + "+-" + fmt2(sd * k);
    };
    std::snprintf(line, sizeof line, "%-18s %14s %14s %14s %14s %14s %14s %14s\n",
                  rep.variant.c_str(), cell(rep.mean.acc, rep.stddev.acc, true).c_str(),
                  cell(rep.mean.prec, rep.stddev.prec, true).c_str(),
                  cell(rep.mean.rec, rep.stddev.rec, true).c_str(),
                  cell(rep.mean.f1, rep.stddev.f1, true).c_str(),
                  cell(rep.mean.auroc, rep.stddev.auroc, true).c_str(),
                  cell(rep.mean.auprc, rep.stddev.auprc, true).c_str(),
                  cell(rep.mean.rep_sep, rep.stddev.rep_sep, false).c_str());
    out += line;
  }
  return out;
}

}  // namespace codac
