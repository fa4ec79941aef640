#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codac/pipeline.hpp"
#include "codac/signal.hpp"
#include "codac/tensor.hpp"

namespace codac {

// ---- classification metrics -----------------------------------------------

struct ConfusionMetrics {
  double acc = 0.0;
  double prec = 0.0;  // 0 by convention when no positive prediction
  double rec = 0.0;   // 0 by convention when no positive label
  double f1 = 0.0;    // 0 when prec + rec == 0
};

// Threshold the probabilities at `threshold` (>= counts as positive) and
// reduce the 2x2 table.
ConfusionMetrics confusion_metrics(const std::vector<int>& y, const std::vector<double>& y_prob,
                                   double threshold = 0.5);

// Probability that a random positive outranks a random negative, ties at
// half weight (Mann-Whitney form). Throws std::invalid_argument unless
// both classes are present.
double auroc(const std::vector<int>& y, const std::vector<double>& scores);

// Average precision: precision integrated over recall steps at descending
// unique score thresholds, ties grouped. Throws without a positive.
double auprc(const std::vector<int>& y, const std::vector<double>& scores);

// 100 * (mean silhouette + 1) / 2 with cosine distance and the true
// binary labels as the clustering. A singleton cluster point takes
// a(i) = 0 by the usual silhouette convention.
double rep_sep_score(const std::vector<std::vector<double>>& embeddings,
                     const std::vector<int>& labels);

// ---- experiment harness ---------------------------------------------------

enum class AblationVariant { full, cde_vanilla_ae, cde_none, dmcf_static, dmcf_fixed_views };

std::string variant_name(AblationVariant v);
AblationVariant variant_from(const std::string& name);  // throws std::invalid_argument

// One row of metric values: either one seed's test results or an
// aggregate (mean or standard deviation) over seeds. Classification
// metrics live in [0, 1]; rep_sep in [0, 100].
struct MetricRow {
  double acc = 0.0, prec = 0.0, rec = 0.0, f1 = 0.0;
  double auroc = 0.0, auprc = 0.0, rep_sep = 0.0;
};

struct MetricsReport {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricRow> per_seed;
  MetricRow mean;
  MetricRow stddev;          // sample (n-1) standard deviation
  bool single_seed = false;  // std is 0 with this flag rather than meaningful
};

// Sample mean and (n-1) standard deviation per metric column; one seed
// yields std 0 and the single_seed flag. Throws on empty input.
MetricsReport aggregate(const std::string& variant, const std::vector<std::uint64_t>& seeds,
                        const std::vector<MetricRow>& rows);

// Everything produced by one variant on one seed: the three stage
// results (checkpoints inside) plus test metrics.
struct VariantRun {
  std::uint64_t seed = 0;
  StageResult s1, s2, s3;
  MetricRow metrics;
};

// Runs one variant end to end on `data` with cfg.run_seed forced to
// `seed`. `stage1_reuse` skips stage-1 training by reusing a compatible
// checkpoint (the scorer is deterministic per seed, so sweeps share it).
VariantRun run_variant_seed(AblationVariant v, const TrainConfig& cfg, std::uint64_t seed,
                            const ExperimentData& data, const Checkpoint* stage1_reuse = nullptr);

// Full sweep: per seed, regenerates data (seeded by the run seed), runs
// the variant, and aggregates test metrics.
MetricsReport run_ablation(AblationVariant v, const TrainConfig& cfg,
                           const std::vector<std::uint64_t>& seeds);

// Test-set evaluation of a finished fine-tuning checkpoint: confusion
// metrics at 0.5, auroc/auprc on probabilities, rep_sep on pooled
// encoder embeddings against true labels.
MetricRow evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<TimeSeriesSegment>& test);

// ---- report emission ------------------------------------------------------

// One line per (variant, seed): variant,seed,acc,prec,rec,f1,auroc,auprc,rep_sep.
void write_runs_csv(const std::vector<MetricsReport>& reports, const std::string& path);

// One line per variant with mean/std column pairs; stable formatting so
// identical runs produce identical bytes.
void write_summary_csv(const std::vector<MetricsReport>& reports, const std::string& path);

// Plain-text table, columns Acc, Prec, Rec, F1, AUROC, AUPRC, RepSep as
// "mean +- std" percentages.
std::string render_table(const std::vector<MetricsReport>& reports);

}  // namespace codac
