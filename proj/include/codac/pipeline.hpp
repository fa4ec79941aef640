#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "codac/cde.hpp"
#include "codac/dmcf.hpp"
#include "codac/encoder.hpp"
#include "codac/params.hpp"
#include "codac/signal.hpp"
#include "codac/tensor.hpp"

namespace codac {

enum class FinetuneMode { pft, fft };

// Every knob of a run, each with a default, serializable as `key = value`
// lines (comments start with '#'). parse(serialize(c)) == c exactly:
// floating-point values are printed shortest-round-trip.
struct TrainConfig {
  // run identity
  std::uint64_t run_seed = 1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  // synthetic data
  int t_len = 128;
  int d_chan = 2;
  int n_patients = 24;
  int segs_per_patient = 8;
  double disease_rate = 0.5;
  double span_frac = 0.15;
  int healthy_patients = 25;
  int healthy_segs_per_patient = 8;
  double label_fraction = 0.1;
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;

  // representation encoder
  int d_hidden = 32;
  int n_attn_blocks = 2;
  int n_heads = 4;
  int d_ff = 64;
  int conv_kernel = 3;
  std::vector<int> conv_dilations = {1, 2, 4};
  double dropout = 0.1;

  // anomaly scorer
  int cde_d_model = 32;
  int cde_blocks = 2;
  int cde_heads = 4;
  int cde_ff = 64;
  int cde_latent = 16;
  double cde_dropout = 0.1;

  // contrastive pre-training
  int d_project = 16;
  double crop_frac = 0.5;
  double jitter_sigma = 0.1;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double tau = 0.2;
  double lambda = 0.5;
  double beta = 0.5;
  int delta = 4;
  int intra_pairs = 16;

  // optimization
  int batch_size = 8;
  int epochs_stage1 = 30;
  int epochs_stage2 = 20;
  int epochs_stage3 = 30;
  double lr_stage1 = 1e-3;
  double lr_stage2 = 1e-3;
  double lr_stage3_fft = 5e-4;
  double lr_stage3_pft = 1e-2;
  FinetuneMode mode = FinetuneMode::fft;
  double stage2_healthy_frac = 0.5;

  bool operator==(const TrainConfig&) const = default;

  std::string serialize() const;
  // Strict: unknown or duplicate keys, malformed lines, and unparsable
  // values all raise DataError naming the line.
  static TrainConfig parse(const std::string& text);

  void validate() const;  // std::invalid_argument on any bad field

  EncoderConfig encoder_config() const;
  CdeConfig cde_config() const;
  AugmentationSpec augmentation_spec() const;
};

// ---- checkpointing --------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StageTag : std::uint8_t { cde = 1, dmcf = 2, finetune = 3 };
std::string stage_name(StageTag t);

// A frozen parameter set plus the config that produced it. Parameter
// names are prefixed per module: "cde.", "enc.", "wh." (weight head),
// "proj.", "clf.". Loading a saved checkpoint reproduces forward outputs
// bit-identically; storage is f32 little-endian row-major.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  StageTag stage = StageTag::cde;
  TrainConfig config;
  ParamStore params;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // DataError on any corruption

// Deep-copies every `src` parameter whose name starts with `prefix` into
// `dst` (grad-free), preserving order. Returns the number copied.
int copy_params(const ParamStore& src, const std::string& prefix, ParamStore& dst);

// Rebuilds the frozen anomaly scorer stored in a checkpoint, verifying
// that every expected "cde." parameter is present with the right shape.
CdeModel scorer_from_checkpoint(const Checkpoint& ckpt);

// ---- stages ---------------------------------------------------------------

struct StageResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;  // mean training loss per epoch
  std::vector<double> val_auroc;     // fine-tuning only: one entry per epoch
  double best_val_auroc = 0.0;
  int best_epoch = -1;  // 0-based epoch whose parameters were kept
};

// Trains the anomaly scorer on healthy segments only (label 0 enforced)
// and freezes it into a "cde"-stage checkpoint. Deterministic in
// cfg.run_seed down to checkpoint bytes.
StageResult stage1(const TrainConfig& cfg, const std::vector<TimeSeriesSegment>& healthy);

enum class WeightMode {
  learned,         // sigmoid head on the anomaly-score slice
  constant_half,   // w == 0.5 everywhere, scorer never consulted
  constant_one,    // unweighted features
};

// Ablation hooks for the pre-training stage. Defaults reproduce the full
// method; the score_override swaps in a different per-segment scorer
// (used when the autoencoder variant replaces the attention scorer).
struct Stage2Options {
  WeightMode weight_mode = WeightMode::learned;
  bool fixed_views = false;  // one fixed full-length jittered view per segment, reused every epoch
  bool use_intra = true;     // false drops the temporal term (lambda treated as 0)
  std::function<std::vector<double>(const TimeSeriesSegment&)> score_override;
};

// Self-supervised pre-training of encoder, weight head, and projection on
// mixed batches (stage2_healthy_frac of each batch from the healthy pool,
// the rest from the unlabeled target pool). Runs under a LabelGuard: any
// label read aborts. The scorer checkpoint passes through byte-identical.
StageResult stage2(const TrainConfig& cfg, const Checkpoint& cde_ckpt,
                   const std::vector<TimeSeriesSegment>& healthy_pool,
                   const std::vector<TimeSeriesSegment>& target_pool,
                   const Stage2Options& opts = {});

// Supervised fine-tuning: a single affine classifier on the pooled
// encoder output (no dynamic weighting at classification time), binary
// cross-entropy with probabilities clamped to [1e-7, 1-1e-7]. PFT trains
// the classifier only (encoder bytes untouched); FFT trains encoder and
// classifier. Keeps the epoch with the best validation AUROC.
StageResult stage3(const TrainConfig& cfg, const Checkpoint& pre_ckpt,
                   const std::vector<TimeSeriesSegment>& labeled_train,
                   const std::vector<TimeSeriesSegment>& val);

// Mean binary cross-entropy of a [N x 1] probability column against 0/1
// labels, with the clamp above keeping it finite at saturated outputs.
Tensor bce_loss(const Tensor& probs_col, const std::vector<int>& labels);

// Eval-mode forward passes over a finished checkpoint.
Tensor pooled_embedding(const Checkpoint& ckpt, const Tensor& x);  // [d_hidden]
double classify_prob(const Checkpoint& ckpt, const Tensor& x);     // needs a "clf." head

// ---- experiment data ------------------------------------------------------

// The synthetic cohort for one run: a patient-wise split of the target
// dataset plus an external all-healthy pool (distinct patient ids) for
// scorer training and mixed pre-training batches.
struct ExperimentData {
  DatasetSplit target;
  std::vector<TimeSeriesSegment> external_healthy;
};

ExperimentData make_experiment_data(const TrainConfig& cfg);

}  // namespace codac
