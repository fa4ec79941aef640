#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "codac/tensor.hpp"

namespace codac {

// While a guard is alive on this thread, reading any segment label
// throws. The self-supervised stage runs under one, so a label leak is a
// hard failure rather than a silent bug.
class LabelGuard {
 public:
  LabelGuard();
  ~LabelGuard();
  LabelGuard(const LabelGuard&) = delete;
  LabelGuard& operator=(const LabelGuard&) = delete;
  static bool active();
};

class TimeSeriesSegment {
 public:
  TimeSeriesSegment() = default;
  TimeSeriesSegment(std::string patient_id, Tensor x, std::vector<char> anomaly_mask, int label);

  const std::string& patient_id() const { return patient_id_; }
  const Tensor& x() const { return x_; }
  Tensor& x_mut() { return x_; }
  const std::vector<char>& anomaly_mask() const { return mask_; }
  std::vector<char>& anomaly_mask_mut() { return mask_; }
  int t_len() const { return x_.dim(0); }
  int d_chan() const { return x_.dim(1); }

  // 0 healthy, 1 diseased, -1 unlabeled. Throws under an active LabelGuard.
  int label() const;
  void set_label(int v);

 private:
  std::string patient_id_;
  Tensor x_;
  std::vector<char> mask_;
  int label_ = 0;
};

struct DatasetSplit {
  std::vector<TimeSeriesSegment> train, val, test;
  double label_fraction = 1.0;
};

enum class AnomalyKind { spike, freq_shift, bump };
AnomalyKind anomaly_kind_from(const std::string& name);

// Per channel: 2-4 sinusoids whose frequencies (cycles per window) are a
// fixed signature of the patient id, with per-seed phases, plus AR(1)
// noise (coefficient 0.8, innovation sigma 0.1); z-normalized per channel.
TimeSeriesSegment gen_healthy(const std::string& patient_id, int t_len, int d_chan,
                              std::uint64_t seed);

// Overwrites one contiguous window of round(span_frac * T) timesteps and
// sets label/mask; the segment outside the window is untouched.
TimeSeriesSegment inject_anomaly(const TimeSeriesSegment& seg, AnomalyKind kind,
                                 double span_frac, std::uint64_t seed);

TimeSeriesSegment zscore_channels(const TimeSeriesSegment& seg);

std::vector<TimeSeriesSegment> make_dataset(int n_patients, int segs_per_patient,
                                            double disease_rate, int t_len, int d_chan,
                                            std::uint64_t seed, double span_frac = 0.15,
                                            const std::string& pid_prefix = "p");

DatasetSplit split_by_patient(const std::vector<TimeSeriesSegment>& segs,
                              std::array<double, 3> ratios, double label_fraction,
                              std::uint64_t seed);

// CSV with one row per segment plus a meta.txt manifest in the same
// directory; see write_csv for the exact layout.
void write_csv(const std::vector<TimeSeriesSegment>& segs, const std::string& csv_path);
std::vector<TimeSeriesSegment> read_csv(const std::string& csv_path);

}  // namespace codac
