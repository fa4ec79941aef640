#include "codac/signal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "codac/common.hpp"
#include "codac/params.hpp"

namespace codac {

namespace {

constexpr double kPi = 3.14159265358979323846;

thread_local int g_label_guard_depth = 0;

std::uint64_t derive_seed(std::uint64_t seed, const std::string& name, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ fnv1a64(name)) + index);
}

// Stable explicit Fisher-Yates so shuffles do not depend on library
// internals.
template <class T>
void shuffle_vec(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_draw(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

std::vector<double> channel_std(const Tensor& x) {
  const int t_len = x.dim(0), d = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(d));
  for (int c = 0; c < d; ++c) {
    double m = 0.0;
    for (int t = 0; t < t_len; ++t) m += x.at(t, c);
    m /= t_len;
    double var = 0.0;
    for (int t = 0; t < t_len; ++t) {
      const double dv = x.at(t, c) - m;
      var += dv * dv;
    }
    out[static_cast<std::size_t>(c)] = std::sqrt(var / t_len);
  }
  return out;
}

}  // namespace

LabelGuard::LabelGuard() { ++g_label_guard_depth; }
LabelGuard::~LabelGuard() { --g_label_guard_depth; }
bool LabelGuard::active() { return g_label_guard_depth > 0; }

TimeSeriesSegment::TimeSeriesSegment(std::string patient_id, Tensor x,
                                     std::vector<char> anomaly_mask, int label)
    : patient_id_(std::move(patient_id)), x_(std::move(x)), mask_(std::move(anomaly_mask)),
      label_(label) {
  if (x_.rank() != 2) throw std::invalid_argument("segment: x must be [T x D]");
  if (static_cast<int>(mask_.size()) != x_.dim(0)) {
    throw std::invalid_argument("segment: mask length must equal T");
  }
}

int TimeSeriesSegment::label() const {
  if (LabelGuard::active()) {
    throw std::logic_error("label read inside a label-free training stage");
  }
  return label_;
}

void TimeSeriesSegment::set_label(int v) {
  if (v != 0 && v != 1 && v != -1) throw std::invalid_argument("label must be 0, 1 or -1");
  label_ = v;
}

AnomalyKind anomaly_kind_from(const std::string& name) {
  if (name == "spike") return AnomalyKind::spike;
  if (name == "freq_shift") return AnomalyKind::freq_shift;
  if (name == "bump") return AnomalyKind::bump;
  throw std::invalid_argument("unknown anomaly kind: " + name);
}

TimeSeriesSegment zscore_channels(const TimeSeriesSegment& seg) {
  const Tensor& x = seg.x();
  const int t_len = x.dim(0), d = x.dim(1);
  std::vector<double> vals(x.values().begin(), x.values().end());
  for (int c = 0; c < d; ++c) {
    double m = 0.0;
    for (int t = 0; t < t_len; ++t) m += vals[static_cast<std::size_t>(t) * d + c];
    m /= t_len;
    double var = 0.0;
    for (int t = 0; t < t_len; ++t) {
      const double dv = vals[static_cast<std::size_t>(t) * d + c] - m;
      var += dv * dv;
    }
    const double sd = std::sqrt(var / t_len);
    for (int t = 0; t < t_len; ++t) {
      double& v = vals[static_cast<std::size_t>(t) * d + c];
      v = sd < 1e-12 ? 0.0 : (v - m) / sd;
    }
  }
  TimeSeriesSegment out(seg.patient_id(), Tensor::from({t_len, d}, std::move(vals)),
                        seg.anomaly_mask(), 0);
  out.set_label(seg.label());
  return out;
}

TimeSeriesSegment gen_healthy(const std::string& patient_id, int t_len, int d_chan,
                              std::uint64_t seed) {
  if (t_len < 32) throw std::invalid_argument("gen_healthy: T must be >= 32");
  if (d_chan < 1) throw std::invalid_argument("gen_healthy: D must be >= 1");

  // The frequency signature depends only on the patient, so every segment
  // of one patient shares its spectral identity across seeds.
  auto sig_rng = rng_stream(fnv1a64(patient_id), "patient_signature");
  auto phase_rng = rng_stream(seed, "phases:" + patient_id);
  auto noise_rng = rng_stream(seed, "ar_noise:" + patient_id);

  std::vector<double> vals(static_cast<std::size_t>(t_len) * d_chan, 0.0);
  for (int c = 0; c < d_chan; ++c) {
    const int n_waves = 2 + static_cast<int>(uniform_draw(sig_rng) * 3.0);
    std::vector<double> freqs(static_cast<std::size_t>(n_waves));
    for (double& f : freqs) f = 0.5 + 7.5 * uniform_draw(sig_rng);
    std::vector<double> phases(static_cast<std::size_t>(n_waves));
    for (double& p : phases) p = 2.0 * kPi * uniform_draw(phase_rng);

    double ar = 0.0;
    for (int t = 0; t < t_len; ++t) {
      double v = 0.0;
      for (int w = 0; w < n_waves; ++w) {
        v += std::sin(2.0 * kPi * freqs[static_cast<std::size_t>(w)] * t / t_len +
                      phases[static_cast<std::size_t>(w)]);
      }
      ar = 0.8 * ar + 0.1 * gauss_draw(noise_rng);
      vals[static_cast<std::size_t>(t) * d_chan + c] = v + ar;
    }
  }

  TimeSeriesSegment raw(patient_id, Tensor::from({t_len, d_chan}, std::move(vals)),
                        std::vector<char>(static_cast<std::size_t>(t_len), 0), 0);
  return zscore_channels(raw);
}

TimeSeriesSegment inject_anomaly(const TimeSeriesSegment& seg, AnomalyKind kind,
                                 double span_frac, std::uint64_t seed) {
  if (!(span_frac > 0.0 && span_frac <= 0.5)) {
    throw std::invalid_argument("inject_anomaly: span_frac must be in (0, 0.5]");
  }
  const int t_len = seg.t_len(), d = seg.d_chan();
  const int span = std::max(1, static_cast<int>(std::lround(span_frac * t_len)));
  auto rng = rng_stream(seed, "anomaly:" + seg.patient_id());
  const int w0 = std::min(t_len - span,
                          static_cast<int>(uniform_draw(rng) * (t_len - span + 1)));

  const std::vector<double> sigma = channel_std(seg.x());
  std::vector<double> vals(seg.x().values().begin(), seg.x().values().end());
  auto cell = [&](int t, int c) -> double& { return vals[static_cast<std::size_t>(t) * d + c]; };

  switch (kind) {
    case AnomalyKind::spike:
      // Impulses on every other timestep of the window, random signs.
      for (int t = w0; t < w0 + span; t += 2) {
        for (int c = 0; c < d; ++c) {
          const double sign = uniform_draw(rng) < 0.5 ? -1.0 : 1.0;
          cell(t, c) += 3.0 * sigma[static_cast<std::size_t>(c)] * sign;
        }
      }
      break;
    case AnomalyKind::bump:
      // Smooth plateau: raised-cosine ramps around a flat middle.
      for (int i = 0; i < span; ++i) {
        const int ramp = std::max(1, span / 4);
        const double up = i < ramp ? 0.5 * (1.0 - std::cos(kPi * (i + 1) / ramp)) : 1.0;
        const int j = span - 1 - i;
        const double down = j < ramp ? 0.5 * (1.0 - std::cos(kPi * (j + 1) / ramp)) : 1.0;
        const double env = std::min(up, down);
        for (int c = 0; c < d; ++c) {
          cell(w0 + i, c) += 1.5 * sigma[static_cast<std::size_t>(c)] * env;
        }
      }
      break;
    case AnomalyKind::freq_shift:
      // Replace the window with itself time-compressed by 2 (mirrored at
      // the end), doubling the local frequency. The replacement delta is
      // scaled up when the window is too slow for the fold to register.
      for (int c = 0; c < d; ++c) {
        std::vector<double> delta(static_cast<std::size_t>(span));
        double sq = 0.0;
        for (int i = 0; i < span; ++i) {
          int src = 2 * i;
          if (src >= span) src = 2 * span - 2 - src;
          delta[static_cast<std::size_t>(i)] = cell(w0 + src, c) - cell(w0 + i, c);
          sq += delta[static_cast<std::size_t>(i)] * delta[static_cast<std::size_t>(i)];
        }
        const double rms = std::sqrt(sq / span);
        const double sd = sigma[static_cast<std::size_t>(c)];
        double scale = 1.0;
        if (rms < 1.2 * sd) {
          if (rms > 1e-9 * std::max(sd, 1e-30)) {
            scale = 1.5 * sd / rms;
          } else {
            const double sign = uniform_draw(rng) < 0.5 ? -1.0 : 1.0;
            for (double& dv : delta) dv = sign * 1.5 * sd;
          }
        }
        for (int i = 0; i < span; ++i) cell(w0 + i, c) += scale * delta[static_cast<std::size_t>(i)];
      }
      break;
  }

  std::vector<char> mask(seg.anomaly_mask());
  for (int t = w0; t < w0 + span; ++t) mask[static_cast<std::size_t>(t)] = 1;
  return TimeSeriesSegment(seg.patient_id(), Tensor::from({t_len, d}, std::move(vals)),
                           std::move(mask), 1);
}

std::vector<TimeSeriesSegment> make_dataset(int n_patients, int segs_per_patient,
                                            double disease_rate, int t_len, int d_chan,
                                            std::uint64_t seed, double span_frac,
                                            const std::string& pid_prefix) {
  if (n_patients < 1 || segs_per_patient < 1) {
    throw std::invalid_argument("make_dataset: need at least one patient and segment");
  }
  if (pid_prefix.empty()) {
    throw std::invalid_argument("make_dataset: pid_prefix must be non-empty");
  }
  if (disease_rate < 0.0 || disease_rate > 1.0) {
    throw std::invalid_argument("make_dataset: disease_rate must be in [0, 1]");
  }
  std::vector<TimeSeriesSegment> out;
  out.reserve(static_cast<std::size_t>(n_patients) * segs_per_patient);
  const int n_dis = static_cast<int>(std::lround(disease_rate * segs_per_patient));
  const AnomalyKind kinds[3] = {AnomalyKind::spike, AnomalyKind::freq_shift, AnomalyKind::bump};

  for (int p = 0; p < n_patients; ++p) {
    char pid_buf[16];
    std::snprintf(pid_buf, sizeof pid_buf, "%02d", p);
    const std::string pid = pid_prefix + pid_buf;

    std::vector<int> order(static_cast<std::size_t>(segs_per_patient));
    for (int k = 0; k < segs_per_patient; ++k) order[static_cast<std::size_t>(k)] = k;
    auto pick_rng = rng_stream(seed, "disease_pick:" + pid);
    shuffle_vec(order, pick_rng);
    std::vector<char> diseased(static_cast<std::size_t>(segs_per_patient), 0);
    for (int i = 0; i < n_dis; ++i) diseased[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

    for (int k = 0; k < segs_per_patient; ++k) {
      const std::uint64_t seg_seed = derive_seed(seed, pid, static_cast<std::uint64_t>(k));
      TimeSeriesSegment seg = gen_healthy(pid, t_len, d_chan, seg_seed);
      if (diseased[static_cast<std::size_t>(k)]) {
        const auto kind = kinds[pick_rng() % 3];
        seg = zscore_channels(inject_anomaly(seg, kind, span_frac, seg_seed));
      }
      out.push_back(std::move(seg));
    }
  }
  return out;
}

DatasetSplit split_by_patient(const std::vector<TimeSeriesSegment>& segs,
                              std::array<double, 3> ratios, double label_fraction,
                              std::uint64_t seed) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split_by_patient: ratios must sum to 1");
  }
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
    throw std::invalid_argument("split_by_patient: label_fraction must be in (0, 1]");
  }

  std::vector<std::string> pids;
  for (const auto& s : segs) {
    if (std::find(pids.begin(), pids.end(), s.patient_id()) == pids.end()) {
      pids.push_back(s.patient_id());
    }
  }
  const int n_pat = static_cast<int>(pids.size());
  if (n_pat < 3) throw std::invalid_argument("split_by_patient: fewer patients than splits");

  auto rng = rng_stream(seed, "patient_split");
  shuffle_vec(pids, rng);
  const int n_val = std::max(1, static_cast<int>(std::lround(ratios[1] * n_pat)));
  const int n_test = std::max(1, static_cast<int>(std::lround(ratios[2] * n_pat)));
  const int n_train = n_pat - n_val - n_test;
  if (n_train < 1) throw std::invalid_argument("split_by_patient: fewer patients than splits");

  auto bucket_of = [&](const std::string& pid) {
    const auto it = std::find(pids.begin(), pids.end(), pid);
    const int idx = static_cast<int>(it - pids.begin());
    return idx < n_train ? 0 : idx < n_train + n_val ? 1 : 2;
  };

  DatasetSplit split;
  split.label_fraction = label_fraction;
  for (const auto& s : segs) {
    switch (bucket_of(s.patient_id())) {
      case 0: split.train.push_back(s); break;
      case 1: split.val.push_back(s); break;
      default: split.test.push_back(s); break;
    }
  }

  // Per-patient stratified label retention: exactly ceil(f * n_train
  // segments) keep their label, apportioned by largest remainder across
  // patients and across classes within each patient.
  const int n_total = static_cast<int>(split.train.size());
  const int n_keep = static_cast<int>(std::ceil(label_fraction * n_total));
  if (n_keep >= n_total) return split;

  struct PatientBlock {
    std::vector<int> idx0, idx1;  // train indices per class
    int quota = 0;
    double frac = 0.0;
  };
  std::vector<std::string> train_pids(pids.begin(), pids.begin() + n_train);
  std::vector<PatientBlock> blocks(train_pids.size());
  for (int i = 0; i < n_total; ++i) {
    const auto& s = split.train[static_cast<std::size_t>(i)];
    const auto it = std::find(train_pids.begin(), train_pids.end(), s.patient_id());
    auto& blk = blocks[static_cast<std::size_t>(it - train_pids.begin())];
    (s.label() == 1 ? blk.idx1 : blk.idx0).push_back(i);
  }

  int assigned = 0;
  for (auto& blk : blocks) {
    const double share =
        static_cast<double>(n_keep) * (blk.idx0.size() + blk.idx1.size()) / n_total;
    blk.quota = static_cast<int>(std::floor(share));
    blk.frac = share - blk.quota;
    assigned += blk.quota;
  }
  std::vector<std::size_t> by_frac(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) by_frac[i] = i;
  std::stable_sort(by_frac.begin(), by_frac.end(),
                   [&](std::size_t a, std::size_t b) { return blocks[a].frac > blocks[b].frac; });
  for (std::size_t i = 0; assigned < n_keep; ++i) {
    auto& blk = blocks[by_frac[i % blocks.size()]];
    const int cap = static_cast<int>(blk.idx0.size() + blk.idx1.size());
    if (blk.quota < cap) {
      ++blk.quota;
      ++assigned;
    }
  }

  std::vector<char> keep(static_cast<std::size_t>(n_total), 0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = blocks[b];
    const int c0 = static_cast<int>(blk.idx0.size());
    const int c1 = static_cast<int>(blk.idx1.size());
    const int n_p = c0 + c1;
    if (n_p == 0 || blk.quota == 0) continue;
    const double share1 = static_cast<double>(blk.quota) * c1 / n_p;
    int q1 = static_cast<int>(std::floor(share1));
    const double frac1 = share1 - q1;
    // Round the fractional class share; exact halves alternate by patient
    // so quota-1 patients with balanced classes still yield both classes.
    if (frac1 > 0.5 + 1e-12 || (frac1 > 0.5 - 1e-12 && b % 2 == 0)) ++q1;
    int q0 = blk.quota - q1;
    if (q0 > c0) {
      q1 += q0 - c0;
      q0 = c0;
    }
    if (q1 > c1) {
      q0 = std::min(c0, q0 + (q1 - c1));
      q1 = c1;
    }
    auto pick_rng = rng_stream(seed, "label_pick:" + train_pids[b]);
    shuffle_vec(blk.idx0, pick_rng);
    shuffle_vec(blk.idx1, pick_rng);
    for (int i = 0; i < q0; ++i) keep[static_cast<std::size_t>(blk.idx0[static_cast<std::size_t>(i)])] = 1;
    for (int i = 0; i < q1; ++i) keep[static_cast<std::size_t>(blk.idx1[static_cast<std::size_t>(i)])] = 1;
  }
  for (int i = 0; i < n_total; ++i) {
    if (!keep[static_cast<std::size_t>(i)]) split.train[static_cast<std::size_t>(i)].set_label(-1);
  }
  return split;
}

namespace {

std::string csv_dir(const std::string& csv_path) {
  const auto pos = csv_path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : csv_path.substr(0, pos);
}

std::string expected_header(int t_len, int d_chan) {
  std::ostringstream os;
  os << "patient_id,label,mask";
  for (int c = 0; c < d_chan; ++c) {
    for (int t = 0; t < t_len; ++t) os << ",c" << c << "_t" << t;
  }
  return os.str();
}

}  // namespace

void write_csv(const std::vector<TimeSeriesSegment>& segs, const std::string& csv_path) {
  if (segs.empty()) throw std::invalid_argument("write_csv: no segments");
  const int t_len = segs.front().t_len(), d_chan = segs.front().d_chan();
  for (const auto& s : segs) {
    if (s.t_len() != t_len || s.d_chan() != d_chan) {
      throw DataError("write_csv: segments disagree on T or D");
    }
    if (s.patient_id().empty() ||
        s.patient_id().find_first_of(",\n\r") != std::string::npos) {
      throw DataError("write_csv: invalid patient id '" + s.patient_id() + "'");
    }
  }

  std::ofstream out(csv_path);
  if (!out) throw DataError("write_csv: cannot open " + csv_path);
  out << expected_header(t_len, d_chan) << "\n";
  char buf[40];
  for (const auto& s : segs) {
    out << s.patient_id() << "," << s.label() << ",";
    for (char m : s.anomaly_mask()) out << (m ? '1' : '0');
    for (int c = 0; c < d_chan; ++c) {
      for (int t = 0; t < t_len; ++t) {
        std::snprintf(buf, sizeof buf, "%.9g", s.x().at(t, c));
        out << "," << buf;
      }
    }
    out << "\n";
  }
  if (!out) throw DataError("write_csv: write failed for " + csv_path);

  std::ofstream meta(csv_dir(csv_path) + "/meta.txt");
  if (!meta) throw DataError("write_csv: cannot open meta.txt next to " + csv_path);
  meta << "T=" << t_len << "\nD=" << d_chan << "\n";
}

std::vector<TimeSeriesSegment> read_csv(const std::string& csv_path) {
  std::ifstream meta(csv_dir(csv_path) + "/meta.txt");
  if (!meta) throw DataError("read_csv: missing meta.txt next to " + csv_path);
  std::string line;
  int t_len = -1, d_chan = -1;
  while (std::getline(meta, line)) {
    if (line.rfind("T=", 0) == 0) t_len = std::stoi(line.substr(2));
    else if (line.rfind("D=", 0) == 0) d_chan = std::stoi(line.substr(2));
    else if (!line.empty()) throw DataError("read_csv: unexpected meta.txt line: " + line);
  }
  if (t_len <= 0 || d_chan <= 0) throw DataError("read_csv: meta.txt must define T and D");

  std::ifstream in(csv_path);
  if (!in) throw DataError("read_csv: cannot open " + csv_path);
  if (!std::getline(in, line) || line.empty()) {
    throw DataError("read_csv: empty dataset in " + csv_path);
  }
  if (line != expected_header(t_len, d_chan)) {
    throw DataError("read_csv: malformed header in " + csv_path);
  }

  std::vector<TimeSeriesSegment> segs;
  const std::size_t want = 3 + static_cast<std::size_t>(t_len) * d_chan;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      cells.push_back(line.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (cells.size() != want) {
      throw DataError("read_csv: row " + std::to_string(row) + ": expected " +
                      std::to_string(want) + " cells, got " + std::to_string(cells.size()));
    }
    const std::string& pid = cells[0];
    int label;
    if (cells[1] == "0") label = 0;
    else if (cells[1] == "1") label = 1;
    else if (cells[1] == "-1") label = -1;
    else throw DataError("read_csv: row " + std::to_string(row) + ": bad label " + cells[1]);
    const std::string& mask_str = cells[2];
    if (static_cast<int>(mask_str.size()) != t_len ||
        mask_str.find_first_not_of("01") != std::string::npos) {
      throw DataError("read_csv: row " + std::to_string(row) + ": bad mask");
    }
    std::vector<char> mask(mask_str.begin(), mask_str.end());
    for (char& m : mask) m = m == '1' ? 1 : 0;

    std::vector<double> vals(static_cast<std::size_t>(t_len) * d_chan);
    for (int c = 0; c < d_chan; ++c) {
      for (int t = 0; t < t_len; ++t) {
        const std::string& cell = cells[3 + static_cast<std::size_t>(c) * t_len + t];
        char* end = nullptr;
        const double v = std::strtod(cell.c_str(), &end);
        if (cell.empty() || end != cell.c_str() + cell.size()) {
          throw DataError("read_csv: row " + std::to_string(row) + ": non-numeric cell '" +
                          cell + "'");
        }
        vals[static_cast<std::size_t>(t) * d_chan + c] = v;
      }
    }
    const bool any_mask = std::find(mask.begin(), mask.end(), 1) != mask.end();
    if (label == 0 && any_mask) {
      throw DataError("read_csv: row " + std::to_string(row) + ": healthy row with mask bits");
    }
    if (label == 1 && !any_mask) {
      throw DataError("read_csv: row " + std::to_string(row) + ": diseased row without mask");
    }
    TimeSeriesSegment seg(pid, Tensor::from({t_len, d_chan}, std::move(vals)), std::move(mask), 0);
    seg.set_label(label);
    segs.push_back(std::move(seg));
  }
  if (segs.empty()) throw DataError("read_csv: empty dataset in " + csv_path);
  return segs;
}

}  // namespace codac
