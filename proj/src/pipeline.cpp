#include "codac/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <utility>

#include "codac/common.hpp"
#include "codac/eval.hpp"

namespace codac {

// ---- config serialization -------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fmt_u64_list(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double parse_double_value(const std::string& key, const std::string& text) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

long long parse_ll_value(const std::string& key, const std::string& text) {
  long long v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError("config key '" + key + "': cannot parse '" + text + "' as an integer");
  }
  return v;
}

int parse_int_value(const std::string& key, const std::string& text) {
  long long v = parse_ll_value(key, text);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw DataError("config key '" + key + "': value out of range");
  }
  return static_cast<int>(v);
}

std::uint64_t parse_u64_value(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw DataError("config key '" + key + "': cannot parse '" + text + "' as an unsigned integer");
  }
  return v;
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t c = text.find(',', pos);
    if (c == std::string::npos) c = text.size();
    parts.push_back(trim(text.substr(pos, c - pos)));
    pos = c + 1;
  }
  return parts;
}

std::vector<int> parse_int_list_value(const std::string& key, const std::string& text) {
  std::vector<int> out;
  for (const auto& p : split_commas(text)) {
    if (p.empty()) throw DataError("config key '" + key + "': empty list element");
    out.push_back(parse_int_value(key, p));
  }
  return out;
}

std::vector<std::uint64_t> parse_u64_list_value(const std::string& key, const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& p : split_commas(text)) {
    if (p.empty()) throw DataError("config key '" + key + "': empty list element");
    out.push_back(parse_u64_value(key, p));
  }
  return out;
}

}  // namespace

std::string TrainConfig::serialize() const {
  std::string o;
  auto kv = [&o](const std::string& k, const std::string& v) { o += k + " = " + v + "\n"; };
  kv("run_seed", std::to_string(run_seed));
  kv("seeds", fmt_u64_list(seeds));
  kv("t_len", std::to_string(t_len));
  kv("d_chan", std::to_string(d_chan));
  kv("n_patients", std::to_string(n_patients));
  kv("segs_per_patient", std::to_string(segs_per_patient));
  kv("disease_rate", fmt_double(disease_rate));
  kv("span_frac", fmt_double(span_frac));
  kv("healthy_patients", std::to_string(healthy_patients));
  kv("healthy_segs_per_patient", std::to_string(healthy_segs_per_patient));
  kv("label_fraction", fmt_double(label_fraction));
  kv("train_frac", fmt_double(train_frac));
  kv("val_frac", fmt_double(val_frac));
  kv("test_frac", fmt_double(test_frac));
  kv("d_hidden", std::to_string(d_hidden));
  kv("n_attn_blocks", std::to_string(n_attn_blocks));
  kv("n_heads", std::to_string(n_heads));
  kv("d_ff", std::to_string(d_ff));
  kv("conv_kernel", std::to_string(conv_kernel));
  kv("conv_dilations", fmt_int_list(conv_dilations));
  kv("dropout", fmt_double(dropout));
  kv("cde_d_model", std::to_string(cde_d_model));
  kv("cde_blocks", std::to_string(cde_blocks));
  kv("cde_heads", std::to_string(cde_heads));
  kv("cde_ff", std::to_string(cde_ff));
  kv("cde_latent", std::to_string(cde_latent));
  kv("cde_dropout", fmt_double(cde_dropout));
  kv("d_project", std::to_string(d_project));
  kv("crop_frac", fmt_double(crop_frac));
  kv("jitter_sigma", fmt_double(jitter_sigma));
  kv("scale_lo", fmt_double(scale_lo));
  kv("scale_hi", fmt_double(scale_hi));
  kv("tau", fmt_double(tau));
  kv("lambda", fmt_double(lambda));
  kv("beta", fmt_double(beta));
  kv("delta", std::to_string(delta));
  kv("intra_pairs", std::to_string(intra_pairs));
  kv("batch_size", std::to_string(batch_size));
  kv("epochs_stage1", std::to_string(epochs_stage1));
  kv("epochs_stage2", std::to_string(epochs_stage2));
  kv("epochs_stage3", std::to_string(epochs_stage3));
  kv("lr_stage1", fmt_double(lr_stage1));
  kv("lr_stage2", fmt_double(lr_stage2));
  kv("lr_stage3_fft", fmt_double(lr_stage3_fft));
  kv("lr_stage3_pft", fmt_double(lr_stage3_pft));
  kv("mode", mode == FinetuneMode::pft ? "pft" : "fft");
  kv("stage2_healthy_frac", fmt_double(stage2_healthy_frac));
  return o;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw DataError("config line " + std::to_string(line_no) + ": empty key");
    }
    if (!seen.insert(key).second) {
      throw DataError("duplicate config key '" + key + "'");
    }
    if (key == "run_seed") cfg.run_seed = parse_u64_value(key, value);
    else if (key == "seeds") cfg.seeds = parse_u64_list_value(key, value);
    else if (key == "t_len") cfg.t_len = parse_int_value(key, value);
    else if (key == "d_chan") cfg.d_chan = parse_int_value(key, value);
    else if (key == "n_patients") cfg.n_patients = parse_int_value(key, value);
    else if (key == "segs_per_patient") cfg.segs_per_patient = parse_int_value(key, value);
    else if (key == "disease_rate") cfg.disease_rate = parse_double_value(key, value);
    else if (key == "span_frac") cfg.span_frac = parse_double_value(key, value);
    else if (key == "healthy_patients") cfg.healthy_patients = parse_int_value(key, value);
    else if (key == "healthy_segs_per_patient") cfg.healthy_segs_per_patient = parse_int_value(key, value);
    else if (key == "label_fraction") cfg.label_fraction = parse_double_value(key, value);
    else if (key == "train_frac") cfg.train_frac = parse_double_value(key, value);
    else if (key == "val_frac") cfg.val_frac = parse_double_value(key, value);
    else if (key == "test_frac") cfg.test_frac = parse_double_value(key, value);
    else if (key == "d_hidden") cfg.d_hidden = parse_int_value(key, value);
    else if (key == "n_attn_blocks") cfg.n_attn_blocks = parse_int_value(key, value);
    else if (key == "n_heads") cfg.n_heads = parse_int_value(key, value);
    else if (key == "d_ff") cfg.d_ff = parse_int_value(key, value);
    else if (key == "conv_kernel") cfg.conv_kernel = parse_int_value(key, value);
    else if (key == "conv_dilations") cfg.conv_dilations = parse_int_list_value(key, value);
    else if (key == "dropout") cfg.dropout = parse_double_value(key, value);
    else if (key == "cde_d_model") cfg.cde_d_model = parse_int_value(key, value);
    else if (key == "cde_blocks") cfg.cde_blocks = parse_int_value(key, value);
    else if (key == "cde_heads") cfg.cde_heads = parse_int_value(key, value);
    else if (key == "cde_ff") cfg.cde_ff = parse_int_value(key, value);
    else if (key == "cde_latent") cfg.cde_latent = parse_int_value(key, value);
    else if (key == "cde_dropout") cfg.cde_dropout = parse_double_value(key, value);
    else if (key == "d_project") cfg.d_project = parse_int_value(key, value);
    else if (key == "crop_frac") cfg.crop_frac = parse_double_value(key, value);
    else if (key == "jitter_sigma") cfg.jitter_sigma = parse_double_value(key, value);
    else if (key == "scale_lo") cfg.scale_lo = parse_double_value(key, value);
    else if (key == "scale_hi") cfg.scale_hi = parse_double_value(key, value);
    else if (key == "tau") cfg.tau = parse_double_value(key, value);
    else if (key == "lambda") cfg.lambda = parse_double_value(key, value);
    else if (key == "beta") cfg.beta = parse_double_value(key, value);
    else if (key == "delta") cfg.delta = parse_int_value(key, value);
    else if (key == "intra_pairs") cfg.intra_pairs = parse_int_value(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int_value(key, value);
    else if (key == "epochs_stage1") cfg.epochs_stage1 = parse_int_value(key, value);
    else if (key == "epochs_stage2") cfg.epochs_stage2 = parse_int_value(key, value);
    else if (key == "epochs_stage3") cfg.epochs_stage3 = parse_int_value(key, value);
    else if (key == "lr_stage1") cfg.lr_stage1 = parse_double_value(key, value);
    else if (key == "lr_stage2") cfg.lr_stage2 = parse_double_value(key, value);
    else if (key == "lr_stage3_fft") cfg.lr_stage3_fft = parse_double_value(key, value);
    else if (key == "lr_stage3_pft") cfg.lr_stage3_pft = parse_double_value(key, value);
    else if (key == "mode") {
      if (value == "pft") cfg.mode = FinetuneMode::pft;
      else if (value == "fft") cfg.mode = FinetuneMode::fft;
      else throw DataError("config key 'mode': expected 'pft' or 'fft', got '" + value + "'");
    } else if (key == "stage2_healthy_frac") {
      cfg.stage2_healthy_frac = parse_double_value(key, value);
    } else {
      throw DataError("unknown config key '" + key + "'");
    }
  }
  return cfg;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (t_len < 32) bad("t_len must be at least 32");
  if (d_chan < 1) bad("d_chan must be positive");
  if (n_patients < 3) bad("n_patients must be at least 3 for a patient-wise split");
  if (segs_per_patient < 1) bad("segs_per_patient must be positive");
  if (disease_rate < 0.0 || disease_rate > 1.0) bad("disease_rate must be in [0, 1]");
  if (span_frac <= 0.0 || span_frac > 0.5) bad("span_frac must be in (0, 0.5]");
  if (healthy_patients < 1 || healthy_segs_per_patient < 1) bad("healthy pool must be non-empty");
  if (label_fraction <= 0.0 || label_fraction > 1.0) bad("label_fraction must be in (0, 1]");
  if (train_frac <= 0.0 || val_frac <= 0.0 || test_frac <= 0.0) bad("split fractions must be positive");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) bad("split fractions must sum to 1");
  encoder_config().validate();
  cde_config().validate();
  augmentation_spec().validate();
  if (d_project < 1) bad("d_project must be positive");
  if (std::lround(crop_frac * t_len) < 8) bad("crop_frac * t_len must be at least 8");
  if (tau <= 0.0) bad("tau must be positive");
  if (lambda < 0.0) bad("lambda must be non-negative");
  if (beta < 0.0) bad("beta must be non-negative");
  if (delta < 1) bad("delta must be positive");
  if (intra_pairs < 1) bad("intra_pairs must be positive");
  if (batch_size < 2) bad("batch_size must be at least 2");
  if (epochs_stage1 < 0 || epochs_stage2 < 0 || epochs_stage3 < 0) bad("epochs must be non-negative");
  if (lr_stage1 <= 0.0 || lr_stage2 <= 0.0 || lr_stage3_fft <= 0.0 || lr_stage3_pft <= 0.0) {
    bad("learning rates must be positive");
  }
  if (stage2_healthy_frac < 0.0 || stage2_healthy_frac > 1.0) {
    bad("stage2_healthy_frac must be in [0, 1]");
  }
  if (seeds.empty()) bad("seeds must be non-empty");
}

EncoderConfig TrainConfig::encoder_config() const {
  EncoderConfig ec;
  ec.d_in = d_chan;
  ec.d_hidden = d_hidden;
  ec.conv_layers.clear();
  for (int dil : conv_dilations) {
    ec.conv_layers.push_back({conv_kernel, dil, d_hidden});
  }
  ec.n_attn_blocks = n_attn_blocks;
  ec.n_heads = n_heads;
  ec.d_ff = d_ff;
  ec.dropout_rate = dropout;
  return ec;
}

CdeConfig TrainConfig::cde_config() const {
  CdeConfig cc;
  cc.d_in = d_chan;
  cc.d_model = cde_d_model;
  cc.n_blocks = cde_blocks;
  cc.n_heads = cde_heads;
  cc.d_ff = cde_ff;
  cc.d_latent = cde_latent;
  cc.dropout_rate = cde_dropout;
  return cc;
}

AugmentationSpec TrainConfig::augmentation_spec() const {
  AugmentationSpec s;
  s.crop_frac = crop_frac;
  s.jitter_sigma = jitter_sigma;
  s.scale_lo = scale_lo;
  s.scale_hi = scale_hi;
  return s;
}

// ---- checkpoint binary format ---------------------------------------------

std::string stage_name(StageTag t) {
  switch (t) {
    case StageTag::cde: return "cde";
    case StageTag::dmcf: return "dmcf";
    case StageTag::finetune: return "finetune";
  }
  return "unknown";
}

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
  float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw DataError("truncated checkpoint file: " + path);
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos])) |
                      static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::string out;
  out += "CODC";
  put_u32(out, c.version);
  out.push_back(static_cast<char>(static_cast<std::uint8_t>(c.stage)));
  const std::string cfg_text = c.config.serialize();
  put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
  out += cfg_text;
  for (const auto& name : c.params.names()) {
    const Tensor& t = c.params.get(name);
    if (name.size() > 0xffff) throw DataError("parameter name too long: " + name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(t.rank())));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (double v : t.values()) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw DataError("cannot write checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ByteReader r{buf, 0, path};
  if (r.bytes(4) != "CODC") throw DataError("not a checkpoint: " + path);
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(c.version) +
                    " (expected " + std::to_string(kCheckpointVersion) + "): " + path);
  }
  const std::uint8_t stage = r.u8();
  if (stage < 1 || stage > 3) {
    throw DataError("invalid stage tag " + std::to_string(stage) + ": " + path);
  }
  c.stage = static_cast<StageTag>(stage);
  const std::uint32_t cfg_len = r.u32();
  c.config = TrainConfig::parse(r.bytes(cfg_len));
  while (!r.done()) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len);
    if (name.empty()) throw DataError("empty parameter name: " + path);
    if (c.params.has(name)) throw DataError("duplicate parameter '" + name + "': " + path);
    const std::uint8_t rank = r.u8();
    if (rank > 8) throw DataError("parameter '" + name + "' has implausible rank: " + path);
    Shape shape(rank);
    std::int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32();
      if (d == 0 || d > 0x7fffffffu) throw DataError("parameter '" + name + "' has bad dims: " + path);
      shape[static_cast<std::size_t>(i)] = static_cast<int>(d);
      numel *= d;
      if (numel > 100'000'000) throw DataError("parameter '" + name + "' is implausibly large: " + path);
    }
    std::vector<double> vals(static_cast<std::size_t>(numel));
    for (auto& v : vals) {
      const float x = r.f32();
      if (!std::isfinite(x)) throw DataError("non-finite value in parameter '" + name + "': " + path);
      v = static_cast<double>(x);
    }
    c.params.put(name, Tensor::from(std::move(shape), std::move(vals), false));
  }
  return c;
}

int copy_params(const ParamStore& src, const std::string& prefix, ParamStore& dst) {
  int n = 0;
  for (const auto& name : src.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    dst.put(name, src.get(name).detached());
    ++n;
  }
  return n;
}

// ---- shared helpers -------------------------------------------------------

namespace {

// Copies checkpoint values into the parameter layout of a freshly built
// scorer, verifying names and shapes along the way.
CdeModel cde_model_from(const Checkpoint& ckpt, const CdeConfig& cc) {
  CdeModel m(cc, 0);
  for (const auto& name : m.params.names()) {
    if (!ckpt.params.has(name)) {
      throw DataError("checkpoint is missing parameter '" + name + "'");
    }
    const Tensor& src = ckpt.params.get(name);
    Tensor& dst = m.params.get(name);
    if (src.shape() != dst.shape()) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(src.shape()) +
                      ", expected " + shape_str(dst.shape()));
    }
    auto out = dst.values_mut();
    std::copy(src.values().begin(), src.values().end(), out.begin());
  }
  m.params.set_requires_grad(false);
  return m;
}

void verify_encoder_params(const ParamStore& ps, const EncoderConfig& enc_cfg) {
  ParamStore expect;
  auto rng = rng_stream(0, "shape_check");
  init_encoder_params(expect, enc_cfg, "enc.", rng);
  for (const auto& name : expect.names()) {
    if (!ps.has(name)) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (ps.get(name).shape() != expect.get(name).shape()) {
      throw DataError("checkpoint parameter '" + name + "' has shape " +
                      shape_str(ps.get(name).shape()) + ", expected " +
                      shape_str(expect.get(name).shape()));
    }
  }
}

}  // namespace

CdeModel scorer_from_checkpoint(const Checkpoint& ckpt) {
  return cde_model_from(ckpt, ckpt.config.cde_config());
}

// ---- stage 1: anomaly scorer ----------------------------------------------

StageResult stage1(const TrainConfig& cfg, const std::vector<TimeSeriesSegment>& healthy) {
  cfg.validate();
  CdeModel model(cfg.cde_config(), cfg.run_seed);
  StageResult r;
  r.epoch_losses = train_cde(model, healthy, cfg.epochs_stage1, cfg.lr_stage1, cfg.run_seed);
  r.checkpoint.version = kCheckpointVersion;
  r.checkpoint.stage = StageTag::cde;
  r.checkpoint.config = cfg;
  copy_params(model.params, "", r.checkpoint.params);
  return r;
}

// ---- stage 2: contrastive pre-training ------------------------------------

StageResult stage2(const TrainConfig& cfg, const Checkpoint& cde_ckpt,
                   const std::vector<TimeSeriesSegment>& healthy_pool,
                   const std::vector<TimeSeriesSegment>& target_pool,
                   const Stage2Options& opts) {
  cfg.validate();
  if (cde_ckpt.stage != StageTag::cde) {
    throw DataError("pre-training expects a scorer checkpoint, got stage '" +
                    stage_name(cde_ckpt.stage) + "'");
  }
  if (healthy_pool.empty() && target_pool.empty()) {
    throw std::invalid_argument("stage 2: no pre-training data");
  }
  const EncoderConfig enc_cfg = cfg.encoder_config();
  const AugmentationSpec aug = cfg.augmentation_spec();
  const bool use_intra = opts.use_intra && cfg.lambda > 0.0;
  const int crop_len = opts.fixed_views
                           ? cfg.t_len
                           : static_cast<int>(std::lround(aug.crop_frac * cfg.t_len));
  if (use_intra && crop_len - 1 <= 2 * cfg.delta) {
    throw std::invalid_argument(
        "stage 2: cropped views are too short for the temporal term (need len > 2*delta + 1)");
  }

  // Batch composition: a fixed healthy share, the rest unlabeled target.
  int n_h = static_cast<int>(std::lround(cfg.stage2_healthy_frac * cfg.batch_size));
  n_h = std::clamp(n_h, 0, cfg.batch_size);
  if (healthy_pool.empty()) n_h = 0;
  if (target_pool.empty()) n_h = cfg.batch_size;
  const int n_t = cfg.batch_size - n_h;
  if (n_h > 0 && static_cast<int>(healthy_pool.size()) < n_h) {
    throw std::invalid_argument("stage 2: healthy pool smaller than its per-batch share");
  }
  if (n_t > 0 && static_cast<int>(target_pool.size()) < n_t) {
    throw std::invalid_argument("stage 2: target pool smaller than its per-batch share");
  }
  int batches = std::numeric_limits<int>::max();
  if (n_h > 0) batches = std::min(batches, static_cast<int>(healthy_pool.size()) / n_h);
  if (n_t > 0) batches = std::min(batches, static_cast<int>(target_pool.size()) / n_t);

  // The whole stage runs label-blind; any label() call below would throw.
  LabelGuard guard;

  const bool need_scores = opts.weight_mode == WeightMode::learned;
  CdeModel scorer_model;
  std::vector<std::vector<double>> h_scores, t_scores;
  if (need_scores) {
    std::function<std::vector<double>(const TimeSeriesSegment&)> scorer = opts.score_override;
    if (!scorer) {
      scorer_model = cde_model_from(cde_ckpt, cfg.cde_config());
      const double beta = cfg.beta;
      scorer = [&scorer_model, beta](const TimeSeriesSegment& seg) {
        return score_segment(scorer_model, seg.x(), beta).s;
      };
    }
    h_scores.reserve(healthy_pool.size());
    for (const auto& seg : healthy_pool) h_scores.push_back(scorer(seg));
    t_scores.reserve(target_pool.size());
    for (const auto& seg : target_pool) t_scores.push_back(scorer(seg));
  }

  ParamStore ps;
  auto init_rng = rng_stream(cfg.run_seed, "stage2_init");
  init_encoder_params(ps, enc_cfg, "enc.", init_rng);
  init_weight_head(ps, "wh.", init_rng);
  init_projection(ps, "proj.", enc_cfg.d_hidden, cfg.d_project, init_rng);

  Adam opt(ps, cfg.lr_stage2);
  auto drop_rng = rng_stream(cfg.run_seed, "stage2_dropout");

  StageResult r;
  for (int e = 0; e < cfg.epochs_stage2; ++e) {
    auto order_rng = rng_stream(cfg.run_seed, "stage2_order", static_cast<std::uint64_t>(e));
    std::vector<int> ho(healthy_pool.size()), to(target_pool.size());
    for (std::size_t i = 0; i < ho.size(); ++i) ho[i] = static_cast<int>(i);
    for (std::size_t i = 0; i < to.size(); ++i) to[i] = static_cast<int>(i);
    shuffle_indices(ho, order_rng);
    shuffle_indices(to, order_rng);

    double epoch_loss = 0.0;
    for (int b = 0; b < batches; ++b) {
      Tape tape;
      std::vector<Tensor> z1s, z2s, intra_terms;
      for (int i = 0; i < cfg.batch_size; ++i) {
        const bool from_h = i < n_h;
        const int src = from_h ? ho[static_cast<std::size_t>(b * n_h + i)]
                               : to[static_cast<std::size_t>(b * n_t + (i - n_h))];
        const TimeSeriesSegment& seg = from_h ? healthy_pool[static_cast<std::size_t>(src)]
                                              : target_pool[static_cast<std::size_t>(src)];
        const std::vector<double>* sc =
            need_scores ? &(from_h ? h_scores : t_scores)[static_cast<std::size_t>(src)] : nullptr;
        const std::string item_key = std::to_string(e) + ":" + std::to_string(b) + ":" +
                                     std::to_string(i);
        for (int v = 0; v < 2; ++v) {
          AugmentedView av;
          if (opts.fixed_views) {
            // One augmentation per segment, shared by both views and
            // reused every epoch: full-length crop, fixed jitter stream.
            AugmentationSpec fixed = aug;
            fixed.crop_frac = 1.0;
            const std::string pool_tag = from_h ? "h" : "t";
            av = augment(seg.x(), fixed,
                         rng_stream(cfg.run_seed, "fixed_view:" + pool_tag,
                                    static_cast<std::uint64_t>(src))());
          } else {
            av = augment(seg.x(), aug,
                         rng_stream(cfg.run_seed,
                                    "stage2_aug:" + item_key + ":" + std::to_string(v))());
          }
          const int len = av.x.dim(0);
          Tensor h = encode(ps, enc_cfg, "enc.", av.x, true, drop_rng);
          Tensor w;
          switch (opts.weight_mode) {
            case WeightMode::learned:
              w = weights_from_scores(ps, "wh.", score_slice(*sc, av.crop_offset, len));
              break;
            case WeightMode::constant_half:
              w = Tensor::full({len}, 0.5);
              break;
            case WeightMode::constant_one:
              w = Tensor::full({len}, 1.0);
              break;
          }
          Tensor hw = apply_weights(h, w);
          Tensor z = pool_and_project(ps, "proj.", hw);
          (v == 0 ? z1s : z2s).push_back(z);
          if (use_intra) {
            const std::uint64_t iseed =
                rng_stream(cfg.run_seed, "stage2_intra:" + item_key + ":" + std::to_string(v))();
            intra_terms.push_back(loss_intra(hw, cfg.tau, cfg.delta, cfg.intra_pairs, iseed));
          }
        }
      }
      Tensor l_inter = loss_inter(stack_rows(z1s), stack_rows(z2s), cfg.tau);
      Tensor loss;
      if (!intra_terms.empty()) {
        Tensor isum = intra_terms[0];
        for (std::size_t k = 1; k < intra_terms.size(); ++k) isum = add(isum, intra_terms[k]);
        Tensor imean = scale(isum, 1.0 / static_cast<double>(intra_terms.size()));
        loss = loss_total(l_inter, imean, cfg.lambda);
      } else {
        loss = l_inter;
      }
      ps.zero_grad();
      tape.backward(loss);
      opt.step();
      epoch_loss += loss.item();
    }
    r.epoch_losses.push_back(epoch_loss / batches);
  }

  r.checkpoint.version = kCheckpointVersion;
  r.checkpoint.stage = StageTag::dmcf;
  r.checkpoint.config = cfg;
  copy_params(cde_ckpt.params, "", r.checkpoint.params);  // scorer passes through untouched
  copy_params(ps, "", r.checkpoint.params);
  return r;
}

// ---- stage 3: supervised fine-tuning --------------------------------------

Tensor bce_loss(const Tensor& probs_col, const std::vector<int>& labels) {
  if (probs_col.rank() != 2 || probs_col.dim(1) != 1) {
    throw std::invalid_argument("bce_loss expects an [N x 1] probability column");
  }
  const int n = probs_col.dim(0);
  if (static_cast<int>(labels.size()) != n || n == 0) {
    throw std::invalid_argument("bce_loss: probability/label count mismatch");
  }
  std::vector<double> y(static_cast<std::size_t>(n)), y_not(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] != 0 && labels[static_cast<std::size_t>(i)] != 1) {
      throw std::invalid_argument("bce_loss: labels must be 0 or 1");
    }
    y[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)];
    y_not[static_cast<std::size_t>(i)] = 1.0 - y[static_cast<std::size_t>(i)];
  }
  const double eps = 1e-7;
  Tensor p = clamp(probs_col, eps, 1.0 - eps);
  Tensor yt = Tensor::from({n, 1}, std::move(y));
  Tensor ynt = Tensor::from({n, 1}, std::move(y_not));
  Tensor ones = Tensor::full({n, 1}, 1.0);
  Tensor ll = add(mul(yt, log(p)), mul(ynt, log(sub(ones, p))));
  return scale(sum(ll), -1.0 / n);
}

StageResult stage3(const TrainConfig& cfg, const Checkpoint& pre_ckpt,
                   const std::vector<TimeSeriesSegment>& labeled_train,
                   const std::vector<TimeSeriesSegment>& val) {
  cfg.validate();
  if (pre_ckpt.stage != StageTag::dmcf) {
    throw DataError("fine-tuning expects a pre-training checkpoint, got stage '" +
                    stage_name(pre_ckpt.stage) + "'");
  }
  const EncoderConfig enc_cfg = cfg.encoder_config();

  std::vector<const TimeSeriesSegment*> tr;
  int n_pos = 0, n_neg = 0;
  for (const auto& seg : labeled_train) {
    const int l = seg.label();
    if (l == -1) continue;
    (l == 1 ? n_pos : n_neg)++;
    tr.push_back(&seg);
  }
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("stage 3 needs labeled training examples of both classes");
  }
  int v_pos = 0, v_neg = 0;
  for (const auto& seg : val) (seg.label() == 1 ? v_pos : v_neg)++;
  if (v_pos == 0 || v_neg == 0) {
    throw std::invalid_argument("stage 3 needs validation examples of both classes");
  }

  ParamStore ps;
  if (copy_params(pre_ckpt.params, "enc.", ps) == 0) {
    throw DataError("checkpoint has no encoder parameters");
  }
  verify_encoder_params(ps, enc_cfg);
  const bool fft = cfg.mode == FinetuneMode::fft;
  ps.set_requires_grad(fft);
  ps.put("clf.w", Tensor::zeros({enc_cfg.d_hidden, 1}, true));
  ps.put("clf.b", Tensor::zeros({1}, true));

  Adam opt(ps, fft ? cfg.lr_stage3_fft : cfg.lr_stage3_pft);
  auto drop_rng = rng_stream(cfg.run_seed, "stage3_dropout");

  auto forward_prob = [&](const Tensor& x, bool train) {
    Tensor h = encode(ps, enc_cfg, "enc.", x, train, drop_rng);
    Tensor pooled = global_mean_pool(h);
    Tensor logit = add_rowvec(matmul(reshape(pooled, {1, enc_cfg.d_hidden}), ps.get("clf.w")),
                              ps.get("clf.b"));
    return sigmoid(logit);  // [1 x 1]
  };
  auto val_auroc_now = [&]() {
    std::vector<double> probs;
    std::vector<int> ys;
    probs.reserve(val.size());
    for (const auto& seg : val) {
      probs.push_back(forward_prob(seg.x(), false).item());
      ys.push_back(seg.label());
    }
    return auroc(ys, probs);
  };

  StageResult r;
  double best = -1.0;
  int best_epoch = -1;
  std::vector<std::vector<double>> best_values;
  auto snapshot = [&]() {
    best_values.clear();
    for (const auto& name : ps.names()) {
      auto v = ps.get(name).values();
      best_values.emplace_back(v.begin(), v.end());
    }
  };

  for (int e = 0; e < cfg.epochs_stage3; ++e) {
    auto order_rng = rng_stream(cfg.run_seed, "stage3_order", static_cast<std::uint64_t>(e));
    std::vector<int> order(tr.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    shuffle_indices(order, order_rng);

    double epoch_loss = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tape tape;
      std::vector<Tensor> prows;
      std::vector<int> ys;
      for (std::size_t j = start; j < end; ++j) {
        const TimeSeriesSegment& seg = *tr[static_cast<std::size_t>(order[j])];
        prows.push_back(reshape(forward_prob(seg.x(), fft), {1}));
        ys.push_back(seg.label());
      }
      Tensor loss = bce_loss(stack_rows(prows), ys);
      ps.zero_grad();
      tape.backward(loss);
      opt.step();
      epoch_loss += loss.item();
      ++n_batches;
    }
    r.epoch_losses.push_back(epoch_loss / n_batches);
    const double va = val_auroc_now();
    r.val_auroc.push_back(va);
    if (va > best) {
      best = va;
      best_epoch = e;
      snapshot();
    }
  }

  if (best_epoch >= 0) {
    std::size_t i = 0;
    for (const auto& name : ps.names()) {
      auto out = ps.get(name).values_mut();
      std::copy(best_values[i].begin(), best_values[i].end(), out.begin());
      ++i;
    }
    r.best_val_auroc = best;
  } else {
    r.best_val_auroc = val_auroc_now();
  }
  r.best_epoch = best_epoch;

  r.checkpoint.version = kCheckpointVersion;
  r.checkpoint.stage = StageTag::finetune;
  r.checkpoint.config = cfg;
  copy_params(pre_ckpt.params, "cde.", r.checkpoint.params);
  copy_params(ps, "enc.", r.checkpoint.params);
  copy_params(pre_ckpt.params, "wh.", r.checkpoint.params);
  copy_params(pre_ckpt.params, "proj.", r.checkpoint.params);
  copy_params(ps, "clf.", r.checkpoint.params);
  return r;
}

// ---- finished-checkpoint forwards -----------------------------------------

Tensor pooled_embedding(const Checkpoint& ckpt, const Tensor& x) {
  const EncoderConfig ec = ckpt.config.encoder_config();
  std::mt19937_64 dummy(0);
  Tensor h = encode(ckpt.params, ec, "enc.", x, false, dummy);
  return global_mean_pool(h);
}

double classify_prob(const Checkpoint& ckpt, const Tensor& x) {
  if (!ckpt.params.has("clf.w") || !ckpt.params.has("clf.b")) {
    throw DataError("checkpoint has no classifier head");
  }
  const EncoderConfig ec = ckpt.config.encoder_config();
  Tensor pooled = pooled_embedding(ckpt, x);
  Tensor logit = add_rowvec(matmul(reshape(pooled, {1, ec.d_hidden}), ckpt.params.get("clf.w")),
                            ckpt.params.get("clf.b"));
  const double p = sigmoid(logit).item();
  return std::clamp(p, 1e-7, 1.0 - 1e-7);
}

// ---- experiment data ------------------------------------------------------

ExperimentData make_experiment_data(const TrainConfig& cfg) {
  cfg.validate();
  auto target = make_dataset(cfg.n_patients, cfg.segs_per_patient, cfg.disease_rate, cfg.t_len,
                             cfg.d_chan, cfg.run_seed, cfg.span_frac, "p");
  ExperimentData d;
  d.target = split_by_patient(target, {cfg.train_frac, cfg.val_frac, cfg.test_frac},
                              cfg.label_fraction, cfg.run_seed);
  const std::uint64_t hseed = rng_stream(cfg.run_seed, "external_healthy")();
  d.external_healthy = make_dataset(cfg.healthy_patients, cfg.healthy_segs_per_patient, 0.0,
                                    cfg.t_len, cfg.d_chan, hseed, cfg.span_frac, "h");
  return d;
}

}  // namespace codac
