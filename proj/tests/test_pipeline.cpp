#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "codac/eval.hpp"
#include "codac/pipeline.hpp"
#include "doctest.h"

using namespace codac;

namespace {

TrainConfig tiny_cfg() {
  TrainConfig c;
  c.run_seed = 7;
  c.seeds = {7};
  c.t_len = 32;
  c.d_chan = 2;
  c.n_patients = 6;
  c.segs_per_patient = 4;
  c.disease_rate = 0.5;
  c.span_frac = 0.2;
  c.healthy_patients = 4;
  c.healthy_segs_per_patient = 4;
  c.label_fraction = 1.0;
  c.d_hidden = 8;
  c.n_attn_blocks = 1;
  c.n_heads = 2;
  c.d_ff = 8;
  c.conv_kernel = 3;
  c.conv_dilations = {1, 2};
  c.dropout = 0.0;
  c.cde_d_model = 8;
  c.cde_blocks = 1;
  c.cde_heads = 2;
  c.cde_ff = 8;
  c.cde_latent = 4;
  c.cde_dropout = 0.0;
  c.d_project = 4;
  c.crop_frac = 0.5;
  c.delta = 3;
  c.intra_pairs = 4;
  c.batch_size = 4;
  c.epochs_stage1 = 2;
  c.epochs_stage2 = 2;
  c.epochs_stage3 = 3;
  return c;
}

const TrainConfig& TC() {
  static const TrainConfig c = tiny_cfg();
  return c;
}

const ExperimentData& TD() {
  static const ExperimentData d = make_experiment_data(TC());
  return d;
}

const StageResult& TS1() {
  static const StageResult r = stage1(TC(), TD().external_healthy);
  return r;
}

const StageResult& TS2() {
  static const StageResult r =
      stage2(TC(), TS1().checkpoint, TD().external_healthy, TD().target.train);
  return r;
}

std::uint64_t subset_checksum(const ParamStore& ps, const std::string& prefix) {
  ParamStore tmp;
  copy_params(ps, prefix, tmp);
  return tmp.checksum();
}

std::uint64_t trained_subset_checksum(const ParamStore& ps) {
  ParamStore tmp;
  copy_params(ps, "enc.", tmp);
  copy_params(ps, "wh.", tmp);
  copy_params(ps, "proj.", tmp);
  return tmp.checksum();
}

std::filesystem::path fresh_path(const std::string& name) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("codac_pipeline_" + std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(f));
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("adam: zero learning rate and zero gradients leave parameters untouched") {
  ParamStore ps;
  Tensor& w = ps.create("w", {3});
  {
    auto v = w.values_mut();
    v[0] = 1.0;
    v[1] = -2.0;
    v[2] = 0.5;
  }
  const std::vector<double> before(w.values().begin(), w.values().end());

  SUBCASE("lr = 0") {
    Adam opt(ps, 0.0);
    const std::vector<double> g = {1.0, 1.0, 1.0};
    w.accumulate_grad(g);
    opt.step();
    CHECK(std::vector<double>(w.values().begin(), w.values().end()) == before);
    CHECK(opt.steps_taken() == 1);
  }
  SUBCASE("zero gradient") {
    Adam opt(ps, 1e-3);
    const std::vector<double> g = {0.0, 0.0, 0.0};
    w.accumulate_grad(g);
    opt.step();
    CHECK(std::vector<double>(w.values().begin(), w.values().end()) == before);
  }
  SUBCASE("no accumulated gradient at all") {
    Adam opt(ps, 1e-3);
    opt.step();
    CHECK(std::vector<double>(w.values().begin(), w.values().end()) == before);
  }
}

TEST_CASE("adam: first step applies the bias-corrected update") {
  ParamStore ps;
  Tensor& w = ps.create("w", {1});
  {
    auto v = w.values_mut();
    v[0] = 1.0;
  }
  Adam opt(ps, 1e-3);
  const std::vector<double> g = {1.0};
  w.accumulate_grad(g);
  opt.step();
  // m-hat = 1, v-hat = 1 after correction, so the step is lr / (1 + eps).
  const double expected = quantize_value(1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)));
  CHECK(w.values()[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(w.values()[0] == doctest::Approx(1.0 - 9.99999990e-4).epsilon(1e-7));
}

TEST_CASE("adam: a non-finite gradient aborts naming the parameter") {
  ParamStore ps;
  Tensor& w = ps.create("bad_param", {1});
  Adam opt(ps, 1e-3);
  const std::vector<double> g = {std::numeric_limits<double>::quiet_NaN()};
  w.accumulate_grad(g);
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("bad_param") != std::string::npos);
  }
}

TEST_CASE("train config: serialization round-trips exactly") {
  SUBCASE("defaults") {
    TrainConfig a;
    CHECK(TrainConfig::parse(a.serialize()) == a);
  }
  SUBCASE("modified fields, awkward floats included") {
    TrainConfig a;
    a.run_seed = 424242;
    a.seeds = {9, 11, 13};
    a.disease_rate = 1.0 / 3.0;
    a.lr_stage2 = 1e-7;
    a.conv_dilations = {1, 3, 9};
    a.mode = FinetuneMode::pft;
    a.crop_frac = 0.47;
    a.lambda = 0.0;
    a.stage2_healthy_frac = 0.125;
    CHECK(TrainConfig::parse(a.serialize()) == a);
  }
  SUBCASE("comments and spacing are tolerated") {
    TrainConfig c = TrainConfig::parse("  tau   =  0.4  # temperature\n\n# a full comment line\n");
    TrainConfig expect;
    expect.tau = 0.4;
    CHECK(c == expect);
  }
}

TEST_CASE("train config: malformed text is rejected") {
  CHECK_THROWS_AS(TrainConfig::parse("no_such_key = 3\n"), DataError);
  CHECK_THROWS_AS(TrainConfig::parse("tau = 0.3\ntau = 0.4\n"), DataError);
  CHECK_THROWS_AS(TrainConfig::parse("tau 0.3\n"), DataError);
  CHECK_THROWS_AS(TrainConfig::parse("tau = warm\n"), DataError);
  CHECK_THROWS_AS(TrainConfig::parse("mode = med\n"), DataError);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size = 2.5\n"), DataError);
  try {
    TrainConfig::parse("made_up = 1\n");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("made_up") != std::string::npos);
  }
}

TEST_CASE("train config: validation rejects out-of-range fields") {
  auto expect_bad = [](auto mutate) {
    TrainConfig c = tiny_cfg();
    mutate(c);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  expect_bad([](TrainConfig& c) { c.batch_size = 1; });
  expect_bad([](TrainConfig& c) { c.train_frac = 0.5; });  // fractions no longer sum to 1
  expect_bad([](TrainConfig& c) { c.label_fraction = 0.0; });
  expect_bad([](TrainConfig& c) { c.tau = 0.0; });
  expect_bad([](TrainConfig& c) { c.seeds.clear(); });
  expect_bad([](TrainConfig& c) { c.lr_stage1 = 0.0; });
  expect_bad([](TrainConfig& c) { c.crop_frac = 0.1; });  // crop of 3 timesteps
  expect_bad([](TrainConfig& c) { c.n_heads = 3; });      // d_hidden not divisible
  TrainConfig ok = tiny_cfg();
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("checkpoint: save and load round-trip parameters, config, and stage") {
  Checkpoint c;
  c.stage = StageTag::dmcf;
  c.config = tiny_cfg();
  auto rng = rng_stream(3, "ckpt_test");
  fill_uniform(c.params.create("alpha", {4}), -1.0, 1.0, rng);
  fill_uniform(c.params.create("beta.mat", {3, 5}), -1.0, 1.0, rng);
  fill_uniform(c.params.create("gamma.cube", {2, 3, 4}), -1.0, 1.0, rng);

  const auto path = fresh_path("ckpt.bin");
  save_checkpoint(c, path.string());
  const Checkpoint d = load_checkpoint(path.string());

  CHECK(d.version == kCheckpointVersion);
  CHECK(d.stage == StageTag::dmcf);
  CHECK(d.config == c.config);
  REQUIRE(d.params.names() == c.params.names());
  for (const auto& name : c.params.names()) {
    const Tensor& a = c.params.get(name);
    const Tensor& b = d.params.get(name);
    REQUIRE(a.shape() == b.shape());
    const std::vector<double> av(a.values().begin(), a.values().end());
    const std::vector<double> bv(b.values().begin(), b.values().end());
    CHECK(av == bv);
  }

  // Saving the loaded checkpoint reproduces the file byte for byte.
  const auto path2 = fresh_path("ckpt2.bin");
  save_checkpoint(d, path2.string());
  CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("checkpoint: loaded encoder parameters produce bit-identical forwards") {
  const EncoderConfig ec = TC().encoder_config();
  Checkpoint c;
  c.config = TC();
  auto rng = rng_stream(11, "fwd_test");
  init_encoder_params(c.params, ec, "enc.", rng);

  auto xr = rng_stream(12, "fwd_x");
  Tensor x = Tensor::zeros({TC().t_len, TC().d_chan});
  fill_uniform(x, -1.0, 1.0, xr);

  const auto path = fresh_path("enc.bin");
  save_checkpoint(c, path.string());
  const Checkpoint d = load_checkpoint(path.string());

  std::mt19937_64 dummy1(0), dummy2(0);
  Tensor h1 = encode(c.params, ec, "enc.", x, false, dummy1);
  Tensor h2 = encode(d.params, ec, "enc.", x, false, dummy2);
  const std::vector<double> v1(h1.values().begin(), h1.values().end());
  const std::vector<double> v2(h2.values().begin(), h2.values().end());
  CHECK(v1 == v2);
}

TEST_CASE("checkpoint: corruption is rejected without a partial load") {
  Checkpoint c;
  c.config = tiny_cfg();
  auto rng = rng_stream(5, "corrupt_test");
  fill_uniform(c.params.create("w", {4}), -1.0, 1.0, rng);
  const auto path = fresh_path("good.bin");
  save_checkpoint(c, path.string());
  const std::string good = read_bytes(path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    const auto p = fresh_path("bad_magic.bin");
    write_bytes(p, bad);
    try {
      load_checkpoint(p.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("not a checkpoint") != std::string::npos);
    }
  }
  SUBCASE("future version") {
    std::string bad = good;
    bad[4] = static_cast<char>(kCheckpointVersion + 1);
    const auto p = fresh_path("bad_version.bin");
    write_bytes(p, bad);
    try {
      load_checkpoint(p.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("truncated header") {
    const auto p = fresh_path("trunc1.bin");
    write_bytes(p, good.substr(0, 3));
    CHECK_THROWS_AS(load_checkpoint(p.string()), DataError);
  }
  SUBCASE("truncated parameter data") {
    const auto p = fresh_path("trunc2.bin");
    write_bytes(p, good.substr(0, good.size() - 5));
    CHECK_THROWS_AS(load_checkpoint(p.string()), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint((fresh_path("none") / "missing.bin").string()), DataError);
  }
}

TEST_CASE("experiment data: split sizes, distinct external patients, determinism") {
  const ExperimentData& d = TD();
  // 6 patients at 60/20/20: 4 train, 1 val, 1 test patients of 4 segments.
  CHECK(d.target.train.size() == 16);
  CHECK(d.target.val.size() == 4);
  CHECK(d.target.test.size() == 4);
  CHECK(d.external_healthy.size() == 16);
  for (const auto& seg : d.external_healthy) {
    CHECK(seg.label() == 0);
    CHECK(seg.patient_id()[0] == 'h');
  }
  for (const auto& seg : d.target.train) CHECK(seg.patient_id()[0] == 'p');

  const ExperimentData d2 = make_experiment_data(TC());
  REQUIRE(d2.target.train.size() == d.target.train.size());
  for (std::size_t i = 0; i < d.target.train.size(); ++i) {
    CHECK(d2.target.train[i].patient_id() == d.target.train[i].patient_id());
    const auto a = d.target.train[i].x().values();
    const auto b = d2.target.train[i].x().values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("stage 1: deterministic scorer checkpoint with the right tag") {
  const StageResult& r = TS1();
  CHECK(r.checkpoint.stage == StageTag::cde);
  CHECK(stage_name(r.checkpoint.stage) == "cde");
  CHECK(r.epoch_losses.size() == 2);
  for (double l : r.epoch_losses) CHECK(std::isfinite(l));

  const StageResult again = stage1(TC(), TD().external_healthy);
  CHECK(again.checkpoint.params.checksum() == r.checkpoint.params.checksum());
  CHECK(again.epoch_losses == r.epoch_losses);

  const auto p1 = fresh_path("s1_a.bin");
  const auto p2 = fresh_path("s1_b.bin");
  save_checkpoint(r.checkpoint, p1.string());
  save_checkpoint(again.checkpoint, p2.string());
  CHECK(read_bytes(p1) == read_bytes(p2));

  CHECK_THROWS_AS(stage1(TC(), TD().target.train), std::invalid_argument);
}

TEST_CASE("stage 2: zero epochs returns the seeded initialization") {
  TrainConfig c0 = TC();
  c0.epochs_stage2 = 0;
  const StageResult r = stage2(c0, TS1().checkpoint, TD().external_healthy, TD().target.train);
  CHECK(r.epoch_losses.empty());
  CHECK(r.checkpoint.stage == StageTag::dmcf);

  ParamStore expect;
  auto rng = rng_stream(c0.run_seed, "stage2_init");
  init_encoder_params(expect, c0.encoder_config(), "enc.", rng);
  init_weight_head(expect, "wh.", rng);
  init_projection(expect, "proj.", c0.encoder_config().d_hidden, c0.d_project, rng);
  CHECK(trained_subset_checksum(r.checkpoint.params) == expect.checksum());
}

TEST_CASE("stage 2: trains deterministically and passes the scorer through untouched") {
  const StageResult& r = TS2();
  CHECK(r.checkpoint.stage == StageTag::dmcf);
  CHECK(r.epoch_losses.size() == 2);
  for (double l : r.epoch_losses) CHECK(std::isfinite(l));
  CHECK(subset_checksum(r.checkpoint.params, "cde.") ==
        subset_checksum(TS1().checkpoint.params, "cde."));

  const StageResult again =
      stage2(TC(), TS1().checkpoint, TD().external_healthy, TD().target.train);
  CHECK(again.epoch_losses == r.epoch_losses);
  CHECK(again.checkpoint.params.checksum() == r.checkpoint.params.checksum());
}

TEST_CASE("stage 2: loss improves over a short run") {
  TrainConfig c = TC();
  c.epochs_stage2 = 5;
  const StageResult r = stage2(c, TS1().checkpoint, TD().external_healthy, TD().target.train);
  REQUIRE(r.epoch_losses.size() == 5);
  const double front = r.epoch_losses.front();
  const double lowest = *std::min_element(r.epoch_losses.begin(), r.epoch_losses.end());
  CHECK(lowest < front);
  CHECK(std::isfinite(r.epoch_losses.back()));
}

TEST_CASE("stage 2: label reads are impossible while it runs") {
  Stage2Options o;
  o.weight_mode = WeightMode::learned;
  o.score_override = [](const TimeSeriesSegment& seg) {
    (void)seg.label();  // must explode: the stage runs label-blind
    return std::vector<double>(static_cast<std::size_t>(seg.t_len()), 0.0);
  };
  CHECK_THROWS_AS(stage2(TC(), TS1().checkpoint, TD().external_healthy, TD().target.train, o),
                  std::logic_error);
}

TEST_CASE("stage 2: constant weighting gives identical traces regardless of scorer training") {
  TrainConfig c0 = TC();
  c0.epochs_stage1 = 0;
  const StageResult s1_untrained = stage1(c0, TD().external_healthy);

  Stage2Options half;
  half.weight_mode = WeightMode::constant_half;
  const StageResult a =
      stage2(TC(), TS1().checkpoint, TD().external_healthy, TD().target.train, half);
  const StageResult b =
      stage2(TC(), s1_untrained.checkpoint, TD().external_healthy, TD().target.train, half);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(trained_subset_checksum(a.checkpoint.params) ==
        trained_subset_checksum(b.checkpoint.params));
  // The two runs still differ where they should: the scorer bytes.
  CHECK(subset_checksum(a.checkpoint.params, "cde.") !=
        subset_checksum(b.checkpoint.params, "cde."));
}

TEST_CASE("stage 2: structural errors") {
  SUBCASE("wrong input stage") {
    CHECK_THROWS_AS(stage2(TC(), TS2().checkpoint, TD().external_healthy, TD().target.train),
                    DataError);
  }
  SUBCASE("no data at all") {
    CHECK_THROWS_AS(stage2(TC(), TS1().checkpoint, {}, {}), std::invalid_argument);
  }
  SUBCASE("healthy pool smaller than its batch share") {
    std::vector<TimeSeriesSegment> one(TD().external_healthy.begin(),
                                       TD().external_healthy.begin() + 1);
    CHECK_THROWS_AS(stage2(TC(), TS1().checkpoint, one, TD().target.train),
                    std::invalid_argument);
  }
  SUBCASE("crop too short for the temporal term") {
    TrainConfig c = TC();
    c.delta = 4;  // cropped length 16 needs len - 1 > 8; 15 passes, so tighten the crop
    c.crop_frac = 0.25;
    CHECK_THROWS_AS(stage2(c, TS1().checkpoint, TD().external_healthy, TD().target.train),
                    std::invalid_argument);
  }
  SUBCASE("missing scorer parameter") {
    Checkpoint broken;
    broken.stage = StageTag::cde;
    broken.config = TC();
    bool skipped_one = false;
    for (const auto& name : TS1().checkpoint.params.names()) {
      if (!skipped_one && name.find("bott") != std::string::npos) {
        skipped_one = true;
        continue;
      }
      broken.params.put(name, TS1().checkpoint.params.get(name).detached());
    }
    REQUIRE(skipped_one);
    CHECK_THROWS_AS(stage2(TC(), broken, TD().external_healthy, TD().target.train), DataError);
  }
}

TEST_CASE("bce loss: textbook pins and the saturation clamp") {
  SUBCASE("certain coin at one half") {
    Tensor p = Tensor::from({1, 1}, {0.5});
    const double l = bce_loss(p, {1}).item();
    CHECK(l == doctest::Approx(std::log(2.0)).epsilon(1e-5));
  }
  SUBCASE("two confident correct predictions") {
    Tensor p = Tensor::from({2, 1}, {0.9, 0.1});
    const double l = bce_loss(p, {1, 0}).item();
    CHECK(l == doctest::Approx(0.10536).epsilon(1e-3));
    CHECK(l == doctest::Approx(-std::log(0.9)).epsilon(1e-5));
  }
  SUBCASE("saturated outputs stay finite through the clamp") {
    Tensor p0 = Tensor::from({1, 1}, {0.0});
    const double l0 = bce_loss(p0, {1}).item();
    CHECK(std::isfinite(l0));
    CHECK(l0 == doctest::Approx(-std::log(1e-7)).epsilon(1e-3));
    Tensor p1 = Tensor::from({1, 1}, {1.0});
    CHECK(std::isfinite(bce_loss(p1, {0}).item()));
  }
  SUBCASE("contract errors") {
    CHECK_THROWS_AS(bce_loss(Tensor::from({2}, {0.5, 0.5}), {1, 0}), std::invalid_argument);
    CHECK_THROWS_AS(bce_loss(Tensor::from({2, 1}, {0.5, 0.5}), {1}), std::invalid_argument);
    CHECK_THROWS_AS(bce_loss(Tensor::from({1, 1}, {0.5}), {2}), std::invalid_argument);
  }
}

TEST_CASE("stage 3: validation-selected fine-tuning in both modes") {
  const StageResult r = stage3(TC(), TS2().checkpoint, TD().target.train, TD().target.val);
  CHECK(r.checkpoint.stage == StageTag::finetune);
  REQUIRE(r.val_auroc.size() == 3);
  REQUIRE(r.epoch_losses.size() == 3);
  for (double l : r.epoch_losses) CHECK(std::isfinite(l));
  const double best = *std::max_element(r.val_auroc.begin(), r.val_auroc.end());
  CHECK(r.best_val_auroc == best);
  REQUIRE(r.best_epoch >= 0);
  CHECK(r.val_auroc[static_cast<std::size_t>(r.best_epoch)] == best);
  // First epoch reaching the maximum wins.
  for (int e = 0; e < r.best_epoch; ++e) {
    CHECK(r.val_auroc[static_cast<std::size_t>(e)] < best);
  }

  // Untrained parts pass through byte-identically.
  CHECK(subset_checksum(r.checkpoint.params, "cde.") ==
        subset_checksum(TS2().checkpoint.params, "cde."));
  CHECK(subset_checksum(r.checkpoint.params, "wh.") ==
        subset_checksum(TS2().checkpoint.params, "wh."));
  CHECK(subset_checksum(r.checkpoint.params, "proj.") ==
        subset_checksum(TS2().checkpoint.params, "proj."));

  SUBCASE("full fine-tuning updates the encoder") {
    CHECK(subset_checksum(r.checkpoint.params, "enc.") !=
          subset_checksum(TS2().checkpoint.params, "enc."));
  }
  SUBCASE("partial fine-tuning freezes the encoder byte for byte") {
    TrainConfig cp = TC();
    cp.mode = FinetuneMode::pft;
    const StageResult rp = stage3(cp, TS2().checkpoint, TD().target.train, TD().target.val);
    CHECK(subset_checksum(rp.checkpoint.params, "enc.") ==
          subset_checksum(TS2().checkpoint.params, "enc."));
    // The classifier itself did train.
    const Tensor& w = rp.checkpoint.params.get("clf.w");
    bool any_nonzero = false;
    for (double v : w.values()) any_nonzero |= v != 0.0;
    CHECK(any_nonzero);
  }
  SUBCASE("checkpoint round-trip preserves predicted probabilities bitwise") {
    const auto p = fresh_path("s3.bin");
    save_checkpoint(r.checkpoint, p.string());
    const Checkpoint loaded = load_checkpoint(p.string());
    for (int i = 0; i < 3; ++i) {
      const Tensor& x = TD().target.test[static_cast<std::size_t>(i)].x();
      CHECK(classify_prob(loaded, x) == classify_prob(r.checkpoint, x));
    }
  }
  SUBCASE("predictions are probabilities and embeddings have the right width") {
    const Tensor& x = TD().target.test[0].x();
    const double p = classify_prob(r.checkpoint, x);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(pooled_embedding(r.checkpoint, x).numel() == TC().d_hidden);
  }
}

TEST_CASE("stage 3: determinism") {
  const StageResult a = stage3(TC(), TS2().checkpoint, TD().target.train, TD().target.val);
  const StageResult b = stage3(TC(), TS2().checkpoint, TD().target.train, TD().target.val);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.val_auroc == b.val_auroc);
  CHECK(a.checkpoint.params.checksum() == b.checkpoint.params.checksum());
}

TEST_CASE("stage 3: zero epochs keeps the blank classifier and reports chance validation") {
  TrainConfig c = TC();
  c.epochs_stage3 = 0;
  const StageResult r = stage3(c, TS2().checkpoint, TD().target.train, TD().target.val);
  CHECK(r.best_epoch == -1);
  CHECK(r.epoch_losses.empty());
  // A zeroed affine head scores every segment 0.5; all-tied AUROC is exactly one half.
  CHECK(r.best_val_auroc == 0.5);
  const Tensor& w = r.checkpoint.params.get("clf.w");
  for (double v : w.values()) CHECK(v == 0.0);
}

TEST_CASE("stage 3: contract errors") {
  SUBCASE("single-class labeled training set") {
    std::vector<TimeSeriesSegment> healthy_only;
    for (const auto& seg : TD().target.train) {
      if (seg.label() == 0) healthy_only.push_back(seg);
    }
    REQUIRE(!healthy_only.empty());
    CHECK_THROWS_AS(stage3(TC(), TS2().checkpoint, healthy_only, TD().target.val),
                    std::invalid_argument);
  }
  SUBCASE("single-class validation set") {
    std::vector<TimeSeriesSegment> diseased_val;
    for (const auto& seg : TD().target.val) {
      if (seg.label() == 1) diseased_val.push_back(seg);
    }
    REQUIRE(!diseased_val.empty());
    CHECK_THROWS_AS(stage3(TC(), TS2().checkpoint, TD().target.train, diseased_val),
                    std::invalid_argument);
  }
  SUBCASE("wrong checkpoint stage") {
    CHECK_THROWS_AS(stage3(TC(), TS1().checkpoint, TD().target.train, TD().target.val),
                    DataError);
  }
}
