// Command-line front end: dataset generation, the three training stages,
// checkpoint evaluation, per-timestep anomaly scoring, and the ablation
// sweep. Results go to files under --out; diagnostics go to stderr.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
// failure.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "codac/cde.hpp"
#include "codac/common.hpp"
#include "codac/eval.hpp"
#include "codac/pipeline.hpp"
#include "codac/signal.hpp"

namespace {

using namespace codac;

std::string fmt(double v) {
  char buf[48];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "training config file (key = value lines)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "override the run seed from the config");
  sub->add_option("--out", o.out, "output directory (created if missing)");
}

TrainConfig resolve_config(const CommonOpts& o) {
  TrainConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path, std::ios::binary);
    if (!f) throw DataError("cannot open config file: " + o.config_path);
    std::ostringstream ss;
    ss << f.rdbuf();
    cfg = TrainConfig::parse(ss.str());
  }
  if (o.seed) cfg.run_seed = *o.seed;
  cfg.validate();
  return cfg;
}

std::filesystem::path out_dir(const CommonOpts& o) {
  std::filesystem::path d(o.out);
  std::filesystem::create_directories(d);
  return d;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  f.flush();
  if (!f) throw DataError("cannot write file: " + path.string());
}

std::string loss_curve_csv(const std::vector<double>& losses) {
  std::string s = "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    s += std::to_string(i) + "," + fmt(losses[i]) + "\n";
  }
  return s;
}

// ROC points at every distinct threshold, ties grouped, plus the (0,0)
// anchor; rows are fpr,tpr,threshold with threshold descending.
std::string roc_points_csv(const std::vector<int>& y, const std::vector<double>& probs) {
  std::vector<std::size_t> idx(y.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  long n_pos = std::count(y.begin(), y.end(), 1);
  long n_neg = static_cast<long>(y.size()) - n_pos;
  std::string s = "fpr,tpr,threshold\n";
  s += "0,0,inf\n";
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double t = probs[idx[i]];
    while (i < idx.size() && probs[idx[i]] == t) {
      (y[idx[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    const double fpr = n_neg > 0 ? static_cast<double>(fp) / n_neg : 0.0;
    const double tpr = n_pos > 0 ? static_cast<double>(tp) / n_pos : 0.0;
    s += fmt(fpr) + "," + fmt(tpr) + "," + fmt(t) + "\n";
  }
  return s;
}

std::string metrics_csv(const MetricRow& m) {
  std::string s = "acc,prec,rec,f1,auroc,auprc,rep_sep\n";
  s += fmt(m.acc) + "," + fmt(m.prec) + "," + fmt(m.rec) + "," + fmt(m.f1) + "," + fmt(m.auroc) +
       "," + fmt(m.auprc) + "," + fmt(m.rep_sep) + "\n";
  return s;
}

int worker_count_from_env() {
  const char* env = std::getenv("CODAC_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  int n = 0;
  auto res = std::from_chars(env, env + std::string(env).size(), n);
  if (res.ec != std::errc{} || *res.ptr != '\0' || n < 1) {
    throw CLI::ValidationError("CODAC_THREADS must be a positive integer, got '" +
                               std::string(env) + "'");
  }
  return n;
}

// ---- subcommands ----------------------------------------------------------

void cmd_gen_data(const CommonOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  const ExperimentData data = make_experiment_data(cfg);
  const auto dir = out_dir(o);
  write_csv(data.target.train, (dir / "target_train.csv").string());
  write_csv(data.target.val, (dir / "target_val.csv").string());
  write_csv(data.target.test, (dir / "target_test.csv").string());
  write_csv(data.external_healthy, (dir / "external_healthy.csv").string());
  std::cout << "wrote " << data.target.train.size() << " train, " << data.target.val.size()
            << " val, " << data.target.test.size() << " test, " << data.external_healthy.size()
            << " external healthy segments to " << dir.string() << "\n";
}

void cmd_train_cde(const CommonOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  const ExperimentData data = make_experiment_data(cfg);
  const StageResult r = stage1(cfg, data.external_healthy);
  const auto dir = out_dir(o);
  save_checkpoint(r.checkpoint, (dir / "cde.ckpt").string());
  write_text(dir / "cde_loss.csv", loss_curve_csv(r.epoch_losses));
  std::cout << "scorer trained for " << r.epoch_losses.size() << " epochs";
  if (!r.epoch_losses.empty()) std::cout << ", final loss " << fmt(r.epoch_losses.back());
  std::cout << "; checkpoint at " << (dir / "cde.ckpt").string() << "\n";
}

void cmd_pretrain(const std::string& input, const CommonOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  const Checkpoint cde = load_checkpoint(input);
  const ExperimentData data = make_experiment_data(cfg);
  const StageResult r = stage2(cfg, cde, data.external_healthy, data.target.train);
  const auto dir = out_dir(o);
  save_checkpoint(r.checkpoint, (dir / "dmcf.ckpt").string());
  write_text(dir / "pretrain_loss.csv", loss_curve_csv(r.epoch_losses));
  std::cout << "encoder pre-trained for " << r.epoch_losses.size() << " epochs";
  if (!r.epoch_losses.empty()) std::cout << ", final loss " << fmt(r.epoch_losses.back());
  std::cout << "; checkpoint at " << (dir / "dmcf.ckpt").string() << "\n";
}

void cmd_finetune(const std::string& input, const CommonOpts& o, const std::string& mode,
                  std::optional<double> labels_frac) {
  TrainConfig cfg = resolve_config(o);
  if (!mode.empty()) cfg.mode = mode == "pft" ? FinetuneMode::pft : FinetuneMode::fft;
  if (labels_frac) cfg.label_fraction = *labels_frac;
  cfg.validate();
  const Checkpoint pre = load_checkpoint(input);
  const ExperimentData data = make_experiment_data(cfg);
  const StageResult r = stage3(cfg, pre, data.target.train, data.target.val);
  const auto dir = out_dir(o);
  save_checkpoint(r.checkpoint, (dir / "finetune.ckpt").string());
  write_text(dir / "finetune_loss.csv", loss_curve_csv(r.epoch_losses));
  std::string va = "epoch,val_auroc\n";
  for (std::size_t i = 0; i < r.val_auroc.size(); ++i) {
    va += std::to_string(i) + "," + fmt(r.val_auroc[i]) + "\n";
  }
  write_text(dir / "val_auroc.csv", va);

  const MetricRow m = evaluate_checkpoint(r.checkpoint, data.target.test);
  std::string report;
  report += "mode = ";
  report += (cfg.mode == FinetuneMode::pft ? "pft" : "fft");
  report += "\nbest_epoch = " + std::to_string(r.best_epoch);
  report += "\nbest_val_auroc = " + fmt(r.best_val_auroc);
  report += "\ntest_acc = " + fmt(m.acc);
  report += "\ntest_prec = " + fmt(m.prec);
  report += "\ntest_rec = " + fmt(m.rec);
  report += "\ntest_f1 = " + fmt(m.f1);
  report += "\ntest_auroc = " + fmt(m.auroc);
  report += "\ntest_auprc = " + fmt(m.auprc);
  report += "\ntest_rep_sep = " + fmt(m.rep_sep);
  report += "\n";
  write_text(dir / "report.txt", report);
  std::cout << "fine-tuned (" << (cfg.mode == FinetuneMode::pft ? "pft" : "fft")
            << "), best val AUROC " << fmt(r.best_val_auroc) << " at epoch " << r.best_epoch
            << ", test AUROC " << fmt(m.auroc) << "; checkpoint at "
            << (dir / "finetune.ckpt").string() << "\n";
}

void cmd_evaluate(const std::string& input, const CommonOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  const Checkpoint ckpt = load_checkpoint(input);
  const ExperimentData data = make_experiment_data(cfg);
  const MetricRow m = evaluate_checkpoint(ckpt, data.target.test);
  const auto dir = out_dir(o);
  write_text(dir / "metrics.csv", metrics_csv(m));

  std::vector<int> y;
  std::vector<double> probs;
  for (const auto& seg : data.target.test) {
    y.push_back(seg.label());
    probs.push_back(classify_prob(ckpt, seg.x()));
  }
  write_text(dir / "roc.csv", roc_points_csv(y, probs));
  std::cout << "acc " << fmt(m.acc) << "  prec " << fmt(m.prec) << "  rec " << fmt(m.rec)
            << "  f1 " << fmt(m.f1) << "  auroc " << fmt(m.auroc) << "  auprc " << fmt(m.auprc)
            << "  rep_sep " << fmt(m.rep_sep) << "\n";
}

void cmd_score(const std::string& input, const CommonOpts& o) {
  const TrainConfig cfg = resolve_config(o);
  const Checkpoint ckpt = load_checkpoint(input);
  const CdeModel model = scorer_from_checkpoint(ckpt);
  const ExperimentData data = make_experiment_data(cfg);
  const auto dir = out_dir(o);
  int written = 0;
  for (std::size_t k = 0; k < data.target.test.size(); ++k) {
    const auto& seg = data.target.test[k];
    const AnomalyScoreVector sc = score_segment(model, seg.x(), cfg.beta);
    std::string s = "t,e,a,s,mask\n";
    for (std::size_t t = 0; t < sc.s.size(); ++t) {
      s += std::to_string(t) + "," + fmt(sc.e[t]) + "," + fmt(sc.a[t]) + "," + fmt(sc.s[t]) + "," +
           std::to_string(static_cast<int>(seg.anomaly_mask()[t])) + "\n";
    }
    write_text(dir / ("score_" + seg.patient_id() + "_" + std::to_string(k) + ".csv"), s);
    ++written;
  }
  std::cout << "wrote " << written << " per-segment score files to " << dir.string() << "\n";
}

void cmd_ablate(const CommonOpts& o, const std::string& variants_arg, std::optional<int> n_seeds,
                int workers) {
  TrainConfig cfg = resolve_config(o);
  if (n_seeds) {
    if (*n_seeds < 1) throw CLI::ValidationError("--seeds must be >= 1");
    cfg.seeds.clear();
    for (int i = 1; i <= *n_seeds; ++i) cfg.seeds.push_back(static_cast<std::uint64_t>(i));
  }

  std::vector<AblationVariant> variants;
  if (variants_arg == "all") {
    variants = {AblationVariant::full, AblationVariant::cde_vanilla_ae, AblationVariant::cde_none,
                AblationVariant::dmcf_static, AblationVariant::dmcf_fixed_views};
  } else {
    std::stringstream ss(variants_arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      try {
        variants.push_back(variant_from(tok));
      } catch (const std::invalid_argument& e) {
        throw CLI::ValidationError("--variants: " + std::string(e.what()));
      }
    }
    if (variants.empty()) throw CLI::ValidationError("--variants needs at least one name");
  }

  // One job per (variant, seed); workers pull jobs, results land in fixed
  // slots so the merge order never depends on scheduling.
  struct Job {
    AblationVariant v;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto v : variants) {
    for (auto s : cfg.seeds) jobs.push_back({v, s});
  }
  std::vector<MetricRow> rows(jobs.size());
  std::vector<std::string> failures(jobs.size());
  std::atomic<std::size_t> next{0};
  auto run_jobs = [&]() {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      try {
        TrainConfig job_cfg = cfg;
        job_cfg.run_seed = jobs[j].seed;
        const ExperimentData data = make_experiment_data(job_cfg);
        rows[j] = run_variant_seed(jobs[j].v, job_cfg, jobs[j].seed, data).metrics;
      } catch (const std::exception& e) {
        failures[j] = e.what();
      }
    }
  };
  if (workers <= 1 || jobs.size() <= 1) {
    run_jobs();
  } else {
    std::vector<std::thread> pool;
    const int n = std::min<std::size_t>(static_cast<std::size_t>(workers), jobs.size());
    for (int i = 0; i < n; ++i) pool.emplace_back(run_jobs);
    for (auto& t : pool) t.join();
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!failures[j].empty()) {
      throw DataError("ablation job (" + variant_name(jobs[j].v) + ", seed " +
                      std::to_string(jobs[j].seed) + ") failed: " + failures[j]);
    }
  }

  std::vector<MetricsReport> reports;
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<MetricRow> vr(rows.begin() + static_cast<std::ptrdiff_t>(vi * cfg.seeds.size()),
                              rows.begin() +
                                  static_cast<std::ptrdiff_t>((vi + 1) * cfg.seeds.size()));
    reports.push_back(aggregate(variant_name(variants[vi]), cfg.seeds, vr));
  }
  const auto dir = out_dir(o);
  write_runs_csv(reports, (dir / "runs.csv").string());
  write_summary_csv(reports, (dir / "summary.csv").string());
  std::cout << render_table(reports);
}

void cmd_report(const CommonOpts& o) {
  (void)resolve_config(o);  // flags are accepted everywhere; a bad config still fails fast
  const auto dir = out_dir(o);
  const auto path = dir / "runs.csv";
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open runs file: " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "variant,seed,acc,prec,rec,f1,auroc,auprc,rep_sep") {
    throw DataError("unrecognized runs file header in " + path.string());
  }
  std::vector<std::string> order;
  std::vector<std::vector<std::uint64_t>> seeds;
  std::vector<std::vector<MetricRow>> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) {
      throw DataError("runs file line " + std::to_string(lineno) + ": expected 9 columns");
    }
    auto num = [&](int c) {
      double v = 0.0;
      const std::string& s = cells[static_cast<std::size_t>(c)];
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw DataError("runs file line " + std::to_string(lineno) + ": bad number '" + s + "'");
      }
      return v;
    };
    MetricRow m;
    m.acc = num(2);
    m.prec = num(3);
    m.rec = num(4);
    m.f1 = num(5);
    m.auroc = num(6);
    m.auprc = num(7);
    m.rep_sep = num(8);
    const auto it = std::find(order.begin(), order.end(), cells[0]);
    std::size_t vi;
    if (it == order.end()) {
      vi = order.size();
      order.push_back(cells[0]);
      seeds.emplace_back();
      rows.emplace_back();
    } else {
      vi = static_cast<std::size_t>(it - order.begin());
    }
    seeds[vi].push_back(static_cast<std::uint64_t>(num(1)));
    rows[vi].push_back(m);
  }
  if (order.empty()) throw DataError("runs file has no data rows: " + path.string());
  std::vector<MetricsReport> reports;
  for (std::size_t vi = 0; vi < order.size(); ++vi) {
    reports.push_back(aggregate(order[vi], seeds[vi], rows[vi]));
  }
  write_summary_csv(reports, (dir / "summary.csv").string());
  std::cout << render_table(reports);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"time-series diagnosis pipeline: anomaly-scorer training, "
               "discrepancy-weighted contrastive pre-training, fine-tuning, and evaluation"};
  app.require_subcommand(1);

  CommonOpts gen_o, cde_o, pre_o, fin_o, eval_o, score_o, abl_o, rep_o;
  std::string pre_in, fin_in, eval_in, score_in;
  std::string fin_mode;
  std::optional<double> fin_labels;
  std::string abl_variants = "all";
  std::optional<int> abl_seeds;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic datasets as CSV");
  add_common(gen, gen_o);

  auto* cde = app.add_subcommand("train-cde", "stage 1: train the anomaly scorer");
  add_common(cde, cde_o);

  auto* pre = app.add_subcommand("pretrain", "stage 2: contrastive encoder pre-training");
  pre->add_option("input", pre_in, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  add_common(pre, pre_o);

  auto* fin = app.add_subcommand("finetune", "stage 3: supervised fine-tuning");
  fin->add_option("input", fin_in, "stage-2 checkpoint")->required()->check(CLI::ExistingFile);
  add_common(fin, fin_o);
  fin->add_option("--mode", fin_mode, "pft (frozen encoder) or fft (full)")
      ->check(CLI::IsMember({"pft", "fft"}));
  fin->add_option("--labels-frac", fin_labels, "fraction of labeled training patients")
      ->check(CLI::Range(0.0, 1.0));

  auto* ev = app.add_subcommand("evaluate", "test-split metrics for a fine-tuned checkpoint");
  ev->add_option("input", eval_in, "fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  add_common(ev, eval_o);

  auto* sc = app.add_subcommand("score", "per-timestep anomaly scores on the test split");
  sc->add_option("input", score_in, "checkpoint holding a trained scorer")
      ->required()
      ->check(CLI::ExistingFile);
  add_common(sc, score_o);

  auto* abl = app.add_subcommand("ablate", "run the ablation sweep over variants and seeds");
  add_common(abl, abl_o);
  abl->add_option("--variants", abl_variants,
                  "comma-separated variant names, or 'all' (full, cde_vanilla_ae, cde_none, "
                  "dmcf_static, dmcf_fixed_views)");
  abl->add_option("--seeds", abl_seeds, "use seeds 1..N instead of the config's seed list");

  auto* rep = app.add_subcommand("report", "re-aggregate runs.csv into summary.csv and a table");
  add_common(rep, rep_o);

  try {
    app.parse(argc, argv);

    if (gen->parsed()) cmd_gen_data(gen_o);
    if (cde->parsed()) cmd_train_cde(cde_o);
    if (pre->parsed()) cmd_pretrain(pre_in, pre_o);
    if (fin->parsed()) cmd_finetune(fin_in, fin_o, fin_mode, fin_labels);
    if (ev->parsed()) cmd_evaluate(eval_in, eval_o);
    if (sc->parsed()) cmd_score(score_in, score_o);
    if (abl->parsed()) cmd_ablate(abl_o, abl_variants, abl_seeds, worker_count_from_env());
    if (rep->parsed()) cmd_report(rep_o);
    return 0;
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
