#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msl/config.hpp"
#include "msl/conformal.hpp"
#include "msl/csv.hpp"
#include "msl/meta.hpp"
#include "msl/metrics.hpp"
#include "msl/omniglot.hpp"

namespace msl {

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.data == DataSource::Synth) return synth_glyphs(cfg.synth);
  OmniglotConfig oc;
  oc.root = cfg.omniglot_root;
  oc.per_class = 20;
  return load_omniglot(oc);
}

/// Monolithic adaptation (the whole model in one place, nothing transmitted):
/// SGD steps on the support batch, query accuracy before the first and after
/// every step.
template <typename T = float>
struct MonoTestResult {
  std::vector<double> accuracy_curve;
  std::vector<double> loss_curve;
  Tensor<double> final_probs;
  std::vector<int> query_labels;
};

template <typename T = float>
MonoTestResult<T> mono_test(const ModelConfig& model, Parameters<T> params, const Episode& ep,
                            std::size_t steps, double lr) {
  MonoTestResult<T> out;
  out.query_labels = ep.query_y;
  Tensor<T> last_logits;
  auto eval = [&] {
    ActivationTrace<T> trace = forward(params, model, ep.query_x);
    Tensor<T> logits = trace.logits();
    auto [loss, grad] = loss_softmax_ce(logits, ep.query_y);
    (void)grad;
    const auto preds = argmax_rows(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == ep.query_y[i]) ++hits;
    out.accuracy_curve.push_back(static_cast<double>(hits) / static_cast<double>(preds.size()));
    out.loss_curve.push_back(loss);
    last_logits = std::move(logits);
  };
  eval();
  for (std::size_t s = 0; s < steps; ++s) {
    ActivationTrace<T> trace = forward(params, model, ep.support_x);
    auto [loss, grad_logits] = loss_softmax_ce(trace.logits(), ep.support_y);
    (void)loss;
    auto [grads, grad_in] = backward(params, model, trace, grad_logits);
    (void)grad_in;
    sgd_step(params, grads, static_cast<T>(lr));
    eval();
  }
  out.final_probs = softmax_probs(last_logits);
  return out;
}

/// Everything a single experiment reports. Deliberately free of wall-clock
/// data so the serialized report is a pure function of the configuration.
struct RunReport {
  std::vector<std::pair<std::string, std::string>> config_echo;
  std::vector<double> accuracy_curve;  // mean over test episodes
  ClassificationMetrics cls;           // pooled final-step query predictions
  double coverage_mean = 0;
  double inefficiency_mean = 0;
  double p1 = 0;
  std::uint64_t bytes_fwd = 0;
  std::uint64_t bytes_bwd = 0;
  std::size_t device_flops = 0;      // analytic forward pass, one example
  std::size_t aggregator_flops = 0;
  std::uint64_t fwd_skipped = 0;
  std::uint64_t bwd_skipped = 0;
  double train_meta_loss_first = 0;  // 0 when no meta-training ran
  double train_meta_loss_last = 0;
  std::size_t test_episodes = 0;

  std::vector<EpochLog> train_log;  // wall_ms lives here, not in the report
  std::vector<CpReportRow> cp_rows;
};

/// One full experiment: optional meta-training, shared meta-test episodes,
/// per-episode conformal evaluation, metric aggregation.
inline RunReport train(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset ds = load_dataset(cfg);
  cfg.meta.validate(ds.per_class);
  const ClassPools pools = split_pools(ds.num_classes(), cfg.meta_test_fraction, cfg.seed);
  if (pools.meta_test.size() < cfg.meta.ways)
    throw config_error("harness: meta-test pool has " + std::to_string(pools.meta_test.size()) +
                       " classes, need " + std::to_string(cfg.meta.ways));
  const ModelConfig model = cfg.model(ds.image_h, ds.image_w);

  const ChannelConfig identity{};
  const ChannelConfig train_chan =
      (cfg.mode == RunMode::Msl && cfg.channel_in_meta_train) ? cfg.channel : identity;
  const ChannelConfig test_chan =
      (cfg.mode != RunMode::Dnn && cfg.channel_in_meta_test) ? cfg.channel : identity;

  RunReport rep;
  rep.config_echo = config_echo(cfg);

  SplitPair<float> meta_init;
  if (cfg.mode == RunMode::Msl) {
    if (pools.meta_train.size() < cfg.meta.ways)
      throw config_error("harness: meta-train pool smaller than ways");
    MetaConfig mc = cfg.meta;
    mc.seed = cfg.seed;  // the run seed governs every stream
    auto trained = meta_train<float>(mc, ds, pools.meta_train, model, cfg.cut, train_chan);
    meta_init = std::move(trained.init);
    rep.train_log = std::move(trained.log);
    rep.fwd_skipped += trained.diag.fwd_skipped;
    rep.bwd_skipped += trained.diag.bwd_skipped;
    if (!rep.train_log.empty()) {
      rep.train_meta_loss_first = rep.train_log.front().meta_loss;
      rep.train_meta_loss_last = rep.train_log.back().meta_loss;
      for (const auto& row : rep.train_log) {
        rep.bytes_fwd += row.bytes_fwd;
        rep.bytes_bwd += row.bytes_bwd;
      }
    }
  }

  // Shared meta-test episodes: identical across modes for a given seed.
  rep.test_episodes = cfg.meta_test_episodes;
  std::vector<double> curve_sum;
  std::vector<int> all_preds, all_labels;
  std::vector<double> episode_losses;
  double cov_sum = 0, ineff_sum = 0;

  for (std::size_t e = 0; e < cfg.meta_test_episodes; ++e) {
    Rng ep_rng(derive_seed(cfg.seed, 0x7E57, e));
    const Task task = sample_task(pools.meta_test, cfg.meta.ways, e, ep_rng);
    const Episode ep = sample_episode(ds, task, cfg.meta.shots, cfg.meta.query, ep_rng);

    std::vector<double> curve;
    Tensor<double> probs;
    std::vector<int> labels;
    double final_loss = 0;
    if (cfg.mode == RunMode::Dnn) {
      auto params = init_parameters<float>(model, derive_seed(cfg.seed, 0x51AD, e));
      auto res = mono_test(model, std::move(params), ep, cfg.meta_test_steps, cfg.meta.eta);
      curve = std::move(res.accuracy_curve);
      probs = std::move(res.final_probs);
      labels = std::move(res.query_labels);
      final_loss = res.loss_curve.back();
    } else {
      SplitPair<float> start;
      if (cfg.mode == RunMode::Msl) {
        start = meta_init;
      } else {  // sl: fresh random split model per test task, same seed protocol
        auto params = init_parameters<float>(model, derive_seed(cfg.seed, 0x51AD, e));
        start = split_at(model, params, cfg.cut);
      }
      ChannelPair chan = ChannelPair::make(test_chan, 0x7E57, e);
      auto res = meta_test(start, ep, cfg.meta_test_steps, cfg.meta.eta, chan);
      curve = std::move(res.accuracy_curve);
      probs = std::move(res.final_probs);
      labels = std::move(res.query_labels);
      final_loss = res.loss_curve.back();
      rep.bytes_fwd += res.bytes.fwd;
      rep.bytes_bwd += res.bytes.bwd;
      rep.fwd_skipped += res.diag.fwd_skipped;
      rep.bwd_skipped += res.diag.bwd_skipped;
    }

    if (curve_sum.empty()) curve_sum.assign(curve.size(), 0.0);
    if (curve.size() != curve_sum.size())
      throw invariant_error("harness: accuracy curve length drifted across episodes");
    for (std::size_t i = 0; i < curve.size(); ++i) curve_sum[i] += curve[i];
    episode_losses.push_back(final_loss);

    if (!probs.empty()) {
      const auto preds_t = argmax_rows(probs);
      all_preds.insert(all_preds.end(), preds_t.begin(), preds_t.end());
      all_labels.insert(all_labels.end(), labels.begin(), labels.end());
      Rng cp_rng(derive_seed(cfg.seed, 0xCA1, e));
      const CpOutcome cp = vbcp_evaluate(probs, labels, cfg.cp, cp_rng);
      cov_sum += cp.coverage;
      ineff_sum += cp.inefficiency;
      CpReportRow row;
      row.task_id = e;
      row.n_cal = cp.n_cal;
      row.alpha = cfg.cp.alpha;
      row.q_hat = cp.q_hat;
      row.coverage = cp.coverage;
      row.inefficiency = cp.inefficiency;
      rep.cp_rows.push_back(row);
    }
  }

  rep.accuracy_curve.resize(curve_sum.size());
  for (std::size_t i = 0; i < curve_sum.size(); ++i)
    rep.accuracy_curve[i] = curve_sum[i] / static_cast<double>(cfg.meta_test_episodes);
  if (!all_preds.empty()) rep.cls = classification_metrics(all_preds, all_labels, cfg.meta.ways);
  if (!rep.cp_rows.empty()) {
    cov_sum /= static_cast<double>(rep.cp_rows.size());
    ineff_sum /= static_cast<double>(rep.cp_rows.size());
    rep.coverage_mean = cov_sum;
    rep.inefficiency_mean = ineff_sum;
  }
  rep.p1 = objective_p1(episode_losses, cfg.meta.shots, cfg.meta.ways, cfg.zeta, ds.per_class);

  if (cfg.mode == RunMode::Dnn) {
    rep.device_flops = monolithic_flops(model).total();
    rep.aggregator_flops = 0;
  } else {
    const FlopReport fr = flop_report(model, cfg.cut);
    rep.device_flops = fr.device_total();
    rep.aggregator_flops = fr.aggregator_total();
  }
  return rep;
}

inline void write_run_report(const std::string& path, const RunReport& rep) {
  CsvWriter csv(path);
  csv.row({"key", "value"});
  for (const auto& [k, v] : rep.config_echo) csv.row({"config." + k, v});
  char key[64];
  for (std::size_t i = 0; i < rep.accuracy_curve.size(); ++i) {
    std::snprintf(key, sizeof key, "accuracy_step_%03zu", i);
    csv.row({key, csv_num(rep.accuracy_curve[i])});
  }
  csv.row({"accuracy_final",
           csv_num(rep.accuracy_curve.empty() ? 0.0 : rep.accuracy_curve.back())});
  csv.row({"macro_precision", csv_num(rep.cls.macro_precision)});
  csv.row({"macro_recall", csv_num(rep.cls.macro_recall)});
  csv.row({"macro_f1", csv_num(rep.cls.macro_f1)});
  csv.row({"absent_classes", rep.cls.absent_classes ? "1" : "0"});
  csv.row({"coverage_mean", csv_num(rep.coverage_mean)});
  csv.row({"inefficiency_mean", csv_num(rep.inefficiency_mean)});
  csv.row({"p1", csv_num(rep.p1)});
  csv.row({"bytes_fwd", csv_num(rep.bytes_fwd)});
  csv.row({"bytes_bwd", csv_num(rep.bytes_bwd)});
  csv.row({"device_flops", csv_num(rep.device_flops)});
  csv.row({"aggregator_flops", csv_num(rep.aggregator_flops)});
  csv.row({"fwd_skipped", csv_num(rep.fwd_skipped)});
  csv.row({"bwd_skipped", csv_num(rep.bwd_skipped)});
  csv.row({"train_meta_loss_first", csv_num(rep.train_meta_loss_first)});
  csv.row({"train_meta_loss_last", csv_num(rep.train_meta_loss_last)});
  csv.row({"test_episodes", csv_num(rep.test_episodes)});
}

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  CsvWriter csv(path);
  csv.row({"epoch", "meta_loss", "mean_query_acc", "wall_ms", "bytes_fwd", "bytes_bwd"});
  for (const auto& r : log)
    csv.row({csv_num(r.epoch), csv_num(r.meta_loss), csv_num(r.mean_query_acc),
             csv_num(r.wall_ms), csv_num(r.bytes_fwd), csv_num(r.bytes_bwd)});
}

/// Writes report.csv (deterministic), train_log.csv (has wall-clock), and
/// cp_report.csv under out_dir.
inline void write_run_outputs(const std::string& out_dir, const RunReport& rep) {
  std::filesystem::create_directories(out_dir);
  write_run_report(out_dir + "/report.csv", rep);
  write_train_log(out_dir + "/train_log.csv", rep.train_log);
  write_cp_report(out_dir + "/cp_report.csv", rep.cp_rows);
}

// ---------------------------------------------------------------------------
// Sweeps: one train per grid point, shared seed, long-form CSV flushed after
// every point so failures keep partial results.
// ---------------------------------------------------------------------------

enum class SweepKind { Shots, Tasks, Cut, Snr };

inline const char* sweep_kind_name(SweepKind k) {
  switch (k) {
    case SweepKind::Shots: return "shots";
    case SweepKind::Tasks: return "tasks";
    case SweepKind::Cut: return "cut";
    case SweepKind::Snr: return "snr";
  }
  return "?";
}

inline SweepKind parse_sweep_kind(const std::string& v) {
  if (v == "shots") return SweepKind::Shots;
  if (v == "tasks") return SweepKind::Tasks;
  if (v == "cut") return SweepKind::Cut;
  if (v == "snr") return SweepKind::Snr;
  throw config_error("sweep: kind must be shots, tasks, cut, or snr (got '" + v + "')");
}

struct SweepRow {
  std::string kind;
  double value = 0;
  double accuracy_final = 0;
  double coverage = 0;
  double inefficiency = 0;
  double p1 = 0;
  std::uint64_t bytes_fwd = 0;
  std::uint64_t bytes_bwd = 0;
};

inline ExperimentConfig apply_sweep_point(ExperimentConfig cfg, SweepKind kind, double value) {
  switch (kind) {
    case SweepKind::Shots:
      cfg.meta.shots = static_cast<std::size_t>(value);
      break;
    case SweepKind::Tasks:
      cfg.meta.tasks_per_epoch = static_cast<std::size_t>(value);
      break;
    case SweepKind::Cut:
      cfg.cut.block_index = static_cast<std::size_t>(value);
      break;
    case SweepKind::Snr:
      cfg.channel.snr_db = value;
      break;
  }
  return cfg;
}

inline std::vector<SweepRow> sweep(SweepKind kind, const std::vector<double>& grid,
                                   const ExperimentConfig& base, const std::string& csv_path) {
  if (grid.empty()) throw config_error("sweep: empty grid");
  CsvWriter csv(csv_path);
  csv.row({"kind", "value", "accuracy_final", "coverage", "inefficiency", "p1", "bytes_fwd",
           "bytes_bwd"});
  csv.flush();
  std::vector<SweepRow> rows;
  for (double v : grid) {
    const ExperimentConfig cfg = apply_sweep_point(base, kind, v);
    const RunReport rep = train(cfg);
    SweepRow row;
    row.kind = sweep_kind_name(kind);
    row.value = v;
    row.accuracy_final = rep.accuracy_curve.empty() ? 0.0 : rep.accuracy_curve.back();
    row.coverage = rep.coverage_mean;
    row.inefficiency = rep.inefficiency_mean;
    row.p1 = rep.p1;
    row.bytes_fwd = rep.bytes_fwd;
    row.bytes_bwd = rep.bytes_bwd;
    rows.push_back(row);
    csv.row({row.kind, csv_num(row.value), csv_num(row.accuracy_final), csv_num(row.coverage),
             csv_num(row.inefficiency), csv_num(row.p1), csv_num(row.bytes_fwd),
             csv_num(row.bytes_bwd)});
    csv.flush();
  }
  return rows;
}

}  // namespace msl
