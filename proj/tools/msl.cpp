// Command-line front end: train / sweep / conformal / serve / device /
// gradcheck. Every subcommand is a thin shell over the library; anything a
// subcommand computes can be reproduced by calling the same functions.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msl/msl.hpp"

namespace {

// Shared --config / --set / convenience-flag handling. Precedence: defaults,
// then config file, then --set pairs, then dedicated flags (CLI overrides
// file keys).
struct ConfigCli {
  std::string config_path;
  std::vector<std::string> sets;
  std::string mode, data;
  std::string out_dir;
  std::int64_t seed = -1, cut = -1, epochs = -1, shots = -1, ways = -1, tasks = -1;
  double snr = std::numeric_limits<double>::quiet_NaN();

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "key=value config file with [section] headers");
    app.add_option("--set", sets, "override a config key, e.g. --set meta.shots=5")
        ->type_name("KEY=VALUE");
    app.add_option("--mode", mode, "run mode: msl | sl | dnn");
    app.add_option("--data", data, "data source: synth | omniglot:<path>");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "experiment seed");
    app.add_option("--cut", cut, "cut layer (conv block index, 1-based)");
    app.add_option("--epochs", epochs, "meta-training epochs");
    app.add_option("--shots", shots, "support examples per class (K)");
    app.add_option("--ways", ways, "classes per task (Y)");
    app.add_option("--tasks", tasks, "meta-tasks per epoch (T)");
    app.add_option("--snr", snr, "channel SNR in dB");
  }

  msl::ExperimentConfig resolve() const {
    msl::ExperimentConfig cfg;
    if (!config_path.empty()) msl::apply_config(cfg, msl::parse_config_file(config_path));
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw msl::config_error("--set expects key=value, got '" + kv + "'");
      msl::apply_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!mode.empty()) msl::apply_key(cfg, "run.mode", mode);
    if (!data.empty()) {
      if (data == "synth") {
        msl::apply_key(cfg, "data.source", "synth");
      } else if (data.rfind("omniglot:", 0) == 0) {
        msl::apply_key(cfg, "data.source", "omniglot");
        msl::apply_key(cfg, "data.omniglot_root", data.substr(9));
      } else {
        throw msl::config_error("--data expects synth or omniglot:<path>, got '" + data + "'");
      }
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (cut >= 0) cfg.cut = msl::CutPoint{static_cast<std::size_t>(cut)};
    if (epochs >= 0) cfg.meta.epochs = static_cast<std::size_t>(epochs);
    if (shots >= 0) cfg.meta.shots = static_cast<std::size_t>(shots);
    if (ways >= 0) cfg.meta.ways = static_cast<std::size_t>(ways);
    if (tasks >= 0) cfg.meta.tasks_per_epoch = static_cast<std::size_t>(tasks);
    if (!std::isnan(snr)) cfg.channel.snr_db = snr;
    return cfg;
  }
};

int cmd_train(const ConfigCli& cc) {
  const msl::ExperimentConfig cfg = cc.resolve();
  const msl::RunReport rep = msl::train(cfg);
  msl::write_run_outputs(cfg.out_dir, rep);
  std::printf("mode=%s episodes=%zu accuracy_final=%.4f coverage=%.4f inefficiency=%.3f\n",
              msl::run_mode_name(cfg.mode), rep.test_episodes,
              rep.accuracy_curve.empty() ? 0.0 : rep.accuracy_curve.back(), rep.coverage_mean,
              rep.inefficiency_mean);
  std::printf("bytes_fwd=%llu bytes_bwd=%llu device_flops=%zu aggregator_flops=%zu\n",
              static_cast<unsigned long long>(rep.bytes_fwd),
              static_cast<unsigned long long>(rep.bytes_bwd), rep.device_flops,
              rep.aggregator_flops);
  std::printf("wrote %s/report.csv\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_sweep(const ConfigCli& cc, const std::string& kind_s, const std::string& grid_s,
              std::string out_csv) {
  const msl::ExperimentConfig base = cc.resolve();
  const msl::SweepKind kind = msl::parse_sweep_kind(kind_s);
  std::vector<double> grid;
  std::size_t pos = 0;
  while (pos < grid_s.size()) {
    const auto comma = grid_s.find(',', pos);
    const std::string tok = grid_s.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!tok.empty()) grid.push_back(std::stod(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (grid.empty()) throw msl::config_error("sweep: --grid produced no points");
  if (out_csv.empty())
    out_csv = base.out_dir + "/sweep_" + msl::sweep_kind_name(kind) + ".csv";
  std::filesystem::create_directories(std::filesystem::path(out_csv).parent_path());
  const auto rows = msl::sweep(kind, grid, base, out_csv);
  for (const auto& r : rows)
    std::printf("%s=%g accuracy_final=%.4f coverage=%.4f p1=%.4f\n",
                msl::sweep_kind_name(kind), r.value, r.accuracy_final, r.coverage, r.p1);
  std::printf("wrote %s\n", out_csv.c_str());
  return 0;
}

// Repeated calibration/validation splits over one episode's query
// probabilities: the coverage distribution of the set predictor itself.
int cmd_conformal(const ConfigCli& cc, std::size_t splits, std::size_t episode,
                  std::string out_csv) {
  msl::ExperimentConfig cfg = cc.resolve();
  cfg.validate();
  const msl::Dataset ds = msl::load_dataset(cfg);
  cfg.meta.validate(ds.per_class);
  const msl::ClassPools pools = msl::split_pools(ds.num_classes(), cfg.meta_test_fraction, cfg.seed);
  const msl::ModelConfig model = cfg.model(ds.image_h, ds.image_w);

  msl::Rng ep_rng(msl::derive_seed(cfg.seed, 0x7E57, episode));
  const msl::Task task = msl::sample_task(pools.meta_test, cfg.meta.ways, episode, ep_rng);
  const msl::Episode ep = msl::sample_episode(ds, task, cfg.meta.shots, cfg.meta.query, ep_rng);

  msl::Tensor<double> probs;
  std::vector<int> labels;
  if (cfg.mode == msl::RunMode::Dnn) {
    auto params = msl::init_parameters<float>(model, msl::derive_seed(cfg.seed, 0x51AD, episode));
    auto res = msl::mono_test(model, std::move(params), ep, cfg.meta_test_steps, cfg.meta.eta);
    probs = std::move(res.final_probs);
    labels = std::move(res.query_labels);
  } else {
    msl::SplitPair<float> start;
    if (cfg.mode == msl::RunMode::Msl) {
      msl::MetaConfig mc = cfg.meta;
      mc.seed = cfg.seed;
      auto trained = msl::meta_train<float>(mc, ds, pools.meta_train, model, cfg.cut,
                                            cfg.channel_in_meta_train ? cfg.channel
                                                                      : msl::ChannelConfig{});
      start = std::move(trained.init);
    } else {
      auto params = msl::init_parameters<float>(model, msl::derive_seed(cfg.seed, 0x51AD, episode));
      start = msl::split_at(model, params, cfg.cut);
    }
    auto chan_cfg = cfg.channel_in_meta_test ? cfg.channel : msl::ChannelConfig{};
    msl::ChannelPair chan = msl::ChannelPair::make(chan_cfg, 0x7E57, episode);
    auto res = msl::meta_test(start, ep, cfg.meta_test_steps, cfg.meta.eta, chan);
    probs = std::move(res.final_probs);
    labels = std::move(res.query_labels);
  }

  std::vector<msl::CpReportRow> rows;
  double cov = 0, ineff = 0;
  for (std::size_t s = 0; s < splits; ++s) {
    msl::Rng rng(msl::derive_seed(cfg.seed, 0xCA15, s));
    const msl::CpOutcome o = msl::vbcp_evaluate(probs, labels, cfg.cp, rng);
    rows.push_back({s, o.n_cal, cfg.cp.alpha, o.q_hat, o.coverage, o.inefficiency});
    cov += o.coverage;
    ineff += o.inefficiency;
  }
  if (out_csv.empty()) out_csv = cfg.out_dir + "/cp_splits.csv";
  std::filesystem::create_directories(std::filesystem::path(out_csv).parent_path());
  msl::write_cp_report(out_csv, rows);
  std::printf("pool=%zu splits=%zu alpha=%g mean_coverage=%.4f mean_inefficiency=%.4f\n",
              labels.size(), splits, cfg.cp.alpha, cov / double(splits), ineff / double(splits));
  std::printf("wrote %s\n", out_csv.c_str());
  return 0;
}

struct ArchCli {
  std::size_t ways = 10, channels = 64, blocks = 3, fc = 64, image = 28, cut = 3;
  std::uint64_t seed = 0;

  void attach(CLI::App& app) {
    app.add_option("--ways", ways, "classes per task");
    app.add_option("--channels", channels, "conv channels");
    app.add_option("--blocks", blocks, "conv blocks");
    app.add_option("--fc", fc, "hidden fully-connected width");
    app.add_option("--image", image, "square input size");
    app.add_option("--cut", cut, "cut layer (conv block index)");
    app.add_option("--seed", seed, "seed");
  }

  msl::ModelConfig model() const {
    msl::ModelConfig m = msl::ModelConfig::default_stack(ways, channels, blocks, fc);
    m.input_shape = {1, image, image};
    return m;
  }
};

int cmd_serve(const ArchCli& ac, std::uint16_t port, std::size_t sessions) {
  const msl::ModelConfig model = ac.model();
  auto params = msl::init_parameters<float>(model, msl::derive_seed(ac.seed, 0x51AD, 0));
  msl::SplitPair<float> pair = msl::split_at(model, params, msl::CutPoint{ac.cut});

  msl::TcpListener listener(port);
  std::printf("LISTENING %u\n", unsigned(listener.port()));
  std::fflush(stdout);
  for (std::size_t s = 0; s < sessions; ++s) {
    msl::Endpoint ep(msl::Role::Aggregator, "tcp", listener.accept());
    const msl::SessionLog log = msl::run_aggregator(ep, pair.agg_cfg, pair.agg_params);
    std::printf("session %zu: steps=%zu bytes_in=%llu bytes_out=%llu\n", s + 1, log.rows.size(),
                static_cast<unsigned long long>(log.bytes_received),
                static_cast<unsigned long long>(log.bytes_sent));
    std::fflush(stdout);
  }
  return 0;
}

// The device trains on one fixed support batch drawn from the synthetic
// glyphs: same seed, same batch, every step, so runs are reproducible and
// comparable against in-process execution.
int cmd_device(const ArchCli& ac, const std::string& connect, std::size_t shots, double lr,
               std::size_t steps, double snr_db, bool fading, std::size_t quant,
               const std::string& log_path) {
  const auto colon = connect.rfind(':');
  if (colon == std::string::npos)
    throw msl::config_error("--connect expects HOST:PORT, got '" + connect + "'");
  const std::string host = connect.substr(0, colon);
  const int port = std::stoi(connect.substr(colon + 1));

  msl::GlyphGenConfig gc;
  gc.image_size = ac.image;
  gc.seed = ac.seed;
  const msl::Dataset ds = msl::synth_glyphs(gc);
  const msl::ClassPools pools = msl::split_pools(ds.num_classes(), 0.2, ac.seed);
  msl::Rng er(msl::derive_seed(ac.seed, 0x7E57, 0));
  const msl::Task task = msl::sample_task(pools.meta_test, ac.ways, 0, er);
  const msl::Episode ep = msl::sample_episode(ds, task, shots, 1, er);

  const msl::ModelConfig model = ac.model();
  auto params = msl::init_parameters<float>(model, msl::derive_seed(ac.seed, 0x51AD, 0));
  msl::SplitPair<float> pair = msl::split_at(model, params, msl::CutPoint{ac.cut});

  msl::ChannelConfig chan_cfg;
  chan_cfg.snr_db = snr_db;
  chan_cfg.fading = fading;
  chan_cfg.quant_levels = quant;
  chan_cfg.seed = ac.seed;
  msl::ChannelPair chan = msl::ChannelPair::make(chan_cfg, 0xDE1C, 0);

  msl::SessionConfig sc;
  sc.lr = lr;
  sc.steps = steps;
  msl::Endpoint nep(msl::Role::Device, connect,
                    msl::TcpStream::connect(host, static_cast<std::uint16_t>(port), sc.timeout_ms));
  const msl::SessionLog log = msl::run_device(nep, pair, ep.support_x, ep.support_y, sc, chan);
  if (!log_path.empty()) {
    std::filesystem::create_directories(std::filesystem::path(log_path).parent_path());
    msl::write_session_log(log_path, log);
  }
  std::printf("steps=%zu final_loss=%.6f checksum=%016llx skipped_fwd=%llu skipped_bwd=%llu\n",
              log.rows.size(), log.rows.empty() ? 0.0 : log.rows.back().loss,
              static_cast<unsigned long long>(log.rows.empty() ? 0 : log.rows.back().checksum),
              static_cast<unsigned long long>(log.fwd_skipped),
              static_cast<unsigned long long>(log.bwd_skipped));
  return 0;
}

int cmd_gradcheck(const ArchCli& ac, double tol, std::size_t batch, std::size_t samples,
                  double eps) {
  msl::GradCheckOptions opt;
  opt.batch = batch;
  opt.sample_params = samples;
  opt.epsilon = eps;
  const double err = msl::grad_check(ac.model(), ac.seed, opt);
  std::printf("max_rel_err=%.3e tol=%.3e %s\n", err, tol, err < tol ? "OK" : "FAIL");
  return err < tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"split-learning few-shot simulator"};
  app.require_subcommand(1);

  ConfigCli train_cc;
  auto* train = app.add_subcommand("train", "run one experiment, write report CSVs");
  train_cc.attach(*train);

  ConfigCli sweep_cc;
  std::string sweep_kind, sweep_grid, sweep_out;
  auto* sweep = app.add_subcommand("sweep", "repeat train over a parameter grid");
  sweep_cc.attach(*sweep);
  sweep->add_option("--kind", sweep_kind, "shots | tasks | cut | snr")->required();
  sweep->add_option("--grid", sweep_grid, "comma-separated grid values")->required();
  sweep->add_option("--sweep-out", sweep_out, "sweep CSV path");

  ConfigCli cp_cc;
  std::size_t cp_splits = 500, cp_episode = 0;
  std::string cp_out;
  auto* conformal =
      app.add_subcommand("conformal", "coverage over repeated calibration/validation splits");
  cp_cc.attach(*conformal);
  conformal->add_option("--splits", cp_splits, "number of random splits");
  conformal->add_option("--episode", cp_episode, "test episode index supplying the pool");
  conformal->add_option("--cp-out", cp_out, "split report CSV path");

  ArchCli serve_ac;
  std::uint16_t serve_port = 0;
  std::size_t serve_sessions = 1;
  auto* serve = app.add_subcommand("serve", "aggregator endpoint for split training");
  serve_ac.attach(*serve);
  serve->add_option("--port", serve_port, "TCP port (0 = kernel-assigned)");
  serve->add_option("--sessions", serve_sessions, "sequential sessions to serve");

  ArchCli dev_ac;
  std::string dev_connect, dev_log;
  std::size_t dev_shots = 5, dev_steps = 20, dev_quant = 0;
  double dev_lr = 0.01, dev_snr = std::numeric_limits<double>::infinity();
  bool dev_fading = false;
  auto* device = app.add_subcommand("device", "device endpoint: train over a served aggregator");
  dev_ac.attach(*device);
  device->add_option("--connect", dev_connect, "aggregator HOST:PORT")->required();
  device->add_option("--session-log", dev_log, "per-step session CSV path");
  device->add_option("--shots", dev_shots, "support examples per class");
  device->add_option("--lr", dev_lr, "SGD rate for both halves");
  device->add_option("--steps", dev_steps, "training steps");
  device->add_option("--snr", dev_snr, "channel SNR in dB");
  device->add_flag("--fading", dev_fading, "enable Rayleigh fading");
  device->add_option("--quant", dev_quant, "quantizer levels (0 = off)");

  ArchCli gc_ac;
  double gc_tol = 1e-4, gc_eps = 1e-5;
  std::size_t gc_batch = 2, gc_samples = 200;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gc_ac.attach(*gradcheck);
  gradcheck->add_option("--tol", gc_tol, "max relative error to accept");
  gradcheck->add_option("--batch", gc_batch, "batch size");
  gradcheck->add_option("--samples", gc_samples, "parameter coordinates to probe");
  gradcheck->add_option("--eps", gc_eps, "finite-difference step");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_cc);
    if (*sweep) return cmd_sweep(sweep_cc, sweep_kind, sweep_grid, sweep_out);
    if (*conformal) return cmd_conformal(cp_cc, cp_splits, cp_episode, cp_out);
    if (*serve) return cmd_serve(serve_ac, serve_port, serve_sessions);
    if (*device)
      return cmd_device(dev_ac, dev_connect, dev_shots, dev_lr, dev_steps, dev_snr, dev_fading,
                        dev_quant, dev_log);
    if (*gradcheck) return cmd_gradcheck(gc_ac, gc_tol, gc_batch, gc_samples, gc_eps);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
