#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msl/channel.hpp"
#include "msl/data.hpp"
#include "msl/optim.hpp"
#include "msl/splitnet.hpp"

namespace msl {

/// Episodic training knobs: T tasks per epoch, Y-way episodes with K support
/// shots and Q query examples per class, `inner_steps` SGD steps at eta
/// inside each task, Adam at beta for the outer update, E epochs.
struct MetaConfig {
  std::size_t tasks_per_epoch = 20;  // T
  std::size_t ways = 10;             // Y
  std::size_t shots = 5;             // K
  std::size_t query = 15;            // Q
  std::size_t inner_steps = 1;
  double eta = 0.001;
  double beta = 0.01;
  std::size_t epochs = 1000;  // E
  bool first_order = true;
  std::uint64_t seed = 0;

  /// per_class is the dataset's M; pass it when known so the K <= M and
  /// K+Q <= M constraints are enforced at config time.
  void validate(std::size_t per_class = static_cast<std::size_t>(-1)) const {
    if (!first_order)
      throw config_error(
          "second-order meta-gradients are not implemented; set first_order=true");
    if (ways < 2) throw config_error("meta: ways must be >= 2");
    if (shots < 1) throw config_error("meta: shots must be >= 1");
    if (query < 1) throw config_error("meta: query must be >= 1");
    if (inner_steps < 1) throw config_error("meta: inner_steps must be >= 1");
    if (tasks_per_epoch < 1) throw config_error("meta: tasks_per_epoch must be >= 1");
    if (eta < 0 || beta < 0) throw config_error("meta: learning rates must be >= 0");
    if (shots > per_class)
      throw config_error("meta: shots " + std::to_string(shots) +
                         " exceeds examples per class " + std::to_string(per_class));
    if (shots + query > per_class)
      throw config_error("meta: shots + query " + std::to_string(shots + query) +
                         " exceeds examples per class " + std::to_string(per_class));
  }
};

/// A Y-way classification problem over distinct dataset classes; episode
/// label y corresponds to dataset class `classes[y]`.
struct Task {
  std::vector<std::size_t> classes;
  std::size_t id = 0;
};

inline Task sample_task(const std::vector<std::size_t>& pool, std::size_t ways,
                        std::size_t id, Rng& rng) {
  if (pool.size() < ways)
    throw config_error("sample_task: pool has " + std::to_string(pool.size()) +
                       " classes, need " + std::to_string(ways));
  std::vector<std::size_t> order = pool;
  rng.shuffle(order);
  Task t;
  t.id = id;
  t.classes.assign(order.begin(), order.begin() + ways);
  return t;
}

/// Support/query split of one task, labels relabeled to 0..Y-1, batches
/// class-major. Support and query index sets are disjoint per class.
struct Episode {
  Task task;
  Tensor<float> support_x;  // (K*Y, 1, H, W)
  std::vector<int> support_y;
  Tensor<float> query_x;  // (Q*Y, 1, H, W)
  std::vector<int> query_y;
};

inline Episode sample_episode(const Dataset& ds, const Task& task, std::size_t shots,
                              std::size_t query, Rng& rng) {
  const std::size_t ways = task.classes.size();
  Episode ep;
  ep.task = task;
  ep.support_x = Tensor<float>({shots * ways, 1, ds.image_h, ds.image_w});
  ep.query_x = Tensor<float>({query * ways, 1, ds.image_h, ds.image_w});
  ep.support_y.reserve(shots * ways);
  ep.query_y.reserve(query * ways);
  const std::size_t px = ds.image_h * ds.image_w;
  std::size_t si = 0, qi = 0;
  for (std::size_t y = 0; y < ways; ++y) {
    const std::size_t cls = task.classes[y];
    if (cls >= ds.num_classes())
      throw input_error("sample_episode: class index out of range");
    if (ds.per_class < shots + query)
      throw config_error("sample_episode: class " + ds.class_names[cls] + " has " +
                         std::to_string(ds.per_class) + " examples, need " +
                         std::to_string(shots + query));
    std::vector<std::size_t> idx(ds.per_class);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t k = 0; k < shots; ++k, ++si) {
      const auto& im = ds.image(cls, idx[k]);
      std::copy(im.data(), im.data() + px, ep.support_x.data() + si * px);
      ep.support_y.push_back(static_cast<int>(y));
    }
    for (std::size_t q = 0; q < query; ++q, ++qi) {
      const auto& im = ds.image(cls, idx[shots + q]);
      std::copy(im.data(), im.data() + px, ep.query_x.data() + qi * px);
      ep.query_y.push_back(static_cast<int>(y));
    }
  }
  return ep;
}

/// Forward and backward hops get independent channel instances (independent
/// RNG streams); the backward hop can be disabled for ablation.
struct ChannelPair {
  Channel<float> fwd;
  Channel<float> bwd;
  bool backward_enabled = true;

  static ChannelPair make(const ChannelConfig& cfg, std::uint64_t stream_a = 0,
                          std::uint64_t stream_b = 0) {
    ChannelConfig f = cfg, b = cfg;
    f.seed = derive_seed(cfg.seed, stream_a, stream_b * 2);
    b.seed = derive_seed(cfg.seed, stream_a, stream_b * 2 + 1);
    return ChannelPair{Channel<float>(f), Channel<float>(b), cfg.apply_to_backward};
  }
};

inline ChannelPair identity_channel_pair() { return ChannelPair::make(ChannelConfig{}); }

/// Payload bytes that crossed the cut, per direction.
struct StepBytes {
  std::uint64_t fwd = 0;
  std::uint64_t bwd = 0;
};

/// Channel outage bookkeeping: steps skipped because retries were exhausted.
struct ChannelDiag {
  std::uint64_t fwd_skipped = 0;
  std::uint64_t bwd_skipped = 0;
  std::uint64_t aborted_tasks = 0;

  void operator+=(const ChannelDiag& o) {
    fwd_skipped += o.fwd_skipped;
    bwd_skipped += o.bwd_skipped;
    aborted_tasks += o.aborted_tasks;
  }
};

template <typename T>
struct InnerStepOutcome {
  double loss = 0;  // support loss seen by this step (pre-update forward)
  bool fwd_delivered = true;
  bool bwd_delivered = true;
};

/// One support SGD step on both halves: device forward, forward hop,
/// aggregator forward/backward + update, backward hop, device update. A lost
/// uplink skips the whole step; a lost downlink skips only the device-half
/// update (the aggregator has already stepped).
template <typename T>
InnerStepOutcome<T> adapt_step(SplitPair<T>& pair, const Tensor<T>& support_x,
                               const std::vector<int>& support_y, double eta,
                               ChannelPair& chan, StepBytes& bytes, ChannelDiag& diag) {
  InnerStepOutcome<T> out;
  auto [smashed, trace] = device_forward(pair, support_x);
  if (!chan.fwd.apply(smashed.tensor).delivered) {
    ++diag.fwd_skipped;
    out.fwd_delivered = false;
    return out;
  }
  bytes.fwd += smashed.byte_size();
  AggregatorPass<T> agg = aggregator_pass(pair.agg_cfg, pair.agg_params, smashed.tensor,
                                          support_y, /*want_grad=*/true, eta);
  out.loss = agg.loss;
  bytes.bwd += agg.smashed_grad.numel() * sizeof(T);
  if (chan.backward_enabled && !chan.bwd.apply(agg.smashed_grad).delivered) {
    ++diag.bwd_skipped;
    out.bwd_delivered = false;
    return out;
  }
  device_backward_step(pair.device_cfg, pair.device_params, trace, agg.smashed_grad, eta);
  return out;
}

template <typename T>
struct EvalOutcome {
  double loss = 0;
  double accuracy = 0;
  Tensor<T> logits;
  bool delivered = true;
};

/// Query (or any) batch through the adapted pair: device forward, forward
/// hop, aggregator forward + loss. No parameter updates.
template <typename T>
EvalOutcome<T> eval_pass(SplitPair<T>& pair, const Tensor<T>& x, const std::vector<int>& y,
                         ChannelPair& chan, StepBytes& bytes, ChannelDiag& diag) {
  EvalOutcome<T> out;
  auto [smashed, trace] = device_forward(pair, x);
  (void)trace;
  if (!chan.fwd.apply(smashed.tensor).delivered) {
    ++diag.fwd_skipped;
    out.delivered = false;
    return out;
  }
  bytes.fwd += smashed.byte_size();
  AggregatorPass<T> agg = aggregator_pass(pair.agg_cfg, pair.agg_params, smashed.tensor, y,
                                          /*want_grad=*/false, 0.0);
  out.loss = agg.loss;
  const auto preds = argmax_rows(agg.logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == y[i]) ++hits;
  out.accuracy = static_cast<double>(hits) / static_cast<double>(preds.size());
  out.logits = std::move(agg.logits);
  return out;
}

template <typename T>
struct AdaptResult {
  SplitPair<T> pair;
  double last_support_loss = 0;
  StepBytes bytes;
  ChannelDiag diag;
};

/// `steps` support SGD steps at eta, operating on a copy; the shared
/// initialization is never mutated. Throws numeric_error if the loss goes
/// non-finite (the caller aborts the task with a diagnostic).
template <typename T>
AdaptResult<T> inner_adapt(const SplitPair<T>& init, const Tensor<T>& support_x,
                           const std::vector<int>& support_y, std::size_t steps, double eta,
                           ChannelPair& chan) {
  AdaptResult<T> out;
  out.pair = init;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto step =
        adapt_step(out.pair, support_x, support_y, eta, chan, out.bytes, out.diag);
    if (step.fwd_delivered) out.last_support_loss = step.loss;
    if (!std::isfinite(step.loss))
      throw numeric_error("inner_adapt: non-finite support loss at step " +
                          std::to_string(s));
  }
  return out;
}

/// Sum over tasks of the (clean, identity-channel) query cross-entropy under
/// each task's adapted parameters.
template <typename T>
double meta_loss(std::vector<SplitPair<T>>& adapted, const std::vector<Episode>& episodes) {
  if (adapted.size() != episodes.size())
    throw input_error("meta_loss: one adapted pair per episode required");
  ChannelPair identity = identity_channel_pair();
  StepBytes bytes;
  ChannelDiag diag;
  double total = 0;
  for (std::size_t t = 0; t < adapted.size(); ++t)
    total +=
        eval_pass(adapted[t], episodes[t].query_x, episodes[t].query_y, identity, bytes, diag)
            .loss;
  return total;
}

/// Outer update: task-summed first-order query gradients applied to the
/// shared initialization, one optimizer state per half.
template <typename T>
void meta_update(SplitPair<T>& init, const Gradients<T>& device_grad_sum,
                 const Gradients<T>& agg_grad_sum, OptimState<T>& device_state,
                 OptimState<T>& agg_state) {
  optimizer_step(init.device_params, device_grad_sum, device_state);
  optimizer_step(init.agg_params, agg_grad_sum, agg_state);
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double meta_loss = 0;
  double mean_query_acc = 0;
  double wall_ms = 0;
  std::uint64_t bytes_fwd = 0;
  std::uint64_t bytes_bwd = 0;
};

template <typename T>
struct MetaTrainResult {
  SplitPair<T> init;
  std::vector<EpochLog> log;
  ChannelDiag diag;
};

/// Full episodic training: E epochs of {sample T tasks, adapt each on its
/// support, accumulate first-order query gradients, Adam outer update}.
/// Each (epoch, task) gets its own RNG stream and channel instances, so the
/// trajectory is a pure function of (config, dataset, pool).
template <typename T = float>
MetaTrainResult<T> meta_train(const MetaConfig& cfg, const Dataset& ds,
                              const std::vector<std::size_t>& pool, const ModelConfig& model,
                              CutPoint cut, const ChannelConfig& chan_cfg) {
  cfg.validate(ds.per_class);
  if (pool.size() < cfg.ways)
    throw config_error("meta_train: class pool smaller than ways");
  MetaTrainResult<T> out;
  auto params = init_parameters<T>(model, derive_seed(cfg.seed, 0xA110));
  out.init = split_at(model, params, cut);
  OptimState<T> dev_state = OptimState<T>::adam(static_cast<T>(cfg.beta), out.init.device_params);
  OptimState<T> agg_state = OptimState<T>::adam(static_cast<T>(cfg.beta), out.init.agg_params);

  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog row;
    row.epoch = e;
    Gradients<T> dev_sum = zero_like(out.init.device_params);
    Gradients<T> agg_sum = zero_like(out.init.agg_params);
    double acc_sum = 0;
    std::size_t acc_n = 0;

    for (std::size_t t = 0; t < cfg.tasks_per_epoch; ++t) {
      Rng rng(derive_seed(cfg.seed, e, t));
      const Task task = sample_task(pool, cfg.ways, (e - 1) * cfg.tasks_per_epoch + t, rng);
      const Episode ep = sample_episode(ds, task, cfg.shots, cfg.query, rng);
      ChannelPair chan = ChannelPair::make(chan_cfg, e, t);
      StepBytes bytes;
      ChannelDiag diag;
      try {
        AdaptResult<T> adapted =
            inner_adapt(out.init, ep.support_x, ep.support_y, cfg.inner_steps, cfg.eta, chan);
        bytes = adapted.bytes;
        diag = adapted.diag;

        // Query pass with gradients: first-order meta-gradients are the
        // query-loss gradients at the adapted parameters.
        auto [smashed, trace] = device_forward(adapted.pair, ep.query_x);
        if (!chan.fwd.apply(smashed.tensor).delivered) {
          ++diag.fwd_skipped;
          ++diag.aborted_tasks;
          row.bytes_fwd += bytes.fwd;
          row.bytes_bwd += bytes.bwd;
          out.diag += diag;
          continue;  // task contributes neither loss nor gradients
        }
        bytes.fwd += smashed.byte_size();
        AggregatorPass<T> agg =
            aggregator_pass(adapted.pair.agg_cfg, adapted.pair.agg_params, smashed.tensor,
                            ep.query_y, /*want_grad=*/true, 0.0);
        if (!std::isfinite(agg.loss))
          throw numeric_error("meta_train: non-finite query loss");
        row.meta_loss += agg.loss;
        const auto preds = argmax_rows(agg.logits);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < preds.size(); ++i)
          if (preds[i] == ep.query_y[i]) ++hits;
        acc_sum += static_cast<double>(hits) / static_cast<double>(preds.size());
        ++acc_n;
        accumulate(agg_sum, agg.agg_grads);
        bytes.bwd += agg.smashed_grad.numel() * sizeof(T);
        bool dev_grad_ok = true;
        if (chan.backward_enabled && !chan.bwd.apply(agg.smashed_grad).delivered) {
          ++diag.bwd_skipped;
          dev_grad_ok = false;
        }
        if (dev_grad_ok) {
          Gradients<T> dev_grads =
              device_backward_step(adapted.pair.device_cfg, adapted.pair.device_params, trace,
                                   agg.smashed_grad, 0.0);
          accumulate(dev_sum, dev_grads);
        }
      } catch (const numeric_error&) {
        ++diag.aborted_tasks;  // task dropped; its gradients contribute nothing
      }
      row.bytes_fwd += bytes.fwd;
      row.bytes_bwd += bytes.bwd;
      out.diag += diag;
    }

    row.mean_query_acc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
    meta_update(out.init, dev_sum, agg_sum, dev_state, agg_state);
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    out.log.push_back(row);
  }
  return out;
}

template <typename T>
struct MetaTestResult {
  std::vector<double> accuracy_curve;  // length steps+1; index 0 = raw init
  std::vector<double> loss_curve;
  Tensor<double> final_probs;  // (Q*Y, Y) softmax rows after the last step
  std::vector<int> query_labels;
  SplitPair<T> adapted;
  StepBytes bytes;
  ChannelDiag diag;
};

/// Adaptation to an unseen task: `steps` support SGD steps from the given
/// initialization, query accuracy recorded before the first and after every
/// step. Query forwards cross the same channel the training steps use.
template <typename T>
MetaTestResult<T> meta_test(const SplitPair<T>& init, const Episode& ep, std::size_t steps,
                            double eta, ChannelPair& chan) {
  MetaTestResult<T> out;
  out.adapted = init;
  out.query_labels = ep.query_y;
  out.accuracy_curve.reserve(steps + 1);
  Tensor<T> last_logits;
  auto eval = [&] {
    const auto ev = eval_pass(out.adapted, ep.query_x, ep.query_y, chan, out.bytes, out.diag);
    out.accuracy_curve.push_back(ev.delivered ? ev.accuracy : 0.0);
    out.loss_curve.push_back(ev.loss);
    if (ev.delivered) last_logits = ev.logits;
  };
  eval();
  for (std::size_t s = 0; s < steps; ++s) {
    adapt_step(out.adapted, ep.support_x, ep.support_y, eta, chan, out.bytes, out.diag);
    eval();
  }
  if (!last_logits.empty()) out.final_probs = softmax_probs(last_logits);
  return out;
}

}  // namespace msl
