#pragma once

#include <cstdint>
#include <vector>

#include "msl/nn.hpp"
#include "msl/splitnet.hpp"

namespace msl {

struct ClassificationMetrics {
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  bool absent_classes = false;  // some class never appears in the labels
};

/// Standard macro-averaged metrics over `num_classes` classes. Classes absent
/// from the labels contribute precision/recall 0 and set the flag.
inline ClassificationMetrics classification_metrics(const std::vector<int>& preds,
                                                    const std::vector<int>& labels,
                                                    std::size_t num_classes) {
  if (preds.size() != labels.size())
    throw input_error("classification_metrics: preds/labels length mismatch");
  if (preds.empty()) throw input_error("classification_metrics: no predictions");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0),
      support(num_classes, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], l = labels[i];
    if (p < 0 || static_cast<std::size_t>(p) >= num_classes || l < 0 ||
        static_cast<std::size_t>(l) >= num_classes)
      throw input_error("classification_metrics: class index out of range");
    ++support[static_cast<std::size_t>(l)];
    if (p == l) {
      ++hits;
      ++tp[static_cast<std::size_t>(p)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(l)];
    }
  }
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(hits) / static_cast<double>(preds.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (support[c] == 0) m.absent_classes = true;
    const double denom_p = static_cast<double>(tp[c] + fp[c]);
    const double denom_r = static_cast<double>(tp[c] + fn[c]);
    const double prec = denom_p > 0 ? tp[c] / denom_p : 0.0;
    const double rec = denom_r > 0 ? tp[c] / denom_r : 0.0;
    m.macro_precision += prec;
    m.macro_recall += rec;
    m.macro_f1 += (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
  }
  m.macro_precision /= static_cast<double>(num_classes);
  m.macro_recall /= static_cast<double>(num_classes);
  m.macro_f1 /= static_cast<double>(num_classes);
  return m;
}

/// Reporting objective: total summed task loss plus the sampling penalty
/// zeta * K * Y. K may not exceed the per-class pool M.
inline double objective_p1(const std::vector<double>& per_task_losses, std::size_t shots,
                           std::size_t ways, double zeta, std::size_t per_class = 20) {
  if (shots > per_class)
    throw config_error("objective_p1: constraint violated, shots " + std::to_string(shots) +
                       " > examples per class " + std::to_string(per_class));
  double total = 0;
  for (double l : per_task_losses) total += l;
  return total + zeta * static_cast<double>(shots) * static_cast<double>(ways);
}

// ---------------------------------------------------------------------------
// Analytic per-layer compute counts for one batch. Convention: `macs` are
// multiply-accumulates (conv kernels, fc rows, variance/normalize products),
// `adds` are plain additions (bias terms, mean accumulation), `cmps` are
// comparisons (ReLU clamps, pool window maxima). Totals are exact integers,
// so partition identities hold exactly.
// ---------------------------------------------------------------------------

struct LayerFlops {
  std::size_t macs = 0;
  std::size_t adds = 0;
  std::size_t cmps = 0;

  std::size_t total() const { return macs + adds + cmps; }
  void operator+=(const LayerFlops& o) {
    macs += o.macs;
    adds += o.adds;
    cmps += o.cmps;
  }
};

inline std::vector<LayerFlops> per_layer_flops(const ModelConfig& cfg, std::size_t batch = 1) {
  const auto shapes = layer_shapes(cfg);
  std::vector<LayerFlops> out(cfg.layers.size());
  std::size_t in_channels = cfg.input_shape[0];
  std::size_t in_numel = cfg.input_shape[0] * cfg.input_shape[1] * cfg.input_shape[2];
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    const auto& os = shapes[i];
    LayerFlops& f = out[i];
    const std::size_t out_per_example = Tensor<float>::numel_of(os);
    const std::size_t out_numel = batch * out_per_example;
    switch (l.kind) {
      case LayerKind::Conv2d:
        f.macs = out_numel * in_channels * l.kernel * l.kernel;
        f.adds = out_numel;  // bias
        break;
      case LayerKind::Norm:
        // mean accumulate, variance accumulate (mac), subtract, scale+shift (mac)
        f.adds = 2 * out_numel;
        f.macs = 2 * out_numel;
        break;
      case LayerKind::ReLU:
        f.cmps = out_numel;
        break;
      case LayerKind::MaxPool:
        f.cmps = out_numel * (l.kernel * l.kernel - 1);
        break;
      case LayerKind::Flatten:
        break;
      case LayerKind::FullyConnected:
        f.macs = out_numel * in_numel;
        f.adds = out_numel;  // bias
        break;
    }
    in_channels = os.size() == 3 ? os[0] : 0;
    in_numel = out_per_example;
  }
  return out;
}

struct FlopReport {
  LayerFlops device;
  LayerFlops aggregator;

  std::size_t device_total() const { return device.total(); }
  std::size_t aggregator_total() const { return aggregator.total(); }
  std::size_t total() const { return device.total() + aggregator.total(); }
};

/// Forward-pass compute on each side of the cut, per batch.
inline FlopReport flop_report(const ModelConfig& cfg, CutPoint cut, std::size_t batch = 1) {
  const std::size_t at = cut_layer_index(cfg, cut);
  const auto layers = per_layer_flops(cfg, batch);
  FlopReport r;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i < at)
      r.device += layers[i];
    else
      r.aggregator += layers[i];
  }
  return r;
}

inline LayerFlops monolithic_flops(const ModelConfig& cfg, std::size_t batch = 1) {
  LayerFlops sum;
  for (const auto& f : per_layer_flops(cfg, batch)) sum += f;
  return sum;
}

}  // namespace msl
