#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "msl/nn.hpp"
#include "msl/optim.hpp"

namespace msl {

/// Cut placed immediately after conv block `block_index` (1-based), i.e.
/// after that block's pooling layer. Only block boundaries are legal cuts.
struct CutPoint {
  std::size_t block_index = 3;
};

/// Number of conv blocks (a block ends at its MaxPool layer).
inline std::size_t conv_block_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& l : cfg.layers)
    if (l.kind == LayerKind::MaxPool) ++n;
  return n;
}

inline std::size_t cut_layer_index(const ModelConfig& cfg, CutPoint cut) {
  if (cut.block_index < 1) throw config_error("cut block_index must be >= 1");
  std::size_t seen = 0;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    if (cfg.layers[i].kind == LayerKind::MaxPool && ++seen == cut.block_index) return i + 1;
  }
  throw config_error("cut block_index " + std::to_string(cut.block_index) +
                     " exceeds the model's " + std::to_string(conv_block_count(cfg)) +
                     " conv blocks");
}

/// Activation tensor at the cut; the only forward payload that crosses the
/// channel.
template <typename T = float>
struct SmashedData {
  enum class Provenance : std::uint8_t { PreChannel, PostChannel };
  Tensor<T> tensor;
  Provenance provenance = Provenance::PreChannel;

  std::size_t byte_size() const { return tensor.numel() * sizeof(T); }
};

template <typename T = float>
struct SmashedGrad {
  Tensor<T> tensor;
};

/// Device half W^C plus aggregator half W^S of one model. Concatenating the
/// fragments reproduces the monolithic model exactly.
template <typename T = float>
struct SplitPair {
  ModelConfig device_cfg;
  ModelConfig agg_cfg;
  Parameters<T> device_params;
  Parameters<T> agg_params;
  CutPoint cut;
  std::size_t num_classes = 0;

  std::uint64_t checksum() const {
    std::uint64_t h = device_params.checksum();
    return fnv1a64(&h, sizeof h, agg_params.checksum());
  }
};

template <typename T>
SplitPair<T> split_at(const ModelConfig& cfg, const Parameters<T>& params, CutPoint cut) {
  const std::size_t at = cut_layer_index(cfg, cut);
  const auto shapes = layer_shapes(cfg);  // also validates the config
  SplitPair<T> pair;
  pair.cut = cut;
  pair.num_classes = cfg.num_classes;

  pair.device_cfg.input_shape = cfg.input_shape;
  pair.device_cfg.num_classes = cfg.num_classes;
  pair.device_cfg.layers.assign(cfg.layers.begin(), cfg.layers.begin() + at);
  pair.device_params.layers.assign(params.layers.begin(), params.layers.begin() + at);

  const auto& cut_shape = shapes[at - 1];
  if (cut_shape.size() != 3) throw config_error("cut must fall on a spatial boundary");
  pair.agg_cfg.input_shape = {cut_shape[0], cut_shape[1], cut_shape[2]};
  pair.agg_cfg.num_classes = cfg.num_classes;
  pair.agg_cfg.layers.assign(cfg.layers.begin() + at, cfg.layers.end());
  pair.agg_params.layers.assign(params.layers.begin() + at, params.layers.end());
  return pair;
}

/// Inverse of split_at; same layer order and parameter values.
template <typename T>
std::pair<ModelConfig, Parameters<T>> join(const SplitPair<T>& pair) {
  ModelConfig cfg;
  cfg.input_shape = pair.device_cfg.input_shape;
  cfg.num_classes = pair.num_classes;
  cfg.layers = pair.device_cfg.layers;
  cfg.layers.insert(cfg.layers.end(), pair.agg_cfg.layers.begin(), pair.agg_cfg.layers.end());
  Parameters<T> params;
  params.layers = pair.device_params.layers;
  params.layers.insert(params.layers.end(), pair.agg_params.layers.begin(),
                       pair.agg_params.layers.end());
  return {std::move(cfg), std::move(params)};
}

template <typename T>
std::pair<SmashedData<T>, ActivationTrace<T>> device_forward(const SplitPair<T>& pair,
                                                             const Tensor<T>& batch) {
  ActivationTrace<T> trace = forward(pair.device_params, pair.device_cfg, batch);
  SmashedData<T> s;
  s.tensor = trace.layers.back().output;
  return {std::move(s), std::move(trace)};
}

template <typename T>
std::pair<Tensor<T>, ActivationTrace<T>> aggregator_forward(const SplitPair<T>& pair,
                                                            const SmashedData<T>& received) {
  const auto& t = received.tensor;
  if (t.ndim() != 4 || t.dim(1) != pair.agg_cfg.input_shape[0] ||
      t.dim(2) != pair.agg_cfg.input_shape[1] || t.dim(3) != pair.agg_cfg.input_shape[2])
    throw protocol_error("aggregator_forward: smashed shape " + t.shape_str() +
                         " does not match the cut");
  ActivationTrace<T> trace = forward(pair.agg_params, pair.agg_cfg, t);
  Tensor<T> logits = trace.logits();
  return {std::move(logits), std::move(trace)};
}

template <typename T>
std::pair<Gradients<T>, SmashedGrad<T>> aggregator_backward(const SplitPair<T>& pair,
                                                            const ActivationTrace<T>& trace,
                                                            const Tensor<T>& grad_logits) {
  auto [grads, grad_in] = backward(pair.agg_params, pair.agg_cfg, trace, grad_logits);
  SmashedGrad<T> g;
  g.tensor = std::move(grad_in);
  return {std::move(grads), std::move(g)};
}

template <typename T>
Gradients<T> device_backward(const SplitPair<T>& pair, const ActivationTrace<T>& trace,
                             const SmashedGrad<T>& received) {
  if (!received.tensor.same_shape(trace.layers.back().output))
    throw protocol_error("device_backward: smashed gradient shape " +
                         received.tensor.shape_str() + " does not match the forward pass");
  auto [grads, grad_in] = backward(pair.device_params, pair.device_cfg, trace, received.tensor);
  (void)grad_in;
  return std::move(grads);
}

/// Exact byte count of one forward smashed-data transmission.
inline std::size_t smashed_payload_bytes(const ModelConfig& cfg, CutPoint cut, std::size_t batch,
                                         std::size_t bytes_per_value = 4) {
  const std::size_t at = cut_layer_index(cfg, cut);
  const auto shapes = layer_shapes(cfg);
  const auto& s = shapes[at - 1];
  return batch * s[0] * s[1] * s[2] * bytes_per_value;
}

// ---------------------------------------------------------------------------
// Training-step primitives. These are shared verbatim by the in-process
// trainer and the framed two-process sessions, so both execute the same
// floating-point operations in the same order.
// ---------------------------------------------------------------------------

template <typename T>
struct AggregatorPass {
  double loss = 0;
  Tensor<T> logits;        // (B, Y)
  Tensor<T> smashed_grad;  // empty unless want_grad
  Gradients<T> agg_grads;  // empty unless want_grad
};

/// Aggregator side of one step: forward from the received (post-channel)
/// smashed batch, mean cross-entropy against labels, then optionally the
/// backward pass and an SGD update of the aggregator half at `sgd_lr`.
template <typename T>
AggregatorPass<T> aggregator_pass(const ModelConfig& agg_cfg, Parameters<T>& agg_params,
                                  const Tensor<T>& smashed, const std::vector<int>& labels,
                                  bool want_grad, double sgd_lr) {
  if (smashed.ndim() != 4 || smashed.dim(1) != agg_cfg.input_shape[0] ||
      smashed.dim(2) != agg_cfg.input_shape[1] || smashed.dim(3) != agg_cfg.input_shape[2])
    throw protocol_error("aggregator_pass: smashed shape " + smashed.shape_str() +
                         " does not match the cut");
  AggregatorPass<T> out;
  ActivationTrace<T> trace = forward(agg_params, agg_cfg, smashed);
  out.logits = trace.logits();
  auto [loss, grad_logits] = loss_softmax_ce(out.logits, labels);
  out.loss = loss;
  if (want_grad) {
    auto [grads, grad_in] = backward(agg_params, agg_cfg, trace, grad_logits);
    out.agg_grads = std::move(grads);
    out.smashed_grad = std::move(grad_in);
    if (sgd_lr != 0) sgd_step(agg_params, out.agg_grads, static_cast<T>(sgd_lr));
  }
  return out;
}

/// Device side of the same step: backward from the (post-channel) smashed
/// gradient through the stored forward trace, then optionally an SGD update
/// of the device half. Returns the device-half gradients (the meta loop sums
/// them across tasks).
template <typename T>
Gradients<T> device_backward_step(const ModelConfig& device_cfg, Parameters<T>& device_params,
                                  const ActivationTrace<T>& trace, const Tensor<T>& smashed_grad,
                                  double sgd_lr) {
  if (!smashed_grad.same_shape(trace.layers.back().output))
    throw protocol_error("device_backward_step: gradient shape " + smashed_grad.shape_str() +
                         " does not match the forward pass");
  auto [grads, grad_in] = backward(device_params, device_cfg, trace, smashed_grad);
  (void)grad_in;
  if (sgd_lr != 0) sgd_step(device_params, grads, static_cast<T>(sgd_lr));
  return std::move(grads);
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: flat little-endian binary. Header: magic "MSLW",
// version u16, tensor count u32; then per tensor: name length u16 + bytes,
// ndim u16, dims u32 each, payload length u64, raw values.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'L', 'W'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw io_error("checkpoint: truncated file");
  return v;
}

template <typename T>
void collect_named(const Parameters<T>& params, const std::string& prefix,
                   std::vector<std::pair<std::string, const Tensor<T>*>>& out) {
  char buf[64];
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (!params.layers[i].w.empty()) {
      std::snprintf(buf, sizeof buf, "%slayer%02zu.weight", prefix.c_str(), i);
      out.emplace_back(buf, &params.layers[i].w);
    }
    if (!params.layers[i].b.empty()) {
      std::snprintf(buf, sizeof buf, "%slayer%02zu.bias", prefix.c_str(), i);
      out.emplace_back(buf, &params.layers[i].b);
    }
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_pod(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<std::uint16_t>(t->ndim()));
    for (std::size_t d = 0; d < t->ndim(); ++d)
      detail::write_pod(os, static_cast<std::uint32_t>(t->dim(d)));
    detail::write_pod(os, static_cast<std::uint64_t>(t->numel() * sizeof(T)));
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(t->numel() * sizeof(T)));
  }
  if (!os) throw io_error("checkpoint: write to " + path + " failed");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw io_error("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<std::uint16_t>(is);
  if (version != kCheckpointVersion)
    throw io_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::read_pod<std::uint32_t>(is);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = detail::read_pod<std::uint16_t>(is);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::uint32_t>(is);
    const auto payload = detail::read_pod<std::uint64_t>(is);
    const std::size_t numel = Tensor<T>::numel_of(shape);
    if (payload != numel * sizeof(T))
      throw io_error("checkpoint: payload length mismatch for tensor " + name);
    Tensor<T> t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(payload));
    if (!is) throw io_error("checkpoint: truncated tensor " + name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

template <typename T>
void save_split_pair(const std::string& path, const SplitPair<T>& pair) {
  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  detail::collect_named(pair.device_params, "device.", tensors);
  detail::collect_named(pair.agg_params, "agg.", tensors);
  save_checkpoint(path, tensors);
}

/// Loads values into an already-shaped pair; every named tensor must match.
template <typename T>
void load_split_pair(const std::string& path, SplitPair<T>& pair) {
  auto tensors = load_checkpoint<T>(path);
  std::vector<std::pair<std::string, const Tensor<T>*>> expected;
  detail::collect_named(pair.device_params, "device.", expected);
  detail::collect_named(pair.agg_params, "agg.", expected);
  if (expected.size() != tensors.size())
    throw io_error("checkpoint: tensor count does not match the model");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tensors[i].first != expected[i].first)
      throw io_error("checkpoint: unexpected tensor " + tensors[i].first);
    auto* dst = const_cast<Tensor<T>*>(expected[i].second);
    if (!dst->same_shape(tensors[i].second))
      throw io_error("checkpoint: shape mismatch for " + tensors[i].first);
    *dst = std::move(tensors[i].second);
  }
}

}  // namespace msl
