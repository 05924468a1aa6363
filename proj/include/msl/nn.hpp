#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

enum class LayerKind : std::uint8_t { Conv2d, Norm, ReLU, MaxPool, Flatten, FullyConnected };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Norm: return "norm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::FullyConnected: return "fc";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::size_t channels = 0;  // Conv2d: output channels; FullyConnected: output width
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static LayerSpec conv2d(std::size_t ch, std::size_t k = 3, std::size_t s = 2,
                          std::size_t p = 1) {
    return {LayerKind::Conv2d, ch, k, s, p};
  }
  static LayerSpec norm() { return {LayerKind::Norm}; }
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec maxpool(std::size_t k = 2, std::size_t s = 1, std::size_t p = 0) {
    return {LayerKind::MaxPool, 0, k, s, p};
  }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }
  static LayerSpec fc(std::size_t width) { return {LayerKind::FullyConnected, width}; }
};

/// Ordered layer stack plus the fixed input geometry (channels, height, width).
struct ModelConfig {
  std::vector<LayerSpec> layers;
  std::array<std::size_t, 3> input_shape{1, 28, 28};
  std::size_t num_classes = 10;

  /// conv_blocks x [Conv2d(ch) -> Norm -> ReLU -> MaxPool] -> Flatten ->
  /// FC(fc_width) -> ReLU -> FC(fc_width) -> ReLU -> FC(Y).
  static ModelConfig default_stack(std::size_t num_classes, std::size_t conv_channels = 64,
                                   std::size_t conv_blocks = 3, std::size_t fc_width = 64) {
    ModelConfig cfg;
    cfg.num_classes = num_classes;
    for (std::size_t i = 0; i < conv_blocks; ++i) {
      cfg.layers.push_back(LayerSpec::conv2d(conv_channels));
      cfg.layers.push_back(LayerSpec::norm());
      cfg.layers.push_back(LayerSpec::relu());
      cfg.layers.push_back(LayerSpec::maxpool());
    }
    cfg.layers.push_back(LayerSpec::flatten());
    cfg.layers.push_back(LayerSpec::fc(fc_width));
    cfg.layers.push_back(LayerSpec::relu());
    cfg.layers.push_back(LayerSpec::fc(fc_width));
    cfg.layers.push_back(LayerSpec::relu());
    cfg.layers.push_back(LayerSpec::fc(num_classes));
    return cfg;
  }
};

inline std::size_t conv_out_extent(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
  if (n + 2 * p < k) throw config_error("layer kernel larger than padded input");
  return (n + 2 * p - k) / s + 1;
}

/// Output shape of every layer, without the batch extent. Spatial layers give
/// (C,H,W); Flatten and FullyConnected give (F). Also validates the config.
inline std::vector<std::vector<std::size_t>> layer_shapes(const ModelConfig& cfg) {
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::size_t> cur{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        if (cur.size() != 3) throw config_error("conv2d requires a (C,H,W) input");
        if (l.channels == 0 || l.kernel == 0 || l.stride == 0)
          throw config_error("conv2d hyperparameters must be strictly positive");
        cur = {l.channels, conv_out_extent(cur[1], l.kernel, l.stride, l.padding),
               conv_out_extent(cur[2], l.kernel, l.stride, l.padding)};
        break;
      case LayerKind::Norm:
      case LayerKind::ReLU:
        break;
      case LayerKind::MaxPool:
        if (cur.size() != 3) throw config_error("maxpool requires a (C,H,W) input");
        if (l.kernel == 0 || l.stride == 0)
          throw config_error("maxpool hyperparameters must be strictly positive");
        cur = {cur[0], conv_out_extent(cur[1], l.kernel, l.stride, l.padding),
               conv_out_extent(cur[2], l.kernel, l.stride, l.padding)};
        break;
      case LayerKind::Flatten:
        if (cur.size() != 3) throw config_error("flatten requires a (C,H,W) input");
        cur = {cur[0] * cur[1] * cur[2]};
        break;
      case LayerKind::FullyConnected:
        if (cur.size() != 1) throw config_error("fc requires a flat input");
        if (l.channels == 0) throw config_error("fc width must be strictly positive");
        cur = {l.channels};
        break;
    }
    shapes.push_back(cur);
  }
  if (shapes.empty()) throw config_error("model has no layers");
  if (shapes.back().size() != 1 || shapes.back()[0] != cfg.num_classes)
    throw config_error("final layer must produce exactly num_classes logits");
  return shapes;
}

template <typename T>
struct LayerParams {
  Tensor<T> w;  // conv: (Cout,Cin,k,k); fc: (out,in); norm: scale (C)
  Tensor<T> b;  // conv/fc: (out); norm: shift (C)

  bool has_params() const { return !w.empty() || !b.empty(); }
};

/// Per-layer weight/bias (or scale/shift) tensors; slots for parameter-free
/// layers stay empty so indices line up with ModelConfig::layers.
template <typename T>
struct Parameters {
  std::vector<LayerParams<T>> layers;

  template <typename F>
  void for_each_tensor(F&& f) {
    for (auto& lp : layers) {
      if (!lp.w.empty()) f(lp.w);
      if (!lp.b.empty()) f(lp.b);
    }
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    for (const auto& lp : layers) {
      if (!lp.w.empty()) f(lp.w);
      if (!lp.b.empty()) f(lp.b);
    }
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each_tensor([&](const Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const Tensor<T>& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  /// FNV-1a over the raw little-endian value bytes in layer order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for_each_tensor([&](const Tensor<T>& t) { h = fnv1a64(t.data(), t.numel() * sizeof(T), h); });
    return h;
  }

  /// All values concatenated in layer order (wire/param-sync payload).
  Tensor<T> flattened() const {
    std::vector<T> out;
    out.reserve(count());
    for_each_tensor([&](const Tensor<T>& t) { out.insert(out.end(), t.data(), t.data() + t.numel()); });
    const std::size_t n = out.size();  // read before the move: arg order is unspecified
    return Tensor<T>::from_data({n}, std::move(out));
  }

  void load_flattened(const Tensor<T>& flat) {
    if (flat.numel() != count()) throw invariant_error("param blob size mismatch");
    std::size_t off = 0;
    for_each_tensor([&](Tensor<T>& t) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = flat[off + i];
      off += t.numel();
    });
  }
};

template <typename T>
using Gradients = Parameters<T>;

/// Kaiming-uniform fan-in init for conv/FC weights, zeros for biases,
/// ones/zeros for norm scale/shift. Draw order is fixed, so a seed pins every
/// value bitwise.
template <typename T = float>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  const auto shapes = layer_shapes(cfg);
  Parameters<T> params;
  params.layers.resize(cfg.layers.size());
  Rng rng(seed);
  std::vector<std::size_t> in{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    LayerParams<T>& lp = params.layers[i];
    if (l.kind == LayerKind::Conv2d) {
      const std::size_t fan_in = in[0] * l.kernel * l.kernel;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      lp.w = Tensor<T>({l.channels, in[0], l.kernel, l.kernel});
      for (std::size_t j = 0; j < lp.w.numel(); ++j)
        lp.w[j] = static_cast<T>(rng.uniform(-bound, bound));
      lp.b = Tensor<T>({l.channels});
    } else if (l.kind == LayerKind::FullyConnected) {
      const std::size_t fan_in = in[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      lp.w = Tensor<T>({l.channels, fan_in});
      for (std::size_t j = 0; j < lp.w.numel(); ++j)
        lp.w[j] = static_cast<T>(rng.uniform(-bound, bound));
      lp.b = Tensor<T>({l.channels});
    } else if (l.kind == LayerKind::Norm) {
      lp.w = Tensor<T>({in[0]}, T(1));
      lp.b = Tensor<T>({in[0]}, T(0));
    }
    in = shapes[i];
  }
  return params;
}

template <typename T>
Gradients<T> zero_like(const Parameters<T>& params) {
  Gradients<T> g;
  g.layers.resize(params.layers.size());
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (!params.layers[i].w.empty()) g.layers[i].w = Tensor<T>(params.layers[i].w.shape());
    if (!params.layers[i].b.empty()) g.layers[i].b = Tensor<T>(params.layers[i].b.shape());
  }
  return g;
}

template <typename T>
void accumulate(Gradients<T>& into, const Gradients<T>& from) {
  if (into.layers.size() != from.layers.size()) throw invariant_error("gradient layer mismatch");
  for (std::size_t i = 0; i < into.layers.size(); ++i) {
    for (std::size_t j = 0; j < into.layers[i].w.numel(); ++j)
      into.layers[i].w[j] += from.layers[i].w[j];
    for (std::size_t j = 0; j < into.layers[i].b.numel(); ++j)
      into.layers[i].b[j] += from.layers[i].b[j];
  }
}

namespace detail {

// C(M,N) += A(M,K) * B(K,N); the i-k-j order keeps the inner loop contiguous.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T
template <typename T>
void matmul_abt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    T* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] += s;
    }
  }
}

// C(K,N) += A(M,K)^T * B(M,N)
template <typename T>
void matmul_atb_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    const T* br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      T* cr = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// One image: (Cin,H,W) -> columns (Cin*k*k, Ho*Wo). Out-of-bounds taps are zero.
template <typename T>
void im2col(const T* img, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t s, std::size_t p, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t patch = ho * wo;
  for (std::size_t c = 0; c < cin; ++c) {
    const T* plane = img + c * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * patch;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * s + ki) -
                                    static_cast<std::ptrdiff_t>(p);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) {
            for (std::size_t oj = 0; oj < wo; ++oj) row[oi * wo + oj] = 0;
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ii) * w;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * s + kj) -
                                      static_cast<std::ptrdiff_t>(p);
            row[oi * wo + oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w))
                                    ? T(0)
                                    : src[static_cast<std::size_t>(jj)];
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back to the (Cin,H,W) image.
template <typename T>
void col2im_acc(const T* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                std::size_t s, std::size_t p, std::size_t ho, std::size_t wo, T* img) {
  const std::size_t patch = ho * wo;
  for (std::size_t c = 0; c < cin; ++c) {
    T* plane = img + c * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * patch;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * s + ki) -
                                    static_cast<std::ptrdiff_t>(p);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(ii) * w;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * s + kj) -
                                      static_cast<std::ptrdiff_t>(p);
            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(w))
              dst[static_cast<std::size_t>(jj)] += row[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Everything backward needs about one layer's forward evaluation.
template <typename T>
struct LayerTrace {
  Tensor<T> output;
  // Norm only: per-channel statistics and the normalized input.
  std::vector<T> inv_std;
  Tensor<T> xhat;
  // MaxPool only: flat input index of the (first) maximal element per output.
  std::vector<std::uint32_t> argmax;
};

template <typename T>
struct ActivationTrace {
  Tensor<T> input;  // the batch, as fed to layer 0
  std::vector<LayerTrace<T>> layers;

  const Tensor<T>& logits() const { return layers.back().output; }
  const Tensor<T>& layer_input(std::size_t i) const {
    return i == 0 ? input : layers[i - 1].output;
  }
};

inline constexpr double kNormVarianceFloor = 1e-5;

namespace detail {

template <typename T>
void conv_forward(const LayerSpec& l, const LayerParams<T>& lp, const Tensor<T>& in,
                  Tensor<T>& out, std::vector<T>& cols) {
  const std::size_t b = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = conv_out_extent(h, l.kernel, l.stride, l.padding);
  const std::size_t wo = conv_out_extent(w, l.kernel, l.stride, l.padding);
  const std::size_t cout = l.channels, kk = cin * l.kernel * l.kernel, patch = ho * wo;
  out = Tensor<T>({b, cout, ho, wo});
  cols.assign(kk * patch, T(0));
  for (std::size_t bi = 0; bi < b; ++bi) {
    im2col(in.data() + bi * cin * h * w, cin, h, w, l.kernel, l.stride, l.padding, ho, wo,
           cols.data());
    T* dst = out.data() + bi * cout * patch;
    matmul_acc(lp.w.data(), cols.data(), dst, cout, kk, patch);
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const T bias = lp.b[oc];
      T* row = dst + oc * patch;
      for (std::size_t j = 0; j < patch; ++j) row[j] += bias;
    }
  }
}

template <typename T>
void conv_backward(const LayerSpec& l, const LayerParams<T>& lp, const Tensor<T>& in,
                   const Tensor<T>& grad_out, LayerParams<T>& grad_lp, Tensor<T>& grad_in,
                   std::vector<T>& cols, std::vector<T>& gcols) {
  const std::size_t b = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = grad_out.dim(2), wo = grad_out.dim(3);
  const std::size_t cout = l.channels, kk = cin * l.kernel * l.kernel, patch = ho * wo;
  grad_in = Tensor<T>({b, cin, h, w});
  cols.assign(kk * patch, T(0));
  gcols.assign(kk * patch, T(0));
  for (std::size_t bi = 0; bi < b; ++bi) {
    const T* go = grad_out.data() + bi * cout * patch;
    im2col(in.data() + bi * cin * h * w, cin, h, w, l.kernel, l.stride, l.padding, ho, wo,
           cols.data());
    // dW += dY * cols^T ; db += row sums of dY
    matmul_abt_acc(go, cols.data(), grad_lp.w.data(), cout, patch, kk);
    for (std::size_t oc = 0; oc < cout; ++oc) {
      T s = 0;
      const T* row = go + oc * patch;
      for (std::size_t j = 0; j < patch; ++j) s += row[j];
      grad_lp.b[oc] += s;
    }
    // dcols = W^T * dY, then scatter back to the input image
    std::fill(gcols.begin(), gcols.end(), T(0));
    matmul_atb_acc(lp.w.data(), go, gcols.data(), cout, kk, patch);
    col2im_acc(gcols.data(), cin, h, w, l.kernel, l.stride, l.padding, ho, wo,
               grad_in.data() + bi * cin * h * w);
  }
}

}  // namespace detail

/// Full forward pass; the trace retains per-layer outputs (plus norm/pool
/// bookkeeping) so backward() can run without recomputation.
template <typename T>
ActivationTrace<T> forward(const Parameters<T>& params, const ModelConfig& cfg,
                           const Tensor<T>& batch) {
  if (batch.ndim() != 4 || batch.dim(0) < 1 || batch.dim(1) != cfg.input_shape[0] ||
      batch.dim(2) != cfg.input_shape[1] || batch.dim(3) != cfg.input_shape[2])
    throw config_error("forward: batch shape " + batch.shape_str() + " does not match model input");
  if (params.layers.size() != cfg.layers.size())
    throw config_error("forward: parameters do not match model config");
  const std::size_t b = batch.dim(0);

  ActivationTrace<T> trace;
  trace.input = batch;
  trace.layers.resize(cfg.layers.size());
  std::vector<T> cols;

  const Tensor<T>* cur = &trace.input;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& l = cfg.layers[i];
    const LayerParams<T>& lp = params.layers[i];
    LayerTrace<T>& lt = trace.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        detail::conv_forward(l, lp, *cur, lt.output, cols);
        break;
      case LayerKind::Norm: {
        // Batch statistics only, over (B,H,W) per channel (or B per feature).
        const Tensor<T>& x = *cur;
        const bool spatial = x.ndim() == 4;
        const std::size_t ch = spatial ? x.dim(1) : x.dim(1);
        const std::size_t plane = spatial ? x.dim(2) * x.dim(3) : 1;
        const std::size_t n = b * plane;
        lt.output = Tensor<T>(x.shape());
        lt.xhat = Tensor<T>(x.shape());
        lt.inv_std.resize(ch);
        for (std::size_t c = 0; c < ch; ++c) {
          double mean = 0;
          for (std::size_t bi = 0; bi < b; ++bi) {
            const T* src = x.data() + (bi * ch + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) mean += src[j];
          }
          mean /= static_cast<double>(n);
          double var = 0;
          for (std::size_t bi = 0; bi < b; ++bi) {
            const T* src = x.data() + (bi * ch + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              const double d = src[j] - mean;
              var += d * d;
            }
          }
          var /= static_cast<double>(n);
          const T inv_std = static_cast<T>(1.0 / std::sqrt(var + kNormVarianceFloor));
          lt.inv_std[c] = inv_std;
          const T mu = static_cast<T>(mean), scale = lp.w[c], shift = lp.b[c];
          for (std::size_t bi = 0; bi < b; ++bi) {
            const T* src = x.data() + (bi * ch + c) * plane;
            T* xh = lt.xhat.data() + (bi * ch + c) * plane;
            T* dst = lt.output.data() + (bi * ch + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              xh[j] = (src[j] - mu) * inv_std;
              dst[j] = scale * xh[j] + shift;
            }
          }
        }
        break;
      }
      case LayerKind::ReLU: {
        lt.output = Tensor<T>(cur->shape());
        const T* src = cur->data();
        T* dst = lt.output.data();
        for (std::size_t j = 0; j < cur->numel(); ++j) dst[j] = src[j] > T(0) ? src[j] : T(0);
        break;
      }
      case LayerKind::MaxPool: {
        const Tensor<T>& x = *cur;
        const std::size_t ch = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t ho = conv_out_extent(h, l.kernel, l.stride, l.padding);
        const std::size_t wo = conv_out_extent(w, l.kernel, l.stride, l.padding);
        lt.output = Tensor<T>({b, ch, ho, wo});
        lt.argmax.resize(b * ch * ho * wo);
        std::size_t oidx = 0;
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t c = 0; c < ch; ++c) {
            const T* plane = x.data() + (bi * ch + c) * h * w;
            for (std::size_t oi = 0; oi < ho; ++oi) {
              for (std::size_t oj = 0; oj < wo; ++oj, ++oidx) {
                T best{};
                std::uint32_t best_idx = 0;
                bool first = true;
                for (std::size_t ki = 0; ki < l.kernel; ++ki) {
                  const std::size_t ii = oi * l.stride + ki;
                  for (std::size_t kj = 0; kj < l.kernel; ++kj) {
                    const std::size_t jj = oj * l.stride + kj;
                    const T v = plane[ii * w + jj];
                    // Strict > keeps the first maximal element in scan order.
                    if (first || v > best) {
                      best = v;
                      best_idx = static_cast<std::uint32_t>(ii * w + jj);
                      first = false;
                    }
                  }
                }
                lt.output[oidx] = best;
                lt.argmax[oidx] = best_idx;
              }
            }
          }
        }
        break;
      }
      case LayerKind::Flatten:
        lt.output = cur->reshaped({b, cur->numel() / b});
        break;
      case LayerKind::FullyConnected: {
        const Tensor<T>& x = *cur;
        const std::size_t fin = x.dim(1), fout = l.channels;
        if (lp.w.dim(1) != fin) throw config_error("fc: weight/input width mismatch");
        lt.output = Tensor<T>({b, fout});
        detail::matmul_abt_acc(x.data(), lp.w.data(), lt.output.data(), b, fin, fout);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t o = 0; o < fout; ++o) lt.output.at2(bi, o) += lp.b[o];
        break;
      }
    }
    cur = &lt.output;
  }
  if (!trace.logits().all_finite()) throw numeric_error("forward produced non-finite logits");
  return trace;
}

/// Exact reverse-mode pass. Returns the gradient of every parameter and the
/// gradient with respect to the input batch (the latter is what crosses the
/// cut in split mode).
template <typename T>
std::pair<Gradients<T>, Tensor<T>> backward(const Parameters<T>& params, const ModelConfig& cfg,
                                            const ActivationTrace<T>& trace,
                                            const Tensor<T>& grad_logits) {
  if (trace.layers.size() != cfg.layers.size())
    throw invariant_error("backward: trace does not match model config");
  if (!grad_logits.same_shape(trace.logits()))
    throw invariant_error("backward: grad_logits shape " + grad_logits.shape_str() +
                          " does not match logits " + trace.logits().shape_str());
  Gradients<T> grads = zero_like(params);
  Tensor<T> grad = grad_logits;
  std::vector<T> cols, gcols;
  const std::size_t b = trace.input.dim(0);

  for (std::size_t ri = cfg.layers.size(); ri-- > 0;) {
    const LayerSpec& l = cfg.layers[ri];
    const LayerParams<T>& lp = params.layers[ri];
    const LayerTrace<T>& lt = trace.layers[ri];
    const Tensor<T>& in = trace.layer_input(ri);
    Tensor<T> grad_in;
    switch (l.kind) {
      case LayerKind::Conv2d:
        detail::conv_backward(l, lp, in, grad, grads.layers[ri], grad_in, cols, gcols);
        break;
      case LayerKind::Norm: {
        const bool spatial = in.ndim() == 4;
        const std::size_t ch = in.dim(1);
        const std::size_t plane = spatial ? in.dim(2) * in.dim(3) : 1;
        const std::size_t n = b * plane;
        grad_in = Tensor<T>(in.shape());
        for (std::size_t c = 0; c < ch; ++c) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t bi = 0; bi < b; ++bi) {
            const T* dy = grad.data() + (bi * ch + c) * plane;
            const T* xh = lt.xhat.data() + (bi * ch + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              sum_dy += dy[j];
              sum_dy_xhat += dy[j] * xh[j];
            }
          }
          grads.layers[ri].w[c] += static_cast<T>(sum_dy_xhat);
          grads.layers[ri].b[c] += static_cast<T>(sum_dy);
          const T scale = lp.w[c], inv_std = lt.inv_std[c];
          const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(n));
          const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(n));
          for (std::size_t bi = 0; bi < b; ++bi) {
            const T* dy = grad.data() + (bi * ch + c) * plane;
            const T* xh = lt.xhat.data() + (bi * ch + c) * plane;
            T* dx = grad_in.data() + (bi * ch + c) * plane;
            for (std::size_t j = 0; j < plane; ++j)
              dx[j] = scale * inv_std * (dy[j] - mean_dy - xh[j] * mean_dy_xhat);
          }
        }
        break;
      }
      case LayerKind::ReLU: {
        grad_in = Tensor<T>(in.shape());
        const T* dy = grad.data();
        const T* y = lt.output.data();
        T* dx = grad_in.data();
        for (std::size_t j = 0; j < in.numel(); ++j) dx[j] = y[j] > T(0) ? dy[j] : T(0);
        break;
      }
      case LayerKind::MaxPool: {
        const std::size_t ch = in.dim(1), h = in.dim(2), w = in.dim(3);
        grad_in = Tensor<T>(in.shape());
        const std::size_t patch = lt.output.dim(2) * lt.output.dim(3);
        std::size_t oidx = 0;
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t c = 0; c < ch; ++c) {
            T* dst = grad_in.data() + (bi * ch + c) * h * w;
            for (std::size_t j = 0; j < patch; ++j, ++oidx) dst[lt.argmax[oidx]] += grad[oidx];
          }
        }
        break;
      }
      case LayerKind::Flatten:
        grad_in = grad.reshaped(in.shape());
        break;
      case LayerKind::FullyConnected: {
        const std::size_t fin = in.dim(1), fout = l.channels;
        grad_in = Tensor<T>({b, fin});
        // dX = dY * W ; dW += dY^T * X ; db += column sums of dY
        detail::matmul_acc(grad.data(), lp.w.data(), grad_in.data(), b, fout, fin);
        detail::matmul_atb_acc(grad.data(), in.data(), grads.layers[ri].w.data(), b, fout, fin);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t o = 0; o < fout; ++o) grads.layers[ri].b[o] += grad.at2(bi, o);
        break;
      }
    }
    grad = std::move(grad_in);
  }
  return {std::move(grads), std::move(grad)};
}

/// Mean softmax cross-entropy over the batch and its logit gradient
/// (softmax - onehot)/B.
template <typename T>
std::pair<double, Tensor<T>> loss_softmax_ce(const Tensor<T>& logits,
                                             const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw input_error("loss: logits must be (B,Y)");
  const std::size_t b = logits.dim(0), y = logits.dim(1);
  if (labels.size() != b) throw input_error("loss: one label per row required");
  Tensor<T> grad({b, y});
  double loss = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    const int label = labels[bi];
    if (label < 0 || static_cast<std::size_t>(label) >= y)
      throw input_error("loss: label " + std::to_string(label) + " out of range [0," +
                        std::to_string(y) + ")");
    const T* row = logits.data() + bi * y;
    T mx = row[0];
    for (std::size_t j = 1; j < y; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (std::size_t j = 0; j < y; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double log_denom = std::log(denom);
    loss += log_denom - static_cast<double>(row[label] - mx);
    for (std::size_t j = 0; j < y; ++j) {
      const double p = std::exp(static_cast<double>(row[j] - mx)) / denom;
      grad.at2(bi, j) = static_cast<T>((p - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0)) /
                                       static_cast<double>(b));
    }
  }
  return {loss / static_cast<double>(b), std::move(grad)};
}

/// Row-wise softmax probabilities.
template <typename T>
Tensor<double> softmax_probs(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), y = logits.dim(1);
  Tensor<double> probs({b, y});
  for (std::size_t bi = 0; bi < b; ++bi) {
    const T* row = logits.data() + bi * y;
    T mx = row[0];
    for (std::size_t j = 1; j < y; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (std::size_t j = 0; j < y; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < y; ++j)
      probs.at2(bi, j) = std::exp(static_cast<double>(row[j] - mx)) / denom;
  }
  return probs;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), y = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const T* row = logits.data() + bi * y;
    std::size_t best = 0;
    for (std::size_t j = 1; j < y; ++j)
      if (row[j] > row[best]) best = j;
    out[bi] = static_cast<int>(best);
  }
  return out;
}

}  // namespace msl
