#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

/// Wireless hop model: power normalization, optional mid-rise quantization,
/// Rayleigh flat fading (real magnitude), AWGN, zero-forcing equalization.
/// snr_db = +inf means sigma = 0; with fading and quantization off that makes
/// the hop an exact identity (it is short-circuited, so even bitwise).
struct ChannelConfig {
  double snr_db = std::numeric_limits<double>::infinity();
  bool fading = false;
  double power = 1.0;
  bool apply_to_backward = true;
  std::size_t quant_levels = 0;  // 0 disables the quantizer; otherwise >= 2
  std::uint64_t seed = 0;
  double deep_fade_threshold = 1e-6;
  int max_retries = 5;

  bool is_identity() const {
    return !fading && quant_levels == 0 && std::isinf(snr_db) && snr_db > 0;
  }
  /// Per-real-dimension noise std from SNR = p / sigma^2.
  double sigma() const {
    if (std::isinf(snr_db) && snr_db > 0) return 0.0;
    return std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  }
  void validate() const {
    if (power <= 0) throw config_error("channel: power must be > 0");
    if (quant_levels == 1) throw config_error("channel: quant_levels must be >= 2");
    if (max_retries < 0) throw config_error("channel: max_retries must be >= 0");
  }
};

/// One transmission's fading gain and noise level. h is the Rayleigh
/// magnitude (unit mean square), constant across the payload; h = 1 with
/// fading off.
struct ChannelRealization {
  double h = 1.0;
  double sigma = 0.0;
};

struct deep_fade_error : numeric_error {
  explicit deep_fade_error(double h)
      : numeric_error("channel: deep fade, |h| = " + std::to_string(h)) {}
};

/// Scales s to mean square p. Returns the normalized tensor and the scale
/// that was multiplied in (receiver divides it back out). An all-zero tensor
/// passes through with scale 1.
template <typename T>
std::pair<Tensor<T>, double> power_normalize(const Tensor<T>& s, double p) {
  if (s.empty()) throw input_error("power_normalize: empty tensor");
  const double ms = s.mean_square();
  if (ms == 0.0) return {s, 1.0};
  const double scale = std::sqrt(p / ms);
  Tensor<T> out(s.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) out[i] = static_cast<T>(s[i] * scale);
  return {std::move(out), scale};
}

/// s' = h*s + n, n ~ N(0, sigma^2) i.i.d. per element; h and n are fresh
/// draws on every call.
template <typename T>
std::pair<Tensor<T>, ChannelRealization> transmit(const Tensor<T>& s_norm,
                                                  const ChannelConfig& cfg, Rng& rng) {
  ChannelRealization r;
  r.sigma = cfg.sigma();
  r.h = cfg.fading ? rng.rayleigh_unit() : 1.0;
  Tensor<T> out(s_norm.shape());
  if (r.sigma == 0.0 && r.h == 1.0) {
    out = s_norm;
    return {std::move(out), r};
  }
  for (std::size_t i = 0; i < s_norm.numel(); ++i) {
    const double n = r.sigma == 0.0 ? 0.0 : rng.normal(0.0, r.sigma);
    out[i] = static_cast<T>(r.h * static_cast<double>(s_norm[i]) + n);
  }
  return {std::move(out), r};
}

/// Perfect-CSI zero forcing: (s' / h) / scale. Throws deep_fade_error when
/// |h| falls under the threshold; the caller retries with a fresh
/// realization.
template <typename T>
Tensor<T> equalize(const Tensor<T>& s_prime, const ChannelRealization& r, double scale,
                   double deep_fade_threshold = 1e-6) {
  if (std::abs(r.h) < deep_fade_threshold) throw deep_fade_error(r.h);
  Tensor<T> out(s_prime.shape());
  const double inv = 1.0 / (r.h * scale);
  for (std::size_t i = 0; i < s_prime.numel(); ++i)
    out[i] = static_cast<T>(static_cast<double>(s_prime[i]) * inv);
  return out;
}

/// Uniform per-tensor mid-rise quantizer: `levels` cells over [min, max],
/// each value snapped to its cell midpoint. A tensor that already takes at
/// most `levels` distinct values (constant tensors included) passes through
/// unchanged, which makes the operation idempotent.
template <typename T>
Tensor<T> quantize(const Tensor<T>& s, std::size_t levels) {
  if (levels < 2) throw config_error("quantize: levels must be >= 2");
  if (s.empty()) return s;
  T lo = s[0], hi = s[0];
  for (std::size_t i = 1; i < s.numel(); ++i) {
    lo = std::min(lo, s[i]);
    hi = std::max(hi, s[i]);
  }
  if (lo == hi) return s;
  std::vector<T> sorted(s.data(), s.data() + s.numel());
  std::sort(sorted.begin(), sorted.end());
  std::size_t distinct = 1;
  for (std::size_t i = 1; i < sorted.size() && distinct <= levels; ++i)
    if (sorted[i] != sorted[i - 1]) ++distinct;
  if (distinct <= levels) return s;

  const double delta = (static_cast<double>(hi) - static_cast<double>(lo)) / levels;
  Tensor<T> out(s.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) {
    double cell = std::floor((static_cast<double>(s[i]) - lo) / delta);
    cell = std::clamp(cell, 0.0, static_cast<double>(levels - 1));
    out[i] = static_cast<T>(lo + (cell + 0.5) * delta);
  }
  return out;
}

/// One direction of the hop. Owns its RNG; a fixed seed pins the whole (h, n)
/// sequence.
template <typename T = float>
class Channel {
 public:
  struct Result {
    bool delivered = true;
    int retries = 0;
  };

  explicit Channel(ChannelConfig cfg) : cfg_(cfg), rng_(cfg.seed) { cfg_.validate(); }

  const ChannelConfig& config() const { return cfg_; }

  /// Full quantize -> normalize -> transmit -> equalize pipeline, in place.
  /// Identity configurations short-circuit so the tensor is untouched
  /// bitwise. On a persistent deep fade the tensor is left unchanged and
  /// delivered=false is returned; the caller skips the step.
  Result apply(Tensor<T>& s) {
    Result res;
    if (cfg_.is_identity() || s.empty()) return res;
    Tensor<T> payload = cfg_.quant_levels ? quantize(s, cfg_.quant_levels) : s;
    auto [s_norm, scale] = power_normalize(payload, cfg_.power);
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      auto [s_prime, realization] = transmit(s_norm, cfg_, rng_);
      try {
        s = equalize(s_prime, realization, scale, cfg_.deep_fade_threshold);
        res.retries = attempt;
        return res;
      } catch (const deep_fade_error&) {
        continue;
      }
    }
    res.delivered = false;
    res.retries = cfg_.max_retries;
    return res;
  }

 private:
  ChannelConfig cfg_;
  Rng rng_;
};

}  // namespace msl
