#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "msl/nn.hpp"
#include "msl/rng.hpp"

namespace msl {

struct GradCheckOptions {
  std::size_t batch = 2;
  std::size_t sample_params = 200;  // coordinates to finite-difference (all if fewer)
  double epsilon = 1e-5;
  // Fraction of input pixels forced to an exact zero, and the value used to
  // nudge them back off zero. Sparse inputs reproduce the pool ties a glyph
  // image creates; a nonzero nudge removes them again.
  double sparsify = 0.0;
  double nudge = 0.0;
};

/// Worst relative error between analytic gradients and central finite
/// differences of the cross-entropy loss, over a seeded random model, batch,
/// and coordinate subsample. Runs in double precision.
inline double grad_check(const ModelConfig& cfg, std::uint64_t seed, GradCheckOptions opt = {}) {
  Rng rng(seed);
  Parameters<double> params = init_parameters<double>(cfg, derive_seed(seed, 1));

  Tensor<double> batch({opt.batch, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = rng.uniform();
  if (opt.sparsify > 0.0)
    for (std::size_t i = 0; i < batch.numel(); ++i)
      if (rng.uniform() < opt.sparsify) batch[i] = 0.0;
  if (opt.nudge != 0.0)
    for (std::size_t i = 0; i < batch.numel(); ++i)
      if (batch[i] == 0.0) batch[i] = opt.nudge;

  std::vector<int> labels(opt.batch);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_int(cfg.num_classes));

  auto eval_loss = [&]() {
    const auto trace = forward(params, cfg, batch);
    return loss_softmax_ce(trace.logits(), labels).first;
  };

  const auto trace = forward(params, cfg, batch);
  const auto [loss, grad_logits] = loss_softmax_ce(trace.logits(), labels);
  (void)loss;
  auto [grads, grad_in] = backward(params, cfg, trace, grad_logits);
  (void)grad_in;

  // Flat list of (layer, tensor, element) coordinates.
  struct Coord {
    std::size_t layer;
    bool bias;
    std::size_t idx;
  };
  std::vector<Coord> coords;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    for (std::size_t j = 0; j < params.layers[i].w.numel(); ++j) coords.push_back({i, false, j});
    for (std::size_t j = 0; j < params.layers[i].b.numel(); ++j) coords.push_back({i, true, j});
  }
  if (coords.size() > opt.sample_params) {
    rng.shuffle(coords);
    coords.resize(opt.sample_params);
  }

  const double mid = eval_loss();
  double worst = 0.0;
  for (const Coord& c : coords) {
    double& p = c.bias ? params.layers[c.layer].b[c.idx] : params.layers[c.layer].w[c.idx];
    const double analytic = c.bias ? grads.layers[c.layer].b[c.idx] : grads.layers[c.layer].w[c.idx];
    const double saved = p;
    double eps = opt.epsilon;
    double best = std::numeric_limits<double>::infinity();
    for (int attempt = 0;; ++attempt) {
      p = saved + eps;
      const double up = eval_loss();
      p = saved - eps;
      const double down = eval_loss();
      p = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double denom = std::max(std::abs(analytic), std::abs(fd));
      const double err =
          denom < 1e-10 ? std::abs(analytic - fd) : std::abs(analytic - fd) / denom;
      best = std::min(best, err);  // a wrong gradient stays wrong at every eps
      // Central differences are only valid where the loss is smooth across the
      // whole interval. A pool argmax or relu flip inside [p-eps, p+eps] makes
      // the two one-sided slopes disagree; shrink the interval and retry.
      // Slopes at round-off scale (e.g. conv biases erased by the following
      // normalization) are noise, not kinks: shrinking would only amplify them.
      const double su = (up - mid) / eps;
      const double sd = (mid - down) / eps;
      const double scale = std::max(std::abs(su), std::abs(sd));
      const bool kink = scale >= 1e-8 && std::abs(su - sd) / scale >= 0.05;
      if (!kink || attempt == 2) break;
      eps /= 10.0;
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace msl
