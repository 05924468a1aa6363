#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msl/rng.hpp"
#include "msl/tensor.hpp"

namespace msl {

/// Few-shot image pool: `per_class` examples for each class, every image a
/// (1, H, W) float tensor with ink = 1 on background = 0.
struct Dataset {
  std::size_t image_h = 28;
  std::size_t image_w = 28;
  std::size_t per_class = 0;  // examples available per class (M)
  std::vector<std::string> class_names;
  std::vector<Tensor<float>> images;  // class-major: [c * per_class + m]

  std::size_t num_classes() const { return class_names.size(); }

  const Tensor<float>& image(std::size_t cls, std::size_t m) const {
    if (cls >= num_classes() || m >= per_class)
      throw input_error("dataset: image index out of range");
    return images[cls * per_class + m];
  }

  void validate() const {
    if (per_class == 0 || num_classes() == 0)
      throw input_error("dataset: empty");
    if (images.size() != num_classes() * per_class)
      throw invariant_error("dataset: image count mismatch");
    for (const auto& im : images) {
      if (im.shape() != std::vector<std::size_t>{1, image_h, image_w})
        throw invariant_error("dataset: image shape mismatch");
    }
  }
};

/// Procedural glyph classes. Each class is a fixed set of random polyline
/// strokes; each instance re-renders them under small per-point jitter and a
/// global rotation/scale/translation. Fully determined by the seed.
struct GlyphGenConfig {
  std::size_t num_classes = 50;
  std::size_t per_class = 20;
  std::size_t image_size = 28;
  std::size_t strokes_min = 2;
  std::size_t strokes_max = 4;
  std::size_t points_min = 3;
  std::size_t points_max = 6;
  double jitter = 0.05;      // per-point displacement, fraction of the canvas
  double thickness = 1.1;    // stroke radius in pixels
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes == 0 || per_class == 0 || image_size == 0)
      throw config_error("glyphs: num_classes, per_class, image_size must be > 0");
    if (strokes_min == 0 || strokes_min > strokes_max)
      throw config_error("glyphs: bad stroke range");
    if (points_min < 2 || points_min > points_max)
      throw config_error("glyphs: bad point range");
    if (jitter < 0 || thickness <= 0)
      throw config_error("glyphs: jitter must be >= 0, thickness > 0");
  }
};

namespace detail {

struct P2 {
  double x = 0, y = 0;
};

inline double segment_distance(P2 p, P2 a, P2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 == 0 ? 0.0 : ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx), ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

/// Renders polylines (canvas coordinates) with a soft-edged round pen.
inline void rasterize_strokes(const std::vector<std::vector<P2>>& strokes, double radius,
                              Tensor<float>& out) {
  const std::size_t h = out.shape()[1], w = out.shape()[2];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const P2 p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
      double ink = 0.0;
      for (const auto& s : strokes) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
          const double d = segment_distance(p, s[i], s[i + 1]);
          ink = std::max(ink, std::clamp(1.0 - (d - radius) * 1.5, 0.0, 1.0));
        }
      }
      out[(y * w) + x] = static_cast<float>(ink);
    }
  }
}

}  // namespace detail

/// Generates the full synthetic pool. Class prototypes come from a seed
/// derived per class, instance jitter from a seed derived per (class,
/// instance), so any slice of the dataset is reproducible in isolation.
inline Dataset synth_glyphs(const GlyphGenConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.image_h = ds.image_w = cfg.image_size;
  ds.per_class = cfg.per_class;
  ds.class_names.reserve(cfg.num_classes);
  ds.images.reserve(cfg.num_classes * cfg.per_class);
  const double canvas = static_cast<double>(cfg.image_size);

  for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
    ds.class_names.push_back("glyph_" + std::to_string(cls));
    Rng proto_rng(derive_seed(cfg.seed, 0x67779, cls));
    const std::size_t n_strokes =
        cfg.strokes_min + proto_rng.uniform_int(cfg.strokes_max - cfg.strokes_min + 1);
    std::vector<std::vector<detail::P2>> proto(n_strokes);
    for (auto& stroke : proto) {
      const std::size_t n_pts =
          cfg.points_min + proto_rng.uniform_int(cfg.points_max - cfg.points_min + 1);
      stroke.resize(n_pts);
      for (auto& p : stroke) {
        p.x = proto_rng.uniform(0.15, 0.85);
        p.y = proto_rng.uniform(0.15, 0.85);
      }
    }

    for (std::size_t m = 0; m < cfg.per_class; ++m) {
      Rng rng(derive_seed(cfg.seed, cls + 1, m));
      const double angle = rng.uniform(-0.15, 0.15);
      const double scale = rng.uniform(0.9, 1.1);
      const double tx = rng.uniform(-0.05, 0.05), ty = rng.uniform(-0.05, 0.05);
      const double ca = std::cos(angle) * scale, sa = std::sin(angle) * scale;
      std::vector<std::vector<detail::P2>> strokes = proto;
      for (auto& stroke : strokes) {
        for (auto& p : stroke) {
          const double jx = rng.normal(0.0, cfg.jitter), jy = rng.normal(0.0, cfg.jitter);
          const double cx = p.x - 0.5 + jx, cy = p.y - 0.5 + jy;
          p.x = (ca * cx - sa * cy + 0.5 + tx) * canvas;
          p.y = (sa * cx + ca * cy + 0.5 + ty) * canvas;
        }
      }
      Tensor<float> img({1, cfg.image_size, cfg.image_size});
      detail::rasterize_strokes(strokes, cfg.thickness, img);
      ds.images.push_back(std::move(img));
    }
  }
  ds.validate();
  return ds;
}

/// Disjoint class-index pools for meta-training and meta-testing. The split
/// is a seeded shuffle; test_fraction in [0, 1) (0 puts every class in the
/// training pool).
struct ClassPools {
  std::vector<std::size_t> meta_train;
  std::vector<std::size_t> meta_test;
};

inline ClassPools split_pools(std::size_t num_classes, double test_fraction,
                              std::uint64_t seed) {
  if (num_classes == 0) throw input_error("split_pools: no classes");
  if (test_fraction < 0 || test_fraction >= 1)
    throw config_error("split_pools: test_fraction must be in [0, 1)");
  std::vector<std::size_t> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5917));
  rng.shuffle(order);
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * num_classes));
  if (test_fraction > 0 && n_test == 0) n_test = 1;
  if (n_test >= num_classes) n_test = num_classes - 1;
  ClassPools pools;
  pools.meta_test.assign(order.begin(), order.begin() + n_test);
  pools.meta_train.assign(order.begin() + n_test, order.end());
  return pools;
}

}  // namespace msl
