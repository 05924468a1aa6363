#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "msl/meta.hpp"
#include "msl/optim.hpp"

using namespace msl;

namespace {

// Desk-scale fixture: small glyph pool, small model, shared across cases.
struct Fixture {
  Dataset ds;
  std::vector<std::size_t> pool;
  ModelConfig model;

  Fixture() {
    GlyphGenConfig gc;
    gc.num_classes = 10;
    gc.per_class = 8;
    gc.image_size = 16;
    gc.seed = 42;
    ds = synth_glyphs(gc);
    pool.resize(ds.num_classes());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    model = ModelConfig::default_stack(3, 6, 2, 12);
    model.input_shape = {1, 16, 16};
  }

  MetaConfig config() const {
    MetaConfig mc;
    mc.tasks_per_epoch = 2;
    mc.ways = 3;
    mc.shots = 2;
    mc.query = 3;
    mc.inner_steps = 1;
    mc.eta = 0.05;
    mc.beta = 0.02;
    mc.epochs = 2;
    mc.seed = 7;
    return mc;
  }
};

ChannelConfig dead_channel() {
  ChannelConfig cfg;
  cfg.fading = true;
  cfg.deep_fade_threshold = 1e9;  // every realization is a deep fade
  cfg.max_retries = 1;
  return cfg;
}

}  // namespace

TEST_CASE("meta config validation") {
  MetaConfig mc;
  mc.validate();
  mc.inner_steps = 0;
  CHECK_THROWS_AS(mc.validate(), config_error);
  mc.inner_steps = 1;
  mc.first_order = false;
  CHECK_THROWS_WITH_AS(mc.validate(),
                       "second-order meta-gradients are not implemented; set first_order=true",
                       config_error);
  mc.first_order = true;
  mc.shots = 5;
  mc.query = 16;
  CHECK_THROWS_AS(mc.validate(20), config_error);  // 5 + 16 > 20
  mc.query = 15;
  mc.validate(20);
}

TEST_CASE("task sampling draws distinct classes deterministically") {
  std::vector<std::size_t> pool{3, 5, 8, 11, 12, 20};
  Rng r1(9), r2(9);
  const Task a = sample_task(pool, 4, 1, r1);
  const Task b = sample_task(pool, 4, 1, r2);
  CHECK(a.classes == b.classes);
  CHECK(a.classes.size() == 4);
  std::set<std::size_t> s(a.classes.begin(), a.classes.end());
  CHECK(s.size() == 4);
  for (auto c : a.classes) CHECK(std::count(pool.begin(), pool.end(), c) == 1);
  Rng r3(9);
  CHECK_THROWS_AS(sample_task(pool, 7, 0, r3), config_error);
}

TEST_CASE("episodes relabel to 0..Y-1 and keep support/query disjoint") {
  Fixture fx;
  Rng rng(3);
  const Task task = sample_task(fx.pool, 3, 0, rng);
  const Episode ep = sample_episode(fx.ds, task, 3, 5, rng);  // 3 + 5 == per_class
  CHECK(ep.support_x.dim(0) == 9);
  CHECK(ep.query_x.dim(0) == 15);
  CHECK(ep.support_y.size() == 9);
  for (int y : ep.support_y) CHECK((y >= 0 && y < 3));
  for (int y : ep.query_y) CHECK((y >= 0 && y < 3));

  // With shots + query == per_class, each class instance appears exactly once
  // across support and query: pixel-sum equality against the raw pool.
  const std::size_t px = fx.ds.image_h * fx.ds.image_w;
  double episode_sum = 0;
  for (std::size_t i = 0; i < ep.support_x.numel(); ++i) episode_sum += ep.support_x[i];
  for (std::size_t i = 0; i < ep.query_x.numel(); ++i) episode_sum += ep.query_x[i];
  double pool_sum = 0;
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t m = 0; m < fx.ds.per_class; ++m) {
      const auto& im = fx.ds.image(task.classes[y], m);
      for (std::size_t i = 0; i < px; ++i) pool_sum += im[i];
    }
  CHECK(episode_sum == doctest::Approx(pool_sum).epsilon(1e-6));

  Rng r2(4);
  CHECK_THROWS_AS(sample_episode(fx.ds, task, 5, 5, r2), config_error);  // 10 > 8
}

TEST_CASE("inner adaptation leaves the shared initialization untouched") {
  Fixture fx;
  auto params = init_parameters<float>(fx.model, 1);
  const SplitPair<float> init = split_at(fx.model, params, CutPoint{2});
  const auto before = init.checksum();

  Rng rng(5);
  const Task task = sample_task(fx.pool, 3, 0, rng);
  const Episode ep = sample_episode(fx.ds, task, 2, 3, rng);
  ChannelPair chan = identity_channel_pair();
  const auto adapted = inner_adapt(init, ep.support_x, ep.support_y, 3, 0.05, chan);
  CHECK(init.checksum() == before);
  CHECK(adapted.pair.checksum() != before);
  CHECK(std::isfinite(adapted.last_support_loss));

  // eta = 0: a legal degenerate adaptation that changes nothing.
  ChannelPair chan2 = identity_channel_pair();
  const auto frozen = inner_adapt(init, ep.support_x, ep.support_y, 3, 0.0, chan2);
  CHECK(frozen.pair.checksum() == before);
}

TEST_CASE("a dead uplink skips the whole step; a dead downlink skips the device update") {
  Fixture fx;
  auto params = init_parameters<float>(fx.model, 2);
  SplitPair<float> pair = split_at(fx.model, params, CutPoint{1});
  Rng rng(6);
  const Task task = sample_task(fx.pool, 3, 0, rng);
  const Episode ep = sample_episode(fx.ds, task, 2, 3, rng);

  SUBCASE("uplink dead") {
    ChannelPair chan = ChannelPair::make(dead_channel());
    StepBytes bytes;
    ChannelDiag diag;
    const auto dev_before = pair.device_params.checksum();
    const auto agg_before = pair.agg_params.checksum();
    const auto out = adapt_step(pair, ep.support_x, ep.support_y, 0.05, chan, bytes, diag);
    CHECK_FALSE(out.fwd_delivered);
    CHECK(diag.fwd_skipped == 1);
    CHECK(bytes.fwd == 0);
    CHECK(pair.device_params.checksum() == dev_before);
    CHECK(pair.agg_params.checksum() == agg_before);
  }

  SUBCASE("downlink dead") {
    ChannelPair chan{Channel<float>(ChannelConfig{}), Channel<float>(dead_channel()), true};
    StepBytes bytes;
    ChannelDiag diag;
    const auto dev_before = pair.device_params.checksum();
    const auto agg_before = pair.agg_params.checksum();
    const auto out = adapt_step(pair, ep.support_x, ep.support_y, 0.05, chan, bytes, diag);
    CHECK(out.fwd_delivered);
    CHECK_FALSE(out.bwd_delivered);
    CHECK(diag.bwd_skipped == 1);
    CHECK(pair.device_params.checksum() == dev_before);   // device skipped
    CHECK(pair.agg_params.checksum() != agg_before);      // aggregator already stepped
  }

  SUBCASE("backward hop disabled never corrupts the gradient") {
    ChannelPair chan{Channel<float>(ChannelConfig{}), Channel<float>(dead_channel()), false};
    StepBytes bytes;
    ChannelDiag diag;
    const auto out = adapt_step(pair, ep.support_x, ep.support_y, 0.05, chan, bytes, diag);
    CHECK(out.fwd_delivered);
    CHECK(out.bwd_delivered);
    CHECK(diag.bwd_skipped == 0);
  }
}

TEST_CASE("meta loss adds over tasks") {
  Fixture fx;
  auto params = init_parameters<float>(fx.model, 3);
  SplitPair<float> pair = split_at(fx.model, params, CutPoint{2});
  Rng rng(7);
  std::vector<Episode> eps;
  std::vector<SplitPair<float>> adapted;
  for (int t = 0; t < 3; ++t) {
    const Task task = sample_task(fx.pool, 3, t, rng);
    eps.push_back(sample_episode(fx.ds, task, 2, 3, rng));
    adapted.push_back(pair);
  }
  const double all = meta_loss(adapted, eps);
  double sum = 0;
  for (int t = 0; t < 3; ++t) {
    std::vector<SplitPair<float>> one{adapted[t]};
    std::vector<Episode> oneep{eps[t]};
    sum += meta_loss(one, oneep);
  }
  CHECK(all == doctest::Approx(sum).epsilon(1e-9));
  std::vector<SplitPair<float>> wrong{pair};
  CHECK_THROWS_AS(meta_loss(wrong, eps), input_error);
}

TEST_CASE("first-order meta-training equals a monolithic re-implementation") {
  Fixture fx;
  MetaConfig mc = fx.config();
  const auto result = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{2},
                                        ChannelConfig{});

  // Oracle: identical episode stream, joined model, hand-rolled FOMAML.
  auto full = init_parameters<float>(fx.model, derive_seed(mc.seed, 0xA110));
  auto state = OptimState<float>::adam(float(mc.beta), full);
  std::vector<double> epoch_losses;
  for (std::size_t e = 1; e <= mc.epochs; ++e) {
    Gradients<float> gsum = zero_like(full);
    double mloss = 0;
    for (std::size_t t = 0; t < mc.tasks_per_epoch; ++t) {
      Rng rng(derive_seed(mc.seed, e, t));
      const Task task = sample_task(fx.pool, mc.ways, (e - 1) * mc.tasks_per_epoch + t, rng);
      const Episode ep = sample_episode(fx.ds, task, mc.shots, mc.query, rng);
      auto adapted = full;
      for (std::size_t s = 0; s < mc.inner_steps; ++s) {
        const auto trace = forward(adapted, fx.model, ep.support_x);
        const auto [loss, gl] = loss_softmax_ce(trace.logits(), ep.support_y);
        (void)loss;
        auto [grads, gin] = backward(adapted, fx.model, trace, gl);
        (void)gin;
        sgd_step(adapted, grads, float(mc.eta));
      }
      const auto qtrace = forward(adapted, fx.model, ep.query_x);
      const auto [qloss, qgl] = loss_softmax_ce(qtrace.logits(), ep.query_y);
      mloss += qloss;
      auto [qgrads, qgin] = backward(adapted, fx.model, qtrace, qgl);
      (void)qgin;
      accumulate(gsum, qgrads);
    }
    optimizer_step(full, gsum, state);
    epoch_losses.push_back(mloss);
  }

  REQUIRE(result.log.size() == mc.epochs);
  for (std::size_t e = 0; e < mc.epochs; ++e)
    CHECK(result.log[e].meta_loss == doctest::Approx(epoch_losses[e]).epsilon(1e-6));
  const auto [jcfg, jparams] = join(result.init);
  (void)jcfg;
  CHECK(jparams.checksum() == full.checksum());
}

TEST_CASE("meta training logs a complete, costed trajectory") {
  Fixture fx;
  MetaConfig mc = fx.config();
  mc.epochs = 3;
  const auto result = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{1},
                                        ChannelConfig{});
  REQUIRE(result.log.size() == 3);
  const std::size_t support_payload =
      smashed_payload_bytes(fx.model, CutPoint{1}, mc.shots * mc.ways);
  const std::size_t query_payload =
      smashed_payload_bytes(fx.model, CutPoint{1}, mc.query * mc.ways);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto& row = result.log[e];
    CHECK(row.epoch == e + 1);
    CHECK(std::isfinite(row.meta_loss));
    CHECK(row.mean_query_acc >= 0.0);
    CHECK(row.mean_query_acc <= 1.0);
    CHECK(row.wall_ms > 0.0);
    // identity channel: every hop delivers, so byte accounting is exact
    CHECK(row.bytes_fwd ==
          mc.tasks_per_epoch * (mc.inner_steps * support_payload + query_payload));
    CHECK(row.bytes_bwd == row.bytes_fwd);
  }
  CHECK(result.diag.fwd_skipped == 0);
  CHECK(result.diag.aborted_tasks == 0);
}

TEST_CASE("meta training reduces the meta loss on easy tasks") {
  Fixture fx;
  MetaConfig mc = fx.config();
  mc.epochs = 30;
  mc.eta = 0.1;
  mc.beta = 0.05;
  mc.tasks_per_epoch = 4;
  const auto result = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{2},
                                        ChannelConfig{});
  double first3 = 0, last3 = 0;
  for (int i = 0; i < 3; ++i) {
    first3 += result.log[i].meta_loss;
    last3 += result.log[result.log.size() - 1 - i].meta_loss;
  }
  CHECK(last3 < first3);
}

TEST_CASE("meta test: curve bookkeeping and the eta-zero degenerate case") {
  Fixture fx;
  auto params = init_parameters<float>(fx.model, 8);
  const SplitPair<float> init = split_at(fx.model, params, CutPoint{2});
  Rng rng(11);
  const Task task = sample_task(fx.pool, 3, 0, rng);
  const Episode ep = sample_episode(fx.ds, task, 2, 3, rng);

  ChannelPair chan = identity_channel_pair();
  const auto res = meta_test(init, ep, 5, 0.0, chan);
  REQUIRE(res.accuracy_curve.size() == 6);
  REQUIRE(res.loss_curve.size() == 6);
  for (std::size_t i = 1; i < 6; ++i) {
    CHECK(res.accuracy_curve[i] == res.accuracy_curve[0]);  // eta 0: frozen model
    CHECK(res.loss_curve[i] == doctest::Approx(res.loss_curve[0]).epsilon(1e-9));
  }
  CHECK(res.adapted.checksum() == init.checksum());
  REQUIRE(res.final_probs.dim(0) == ep.query_y.size());
  REQUIRE(res.final_probs.dim(1) == 3);
  for (std::size_t r = 0; r < res.final_probs.dim(0); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += res.final_probs.at2(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(res.query_labels == ep.query_y);
  CHECK(res.bytes.fwd > 0);
}

TEST_CASE("meta test improves accuracy after adaptation on easy tasks") {
  Fixture fx;
  MetaConfig mc = fx.config();
  mc.epochs = 25;
  mc.eta = 0.1;
  mc.beta = 0.01;  // 0.05 is past the divergence knee for Adam on this net
  mc.tasks_per_epoch = 4;
  const auto trained = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{2},
                                         ChannelConfig{});
  Rng rng(13);
  const Task task = sample_task(fx.pool, 3, 99, rng);
  const Episode ep = sample_episode(fx.ds, task, 2, 3, rng);
  ChannelPair chan = identity_channel_pair();
  const auto res = meta_test(trained.init, ep, 10, mc.eta, chan);
  CHECK(res.accuracy_curve.back() >= res.accuracy_curve.front());
  CHECK(res.accuracy_curve.back() > 1.0 / 3.0);  // above chance after adaptation
}

TEST_CASE("meta training over a noisy channel still completes with accounting") {
  Fixture fx;
  MetaConfig mc = fx.config();
  ChannelConfig chan;
  chan.snr_db = 10;
  chan.fading = true;
  chan.seed = 4;
  const auto result = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{2}, chan);
  REQUIRE(result.log.size() == mc.epochs);
  for (const auto& row : result.log) CHECK(std::isfinite(row.meta_loss));

  // Same config, same seed: bitwise-identical trajectory.
  const auto again = meta_train<float>(mc, fx.ds, fx.pool, fx.model, CutPoint{2}, chan);
  CHECK(again.init.checksum() == result.init.checksum());
  for (std::size_t e = 0; e < mc.epochs; ++e)
    CHECK(again.log[e].meta_loss == result.log[e].meta_loss);
}
