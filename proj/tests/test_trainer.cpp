#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "stickerlab/trainer.hpp"

using namespace stickerlab;

namespace {

ModelConfig micro_config(int resolution = 16) {
  ModelConfig c;
  c.base_channels = 8;
  c.transformer_depth = 1;
  c.res_blocks_per_stage = 1;
  c.latent_channels = 8;
  c.frames = 8;
  c.spatial_resolution = resolution;
  return c;
}

SynthDataset tiny_clip_dataset(int n, uint64_t seed, int resolution = 16) {
  DatasetOptions opt;
  opt.resolution = resolution;
  opt.speeds = {1.0, 2.0};
  return build_dataset(n, {0.4, 0.3, 0.3}, seed, opt);
}

uint64_t hash_params(const Denoiser& m, bool temporal_only, bool spatial_only) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : m.params) {
    const bool is_t = is_temporal_param(name);
    if (temporal_only && !is_t) continue;
    if (spatial_only && is_t) continue;
    for (double v : t.data()) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = (h ^ bits) * 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace

TEST_CASE("conditioning frame selection") {
  Rng rng(1);
  CHECK(select_conditioning_frame(8, {FrameMode::first}, rng) == 0);
  CHECK(select_conditioning_frame(8, {FrameMode::middle}, rng) == 3);
  CHECK(select_conditioning_frame(8, {FrameMode::last}, rng) == 7);
  CHECK_THROWS_AS(select_conditioning_frame(7, {FrameMode::first}, rng), std::invalid_argument);

  std::array<int, 8> hist{};
  const int draws = 80000;
  for (int i = 0; i < draws; ++i) ++hist[select_conditioning_frame(8, {FrameMode::random}, rng)];
  for (int k = 0; k < 8; ++k) {
    const double freq = static_cast<double>(hist[k]) / draws;
    CHECK(freq == doctest::Approx(0.125).epsilon(0.04));  // 0.125 +- 0.005
    CHECK(std::abs(freq - 0.125) < 0.005);
  }
}

TEST_CASE("conditioning dropout rates") {
  SUBCASE("zero probabilities never null anything") {
    Rng rng(2);
    DropoutPolicy p{0.0, 0.0, 0.0};
    for (int i = 0; i < 10000; ++i) {
      auto d = sample_dropout(p, rng);
      CHECK(!d.drop_text);
      CHECK(!d.drop_image);
    }
  }
  SUBCASE("empirical rates within +-0.005 of nominal over 100k draws") {
    Rng rng(3);
    DropoutPolicy p{0.05, 0.05, 0.05};
    const int draws = 100000;
    int text_only = 0, image_only = 0, both = 0;
    for (int i = 0; i < draws; ++i) {
      auto d = sample_dropout(p, rng);
      if (d.drop_text && d.drop_image)
        ++both;
      else if (d.drop_text)
        ++text_only;
      else if (d.drop_image)
        ++image_only;
    }
    CHECK(std::abs(static_cast<double>(text_only) / draws - 0.05) < 0.005);
    CHECK(std::abs(static_cast<double>(image_only) / draws - 0.05) < 0.005);
    CHECK(std::abs(static_cast<double>(both) / draws - 0.05) < 0.005);
  }
  SUBCASE("invalid policies rejected") {
    Rng rng(4);
    CHECK_THROWS_AS(sample_dropout({0.5, 0.4, 0.2}, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_dropout({-0.1, 0.0, 0.0}, rng), std::invalid_argument);
  }
}

TEST_CASE("exact-target oracle model has zero loss") {
  auto s = make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::eps);
  Rng data_rng(5);
  Tensor clip_latent = Tensor::randn({8, 8, 4, 4}, data_rng);
  std::vector<Tensor> text = {null_text_embedding(1)};

  // replays q_sample to emit the exact eps target from the known clean clip
  ModelFn oracle = [&](const Tensor& z, double t, const ConditioningBundle&) {
    return convert(clip_latent, z, s.alpha_bar(static_cast<int>(t)), Quantity::x0, Quantity::eps);
  };
  Rng rng(6);
  Tensor loss = training_loss_fn(oracle, clip_latent, text, s, {0, 0, 0}, {FrameMode::middle}, rng);
  CHECK(loss.item() < 1e-20);

  // and for a v schedule
  auto sv = rescale_zero_terminal_snr(make_schedule(ScheduleKind::linear, kDefaultTrainSteps, PredictionType::v));
  ModelFn oracle_v = [&](const Tensor& z, double t, const ConditioningBundle&) {
    return convert(clip_latent, z, sv.alpha_bar(static_cast<int>(t)), Quantity::x0, Quantity::v);
  };
  Rng rng2(6);
  Tensor loss_v = training_loss_fn(oracle_v, clip_latent, text, sv, {0, 0, 0}, {FrameMode::middle}, rng2);
  CHECK(loss_v.item() < 1e-20);
}

TEST_CASE("frozen-spatial stages leave spatial parameters bitwise unchanged") {
  auto model = build_model(micro_config(), 17);
  auto data = tiny_clip_dataset(3, 77);
  const uint64_t spatial_before = hash_params(model, false, true);
  const uint64_t temporal_before = hash_params(model, true, false);

  RecipeStage stage;
  stage.resolution = 16;
  stage.freeze_spatial = true;
  stage.iterations = 3;
  stage.batch_size = 2;
  stage.learning_rate = 0.05;
  train_stage(model, data, stage, {FrameMode::middle}, 5);

  CHECK(hash_params(model, false, true) == spatial_before);
  CHECK(hash_params(model, true, false) != temporal_before);
}

TEST_CASE("same seed reproduces loss curves and parameters bitwise") {
  auto data = tiny_clip_dataset(3, 78);
  RecipeStage stage;
  stage.resolution = 16;
  stage.iterations = 4;
  stage.batch_size = 2;
  stage.learning_rate = 0.02;

  auto run = [&] {
    auto model = build_model(micro_config(), 19);
    auto r = train_stage(model, data, stage, {FrameMode::middle}, 11);
    return std::make_pair(r.curve, hash_params(model, false, false));
  };
  auto [c1, h1] = run();
  auto [c2, h2] = run();
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].loss == c2[i].loss);
  CHECK(h1 == h2);
}

TEST_CASE("training is invariant to dataset shard order") {
  auto data = tiny_clip_dataset(4, 79);
  SynthDataset shuffled = data;
  std::swap(shuffled.items[0], shuffled.items[3]);
  std::swap(shuffled.items[1], shuffled.items[2]);

  RecipeStage stage;
  stage.resolution = 16;
  stage.iterations = 3;
  stage.batch_size = 2;

  auto m1 = build_model(micro_config(), 23);
  auto m2 = build_model(micro_config(), 23);
  train_stage(m1, data, stage, {FrameMode::middle}, 31);
  train_stage(m2, shuffled, stage, {FrameMode::middle}, 31);
  CHECK(hash_params(m1, false, false) == hash_params(m2, false, false));
}

TEST_CASE("recipe validation") {
  auto data = tiny_clip_dataset(2, 80);
  auto model = build_model(micro_config(), 29);

  RecipeStage eps_stage;
  eps_stage.prediction_type = PredictionType::eps;
  eps_stage.iterations = 1;
  eps_stage.batch_size = 1;
  eps_stage.resolution = 16;
  CHECK_THROWS_AS(run_recipe(model, data, {eps_stage}, {FrameMode::middle}, 1), std::invalid_argument);

  SynthDataset empty;
  RecipeStage v_stage;
  v_stage.resolution = 8;
  v_stage.iterations = 1;
  v_stage.batch_size = 1;
  CHECK_THROWS_AS(train_stage(model, empty, v_stage, {FrameMode::middle}, 1), std::invalid_argument);
}

TEST_CASE("single-stage recipe equals train_stage") {
  auto data = tiny_clip_dataset(2, 81);
  RecipeStage stage;
  stage.resolution = 16;
  stage.iterations = 3;
  stage.batch_size = 2;

  auto m1 = build_model(micro_config(), 37);
  auto m2 = build_model(micro_config(), 37);
  auto r1 = run_recipe(m1, data, {stage}, {FrameMode::middle}, 41);
  auto r2 = train_stage(m2, data, stage, {FrameMode::middle}, 41);
  REQUIRE(r1.curve.size() == r2.curve.size());
  for (size_t i = 0; i < r1.curve.size(); ++i) CHECK(r1.curve[i].loss == r2.curve[i].loss);
  CHECK(hash_params(m1, false, false) == hash_params(m2, false, false));
}

TEST_CASE("a short run reduces evaluation loss on a small memorization set") {
  auto data = tiny_clip_dataset(2, 82);
  auto model = build_model(micro_config(), 43);
  RecipeStage stage;
  stage.resolution = 16;
  stage.iterations = 60;
  stage.batch_size = 2;
  stage.learning_rate = 0.04;

  auto rendered = render_dataset(data, 16);
  auto schedule = stage.build_schedule();
  const double before = evaluate_loss(model, rendered, schedule, {FrameMode::middle}, 7);
  train_stage(model, data, stage, {FrameMode::middle}, 7);
  const double after = evaluate_loss(model, rendered, schedule, {FrameMode::middle}, 7);
  CHECK(after < before / 2.0);
}

TEST_CASE("ks statistic basics") {
  CHECK(ks_statistic({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(ks_statistic({0, 0, 0}, {1, 1, 1}) == doctest::Approx(1.0));
  CHECK(ks_statistic({1, 2, 3, 4}, {1.5, 2.5, 3.5, 4.5}) > 0.0);
}
