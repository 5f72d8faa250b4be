#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "stickerlab/distiller.hpp"

using namespace stickerlab;

namespace {

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

ModelConfig micro_config() {
  ModelConfig c;
  c.base_channels = 8;
  c.transformer_depth = 1;
  c.res_blocks_per_stage = 1;
  c.latent_channels = 8;
  c.frames = 4;
  c.spatial_resolution = 16;
  return c;
}

uint64_t hash_params(const Denoiser& m) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : m.params)
    for (double v : t.data()) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = (h ^ bits) * 1099511628211ULL;
    }
  return h;
}

ConditioningBundle cond_for(const Denoiser& m, Rng& rng) {
  auto [bh, bw] = codec_block(m.config.latent_channels);
  ConditioningBundle cond;
  cond.image_latent = Tensor::randn(
      {m.config.latent_channels, m.config.spatial_resolution / bh, m.config.spatial_resolution / bw}, rng);
  cond.text_embeddings.push_back(m.encode_prompt_tokens({"star", "bounce"}, 1));
  return cond;
}

}  // namespace

TEST_CASE("distill config validation") {
  DistillConfig ok;
  ok.validate();  // 32 == 4 x 8
  CHECK(ok.teacher_steps == 32);
  CHECK(ok.student_steps == 8);
  CHECK(ok.ratio == 4);

  DistillConfig bad = ok;
  bad.teacher_steps = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  DistillConfig guidance_only = bad;
  guidance_only.mode = DistillMode::guidance;
  guidance_only.validate();  // ratio rule only binds the combined mode
}

TEST_CASE("clone_model produces independent parameters") {
  auto m = build_model(micro_config(), 3);
  auto c = clone_model(m);
  c.params.at("conv_in.w").mutable_data()[0] += 1.0;
  CHECK(m.params.at("conv_in.w").data()[0] != c.params.at("conv_in.w").data()[0]);
}

TEST_CASE("student grid is every ratio-th teacher timestep") {
  auto s = ScheduleConfig{}.build();
  DistillConfig cfg;
  auto teacher = teacher_time_grid(s, cfg.teacher_steps);
  auto student = student_time_grid(s, cfg);
  REQUIRE(student.size() == 8);
  for (int j = 0; j < 8; ++j) CHECK(student[j] == teacher[4 * j]);
}

TEST_CASE("guidance distillation loss is exactly zero at init from teacher with unit scales") {
  auto teacher = build_model(micro_config(), 11);
  auto student = clone_model(teacher);
  auto s = ScheduleConfig{}.build();
  Rng rng(5);
  ConditioningBundle cond = cond_for(teacher, rng);
  Tensor z = Tensor::randn(latent_shape_of(teacher.config), rng);
  Tensor loss = guidance_distill_step(student, teacher, z, 17.0, cond, {1.0, 1.0}, s);
  CHECK(loss.item() == 0.0);

  // and strictly positive at production scales
  Tensor loss2 = guidance_distill_step(student, teacher, z, 17.0, cond, {8.0, 2.0}, s);
  CHECK(loss2.item() > 0.0);
}

TEST_CASE("architecture mismatch rejected") {
  auto teacher = build_model(micro_config(), 11);
  ModelConfig other = micro_config();
  other.base_channels = 12;
  auto student = build_model(other, 11);
  auto s = ScheduleConfig{}.build();
  Rng rng(5);
  ConditioningBundle cond = cond_for(teacher, rng);
  Tensor z = Tensor::randn(latent_shape_of(teacher.config), rng);
  CHECK_THROWS_AS(guidance_distill_step(student, teacher, z, 17.0, cond, {8.0, 2.0}, s), std::invalid_argument);
}

TEST_CASE("step distill target on the linear toy denoiser") {
  auto s = ScheduleConfig{}.build();
  const double c = 0.4;
  ModelFn linear = [&](const Tensor& z, double t, const ConditioningBundle&) {
    const double ab = s.alpha_bar_at(t);
    return convert(scale(z, c), z, ab, Quantity::x0, Quantity::v);
  };
  Rng rng(7);
  ConditioningBundle cond;
  cond.image_latent = Tensor::zeros({8, 2, 2});
  cond.text_embeddings.push_back(null_text_embedding(1));

  SUBCASE("ratio=1 equals one teacher step") {
    DistillConfig cfg;
    cfg.teacher_steps = 8;
    cfg.student_steps = 8;
    cfg.ratio = 1;
    auto grid = teacher_time_grid(s, 8);
    Tensor z = Tensor::randn({4}, rng);
    Tensor target = step_distill_target(linear, cond, z, 2, s, cfg.scales, cfg);
    // manual single ddim update from grid[2] to grid[3]
    const double lam = 0.5 * s.logsnr_at(grid[2]);
    const double lam_next = 0.5 * s.logsnr_at(grid[3]);
    const double ab = sigmoid(2.0 * lam);
    Tensor x0 = scale(z, c);
    Tensor eps = convert(x0, z, ab, Quantity::x0, Quantity::eps);
    Tensor manual = ddim_step(z, x0, eps, lam_next);
    for (int64_t i = 0; i < z.size(); ++i) CHECK(std::abs(target.data()[i] - manual.data()[i]) < 1e-10);
  }

  SUBCASE("ratio=4 matches the closed-form 4-step composition") {
    DistillConfig cfg;  // 32 -> 8, ratio 4
    auto grid = teacher_time_grid(s, cfg.teacher_steps);
    const int j = 3;  // covers teacher steps 12..15
    Tensor z = Tensor::randn({4}, rng);
    Tensor target = step_distill_target(linear, cond, z, j, s, cfg.scales, cfg);

    // each linear-model ddim step multiplies z by a hand-computable factor
    double factor = 1.0;
    for (int k = 4 * j; k < 4 * (j + 1); ++k) {
      const double lam = 0.5 * s.logsnr_at(grid[k]);
      const double lam_next = 0.5 * s.logsnr_at(grid[k + 1]);
      const double a_cur = std::sqrt(sigmoid(2.0 * lam)), s_cur = std::sqrt(sigmoid(-2.0 * lam));
      const double a_next = std::sqrt(sigmoid(2.0 * lam_next)), s_next = std::sqrt(sigmoid(-2.0 * lam_next));
      factor *= a_next * c + s_next * (1.0 - a_cur * c) / s_cur;
    }
    for (int64_t i = 0; i < z.size(); ++i) CHECK(std::abs(target.data()[i] - factor * z.data()[i]) < 1e-10);
  }

  SUBCASE("out-of-grid step index rejected") {
    DistillConfig cfg;
    Tensor z = Tensor::randn({4}, rng);
    CHECK_THROWS_AS(step_distill_target(linear, cond, z, 8, s, cfg.scales, cfg), std::invalid_argument);
  }
}

TEST_CASE("distilled inference spends one forward per step") {
  auto student = build_model(micro_config(), 13);
  auto s = ScheduleConfig{}.build();
  Rng rng(9);
  ConditioningBundle cond = cond_for(student, rng);
  DistillConfig cfg;
  auto res = distilled_sample(student, cond, s, cfg, 77);
  CHECK(res.evals.unet_forwards == 8);
  CHECK(res.times.size() == 8);

  auto ref = teacher_reference_sample(student, cond, s, cfg, 77);
  CHECK(ref.evals.unet_forwards == 3 * 32);
}

TEST_CASE("short distillation run: teacher untouched, metrics reproducible") {
  auto teacher = build_model(micro_config(), 21);
  auto data = build_dataset(3, {0.4, 0.3, 0.3}, 55, {.resolution = 16, .speeds = {1.0}});
  DistillConfig cfg;
  cfg.iterations = 2;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.005;

  const uint64_t teacher_hash = hash_params(teacher);
  auto run = [&] {
    auto student = clone_model(teacher);
    DistillResult r = distill(student, teacher, data, cfg, 99);
    return std::make_pair(r, hash_params(student));
  };
  auto [r1, h1] = run();
  CHECK(hash_params(teacher) == teacher_hash);
  auto [r2, h2] = run();
  CHECK(h1 == h2);
  REQUIRE(r1.metrics.size() == r2.metrics.size());
  for (size_t i = 0; i < r1.metrics.size(); ++i) CHECK(r1.metrics[i].distill_loss == r2.metrics[i].distill_loss);
  CHECK(r1.final_endpoint_mse == r2.final_endpoint_mse);
  CHECK(r1.baseline_endpoint_mse == r2.baseline_endpoint_mse);
}
