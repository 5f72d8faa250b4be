#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "stickerlab/denoiser.hpp"
#include "stickerlab/rng.hpp"
#include "stickerlab/synth.hpp"

using namespace stickerlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.base_channels = 8;
  c.transformer_depth = 1;
  c.res_blocks_per_stage = 1;
  c.latent_channels = 8;
  c.frames = 4;
  c.spatial_resolution = 8;
  return c;
}

ConditioningBundle tiny_cond(const Denoiser& m, int H, int W, Rng& rng) {
  ConditioningBundle cond;
  cond.image_latent = Tensor::randn({m.config.latent_channels, H, W}, rng);
  cond.text_embeddings.push_back(m.encode_prompt_tokens({"disc", "slide", "red"}, 1));
  if (m.config.use_second_encoder) cond.text_embeddings.push_back(m.encode_prompt_tokens({"disc", "slide", "red"}, 2));
  return cond;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("parameter count ordering across size tags") {
  auto count = [](SizeTag tag) {
    ModelConfig c = ModelConfig::preset(tag);
    c.frames = 2;
    return build_model(c, 1).parameter_count();
  };
  const auto sm = count(SizeTag::sm);
  const auto med = count(SizeTag::med);
  const auto lg = count(SizeTag::lg);
  const auto lg_e = count(SizeTag::lg_e);
  CHECK(sm < med);
  CHECK(med < lg);
  CHECK(lg_e < lg);
  CHECK(sm < lg_e);
}

TEST_CASE("same seed builds bitwise-identical parameters") {
  auto a = build_model(tiny_config(), 99);
  auto b = build_model(tiny_config(), 99);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, t] : a.params) CHECK(t.data() == b.params.at(name).data());
  auto c = build_model(tiny_config(), 100);
  CHECK(a.params.at("conv_in.w").data() != c.params.at("conv_in.w").data());
}

TEST_CASE("first conv consumes latent_channels x 2 (noise + conditioning)") {
  auto m = build_model(tiny_config(), 7);
  CHECK(m.params.at("conv_in.w").shape()[1] == 2 * m.config.latent_channels);
}

TEST_CASE("identity at init: video forward equals per-frame image forward") {
  NoGradGuard no_grad;
  Rng rng(5);
  auto m = build_model(tiny_config(), 11);
  const int T = 4, C = 8, H = 8, W = 4;
  ConditioningBundle cond = tiny_cond(m, H, W, rng);
  Tensor z = Tensor::randn({T, C, H, W}, rng);
  Tensor video_out = m.forward(z, 13.0, cond);

  for (int t = 0; t < T; ++t) {
    std::vector<double> frame(z.data().begin() + static_cast<size_t>(t) * C * H * W,
                              z.data().begin() + static_cast<size_t>(t + 1) * C * H * W);
    Tensor single = Tensor::from_data({1, C, H, W}, std::move(frame));
    Tensor frame_out = m.forward(single, 13.0, cond);
    for (int64_t i = 0; i < frame_out.size(); ++i) {
      const double a = video_out.data()[static_cast<size_t>(t) * C * H * W + i];
      CHECK(std::abs(a - frame_out.data()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("time permutation covariance at init, broken by temporal weights") {
  NoGradGuard no_grad;
  Rng rng(6);
  auto m = build_model(tiny_config(), 21);
  const int T = 4, C = 8, H = 8, W = 4;
  ConditioningBundle cond = tiny_cond(m, H, W, rng);
  Tensor z = Tensor::randn({T, C, H, W}, rng);
  Tensor out = m.forward(z, 5.0, cond);

  // reverse the frames
  std::vector<double> rev(z.size());
  const int64_t fsz = static_cast<int64_t>(C) * H * W;
  for (int t = 0; t < T; ++t)
    std::copy_n(z.data().begin() + t * fsz, fsz, rev.begin() + (T - 1 - t) * fsz);
  Tensor out_rev = m.forward(Tensor::from_data({T, C, H, W}, std::move(rev)), 5.0, cond);

  double diff = 0.0;
  for (int t = 0; t < T; ++t)
    for (int64_t i = 0; i < fsz; ++i)
      diff = std::max(diff, std::abs(out.data()[t * fsz + i] - out_rev.data()[(T - 1 - t) * fsz + i]));
  CHECK(diff <= 1e-12);

  // perturb one temporal projection and the covariance breaks
  auto perturbed = build_model(tiny_config(), 21);
  for (auto& [name, t] : perturbed.params)
    if (is_temporal_param(name) && name.find("proj.w") != std::string::npos) {
      Rng prng(123);
      for (auto& v : t.mutable_data()) v = prng.normal() * 0.3;
    }
  Tensor p_out = perturbed.forward(z, 5.0, cond);
  std::vector<double> rev2(z.size());
  for (int t = 0; t < T; ++t)
    std::copy_n(z.data().begin() + t * fsz, fsz, rev2.begin() + (T - 1 - t) * fsz);
  Tensor p_rev = perturbed.forward(Tensor::from_data({T, C, H, W}, std::move(rev2)), 5.0, cond);
  double broken = 0.0;
  for (int t = 0; t < T; ++t)
    for (int64_t i = 0; i < fsz; ++i)
      broken = std::max(broken, std::abs(p_out.data()[t * fsz + i] - p_rev.data()[(T - 1 - t) * fsz + i]));
  CHECK(broken > 1e-6);
}

TEST_CASE("dropping both conditionings equals the fully-unconditional forward") {
  NoGradGuard no_grad;
  Rng rng(8);
  auto m = build_model(tiny_config(), 31);
  const int T = 2, C = 8, H = 8, W = 4;
  Tensor z = Tensor::randn({T, C, H, W}, rng);

  ConditioningBundle cond = tiny_cond(m, H, W, rng);
  Tensor dropped = m.forward(z, 3.0, cond.with_drops(true, true));

  ConditioningBundle null_cond;
  null_cond.image_latent = Tensor::zeros({C, H, W});
  null_cond.text_embeddings.push_back(null_text_embedding(1));
  Tensor unconditional = m.forward(z, 3.0, null_cond);

  CHECK(max_abs_diff(dropped, unconditional) == 0.0);
}

TEST_CASE("expand_context") {
  Rng rng(9);
  Tensor text = Tensor::randn({5, kTextDim}, rng);
  Tensor wk = Tensor::randn({kTextDim, 12}, rng);
  Tensor wv = Tensor::randn({kTextDim, 12}, rng);

  SUBCASE("T=1: both modes equal a single projection") {
    auto a = expand_context(text, 1, wk, wv, ExpandMode::naive);
    auto b = expand_context(text, 1, wk, wv, ExpandMode::optimized);
    CHECK(max_abs_diff(a.k, b.k) < 1e-15);
    Tensor direct = matmul(text, wk);
    for (int64_t i = 0; i < direct.size(); ++i) CHECK(a.k.data()[i] == doctest::Approx(direct.data()[i]));
  }

  SUBCASE("T=8: identical values, optimized uses 1/8 the projection multiply-adds") {
    reset_flop_count();
    auto a = expand_context(text, 8, wk, wv, ExpandMode::naive);
    const int64_t naive_flops = flop_count();
    reset_flop_count();
    auto b = expand_context(text, 8, wk, wv, ExpandMode::optimized);
    const int64_t opt_flops = flop_count();
    CHECK(max_abs_diff(a.k, b.k) < 1e-12);
    CHECK(max_abs_diff(a.v, b.v) < 1e-12);
    CHECK(naive_flops == 8 * opt_flops);
  }

  SUBCASE("zero embeddings give zero keys and values") {
    auto kv = expand_context(Tensor::zeros({3, kTextDim}), 4, wk, wv, ExpandMode::naive);
    for (double v : kv.k.data()) CHECK(v == 0.0);
    for (double v : kv.v.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("prompt encoding") {
  SUBCASE("same token, same encoder, same vector") {
    Tensor a = encode_prompt({"cat"}, 1, false);
    Tensor b = encode_prompt({"cat"}, 1, false);
    CHECK(a.data() == b.data());
    Tensor c = encode_prompt({"cat"}, 2, true);
    CHECK(a.data() != c.data());
  }
  SUBCASE("empty prompt maps to the null embedding") {
    Tensor e = encode_prompt({}, 1, false);
    CHECK(e.data() == null_text_embedding(1).data());
    Tensor blank = encode_prompt({"", ""}, 1, false);
    CHECK(blank.data() == null_text_embedding(1).data());
  }
  SUBCASE("second encoder must be enabled") {
    CHECK_THROWS_AS(encode_prompt({"cat"}, 2, false), std::invalid_argument);
    CHECK_THROWS_AS(encode_prompt({"cat"}, 3, true), std::invalid_argument);
    ModelConfig lge = ModelConfig::preset(SizeTag::lg_e);
    lge.frames = 2;
    auto m = build_model(lge, 3);
    CHECK_THROWS_AS(m.encode_prompt_tokens({"cat"}, 2), std::invalid_argument);
  }
}

TEST_CASE("lg-e rejects a second encoder") {
  ModelConfig c = ModelConfig::preset(SizeTag::lg_e);
  c.use_second_encoder = true;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("codec") {
  SUBCASE("block shapes") {
    CHECK(codec_block(8) == std::pair<int, int>{1, 2});
    CHECK(codec_block(16) == std::pair<int, int>{2, 2});
    CHECK(codec_block(4) == std::pair<int, int>{1, 1});
    CHECK_THROWS_AS(codec_block(6), std::invalid_argument);
  }

  SUBCASE("16-channel latent of a 16x16 frame is 16x8x8") {
    Image frame(16, 16);
    Rng rng(4);
    for (auto& v : frame.data) v = rng.uniform();
    Tensor lat = codec_encode_frame(frame, 16);
    CHECK(lat.shape() == Shape{16, 8, 8});
  }

  SUBCASE("decode(encode(x)) == x exactly") {
    PromptSpec s;
    s.motion = MotionKind::wave;
    s.bucket = PromptBucket::emotion;
    s.subject = "star";
    auto clip = generate_clip(s, 16, 42);
    LatentVideo lat = codec_encode(clip.frames, 8);
    CHECK(lat.data.shape() == Shape{8, 8, 16, 8});
    auto frames = codec_decode(lat);
    REQUIRE(frames.size() == clip.frames.size());
    for (size_t i = 0; i < frames.size(); ++i) CHECK(frames[i].data == clip.frames[i].data);
  }

  SUBCASE("all-transparent frame round-trips with alpha identically zero") {
    Image frame(8, 8);  // zero-initialized, alpha plane all zero
    Tensor lat = codec_encode_frame(frame, 8);
    Image back = codec_decode_frame(lat);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) CHECK(back.at(3, y, x) == 0.0);
  }

  SUBCASE("odd resolution rejected") {
    Image frame(15, 16);
    CHECK_THROWS_AS(codec_encode_frame(frame, 8), std::invalid_argument);
  }
}

TEST_CASE("full denoiser gradients pass the finite-difference check (spot params)") {
  ModelConfig c;
  c.base_channels = 4;
  c.transformer_depth = 1;
  c.res_blocks_per_stage = 1;
  c.latent_channels = 4;
  c.ablation_small_latent = true;
  c.frames = 2;
  c.spatial_resolution = 4;
  auto m = build_model(c, 77);

  Rng rng(12);
  const int T = 2, C = 4, H = 4, W = 4;
  Tensor z = Tensor::randn({T, C, H, W}, rng);
  ConditioningBundle cond;
  cond.image_latent = Tensor::randn({C, H, W}, rng);
  cond.text_embeddings.push_back(m.encode_prompt_tokens({"star", "spin"}, 1));
  Tensor wgt = Tensor::randn({T, C, H, W}, rng);

  for (const std::string name : {"conv_in.w", "enc0.rb0.tconv1.proj.w", "mid.trf.layer0.sa.q.w", "down.w",
                                 "enc1.rb0.emb.scale.w", "mid.trf.layer0.tattn.o.w", "up.w", "out.conv.b"}) {
    auto f = [&](const Tensor& p) {
      Denoiser probe = m;
      probe.params[name] = p;
      return mean_all(mul(probe.forward(z, 7.0, cond), wgt));
    };
    Tensor x0 = Tensor::from_data(m.params.at(name).shape(), m.params.at(name).data());
    CHECK(finite_difference_check(f, x0, 1e-6) < 1e-4);
  }
}
