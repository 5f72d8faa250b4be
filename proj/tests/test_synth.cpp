#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "stickerlab/motion.hpp"
#include "stickerlab/synth.hpp"

using namespace stickerlab;

namespace {

PromptSpec spec_of(MotionKind m, const std::string& subject, double speed = 1.0) {
  PromptSpec s;
  s.bucket = bucket_of(m);
  s.subject = subject;
  s.motion = m;
  s.attributes = {"blue"};
  s.speed = speed;
  return s;
}

std::pair<double, double> alpha_centroid(const Image& im) {
  double mass = 0.0, sx = 0.0, sy = 0.0;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const double a = im.at(3, y, x);
      mass += a;
      sx += a * (x + 0.5);
      sy += a * (y + 0.5);
    }
  return {sx / mass, sy / mass};
}

}  // namespace

TEST_CASE("still motion gives identical frames and zero motion score") {
  auto clip = generate_clip(spec_of(MotionKind::none, "disc"), 32, 5);
  REQUIRE(clip.frames.size() == 8);
  for (size_t i = 1; i < clip.frames.size(); ++i) CHECK(clip.frames[i].data == clip.frames[0].data);
  CHECK(temporal_diff_score(clip.frames).value == 0.0);
}

TEST_CASE("slide at speed 2 doubles per-frame displacement") {
  auto one = generate_clip(spec_of(MotionKind::slide, "disc", 1.0), 32, 9);
  auto two = generate_clip(spec_of(MotionKind::slide, "disc", 2.0), 32, 9);
  for (int i = 0; i < 8; ++i) {
    const double d1 = one.poses[i].cx - one.poses[0].cx;
    const double d2 = two.poses[i].cx - two.poses[0].cx;
    CHECK(d2 == doctest::Approx(2.0 * d1).epsilon(1e-12));
  }
}

TEST_CASE("same spec and seed render bitwise-identical clips") {
  auto a = generate_clip(spec_of(MotionKind::bounce, "star"), 32, 1234);
  auto b = generate_clip(spec_of(MotionKind::bounce, "star"), 32, 1234);
  REQUIRE(a.frames.size() == b.frames.size());
  for (size_t i = 0; i < a.frames.size(); ++i) CHECK(a.frames[i].data == b.frames[i].data);

  auto c = generate_clip(spec_of(MotionKind::bounce, "star"), 32, 1235);
  CHECK(a.frames[0].data != c.frames[0].data);
}

TEST_CASE("alpha is exactly zero on background pixels") {
  auto clip = generate_clip(spec_of(MotionKind::wave, "blob"), 32, 77);
  int zero_alpha = 0;
  for (const auto& f : clip.frames)
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x)
        if (f.at(3, y, x) == 0.0) ++zero_alpha;
  CHECK(zero_alpha > 0);  // background exists
  // corners are background in every frame
  for (const auto& f : clip.frames) {
    CHECK(f.at(3, 0, 0) == 0.0);
    CHECK(f.at(3, f.height - 1, f.width - 1) == 0.0);
  }
}

TEST_CASE("caption tokens in canonical order") {
  PromptSpec s = spec_of(MotionKind::slide, "disc");
  s.attributes = {"red"};
  auto c = caption(s);
  REQUIRE(c.size() == 3);
  CHECK(c[0] == "disc");
  CHECK(c[1] == "slide");
  CHECK(c[2] == "red");

  s.attributes.clear();
  auto c2 = caption(s);
  REQUIRE(c2.size() == 2);
  CHECK(c2[0] == "disc");
  CHECK(c2[1] == "slide");
}

TEST_CASE("caption injective over the spec grid") {
  const std::vector<std::string> subjects = {"disc", "star", "blob"};
  const std::vector<MotionKind> motions = {MotionKind::none, MotionKind::slide, MotionKind::bounce,
                                           MotionKind::spin, MotionKind::pulse, MotionKind::wave};
  const std::vector<std::string> colors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  const std::vector<std::string> sizes = {"small", "medium", "large"};
  std::set<std::string> seen;
  int total = 0;
  for (const auto& sub : subjects)
    for (auto m : motions)
      for (const auto& col : colors)
        for (const auto& sz : sizes) {
          PromptSpec s;
          s.bucket = bucket_of(m);
          s.subject = sub;
          s.motion = m;
          s.attributes = {col, sz};
          std::string key;
          for (const auto& tok : caption(s)) key += tok + "|";
          CHECK(seen.insert(key).second);
          ++total;
        }
  CHECK(total == static_cast<int>(seen.size()));
}

TEST_CASE("build_dataset honors the bucket mix exactly at n=100") {
  auto ds = build_dataset(100, {0.4, 0.3, 0.3}, 42);
  std::array<int, 3> counts{};
  for (const auto& item : ds.items) ++counts[static_cast<int>(item.spec.bucket)];
  CHECK(counts[0] == 40);
  CHECK(counts[1] == 30);
  CHECK(counts[2] == 30);
}

TEST_CASE("disjoint dataset seeds give disjoint clips") {
  auto a = build_dataset(12, {0.4, 0.3, 0.3}, 100);
  auto b = build_dataset(12, {0.4, 0.3, 0.3}, 200);
  auto hash_clip = [](const StickerClip& c) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& f : c.frames)
      for (double v : f.data) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, sizeof(bits));
        h = (h ^ bits) * 1099511628211ULL;
      }
    return h;
  };
  std::set<uint64_t> ha, hb;
  for (const auto& item : a.items) ha.insert(hash_clip(render_item(a, item)));
  for (const auto& item : b.items) hb.insert(hash_clip(render_item(b, item)));
  for (auto h : ha) CHECK(hb.count(h) == 0);
}

TEST_CASE("every generated clip satisfies the sticker invariants") {
  auto ds = build_dataset(30, {0.34, 0.33, 0.33}, 7);
  for (const auto& item : ds.items) {
    auto clip = render_item(ds, item);
    REQUIRE(clip.frames.size() == 8);
    for (const auto& f : clip.frames)
      for (double v : f.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
  }
}

TEST_CASE("pose trajectories recoverable by centroid tracking within 0.5 px") {
  for (auto m : {MotionKind::slide, MotionKind::bounce, MotionKind::wave}) {
    for (const auto& sub : {std::string("disc"), std::string("star"), std::string("blob")}) {
      auto clip = generate_clip(spec_of(m, sub, 2.0), 48, 31);
      for (int i = 0; i < 8; ++i) {
        auto [cx, cy] = alpha_centroid(clip.frames[i]);
        CHECK(std::abs(cx - clip.poses[i].cx) < 0.5);
        CHECK(std::abs(cy - clip.poses[i].cy) < 0.5);
      }
    }
  }
}

TEST_CASE("motion scores strictly increase with speed for translation motions") {
  for (auto method : {MotionMethod::temporal_diff, MotionMethod::mv_norm}) {
    for (auto m : {MotionKind::slide, MotionKind::wave}) {
      double prev = -1.0;
      for (double speed : {1.0, 2.0, 4.0}) {
        PromptSpec s = spec_of(m, "disc", speed);
        s.attributes = {"blue", "small"};
        auto clip = generate_clip(s, 64, 3);
        const double score = method == MotionMethod::temporal_diff ? temporal_diff_score(clip.frames).value
                                                                   : mv_norm_score(clip.frames, 8, 6).value;
        CHECK(score > prev);
        prev = score;
      }
    }
  }
}

TEST_CASE("clipping specs are rejected unless forced") {
  PromptSpec s = spec_of(MotionKind::slide, "disc", 12.0);
  CHECK_THROWS_AS(generate_clip(s, 32, 1), std::invalid_argument);

  PromptSpec forced = spec_of(MotionKind::none, "disc");
  forced.forced_offset_x = 20.0;  // half off-canvas, for negative tests downstream
  auto clip = generate_clip(forced, 32, 1);
  CHECK(clip.frames.size() == 8);
}

TEST_CASE("still only valid in open_ended bucket") {
  PromptSpec s;
  s.bucket = PromptBucket::action;
  s.motion = MotionKind::none;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("video generation length and periodicity") {
  auto video = generate_video(spec_of(MotionKind::bounce, "disc"), 32, 48, 24.0, 11);
  CHECK(video.frames.size() == 48);
  CHECK(video.fps == 24.0);
  CHECK_THROWS_AS(generate_video(spec_of(MotionKind::bounce, "disc"), 32, 4, 24.0, 11), std::invalid_argument);
}
