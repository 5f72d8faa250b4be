#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "stickerlab/io.hpp"

using namespace stickerlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("stickerlab_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

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

}  // namespace

TEST_CASE("checkpoint round trip within f32 rounding") {
  TempDir tmp;
  auto model = build_model(micro_config(), 7);
  ScheduleConfig sched;
  save_checkpoint(tmp.file("m.slcp"), model, sched, {{"note", "unit"}});

  Checkpoint ck = load_checkpoint(tmp.file("m.slcp"));
  CHECK(ck.provenance.at("note") == "unit");
  CHECK(ck.schedule.prediction_type == PredictionType::v);
  CHECK(ck.model.config.base_channels == 8);
  REQUIRE(ck.model.params.size() == model.params.size());
  for (const auto& [name, t] : model.params) {
    const auto& loaded = ck.model.params.at(name);
    REQUIRE(loaded.shape() == t.shape());
    for (int64_t i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      const double got = loaded.data()[i];
      // |x - f32(x)| <= |x| * 2^-20 comfortably covers f32's 2^-24 rounding
      CHECK(std::abs(got - orig) <= std::abs(orig) * 0x1.0p-20 + 1e-30);
    }
  }
}

TEST_CASE("corrupted checkpoint byte fails the checksum") {
  TempDir tmp;
  auto model = build_model(micro_config(), 8);
  save_checkpoint(tmp.file("m.slcp"), model, {});
  std::string raw = read_file(tmp.file("m.slcp"));
  raw[raw.size() - 100] ^= 0x40;  // flip a bit inside the blob section
  atomic_write_file(tmp.file("bad.slcp"), raw);
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("bad.slcp")), doctest::Contains("checksum"), std::runtime_error);
}

TEST_CASE("future checkpoint version rejected") {
  TempDir tmp;
  auto model = build_model(micro_config(), 9);
  save_checkpoint(tmp.file("m.slcp"), model, {});
  std::string raw = read_file(tmp.file("m.slcp"));
  raw[4] = 99;  // bump version field
  atomic_write_file(tmp.file("future.slcp"), raw);
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("future.slcp")), doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("truncated checkpoint rejected") {
  TempDir tmp;
  auto model = build_model(micro_config(), 10);
  save_checkpoint(tmp.file("m.slcp"), model, {});
  std::string raw = read_file(tmp.file("m.slcp"));
  atomic_write_file(tmp.file("trunc.slcp"), raw.substr(0, raw.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(tmp.file("trunc.slcp")), std::runtime_error);
}

TEST_CASE("pam round trip is exact at 8 bits") {
  TempDir tmp;
  PromptSpec s;
  s.motion = MotionKind::bounce;
  s.bucket = PromptBucket::action;
  s.subject = "star";
  auto clip = generate_clip(s, 16, 33);
  write_pam(tmp.file("f.pam"), clip.frames[0]);
  Image back = read_pam(tmp.file("f.pam"));
  REQUIRE(back.width == 16);
  REQUIRE(back.height == 16);
  for (size_t i = 0; i < back.data.size(); ++i) {
    const double q = std::lround(std::clamp(clip.frames[0].data[i], 0.0, 1.0) * 255.0) / 255.0;
    CHECK(back.data[i] == doctest::Approx(q).epsilon(1e-12));
  }
  // writing the quantized image again reproduces the file bitwise
  write_pam(tmp.file("g.pam"), back);
  CHECK(read_file(tmp.file("f.pam")) == read_file(tmp.file("g.pam")));
}

TEST_CASE("clip files round trip with manifest") {
  TempDir tmp;
  PromptSpec s;
  s.motion = MotionKind::slide;
  s.bucket = PromptBucket::action;
  auto clip = generate_clip(s, 16, 34);
  save_clip_files(tmp.file("clip"), clip.frames, 8.0, {{"teacher", "t0"}});
  ClipFiles back = load_clip_files(tmp.file("clip"));
  CHECK(back.fps == 8.0);
  CHECK(back.frames.size() == clip.frames.size());
  CHECK(back.provenance.at("teacher") == "t0");
}

TEST_CASE("gif writer emits a plausible animation") {
  TempDir tmp;
  PromptSpec s;
  s.motion = MotionKind::wave;
  s.bucket = PromptBucket::emotion;
  auto clip = generate_clip(s, 16, 35);
  write_gif_animation(tmp.file("a.gif"), clip.frames, 8.0);
  const std::string raw = read_file(tmp.file("a.gif"));
  CHECK(raw.size() > 100);
  CHECK(raw.compare(0, 6, "GIF89a") == 0);
  CHECK(static_cast<unsigned char>(raw.back()) == 0x3b);
}

TEST_CASE("csv writer") {
  TempDir tmp;
  write_loss_csv(tmp.file("loss.csv"), {{0, 0.5, 0}, {1, 0.25, 0}});
  const std::string raw = read_file(tmp.file("loss.csv"));
  CHECK(raw.rfind("step,loss,stage_id\n", 0) == 0);
  CHECK(raw.find("1,0.25,0\n") != std::string::npos);
}

TEST_CASE("dataset save and reload") {
  TempDir tmp;
  auto ds = build_dataset(4, {0.5, 0.25, 0.25}, 99, {.resolution = 16});
  save_dataset(tmp.file("data"), ds);
  SynthDataset back = load_dataset_manifest(tmp.file("data"));
  REQUIRE(back.items.size() == 4);
  for (size_t i = 0; i < back.items.size(); ++i) {
    CHECK(back.items[i].seed == ds.items[i].seed);
    CHECK(back.items[i].caption == ds.items[i].caption);
    CHECK(back.items[i].spec.subject == ds.items[i].spec.subject);
  }
  auto frames = load_dataset_frames(tmp.file("data"));
  REQUIRE(frames.size() == 4);
  CHECK(frames[0].size() == 8);
}
