#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stickerlab/image.hpp"

namespace stickerlab {

enum class PromptBucket { action, emotion, open_ended };
enum class MotionKind { none, slide, bounce, spin, pulse, wave };

const char* to_string(PromptBucket b);
const char* to_string(MotionKind m);
MotionKind motion_from_string(const std::string& s);
PromptBucket bucket_from_string(const std::string& s);
// Bucket a motion naturally belongs to (none -> open_ended).
PromptBucket bucket_of(MotionKind m);

struct PromptSpec {
  PromptBucket bucket = PromptBucket::open_ended;
  std::string subject = "disc";  // disc | star | blob
  MotionKind motion = MotionKind::none;
  std::vector<std::string> attributes;  // color and/or size tokens
  double speed = 1.0;
  bool secondary_motion = false;  // outline pulse riding on the primary motion
  double forced_offset_x = 0.0;   // test hook: shoves the subject off-center

  void validate() const;
};

struct Pose {
  double cx = 0.0;
  double cy = 0.0;
  double scale = 1.0;
  double angle = 0.0;
};

// All frames share one solid (transparent) background color; alpha is exactly
// zero on background pixels and the subject never clips the canvas unless the
// spec forces it.
struct StickerClip {
  std::vector<Image> frames;
  std::array<double, 3> background{};
  PromptSpec truth;
  std::vector<Pose> poses;
  double fps = 8.0;
};

inline constexpr int kClipFrames = 8;

// Phase-locked 8-frame clip: oscillating motions start and end at rest and
// peak mid-clip. Deterministic in (spec, seed); the seed jitters base
// placement and color shade.
StickerClip generate_clip(const PromptSpec& spec, int resolution, uint64_t seed);

// Longer periodic video for clip-sampling and motion-bucketing experiments.
StickerClip generate_video(const PromptSpec& spec, int resolution, int n_frames, double fps, uint64_t seed);

// Deterministic token sequence: subject, motion, then attributes in the
// order given. Speed and bucket are deliberately not encoded.
std::vector<std::string> caption(const PromptSpec& spec);

struct SynthItem {
  PromptSpec spec;
  uint64_t seed = 0;
  std::vector<std::string> caption;
};

struct SynthDataset {
  std::vector<SynthItem> items;
  int resolution = 32;
  int video_frames = kClipFrames;  // kClipFrames means 8-frame clips, larger means videos
  double video_fps = 8.0;
};

StickerClip render_item(const SynthDataset& ds, const SynthItem& item);

struct DatasetOptions {
  int resolution = 32;
  std::vector<double> speeds = {1.0, 2.0};
  int video_frames = kClipFrames;
  double video_fps = 8.0;
  int cond_frame_index = 0;
  // calibration corpora: restrict the motion pool (overrides the bucket mix,
  // buckets then follow the motion) and/or pin the size attribute pool
  std::vector<std::string> motions;
  std::vector<std::string> sizes;
};

// Bucket mix proportions are honored exactly up to rounding (largest
// remainder). Item seeds derive from the dataset seed, so disjoint dataset
// seeds give disjoint clips.
SynthDataset build_dataset(int n, const std::array<double, 3>& mix, uint64_t seed, const DatasetOptions& opt = {});

// (caption, conditioning frame, clip) triplet per item.
struct Triplet {
  std::vector<std::string> caption;
  Image conditioning;
  StickerClip clip;
};
std::vector<Triplet> render_triplets(const SynthDataset& ds, int cond_frame_index);

}  // namespace stickerlab
