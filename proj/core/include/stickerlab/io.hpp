#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "stickerlab/denoiser.hpp"
#include "stickerlab/image.hpp"
#include "stickerlab/schedule.hpp"
#include "stickerlab/synth.hpp"
#include "stickerlab/trainer.hpp"

namespace stickerlab {

// All file writes go through a temp-then-rename so readers never observe a
// partial file.
void atomic_write_file(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

// --- checkpoints ------------------------------------------------------------
// Layout: magic "SLCP", u32 version, u64 header length, JSON header (model
// config, schedule config, provenance, blob directory), blob section of
// little-endian IEEE-754 f32, u32 CRC-32 of the blob section.

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Denoiser model;
  ScheduleConfig schedule;
  std::map<std::string, std::string> provenance;
};

void save_checkpoint(const std::string& path, const Denoiser& model, const ScheduleConfig& schedule,
                     const std::map<std::string, std::string>& provenance = {});
Checkpoint load_checkpoint(const std::string& path);

// --- frames -----------------------------------------------------------------

// Lossless 8-bit RGBA PAM (P7).
void write_pam(const std::string& path, const Image& image);
Image read_pam(const std::string& path);

// Frame files plus a manifest describing order, fps and provenance.
void save_clip_files(const std::string& dir, const std::vector<Image>& frames, double fps,
                     const std::map<std::string, std::string>& provenance = {});
struct ClipFiles {
  std::vector<Image> frames;
  double fps = 8.0;
  std::map<std::string, std::string> provenance;
};
ClipFiles load_clip_files(const std::string& dir);

// Animated GIF for human inspection only; quantized to a fixed palette and
// composited over the background color. Never used by acceptance checks.
void write_gif_animation(const std::string& path, const std::vector<Image>& frames, double fps,
                         const std::array<double, 3>& background = {0.93, 0.93, 0.88});

// --- CSV --------------------------------------------------------------------

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve);

// --- dataset files ----------------------------------------------------------

// Renders every item and writes frames plus a JSON manifest with caption,
// seed, spec and file paths per item.
void save_dataset(const std::string& dir, const SynthDataset& ds);
SynthDataset load_dataset_manifest(const std::string& dir);
std::vector<std::vector<Image>> load_dataset_frames(const std::string& dir);

}  // namespace stickerlab
