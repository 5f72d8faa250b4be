#pragma once

#include <cstdint>
#include <vector>

#include "stickerlab/denoiser.hpp"
#include "stickerlab/motion.hpp"
#include "stickerlab/sampler.hpp"
#include "stickerlab/schedule.hpp"
#include "stickerlab/synth.hpp"

namespace stickerlab {

enum class FrameMode { first, middle, last, random };

const char* to_string(FrameMode m);
FrameMode frame_mode_from_string(const std::string& s);

struct ConditioningFramePolicy {
  FrameMode mode = FrameMode::middle;
};

// Independent events: drop text only, drop image only, drop both.
struct DropoutPolicy {
  double p_drop_text_only = 0.075;
  double p_drop_image_only = 0.075;
  double p_drop_both = 0.075;

  void validate() const;
};

struct DropoutDraw {
  bool drop_text = false;
  bool drop_image = false;
};

DropoutDraw sample_dropout(const DropoutPolicy& policy, Rng& rng);

// first -> 0, middle -> 3 (fourth of eight), last -> 7, random -> uniform.
int select_conditioning_frame(int n_frames, const ConditioningFramePolicy& policy, Rng& rng);

enum class FpsMode { fixed4, fixed8, dynamic };

const char* to_string(FpsMode m);
FpsMode fps_mode_from_string(const std::string& s);

// Plain SGD is the default; adam is the configurable extension for runs that
// need aggressive overfitting.
enum class Optimizer { sgd, adam };

const char* to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

// One pretraining stage. Paper-scale runs used batch 128-512 at lr 2.5e-5 to
// 1e-4; desk scale shrinks the batch ~64x and retunes the rate for the toy
// model rather than scaling it linearly.
struct RecipeStage {
  int resolution = 16;
  bool freeze_spatial = false;
  FpsMode fps = FpsMode::fixed8;
  PredictionType prediction_type = PredictionType::v;
  double learning_rate = 0.02;
  int iterations = 200;
  int batch_size = 4;
  ScheduleKind schedule_kind = ScheduleKind::linear;
  int schedule_steps = kDefaultTrainSteps;
  Optimizer optimizer = Optimizer::sgd;

  // v-prediction stages always pair with a zero-terminal schedule.
  NoiseSchedule build_schedule() const;
  double fps_value() const;  // fixed modes only
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
  int stage_id = 0;
};

// Rendered-at-resolution training items. Items with exactly 8 frames bypass
// clip sampling entirely; longer videos are motion-bucketed or sampled at the
// stage fps.
struct TrainItem {
  std::vector<std::string> caption;
  std::vector<Image> frames;
  double fps = 8.0;
};

struct TrainDataset {
  std::vector<TrainItem> items;
  int resolution = 0;
};

TrainDataset render_dataset(const SynthDataset& ds, int resolution);

// Denoising MSE at a uniformly sampled timestep with conditioning dropout.
// Draw order from rng: timestep, noise, conditioning frame, dropout.
Tensor training_loss(const Denoiser& model, const std::vector<Image>& clip_frames,
                     const std::vector<std::string>& caption, const NoiseSchedule& schedule,
                     const DropoutPolicy& dropout, const ConditioningFramePolicy& frame_policy, Rng& rng);

// Same loss against an arbitrary prediction function and a pre-encoded clip
// latent (oracle models in tests, distillation students).
Tensor training_loss_fn(const ModelFn& model, const Tensor& clip_latent, const std::vector<Tensor>& text,
                        const NoiseSchedule& schedule, const DropoutPolicy& dropout,
                        const ConditioningFramePolicy& frame_policy, Rng& rng);

struct StageResult {
  std::vector<LossPoint> curve;
};

// Plain SGD over the stage budget. freeze_spatial zeroes gradients of every
// non-temporal parameter before each update, leaving them bitwise unchanged.
StageResult train_stage(Denoiser& model, const SynthDataset& data, const RecipeStage& stage,
                        const ConditioningFramePolicy& frame_policy, uint64_t seed,
                        const BucketMap* bucket_map = nullptr, int stage_id = 0,
                        const DropoutPolicy& dropout = DropoutPolicy{});

// Same loop over already-rendered items (e.g. generated clips that cannot be
// re-rendered). The stage resolution must match the data.
StageResult train_stage_rendered(Denoiser& model, const TrainDataset& data, const RecipeStage& stage,
                                 const ConditioningFramePolicy& frame_policy, uint64_t seed,
                                 const BucketMap* bucket_map = nullptr, int stage_id = 0,
                                 const DropoutPolicy& dropout = DropoutPolicy{});

struct RecipeResult {
  std::vector<LossPoint> curve;
  std::vector<double> stage_final_loss;
};

// Stages applied in order; each re-renders the data at its resolution and
// re-derives its schedule. The final stage must use v-prediction (and hence
// zero terminal SNR).
RecipeResult run_recipe(Denoiser& model, const SynthDataset& data, const std::vector<RecipeStage>& stages,
                        const ConditioningFramePolicy& frame_policy, uint64_t seed,
                        const BucketMap* bucket_map = nullptr, const DropoutPolicy& dropout = DropoutPolicy{});

// Deterministic evaluation loss over a fixed (item, timestep, noise) grid;
// no dropout. Comparable across checkpoints.
double evaluate_loss(const Denoiser& model, const TrainDataset& data, const NoiseSchedule& schedule,
                     const ConditioningFramePolicy& frame_policy, uint64_t seed, int t_samples = 6);

// Two-sample Kolmogorov-Smirnov statistic (test utility for motion-score
// distribution comparisons).
double ks_statistic(std::vector<double> a, std::vector<double> b);

}  // namespace stickerlab
