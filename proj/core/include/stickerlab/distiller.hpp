#pragma once

#include <cstdint>
#include <vector>

#include "stickerlab/sampler.hpp"
#include "stickerlab/synth.hpp"
#include "stickerlab/trainer.hpp"

namespace stickerlab {

enum class DistillMode { guidance, guidance_plus_step };

const char* to_string(DistillMode m);
DistillMode distill_mode_from_string(const std::string& s);

// Guidance scales are baked into the distilled student; it serves exactly one
// production configuration.
struct DistillConfig {
  DistillMode mode = DistillMode::guidance_plus_step;
  int teacher_steps = 32;
  int student_steps = 8;
  int ratio = 4;  // teacher steps imitated per student step
  GuidanceScales scales;
  double learning_rate = 0.01;
  int iterations = 300;
  int batch_size = 2;
  Optimizer optimizer = Optimizer::sgd;

  void validate() const;
};

// Deep copy: the clone's parameters are independent storage.
Denoiser clone_model(const Denoiser& m);

// Teacher inference grid (linear in logSNR) and the student grid formed by
// every ratio-th teacher timestep.
std::vector<double> teacher_time_grid(const NoiseSchedule& s, int teacher_steps);
std::vector<double> student_time_grid(const NoiseSchedule& s, const DistillConfig& config);

// One guidance-distillation term: MSE between the student's single
// full-conditional forward and the teacher's three-forward CFG combination.
// The teacher runs without gradients; architectures must match.
Tensor guidance_distill_step(const Denoiser& student, const Denoiser& teacher, const Tensor& z_t, double t,
                             const ConditioningBundle& cond, const GuidanceScales& scales,
                             const NoiseSchedule& schedule);

// Result of advancing z_t through `ratio` consecutive guided teacher solver
// steps starting at student grid slot `student_step`. Deterministic.
Tensor step_distill_target(const ModelFn& teacher, const ConditioningBundle& cond, const Tensor& z_t,
                           int student_step, const NoiseSchedule& schedule, const GuidanceScales& scales,
                           const DistillConfig& config, EvalCounter* counter = nullptr);
Tensor step_distill_target(const Denoiser& teacher, const ConditioningBundle& cond, const Tensor& z_t,
                           int student_step, const NoiseSchedule& schedule, const DistillConfig& config,
                           EvalCounter* counter = nullptr);

// Student inference: student_steps solver steps, one forward each.
SampleResult distilled_sample(const Denoiser& student, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                              const DistillConfig& config, uint64_t seed);

// Guided teacher rollout over the full teacher grid (3 forwards per step).
SampleResult teacher_reference_sample(const Denoiser& teacher, const ConditioningBundle& cond,
                                      const NoiseSchedule& schedule, const DistillConfig& config, uint64_t seed);

struct DistillMetricsRow {
  int iteration = 0;
  double distill_loss = 0.0;
  double endpoint_mse = 0.0;  // only populated on evaluation iterations
};

struct DistillResult {
  std::vector<DistillMetricsRow> metrics;
  double init_loss = 0.0;
  double final_loss = 0.0;
  double init_val_loss = 0.0;   // guidance probe loss before training
  double final_val_loss = 0.0;  // and after
  double baseline_endpoint_mse = 0.0;  // undistilled student, guided, student_steps
  double final_endpoint_mse = 0.0;
};

// Trains the student in place on (guidance + step) targets drawn by noising
// dataset clips at student-grid timesteps. The teacher is read-only. The
// schedule should be the one the teacher was trained with.
DistillResult distill(Denoiser& student, const Denoiser& teacher, const SynthDataset& data,
                      const DistillConfig& config, uint64_t seed,
                      const NoiseSchedule& schedule = ScheduleConfig{}.build());

}  // namespace stickerlab
