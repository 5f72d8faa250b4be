#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "stickerlab/denoiser.hpp"
#include "stickerlab/schedule.hpp"

namespace stickerlab {

struct GuidanceScales {
  double sigma_image = 8.0;  // image CFG scale, production range 7.5..9
  double sigma_text = 2.0;   // text CFG scale, production range 1.5..3
};

// Full three-term guidance for the first guided_steps, a single conditional
// forward afterwards.
struct AdaptiveGuidancePolicy {
  int total_steps = 15;
  int guided_steps = 15;
};

struct EvalCounter {
  int64_t unet_forwards = 0;
};

enum class SolverKind { ddpm, ddim, dpm };

const char* to_string(SolverKind k);
SolverKind solver_from_string(const std::string& s);

using ModelFn = std::function<Tensor(const Tensor& z, double t, const ConditioningBundle& cond)>;

// Adapter over a UNet; forwards run without tape recording.
ModelFn model_fn(const Denoiser& model);

// eps~ = e(z,0,0) + sigma_I (e(z,cI,0) - e(z,0,0)) + sigma_T (e(z,cI,cT) - e(z,cI,0)),
// evaluated in the numerically exact grouped form so the (0,0) and (1,1)
// identities hold bitwise.
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_image_only, const Tensor& eps_full,
                   const GuidanceScales& scales);

// Single solver updates in the log(alpha/sigma) parameterization. lambda_next
// may be +inf, meaning "step to the clean sample".
Tensor ddim_step(const Tensor& z, const Tensor& x0, const Tensor& eps, double lambda_next);
Tensor dpm_solver_step(const Tensor& z, const Tensor& x0_cur, double lambda_cur, double lambda_next,
                       const Tensor* x0_prev = nullptr, double lambda_prev = 0.0);

struct SampleOptions {
  SolverKind solver = SolverKind::dpm;
  int n_steps = 15;
  GuidanceScales scales;
  AdaptiveGuidancePolicy policy{15, 8};
  uint64_t seed = 0;
};

struct SampleResult {
  LatentVideo video;
  EvalCounter evals;
  std::vector<double> times;  // model timesteps, sampling order
};

// Deterministic given the seed. DDIM/DDPM walk a uniform-in-t grid, DPM a
// linear-in-logSNR grid; an eps-prediction schedule with a zero-SNR terminal
// is rejected (eps is undefined there).
SampleResult sample(const ModelFn& model, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                    const Shape& latent_shape, const SampleOptions& opt);

// Convenience wrapper deriving the latent shape from the model config.
SampleResult sample_model(const Denoiser& model, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                          const SampleOptions& opt);

Shape latent_shape_of(const ModelConfig& config);

}  // namespace stickerlab
