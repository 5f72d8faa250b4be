#pragma once

#include <vector>

#include "stickerlab/tensor.hpp"

namespace stickerlab {

enum class PredictionType { eps, v };
enum class ScheduleKind { linear, cosine };
// Quantities a model prediction can be expressed in.
enum class Quantity { eps, x0, v };

// Per-timestep diffusion coefficients. Timesteps run 1..N; vectors are
// indexed t-1. alpha_bars is the source of truth after a terminal rescale
// (betas are re-derived and the final beta may then equal 1 exactly).
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;
  PredictionType prediction_type = PredictionType::eps;
  bool zero_terminal_snr = false;

  int steps() const { return static_cast<int>(betas.size()); }
  double alpha_bar(int t) const;   // t in 1..N
  double snr(int t) const;         // alpha_bar / (1 - alpha_bar)
  double logsnr(int t) const;      // -inf at an exact zero-SNR terminal

  // Continuous-time interpolation used by inference grids. logSNR is
  // piecewise-linear between integer timesteps; for zero-terminal schedules
  // the domain is clamped one step short of the infinite endpoint.
  double max_time() const;
  double logsnr_at(double u) const;
  double alpha_bar_at(double u) const;

  void validate() const;
};

// Desk-scale default: linear betas over N=64 (a 1000-step analogue).
inline constexpr int kDefaultTrainSteps = 64;

NoiseSchedule make_schedule(ScheduleKind kind, int n, PredictionType prediction_type);

// Affine rescale of sqrt(alpha_bar) fixing the first value and driving the
// last to exactly zero. Monotonicity is preserved.
NoiseSchedule rescale_zero_terminal_snr(const NoiseSchedule& s);

// z_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise
Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& s);

// Conversions between eps / x0 / v given the noisy latent. These build graph
// ops, so gradients flow through them when inputs require grad.
Tensor convert(const Tensor& pred, const Tensor& z_t, double alpha_bar, Quantity from, Quantity to);
Tensor convert(const Tensor& pred, const Tensor& z_t, int t, const NoiseSchedule& s, Quantity from, Quantity to);

// v target for training: v = alpha eps - sigma x0.
Tensor v_target(const Tensor& x0, const Tensor& noise, int t, const NoiseSchedule& s);

// Inference timesteps (possibly fractional, sampling order: noisiest first)
// whose interpolated logSNR values are uniformly spaced.
std::vector<double> logsnr_linear_times(const NoiseSchedule& s, int n_steps);

// Serializable schedule recipe.
struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = kDefaultTrainSteps;
  PredictionType prediction_type = PredictionType::v;
  bool zero_terminal_snr = true;

  NoiseSchedule build() const;
};

const char* to_string(PredictionType p);
const char* to_string(ScheduleKind k);
PredictionType prediction_type_from_string(const std::string& s);
ScheduleKind schedule_kind_from_string(const std::string& s);

}  // namespace stickerlab
