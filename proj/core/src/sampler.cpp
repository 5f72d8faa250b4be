#include "stickerlab/sampler.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace stickerlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// lambda = log(alpha/sigma) = logSNR / 2
double alpha_of(double lambda) { return lambda == kInf ? 1.0 : std::sqrt(sigmoid(2.0 * lambda)); }
double sigma_of(double lambda) { return lambda == kInf ? 0.0 : std::sqrt(sigmoid(-2.0 * lambda)); }

Tensor to_quantity(const Tensor& pred, const Tensor& z, double alpha_bar, Quantity from, Quantity to) {
  return from == to ? pred : convert(pred, z, alpha_bar, from, to);
}

}  // namespace

const char* to_string(SolverKind k) {
  switch (k) {
    case SolverKind::ddpm: return "ddpm";
    case SolverKind::ddim: return "ddim";
    case SolverKind::dpm: return "dpm";
  }
  return "?";
}

SolverKind solver_from_string(const std::string& s) {
  if (s == "ddpm") return SolverKind::ddpm;
  if (s == "ddim") return SolverKind::ddim;
  if (s == "dpm") return SolverKind::dpm;
  throw std::invalid_argument("unknown solver: " + s);
}

ModelFn model_fn(const Denoiser& model) {
  return [&model](const Tensor& z, double t, const ConditioningBundle& cond) {
    NoGradGuard no_grad;
    return model.forward(z, t, cond);
  };
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_image_only, const Tensor& eps_full,
                   const GuidanceScales& scales) {
  if (eps_uncond.shape() != eps_image_only.shape() || eps_uncond.shape() != eps_full.shape())
    throw std::invalid_argument("cfg_combine: shapes differ: " + shape_str(eps_uncond.shape()) + " vs " +
                                shape_str(eps_image_only.shape()) + " vs " + shape_str(eps_full.shape()));
  // grouped coefficients (1-sI, sI-sT, sT); they sum to one
  return add(add(scale(eps_uncond, 1.0 - scales.sigma_image), scale(eps_image_only, scales.sigma_image - scales.sigma_text)),
             scale(eps_full, scales.sigma_text));
}

Tensor ddim_step(const Tensor& z, const Tensor& x0, const Tensor& eps, double lambda_next) {
  (void)z;
  return add(scale(x0, alpha_of(lambda_next)), scale(eps, sigma_of(lambda_next)));
}

Tensor dpm_solver_step(const Tensor& z, const Tensor& x0_cur, double lambda_cur, double lambda_next,
                       const Tensor* x0_prev, double lambda_prev) {
  const double h = lambda_next - lambda_cur;
  if (!(h > 0.0)) throw std::invalid_argument("dpm_solver_step: lambda must increase along sampling");
  const double a_next = alpha_of(lambda_next);
  const double s_next = sigma_of(lambda_next);
  const double s_cur = sigma_of(lambda_cur);
  const double em1 = lambda_next == kInf ? -1.0 : std::expm1(-h);
  Tensor d = x0_cur;
  if (x0_prev != nullptr) {
    // second-order multistep correction from the previous prediction
    const double h_prev = lambda_cur - lambda_prev;
    const double r = h_prev / (lambda_next == kInf ? h_prev : h);
    if (lambda_next != kInf) {
      const double c = 1.0 / (2.0 * r);
      d = add(scale(x0_cur, 1.0 + c), scale(*x0_prev, -c));
    }
  }
  return add(scale(z, s_next / s_cur), scale(d, -a_next * em1));
}

Shape latent_shape_of(const ModelConfig& config) {
  auto [bh, bw] = codec_block(config.latent_channels);
  return {config.frames, config.latent_channels, config.spatial_resolution / bh, config.spatial_resolution / bw};
}

SampleResult sample(const ModelFn& model, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                    const Shape& latent_shape, const SampleOptions& opt) {
  if (schedule.zero_terminal_snr && schedule.prediction_type == PredictionType::eps)
    throw std::invalid_argument(
        "sample: eps prediction is incompatible with a zero-terminal-SNR schedule (eps is undefined at SNR 0)");
  if (opt.n_steps < 1) throw std::invalid_argument("sample: n_steps must be >= 1");
  if (opt.policy.total_steps != opt.n_steps)
    throw std::invalid_argument("sample: policy covers " + std::to_string(opt.policy.total_steps) +
                                " steps but the run has " + std::to_string(opt.n_steps));
  if (opt.policy.guided_steps < 0 || opt.policy.guided_steps > opt.policy.total_steps)
    throw std::invalid_argument("sample: guided_steps outside [0, total_steps]");

  NoGradGuard no_grad;
  const Quantity native = schedule.prediction_type == PredictionType::eps ? Quantity::eps : Quantity::v;

  std::vector<double> times;
  if (opt.solver == SolverKind::dpm && opt.n_steps >= 2) {
    times = logsnr_linear_times(schedule, opt.n_steps);
  } else {
    const double hi = schedule.max_time();
    times.resize(opt.n_steps);
    for (int i = 0; i < opt.n_steps; ++i)
      times[i] = opt.n_steps == 1 ? hi : hi + (1.0 - hi) * i / (opt.n_steps - 1);
  }

  std::vector<double> lams(times.size());
  for (size_t i = 0; i < times.size(); ++i) lams[i] = 0.5 * schedule.logsnr_at(times[i]);

  Rng init_rng(opt.seed, 0x5eed);
  Rng step_rng(opt.seed, 0x571e);
  Tensor z = Tensor::randn(latent_shape, init_rng);

  SampleResult res;
  res.times = times;

  Tensor x0_prev;
  double lam_prev = 0.0;
  bool have_prev = false;

  const int n = opt.n_steps;
  for (int i = 0; i < n; ++i) {
    const double t = times[i];
    Tensor pred;
    if (i < opt.policy.guided_steps) {
      Tensor e_uu = model(z, t, cond.with_drops(true, true));
      Tensor e_iu = model(z, t, cond.with_drops(false, true));
      Tensor e_it = model(z, t, cond.with_drops(false, false));
      res.evals.unet_forwards += 3;
      pred = cfg_combine(e_uu, e_iu, e_it, opt.scales);
    } else {
      pred = model(z, t, cond.with_drops(false, false));
      res.evals.unet_forwards += 1;
    }

    const double ab = sigmoid(2.0 * lams[i]);
    Tensor x0 = to_quantity(pred, z, ab, native, Quantity::x0);
    const double lam_next = i + 1 < n ? lams[i + 1] : kInf;

    switch (opt.solver) {
      case SolverKind::ddim: {
        Tensor eps = to_quantity(pred, z, ab, native, Quantity::eps);
        z = ddim_step(z, x0, eps, lam_next);
        break;
      }
      case SolverKind::ddpm: {
        Tensor eps = to_quantity(pred, z, ab, native, Quantity::eps);
        if (lam_next == kInf) {
          z = x0;
        } else {
          // eta=1 ancestral update on the chosen grid
          const double ab_next = sigmoid(2.0 * lam_next);
          const double s_next2 = 1.0 - ab_next;
          const double var = s_next2 / (1.0 - ab) * (1.0 - ab / ab_next);
          const double s_noise = std::sqrt(std::max(0.0, var));
          const double s_dir = std::sqrt(std::max(0.0, s_next2 - s_noise * s_noise));
          Tensor noise = Tensor::randn(latent_shape, step_rng);
          z = add(add(scale(x0, std::sqrt(ab_next)), scale(eps, s_dir)), scale(noise, s_noise));
        }
        break;
      }
      case SolverKind::dpm: {
        z = dpm_solver_step(z, x0, lams[i], lam_next, have_prev ? &x0_prev : nullptr, lam_prev);
        break;
      }
    }
    x0_prev = x0;
    lam_prev = lams[i];
    have_prev = true;
  }

  res.video.data = z;
  return res;
}

SampleResult sample_model(const Denoiser& model, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                          const SampleOptions& opt) {
  return sample(model_fn(model), cond, schedule, latent_shape_of(model.config), opt);
}

}  // namespace stickerlab
