#include "stickerlab/distiller.hpp"

#include <cmath>
#include <map>
#include <limits>
#include <stdexcept>

namespace stickerlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct GridPoint {
  double t = 0.0;
  double lambda = 0.0;  // log(alpha/sigma)
};

std::vector<GridPoint> grid_points(const NoiseSchedule& s, int steps) {
  std::vector<GridPoint> pts;
  for (double t : logsnr_linear_times(s, steps)) pts.push_back({t, 0.5 * s.logsnr_at(t)});
  return pts;
}

Quantity native_of(const NoiseSchedule& s) {
  return s.prediction_type == PredictionType::eps ? Quantity::eps : Quantity::v;
}

// Guided native prediction: three forwards combined per the IP2P equation.
Tensor guided_prediction(const ModelFn& model, const Tensor& z, double t, const ConditioningBundle& cond,
                         const GuidanceScales& scales, EvalCounter* counter) {
  Tensor e_uu = model(z, t, cond.with_drops(true, true));
  Tensor e_iu = model(z, t, cond.with_drops(false, true));
  Tensor e_it = model(z, t, cond.with_drops(false, false));
  if (counter) counter->unet_forwards += 3;
  return cfg_combine(e_uu, e_iu, e_it, scales);
}

// One DDIM update from (z, prediction at lambda_cur) to lambda_next.
Tensor advance(const Tensor& z, const Tensor& pred, Quantity native, double lambda_cur, double lambda_next) {
  const double ab = sigmoid(2.0 * lambda_cur);
  Tensor x0 = native == Quantity::x0 ? pred : convert(pred, z, ab, native, Quantity::x0);
  Tensor eps = native == Quantity::eps ? pred : convert(pred, z, ab, native, Quantity::eps);
  return ddim_step(z, x0, eps, lambda_next);
}

void structural_match(const ModelConfig& a, const ModelConfig& b) {
  if (a.base_channels != b.base_channels || a.transformer_depth != b.transformer_depth ||
      a.res_blocks_per_stage != b.res_blocks_per_stage || a.latent_channels != b.latent_channels ||
      a.frames != b.frames || a.use_second_encoder != b.use_second_encoder)
    throw std::invalid_argument("guidance distillation: student and teacher architectures differ");
}

}  // namespace

const char* to_string(DistillMode m) { return m == DistillMode::guidance ? "guidance" : "guidance_plus_step"; }

DistillMode distill_mode_from_string(const std::string& s) {
  if (s == "guidance") return DistillMode::guidance;
  if (s == "guidance_plus_step" || s == "guidance+step") return DistillMode::guidance_plus_step;
  throw std::invalid_argument("unknown distill mode: " + s);
}

void DistillConfig::validate() const {
  if (teacher_steps < 1 || student_steps < 1 || ratio < 1)
    throw std::invalid_argument("distill: step counts must be positive");
  if (mode == DistillMode::guidance_plus_step && teacher_steps != ratio * student_steps)
    throw std::invalid_argument("distill: teacher_steps (" + std::to_string(teacher_steps) +
                                ") must equal ratio x student_steps (" + std::to_string(ratio) + " x " +
                                std::to_string(student_steps) + "); grids would misalign");
  if (iterations < 0 || batch_size < 1) throw std::invalid_argument("distill: bad training budget");
}

Denoiser clone_model(const Denoiser& m) {
  Denoiser c;
  c.config = m.config;
  for (const auto& [name, t] : m.params) c.params.emplace(name, Tensor::from_data(t.shape(), t.data(), true));
  return c;
}

std::vector<double> teacher_time_grid(const NoiseSchedule& s, int teacher_steps) {
  return logsnr_linear_times(s, teacher_steps);
}

std::vector<double> student_time_grid(const NoiseSchedule& s, const DistillConfig& config) {
  config.validate();
  if ((config.student_steps - 1) * config.ratio >= config.teacher_steps)
    throw std::invalid_argument("student grid: every ratio-th teacher timestep would run off the teacher grid");
  auto teacher = teacher_time_grid(s, config.teacher_steps);
  std::vector<double> out;
  for (int j = 0; j < config.student_steps; ++j) out.push_back(teacher[static_cast<size_t>(j) * config.ratio]);
  return out;
}

Tensor guidance_distill_step(const Denoiser& student, const Denoiser& teacher, const Tensor& z_t, double t,
                             const ConditioningBundle& cond, const GuidanceScales& scales,
                             const NoiseSchedule& schedule) {
  (void)schedule;
  structural_match(student.config, teacher.config);
  Tensor target;
  {
    NoGradGuard no_grad;
    target = guided_prediction(model_fn(teacher), z_t, t, cond, scales, nullptr);
  }
  Tensor pred = student.forward(z_t, t, cond.with_drops(false, false));
  return mse(pred, target);
}

Tensor step_distill_target(const ModelFn& teacher, const ConditioningBundle& cond, const Tensor& z_t,
                           int student_step, const NoiseSchedule& schedule, const GuidanceScales& scales,
                           const DistillConfig& config, EvalCounter* counter) {
  config.validate();
  if (student_step < 0 || student_step >= config.student_steps)
    throw std::invalid_argument("step_distill_target: student step " + std::to_string(student_step) +
                                " outside the grid of " + std::to_string(config.student_steps));
  NoGradGuard no_grad;
  auto grid = grid_points(schedule, config.teacher_steps);
  const Quantity native = native_of(schedule);
  Tensor z = z_t;
  for (int k = student_step * config.ratio; k < (student_step + 1) * config.ratio; ++k) {
    Tensor pred = guided_prediction(teacher, z, grid[k].t, cond, scales, counter);
    const double lam_next = k + 1 < static_cast<int>(grid.size()) ? grid[k + 1].lambda : kInf;
    z = advance(z, pred, native, grid[k].lambda, lam_next);
  }
  return z;
}

Tensor step_distill_target(const Denoiser& teacher, const ConditioningBundle& cond, const Tensor& z_t,
                           int student_step, const NoiseSchedule& schedule, const DistillConfig& config,
                           EvalCounter* counter) {
  return step_distill_target(model_fn(teacher), cond, z_t, student_step, schedule, config.scales, config, counter);
}

SampleResult distilled_sample(const Denoiser& student, const ConditioningBundle& cond, const NoiseSchedule& schedule,
                              const DistillConfig& config, uint64_t seed) {
  NoGradGuard no_grad;
  auto times = student_time_grid(schedule, config);
  const Quantity native = native_of(schedule);
  Rng init_rng(seed, 0x5eed);
  Tensor z = Tensor::randn(latent_shape_of(student.config), init_rng);
  SampleResult res;
  res.times = times;
  for (size_t i = 0; i < times.size(); ++i) {
    Tensor pred = student.forward(z, times[i], cond.with_drops(false, false));
    res.evals.unet_forwards += 1;
    const double lam = 0.5 * schedule.logsnr_at(times[i]);
    const double lam_next = i + 1 < times.size() ? 0.5 * schedule.logsnr_at(times[i + 1]) : kInf;
    z = advance(z, pred, native, lam, lam_next);
  }
  res.video.data = z;
  return res;
}

SampleResult teacher_reference_sample(const Denoiser& teacher, const ConditioningBundle& cond,
                                      const NoiseSchedule& schedule, const DistillConfig& config, uint64_t seed) {
  NoGradGuard no_grad;
  auto grid = grid_points(schedule, config.teacher_steps);
  const Quantity native = native_of(schedule);
  Rng init_rng(seed, 0x5eed);  // same init stream as the student: endpoints comparable
  Tensor z = Tensor::randn(latent_shape_of(teacher.config), init_rng);
  SampleResult res;
  ModelFn fn = model_fn(teacher);
  for (size_t k = 0; k < grid.size(); ++k) {
    Tensor pred = guided_prediction(fn, z, grid[k].t, cond, config.scales, &res.evals);
    const double lam_next = k + 1 < grid.size() ? grid[k + 1].lambda : kInf;
    z = advance(z, pred, native, grid[k].lambda, lam_next);
    res.times.push_back(grid[k].t);
  }
  res.video.data = z;
  return res;
}

namespace {

// Guided rollout of an arbitrary model over the student grid (baseline:
// undistilled weights spending 3 forwards per step).
Tensor guided_student_grid_rollout(const Denoiser& model, const ConditioningBundle& cond,
                                   const NoiseSchedule& schedule, const DistillConfig& config, uint64_t seed) {
  NoGradGuard no_grad;
  auto times = student_time_grid(schedule, config);
  const Quantity native = native_of(schedule);
  Rng init_rng(seed, 0x5eed);
  Tensor z = Tensor::randn(latent_shape_of(model.config), init_rng);
  ModelFn fn = model_fn(model);
  for (size_t i = 0; i < times.size(); ++i) {
    Tensor pred = guided_prediction(fn, z, times[i], cond, config.scales, nullptr);
    const double lam = 0.5 * schedule.logsnr_at(times[i]);
    const double lam_next = i + 1 < times.size() ? 0.5 * schedule.logsnr_at(times[i + 1]) : kInf;
    z = advance(z, pred, native, lam, lam_next);
  }
  return z;
}

double mse_value(const Tensor& a, const Tensor& b) {
  NoGradGuard no_grad;
  return mse(a, b).item();
}

// Deterministic guidance-distillation probe loss over a fixed
// (clip, timestep, noise) grid.
double guidance_validation_loss(const Denoiser& student, const Denoiser& teacher,
                                const std::vector<Tensor>& latents, const std::vector<ConditioningBundle>& conds,
                                const NoiseSchedule& schedule, const GuidanceScales& scales) {
  NoGradGuard no_grad;
  double acc = 0.0;
  int count = 0;
  for (size_t i = 0; i < latents.size(); ++i) {
    for (int k = 0; k < 4; ++k) {
      const int t = 1 + (k * schedule.steps()) / 4;
      Rng rng(0xA11D, (i << 8) ^ static_cast<uint64_t>(k));
      Tensor noise = Tensor::randn(latents[i].shape(), rng);
      Tensor z = q_sample(latents[i], t, noise, schedule);
      acc += guidance_distill_step(student, teacher, z, t, conds[i], scales, schedule).item();
      ++count;
    }
  }
  return acc / std::max(1, count);
}

struct EvalItem {
  ConditioningBundle cond;
  uint64_t seed = 0;
};

double endpoint_mse(const Denoiser& student, const Denoiser& teacher, const std::vector<EvalItem>& items,
                    const NoiseSchedule& schedule, const DistillConfig& config, bool guided_baseline) {
  double acc = 0.0;
  for (const auto& item : items) {
    Tensor ref = teacher_reference_sample(teacher, item.cond, schedule, config, item.seed).video.data;
    Tensor got = guided_baseline ? guided_student_grid_rollout(student, item.cond, schedule, config, item.seed)
                                 : distilled_sample(student, item.cond, schedule, config, item.seed).video.data;
    acc += mse_value(got, ref);
  }
  return acc / items.size();
}

}  // namespace

DistillResult distill(Denoiser& student, const Denoiser& teacher, const SynthDataset& data,
                      const DistillConfig& config, uint64_t seed, const NoiseSchedule& schedule) {
  config.validate();
  if (data.items.empty()) throw std::invalid_argument("distill: empty dataset");
  TrainDataset rendered = render_dataset(data, student.config.spatial_resolution);
  auto student_grid = config.mode == DistillMode::guidance_plus_step ? student_time_grid(schedule, config)
                                                                     : std::vector<double>{};
  ModelFn teacher_fn = model_fn(teacher);

  // pre-encode clips and conditioning
  struct Prep {
    Tensor latent;
    ConditioningBundle cond;
  };
  std::vector<Prep> preps;
  for (const auto& item : rendered.items) {
    Prep p;
    std::vector<Image> clip(item.frames.begin(), item.frames.begin() + kClipFrames);
    p.latent = codec_encode(clip, student.config.latent_channels).data;
    p.cond = make_conditioning(student, item.caption, clip[3]);
    preps.push_back(std::move(p));
  }

  std::vector<EvalItem> eval_items;
  std::vector<Tensor> eval_latents;
  std::vector<ConditioningBundle> eval_conds;
  for (size_t i = 0; i < std::min<size_t>(4, preps.size()); ++i) {
    eval_items.push_back({preps[i].cond, 0xE0A1ULL + 31 * i});
    eval_latents.push_back(preps[i].latent);
    eval_conds.push_back(preps[i].cond);
  }

  DistillResult result;
  result.baseline_endpoint_mse = endpoint_mse(student, teacher, eval_items, schedule, config, true);
  result.init_val_loss = guidance_validation_loss(student, teacher, eval_latents, eval_conds, schedule, config.scales);

  Rng rng(seed, 0xd157);
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> adam;
  int64_t opt_step = 0;
  for (int it = 0; it <= config.iterations; ++it) {
    Tensor total;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& prep = preps[rng.below(static_cast<int64_t>(preps.size()))];
      Tensor loss;
      if (config.mode == DistillMode::guidance) {
        const int t = 1 + static_cast<int>(rng.below(schedule.steps()));
        Tensor noise = Tensor::randn(prep.latent.shape(), rng);
        Tensor z = q_sample(prep.latent, t, noise, schedule);
        loss = guidance_distill_step(student, teacher, z, t, prep.cond, config.scales, schedule);
      } else {
        const int j = static_cast<int>(rng.below(config.student_steps));
        const double lam = 0.5 * schedule.logsnr_at(student_grid[j]);
        const double a = std::sqrt(sigmoid(2.0 * lam)), s = std::sqrt(sigmoid(-2.0 * lam));
        Tensor noise = Tensor::randn(prep.latent.shape(), rng);
        Tensor z = add(scale(prep.latent, a), scale(noise, s));
        Tensor target = step_distill_target(teacher_fn, prep.cond, z, j, schedule, config.scales, config);
        // student's one-step result, differentiable through the solver update
        Tensor pred = student.forward(z, student_grid[j], prep.cond.with_drops(false, false));
        const double lam_next =
            j + 1 < config.student_steps ? 0.5 * schedule.logsnr_at(student_grid[j + 1]) : kInf;
        Tensor stepped = advance(z, pred, native_of(schedule), lam, lam_next);
        loss = mse(stepped, target);
      }
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0 / config.batch_size);
    if (it == 0) result.init_loss = total.item();
    result.final_loss = total.item();
    if (it == config.iterations) {
      result.metrics.push_back({it, total.item(), 0.0});
      break;
    }
    backward(total);
    ++opt_step;
    const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt_step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt_step));
    for (auto& [name, p] : student.params) {
      if (!p.has_grad()) continue;
      auto& d = p.mutable_data();
      const auto& g = p.grad();
      if (config.optimizer == Optimizer::sgd) {
        for (size_t i = 0; i < d.size(); ++i) d[i] -= config.learning_rate * g[i];
      } else {
        auto& slot = adam[name];
        if (slot.first.empty()) {
          slot.first.assign(d.size(), 0.0);
          slot.second.assign(d.size(), 0.0);
        }
        for (size_t i = 0; i < d.size(); ++i) {
          slot.first[i] = b1 * slot.first[i] + (1.0 - b1) * g[i];
          slot.second[i] = b2 * slot.second[i] + (1.0 - b2) * g[i] * g[i];
          d[i] -= config.learning_rate * (slot.first[i] / bc1) / (std::sqrt(slot.second[i] / bc2) + aeps);
        }
      }
      p.zero_grad();
    }
    result.metrics.push_back({it, total.item(), 0.0});
  }

  result.final_endpoint_mse = endpoint_mse(student, teacher, eval_items, schedule, config, false);
  result.final_val_loss = guidance_validation_loss(student, teacher, eval_latents, eval_conds, schedule, config.scales);
  if (!result.metrics.empty()) result.metrics.back().endpoint_mse = result.final_endpoint_mse;
  return result;
}

}  // namespace stickerlab
