#include "stickerlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stickerlab {

namespace {

// Conditioning latent: one frame of the (already encoded) clip.
Tensor frame_latent(const Tensor& clip_latent, int index) {
  const auto& s = clip_latent.shape();
  const int64_t fsz = static_cast<int64_t>(s[1]) * s[2] * s[3];
  std::vector<double> one(clip_latent.data().begin() + index * fsz, clip_latent.data().begin() + (index + 1) * fsz);
  return Tensor::from_data({s[1], s[2], s[3]}, std::move(one));
}

struct PreparedItem {
  Tensor clip_latent;  // [8, C, H, W], constant
  std::vector<Tensor> text;
};

PreparedItem prepare(const Denoiser& model, const std::vector<Image>& clip_frames,
                     const std::vector<std::string>& caption) {
  PreparedItem out;
  out.clip_latent = codec_encode(clip_frames, model.config.latent_channels).data;
  out.text.push_back(model.encode_prompt_tokens(caption, 1));
  if (model.config.use_second_encoder) out.text.push_back(model.encode_prompt_tokens(caption, 2));
  return out;
}

template <typename PredFn>
Tensor loss_for(PredFn&& predict, const PreparedItem& item, const NoiseSchedule& schedule,
                const DropoutPolicy& dropout, const ConditioningFramePolicy& frame_policy, Rng& rng) {
  const int t = 1 + static_cast<int>(rng.below(schedule.steps()));
  Tensor noise = Tensor::randn(item.clip_latent.shape(), rng);
  Tensor z = q_sample(item.clip_latent, t, noise, schedule);
  const int cond_idx = select_conditioning_frame(item.clip_latent.shape()[0], frame_policy, rng);
  DropoutDraw draw = sample_dropout(dropout, rng);

  ConditioningBundle cond;
  cond.image_latent = frame_latent(item.clip_latent, cond_idx);
  cond.text_embeddings = item.text;
  cond.drop_image = draw.drop_image;
  cond.drop_text = draw.drop_text;

  Tensor pred = predict(z, static_cast<double>(t), cond);
  Tensor target = schedule.prediction_type == PredictionType::eps ? noise : v_target(item.clip_latent, noise, t, schedule);
  return mse(pred, target.detach());
}

struct AdamSlot {
  std::vector<double> m, v;
};

struct OptimizerState {
  Optimizer kind = Optimizer::sgd;
  int64_t step = 0;
  std::map<std::string, AdamSlot> slots;
};

void optimizer_step(Denoiser& model, OptimizerState& state, double lr, bool freeze_spatial) {
  ++state.step;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (auto& [name, p] : model.params) {
    if (!p.has_grad()) continue;
    if (freeze_spatial && !is_temporal_param(name)) p.zero_grad();
    if (p.has_grad()) {
      auto& data = p.mutable_data();
      const auto& g = p.grad();
      if (state.kind == Optimizer::sgd) {
        for (size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
      } else {
        auto& slot = state.slots[name];
        if (slot.m.empty()) {
          slot.m.assign(data.size(), 0.0);
          slot.v.assign(data.size(), 0.0);
        }
        for (size_t i = 0; i < data.size(); ++i) {
          slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
          slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
          data[i] -= lr * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps);
        }
      }
    }
    p.zero_grad();
  }
}

// Canonical item order, so training ignores how the dataset was sharded.
std::vector<size_t> canonical_order(const SynthDataset& ds) {
  std::vector<size_t> idx(ds.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (ds.items[a].seed != ds.items[b].seed) return ds.items[a].seed < ds.items[b].seed;
    return ds.items[a].caption < ds.items[b].caption;
  });
  return idx;
}

}  // namespace

const char* to_string(FrameMode m) {
  switch (m) {
    case FrameMode::first: return "first";
    case FrameMode::middle: return "middle";
    case FrameMode::last: return "last";
    case FrameMode::random: return "random";
  }
  return "?";
}

FrameMode frame_mode_from_string(const std::string& s) {
  if (s == "first") return FrameMode::first;
  if (s == "middle") return FrameMode::middle;
  if (s == "last") return FrameMode::last;
  if (s == "random") return FrameMode::random;
  throw std::invalid_argument("unknown frame mode: " + s);
}

const char* to_string(FpsMode m) {
  switch (m) {
    case FpsMode::fixed4: return "4";
    case FpsMode::fixed8: return "8";
    case FpsMode::dynamic: return "dynamic";
  }
  return "?";
}

FpsMode fps_mode_from_string(const std::string& s) {
  if (s == "4") return FpsMode::fixed4;
  if (s == "8") return FpsMode::fixed8;
  if (s == "dynamic") return FpsMode::dynamic;
  throw std::invalid_argument("unknown fps mode: " + s);
}

const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

void DropoutPolicy::validate() const {
  if (p_drop_text_only < 0.0 || p_drop_image_only < 0.0 || p_drop_both < 0.0)
    throw std::invalid_argument("dropout: probabilities must be nonnegative");
  if (p_drop_text_only + p_drop_image_only + p_drop_both > 1.0)
    throw std::invalid_argument("dropout: probabilities sum over 1");
}

DropoutDraw sample_dropout(const DropoutPolicy& policy, Rng& rng) {
  policy.validate();
  const double u = rng.uniform();
  DropoutDraw d;
  if (u < policy.p_drop_text_only) {
    d.drop_text = true;
  } else if (u < policy.p_drop_text_only + policy.p_drop_image_only) {
    d.drop_image = true;
  } else if (u < policy.p_drop_text_only + policy.p_drop_image_only + policy.p_drop_both) {
    d.drop_text = true;
    d.drop_image = true;
  }
  return d;
}

int select_conditioning_frame(int n_frames, const ConditioningFramePolicy& policy, Rng& rng) {
  if (n_frames != kClipFrames)
    throw std::invalid_argument("select_conditioning_frame: clip must have " + std::to_string(kClipFrames) +
                                " frames, got " + std::to_string(n_frames));
  switch (policy.mode) {
    case FrameMode::first: return 0;
    case FrameMode::middle: return 3;  // fourth frame of eight
    case FrameMode::last: return 7;
    case FrameMode::random: return static_cast<int>(rng.below(n_frames));
  }
  return 0;
}

NoiseSchedule RecipeStage::build_schedule() const {
  NoiseSchedule s = make_schedule(schedule_kind, schedule_steps, prediction_type);
  if (prediction_type == PredictionType::v) s = rescale_zero_terminal_snr(s);
  return s;
}

double RecipeStage::fps_value() const {
  switch (fps) {
    case FpsMode::fixed4: return 4.0;
    case FpsMode::fixed8: return 8.0;
    case FpsMode::dynamic: throw std::logic_error("fps_value: dynamic mode needs a bucket map");
  }
  return 8.0;
}

TrainDataset render_dataset(const SynthDataset& ds, int resolution) {
  TrainDataset out;
  out.resolution = resolution;
  SynthDataset at_res = ds;
  at_res.resolution = resolution;
  for (const auto& item : ds.items) {
    StickerClip clip = render_item(at_res, item);
    out.items.push_back({item.caption, std::move(clip.frames), clip.fps});
  }
  return out;
}

Tensor training_loss(const Denoiser& model, const std::vector<Image>& clip_frames,
                     const std::vector<std::string>& caption, const NoiseSchedule& schedule,
                     const DropoutPolicy& dropout, const ConditioningFramePolicy& frame_policy, Rng& rng) {
  if (static_cast<int>(clip_frames.size()) != kClipFrames)
    throw std::invalid_argument("training_loss: clip must have " + std::to_string(kClipFrames) + " frames");
  auto predict = [&model](const Tensor& z, double t, const ConditioningBundle& cond) {
    return model.forward(z, t, cond);
  };
  return loss_for(predict, prepare(model, clip_frames, caption), schedule, dropout, frame_policy, rng);
}

Tensor training_loss_fn(const ModelFn& model, const Tensor& clip_latent, const std::vector<Tensor>& text,
                        const NoiseSchedule& schedule, const DropoutPolicy& dropout,
                        const ConditioningFramePolicy& frame_policy, Rng& rng) {
  PreparedItem item{clip_latent, text};
  return loss_for(model, item, schedule, dropout, frame_policy, rng);
}

StageResult train_stage_rendered(Denoiser& model, const TrainDataset& rendered, const RecipeStage& stage,
                                 const ConditioningFramePolicy& frame_policy, uint64_t seed,
                                 const BucketMap* bucket_map, int stage_id, const DropoutPolicy& dropout) {
  if (rendered.items.empty()) throw std::invalid_argument("train_stage: empty dataset");
  if (stage.fps == FpsMode::dynamic && bucket_map == nullptr)
    throw std::invalid_argument("train_stage: dynamic fps needs a bucket map");
  if (rendered.resolution != stage.resolution)
    throw std::invalid_argument("train_stage: rendered data is " + std::to_string(rendered.resolution) +
                                "px but the stage wants " + std::to_string(stage.resolution) + "px");
  NoiseSchedule schedule = stage.build_schedule();

  // per-item sampling fps, with dynamic bucketing scored once per stage
  std::vector<double> fps_of(rendered.items.size(), 0.0);
  for (size_t i = 0; i < rendered.items.size(); ++i) {
    const auto& item = rendered.items[i];
    if (static_cast<int>(item.frames.size()) == kClipFrames) continue;  // bypasses bucketing
    if (stage.fps == FpsMode::dynamic)
      fps_of[i] = assign_bucket(temporal_diff_score(item.frames).value, *bucket_map);
    else
      fps_of[i] = stage.fps_value();
  }

  Rng rng(seed, 0x7121 + static_cast<uint64_t>(stage_id));
  OptimizerState opt_state;
  opt_state.kind = stage.optimizer;
  StageResult result;
  for (int it = 0; it < stage.iterations; ++it) {
    Tensor total;
    for (int b = 0; b < stage.batch_size; ++b) {
      const size_t pick = rng.below(static_cast<int64_t>(rendered.items.size()));
      const TrainItem& item = rendered.items[pick];
      std::vector<Image> clip;
      if (static_cast<int>(item.frames.size()) == kClipFrames) {
        clip = item.frames;
      } else {
        clip = sample_clip(item.frames, item.fps, fps_of[pick], rng).second;
      }
      Tensor loss = training_loss(model, clip, item.caption, schedule, dropout, frame_policy, rng);
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0 / stage.batch_size);
    backward(total);
    optimizer_step(model, opt_state, stage.learning_rate, stage.freeze_spatial);
    result.curve.push_back({it, total.item(), stage_id});
  }
  return result;
}

StageResult train_stage(Denoiser& model, const SynthDataset& data, const RecipeStage& stage,
                        const ConditioningFramePolicy& frame_policy, uint64_t seed, const BucketMap* bucket_map,
                        int stage_id, const DropoutPolicy& dropout) {
  if (data.items.empty()) throw std::invalid_argument("train_stage: empty dataset");
  // canonical order, so training ignores how the dataset was sharded
  SynthDataset ordered = data;
  const auto order = canonical_order(data);
  for (size_t i = 0; i < order.size(); ++i) ordered.items[i] = data.items[order[i]];
  TrainDataset rendered = render_dataset(ordered, stage.resolution);
  return train_stage_rendered(model, rendered, stage, frame_policy, seed, bucket_map, stage_id, dropout);
}

RecipeResult run_recipe(Denoiser& model, const SynthDataset& data, const std::vector<RecipeStage>& stages,
                        const ConditioningFramePolicy& frame_policy, uint64_t seed, const BucketMap* bucket_map,
                        const DropoutPolicy& dropout) {
  if (stages.empty()) throw std::invalid_argument("run_recipe: no stages");
  if (stages.back().prediction_type != PredictionType::v)
    throw std::invalid_argument("run_recipe: the final stage must train with v-prediction and zero terminal SNR");
  RecipeResult out;
  for (size_t i = 0; i < stages.size(); ++i) {
    StageResult r = train_stage(model, data, stages[i], frame_policy, seed, bucket_map, static_cast<int>(i), dropout);
    out.stage_final_loss.push_back(r.curve.empty() ? 0.0 : r.curve.back().loss);
    for (auto& pt : r.curve) out.curve.push_back(pt);
  }
  return out;
}

double evaluate_loss(const Denoiser& model, const TrainDataset& data, const NoiseSchedule& schedule,
                     const ConditioningFramePolicy& frame_policy, uint64_t seed, int t_samples) {
  NoGradGuard no_grad;
  const DropoutPolicy no_dropout{0.0, 0.0, 0.0};
  double acc = 0.0;
  int count = 0;
  for (size_t i = 0; i < data.items.size(); ++i) {
    const auto& item = data.items[i];
    std::vector<Image> clip(item.frames.begin(), item.frames.begin() + kClipFrames);
    PreparedItem prep = prepare(model, clip, item.caption);
    for (int k = 0; k < t_samples; ++k) {
      // fixed grid of timesteps, fresh but seeded noise per (item, k)
      const int t = 1 + static_cast<int>((static_cast<int64_t>(k) * schedule.steps()) / t_samples);
      Rng rng(seed, (i << 8) ^ static_cast<uint64_t>(k));
      Tensor noise = Tensor::randn(prep.clip_latent.shape(), rng);
      Tensor z = q_sample(prep.clip_latent, t, noise, schedule);
      ConditioningBundle cond;
      int eval_frame = 3;
      if (frame_policy.mode == FrameMode::first) eval_frame = 0;
      if (frame_policy.mode == FrameMode::last) eval_frame = 7;
      cond.image_latent = frame_latent(prep.clip_latent, eval_frame);
      cond.text_embeddings = prep.text;
      Tensor pred = model.forward(z, static_cast<double>(t), cond);
      Tensor target =
          schedule.prediction_type == PredictionType::eps ? noise : v_target(prep.clip_latent, noise, t, schedule);
      acc += mse(pred, target).item();
      ++count;
    }
  }
  return acc / std::max(1, count);
}

double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

}  // namespace stickerlab
