#include "stickerlab/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "stickerlab/distiller.hpp"
#include "stickerlab/io.hpp"
#include "stickerlab/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace stickerlab {

namespace {

// Config problems are usage errors (exit 1), not runtime failures.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config is not valid JSON: " + path + " (" + e.what() + ")");
  }
}

// strict schema: typos must fail loudly
void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& ctx) {
  if (!obj.is_object()) throw UsageError("config: " + ctx + " must be an object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) throw UsageError("config: unknown key \"" + key + "\" in " + ctx);
}

template <typename T>
T need(const json& obj, const std::string& key, const std::string& ctx) {
  if (!obj.contains(key)) throw UsageError("config: missing key \"" + key + "\" in " + ctx);
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: bad value for \"" + key + "\" in " + ctx);
  }
}

template <typename T>
T opt(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<T>();
}

std::vector<std::string> tokenize_prompt(const std::string& prompt) {
  std::vector<std::string> out;
  std::istringstream ss(prompt);
  std::string tok;
  while (ss >> tok) {
    std::transform(tok.begin(), tok.end(), tok.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(tok);
  }
  return out;
}

ModelConfig parse_model(const json& j, const std::string& ctx) {
  check_keys(j,
             {"size_tag", "base_channels", "transformer_depth", "res_blocks_per_stage", "latent_channels", "frames",
              "use_second_encoder", "spatial_resolution", "ablation_small_latent"},
             ctx);
  ModelConfig c = ModelConfig::preset(size_tag_from_string(opt<std::string>(j, "size_tag", "sm")));
  c.base_channels = opt(j, "base_channels", c.base_channels);
  c.transformer_depth = opt(j, "transformer_depth", c.transformer_depth);
  c.res_blocks_per_stage = opt(j, "res_blocks_per_stage", c.res_blocks_per_stage);
  c.latent_channels = opt(j, "latent_channels", c.latent_channels);
  c.frames = opt(j, "frames", c.frames);
  c.use_second_encoder = opt(j, "use_second_encoder", c.use_second_encoder);
  c.spatial_resolution = opt(j, "spatial_resolution", c.spatial_resolution);
  c.ablation_small_latent = opt(j, "ablation_small_latent", c.ablation_small_latent);
  c.validate();
  return c;
}

RecipeStage parse_stage(const json& j, const std::string& ctx) {
  check_keys(j,
             {"resolution", "freeze_spatial", "fps", "prediction_type", "learning_rate", "iterations", "batch_size",
              "schedule_kind", "schedule_steps", "optimizer"},
             ctx);
  RecipeStage s;
  s.resolution = opt(j, "resolution", s.resolution);
  s.freeze_spatial = opt(j, "freeze_spatial", s.freeze_spatial);
  s.fps = fps_mode_from_string(opt<std::string>(j, "fps", "8"));
  s.prediction_type = prediction_type_from_string(opt<std::string>(j, "prediction_type", "v"));
  s.learning_rate = opt(j, "learning_rate", s.learning_rate);
  s.iterations = opt(j, "iterations", s.iterations);
  s.batch_size = opt(j, "batch_size", s.batch_size);
  s.schedule_kind = schedule_kind_from_string(opt<std::string>(j, "schedule_kind", "linear"));
  s.schedule_steps = opt(j, "schedule_steps", s.schedule_steps);
  s.optimizer = optimizer_from_string(opt<std::string>(j, "optimizer", "sgd"));
  return s;
}

GuidanceScales parse_scales(const json& j, const std::string& ctx) {
  check_keys(j, {"image", "text"}, ctx);
  GuidanceScales s;
  s.sigma_image = opt(j, "image", s.sigma_image);
  s.sigma_text = opt(j, "text", s.sigma_text);
  return s;
}

DatasetOptions parse_dataset_options(const json& j, const std::string& ctx) {
  DatasetOptions o;
  o.resolution = opt(j, "resolution", o.resolution);
  o.speeds = opt(j, "speeds", o.speeds);
  o.video_frames = opt(j, "video_frames", o.video_frames);
  o.video_fps = opt(j, "video_fps", o.video_fps);
  o.cond_frame_index = opt(j, "cond_frame_index", o.cond_frame_index);
  o.motions = opt(j, "motions", o.motions);
  o.sizes = opt(j, "sizes", o.sizes);
  (void)ctx;
  return o;
}

// {"dir": path} loads a saved manifest; otherwise an inline synthetic spec.
SynthDataset parse_dataset(const json& j, uint64_t seed, const std::string& ctx) {
  if (j.contains("dir")) {
    check_keys(j, {"dir"}, ctx);
    return load_dataset_manifest(j.at("dir").get<std::string>());
  }
  check_keys(j, {"n", "mix", "resolution", "speeds", "video_frames", "video_fps", "cond_frame_index", "seed",
                 "motions", "sizes"},
             ctx);
  const int n = need<int>(j, "n", ctx);
  const auto mix_v = opt<std::vector<double>>(j, "mix", {0.4, 0.3, 0.3});
  if (mix_v.size() != 3) throw UsageError("config: \"mix\" must have three entries in " + ctx);
  return build_dataset(n, {mix_v[0], mix_v[1], mix_v[2]}, opt<uint64_t>(j, "seed", seed),
                       parse_dataset_options(j, ctx));
}

BucketMap parse_bucket_map(const json& j, const std::string& ctx) {
  check_keys(j, {"thresholds", "fps_per_bucket"}, ctx);
  BucketMap m;
  m.thresholds = need<std::vector<double>>(j, "thresholds", ctx);
  m.fps_per_bucket = need<std::vector<double>>(j, "fps_per_bucket", ctx);
  m.validate();
  return m;
}

void write_run_manifest(const std::string& out_dir, const std::string& command, const json& config, uint64_t seed) {
  json manifest = {{"command", command}, {"seed", seed}, {"out", out_dir}, {"config", config}};
  atomic_write_file(out_dir + "/run_manifest.json", manifest.dump(2));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// --- subcommands -------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  SynthDataset ds = parse_dataset(cfg, seed, "gen-data config");
  save_dataset(out, ds);
  write_run_manifest(out, "gen-data", cfg, seed);
  std::printf("gen-data: wrote %zu items to %s\n", ds.items.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  check_keys(cfg, {"model", "data", "stages", "frame_policy", "dropout", "bucket_map"}, "train config");
  ModelConfig mc = parse_model(cfg.value("model", json::object()), "train.model");
  SynthDataset data = parse_dataset(cfg.at("data"), seed, "train.data");
  std::vector<RecipeStage> stages;
  for (const auto& sj : cfg.at("stages")) stages.push_back(parse_stage(sj, "train.stages[]"));
  ConditioningFramePolicy policy{frame_mode_from_string(opt<std::string>(cfg, "frame_policy", "middle"))};
  DropoutPolicy dropout;
  if (cfg.contains("dropout")) {
    check_keys(cfg.at("dropout"), {"text_only", "image_only", "both"}, "train.dropout");
    dropout.p_drop_text_only = opt(cfg.at("dropout"), "text_only", dropout.p_drop_text_only);
    dropout.p_drop_image_only = opt(cfg.at("dropout"), "image_only", dropout.p_drop_image_only);
    dropout.p_drop_both = opt(cfg.at("dropout"), "both", dropout.p_drop_both);
  }
  BucketMap map;
  const bool have_map = cfg.contains("bucket_map");
  if (have_map) map = parse_bucket_map(cfg.at("bucket_map"), "train.bucket_map");

  Denoiser model = build_model(mc, seed);
  RecipeResult res = run_recipe(model, data, stages, policy, seed, have_map ? &map : nullptr, dropout);

  fs::create_directories(out);
  const RecipeStage& last = stages.back();
  ScheduleConfig sched{last.schedule_kind, last.schedule_steps, last.prediction_type,
                       last.prediction_type == PredictionType::v};
  save_checkpoint(out + "/checkpoint.slcp", model, sched,
                  {{"command", "train"}, {"seed", std::to_string(seed)}});
  write_loss_csv(out + "/loss_curve.csv", res.curve);
  write_run_manifest(out, "train", cfg, seed);
  std::printf("train: %zu stages, final loss %.6f, wrote %s/checkpoint.slcp\n", stages.size(),
              res.curve.empty() ? 0.0 : res.curve.back().loss, out.c_str());
  return 0;
}

int cmd_distill(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  check_keys(cfg,
             {"teacher", "student_init", "mode", "teacher_steps", "student_steps", "ratio", "scales", "learning_rate",
              "iterations", "batch_size", "data", "optimizer"},
             "distill config");
  Checkpoint teacher_ck = load_checkpoint(need<std::string>(cfg, "teacher", "distill config"));
  const std::string init = opt<std::string>(cfg, "student_init", "teacher");
  Denoiser student = init == "teacher" ? clone_model(teacher_ck.model) : load_checkpoint(init).model;

  DistillConfig dc;
  dc.mode = distill_mode_from_string(opt<std::string>(cfg, "mode", "guidance_plus_step"));
  dc.teacher_steps = opt(cfg, "teacher_steps", dc.teacher_steps);
  dc.student_steps = opt(cfg, "student_steps", dc.student_steps);
  dc.ratio = opt(cfg, "ratio", dc.ratio);
  if (cfg.contains("scales")) dc.scales = parse_scales(cfg.at("scales"), "distill.scales");
  dc.learning_rate = opt(cfg, "learning_rate", dc.learning_rate);
  dc.iterations = opt(cfg, "iterations", dc.iterations);
  dc.batch_size = opt(cfg, "batch_size", dc.batch_size);
  dc.optimizer = optimizer_from_string(opt<std::string>(cfg, "optimizer", "sgd"));
  dc.validate();

  SynthDataset data = parse_dataset(cfg.at("data"), seed, "distill.data");
  DistillResult res = distill(student, teacher_ck.model, data, dc, seed, teacher_ck.schedule.build());

  fs::create_directories(out);
  save_checkpoint(out + "/student.slcp", student, teacher_ck.schedule,
                  {{"command", "distill"},
                   {"mode", to_string(dc.mode)},
                   {"scales_image", fmt(dc.scales.sigma_image)},
                   {"scales_text", fmt(dc.scales.sigma_text)},
                   {"student_steps", std::to_string(dc.student_steps)},
                   {"seed", std::to_string(seed)}});
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : res.metrics)
    rows.push_back({std::to_string(m.iteration), fmt(m.distill_loss), fmt(m.endpoint_mse)});
  write_csv(out + "/distill_metrics.csv", {"iteration", "distill_loss", "endpoint_mse"}, rows);
  write_run_manifest(out, "distill", cfg, seed);
  std::printf("distill: loss %.6f -> %.6f, endpoint mse %.6f (baseline %.6f)\n", res.init_loss, res.final_loss,
              res.final_endpoint_mse, res.baseline_endpoint_mse);
  return 0;
}

int cmd_sample(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  check_keys(cfg, {"checkpoint", "prompt", "image", "solver", "steps", "guided_steps", "scales", "distilled", "gif"},
             "sample config");
  Checkpoint ck = load_checkpoint(need<std::string>(cfg, "checkpoint", "sample config"));
  NoiseSchedule schedule = ck.schedule.build();

  const auto tokens = tokenize_prompt(need<std::string>(cfg, "prompt", "sample config"));
  Image cond_image;
  const json& ij = cfg.at("image");
  if (ij.contains("pam")) {
    check_keys(ij, {"pam"}, "sample.image");
    cond_image = read_pam(ij.at("pam").get<std::string>());
  } else {
    check_keys(ij, {"spec", "frame_index", "seed"}, "sample.image");
    const json& sj = ij.at("spec");
    check_keys(sj, {"bucket", "subject", "motion", "attributes", "speed"}, "sample.image.spec");
    PromptSpec spec;
    spec.motion = motion_from_string(opt<std::string>(sj, "motion", "still"));
    spec.bucket = sj.contains("bucket") ? bucket_from_string(sj.at("bucket").get<std::string>()) : bucket_of(spec.motion);
    spec.subject = opt<std::string>(sj, "subject", "disc");
    spec.attributes = opt<std::vector<std::string>>(sj, "attributes", {});
    spec.speed = opt(sj, "speed", 1.0);
    StickerClip clip = generate_clip(spec, ck.model.config.spatial_resolution, opt<uint64_t>(ij, "seed", 1));
    cond_image = clip.frames.at(opt(ij, "frame_index", 3));
  }

  ConditioningBundle cond = make_conditioning(ck.model, tokens, cond_image);
  std::vector<Image> frames;
  int64_t forwards = 0;
  if (cfg.contains("distilled") && cfg.at("distilled").get<bool>()) {
    DistillConfig dc;
    dc.student_steps = opt(cfg, "steps", 8);
    dc.teacher_steps = dc.student_steps * dc.ratio;
    SampleResult res = distilled_sample(ck.model, cond, schedule, dc, seed);
    frames = codec_decode(res.video);
    forwards = res.evals.unet_forwards;
  } else {
    SampleOptions sopt;
    sopt.solver = solver_from_string(opt<std::string>(cfg, "solver", "dpm"));
    sopt.n_steps = opt(cfg, "steps", 15);
    sopt.policy = {sopt.n_steps, opt(cfg, "guided_steps", std::min(8, sopt.n_steps))};
    if (cfg.contains("scales")) sopt.scales = parse_scales(cfg.at("scales"), "sample.scales");
    sopt.seed = seed;
    SampleResult res = sample_model(ck.model, cond, schedule, sopt);
    frames = codec_decode(res.video);
    forwards = res.evals.unet_forwards;
  }
  for (auto& f : frames) f.clamp01();

  save_clip_files(out, frames, 8.0,
                  {{"command", "sample"}, {"seed", std::to_string(seed)}, {"unet_forwards", std::to_string(forwards)}});
  if (opt(cfg, "gif", false)) write_gif_animation(out + "/animation.gif", frames, 8.0);
  write_run_manifest(out, "sample", cfg, seed);
  std::printf("sample: %zu frames, %lld forwards, wrote %s\n", frames.size(), static_cast<long long>(forwards),
              out.c_str());
  return 0;
}

MotionScore score_with_method(const std::vector<Image>& frames, const std::string& method) {
  if (method == "diff") return temporal_diff_score(frames);
  if (method == "mv") return mv_norm_score(frames);
  throw UsageError("bucket: unknown method \"" + method + "\" (use mv or diff)");
}

int cmd_bucket_score(const std::string& dir, const std::string& method, const std::string& map_path,
                     const std::string& out) {
  SynthDataset ds = load_dataset_manifest(dir);
  auto frame_sets = load_dataset_frames(dir);
  BucketMap map;
  const bool have_map = !map_path.empty();
  if (have_map) map = parse_bucket_map(load_config(map_path), "bucket map");

  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < frame_sets.size(); ++i) {
    const double score = score_with_method(frame_sets[i], method).value;
    char id[32];
    std::snprintf(id, sizeof(id), "item_%04zu", i);
    const double fps = have_map ? assign_bucket(score, map) : ds.video_fps;
    rows.push_back({id, fmt(score), fmt(fps)});
  }
  fs::create_directories(out);
  write_csv(out + "/scores.csv", {"video_id", "score", "fps"}, rows);
  std::printf("bucket score: %zu videos scored with %s\n", rows.size(), method.c_str());
  return 0;
}

int cmd_bucket_calibrate(const std::string& dir, const std::string& method, const std::vector<double>& fps_list,
                         const std::string& out) {
  SynthDataset ds = load_dataset_manifest(dir);
  auto frame_sets = load_dataset_frames(dir);
  // labeled corpus: the planted speed is the class
  std::map<double, std::vector<double>> by_speed;
  for (size_t i = 0; i < frame_sets.size(); ++i)
    by_speed[ds.items[i].spec.speed].push_back(score_with_method(frame_sets[i], method).value);
  if (by_speed.size() != fps_list.size())
    throw UsageError("bucket calibrate: corpus has " + std::to_string(by_speed.size()) +
                     " speed classes but " + std::to_string(fps_list.size()) + " fps values were given");
  std::vector<std::vector<double>> classes;
  for (auto& [speed, scores] : by_speed) classes.push_back(std::move(scores));
  BucketMap map = calibrate_buckets(classes, fps_list);
  fs::create_directories(out);
  atomic_write_file(out + "/bucket_map.json",
                    json{{"thresholds", map.thresholds}, {"fps_per_bucket", map.fps_per_bucket}}.dump(2));
  std::printf("bucket calibrate: %zu thresholds written\n", map.thresholds.size());
  return 0;
}

int cmd_bucket_sample(const std::string& dir, const std::string& video_id, const std::string& map_path,
                      uint64_t seed, const std::string& out) {
  SynthDataset ds = load_dataset_manifest(dir);
  auto frame_sets = load_dataset_frames(dir);
  int index = -1;
  for (size_t i = 0; i < ds.items.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "item_%04zu", i);
    if (video_id == id) index = static_cast<int>(i);
  }
  if (index < 0) throw UsageError("bucket sample: unknown video id " + video_id);
  BucketMap map = parse_bucket_map(load_config(map_path), "bucket map");
  const double score = temporal_diff_score(frame_sets[index]).value;
  const double fps = assign_bucket(score, map);
  Rng rng(seed, 0xb5a7);
  auto [spec, frames] = sample_clip(frame_sets[index], ds.video_fps, fps, rng);
  save_clip_files(out, frames, fps,
                  {{"video_id", video_id},
                   {"score", fmt(score)},
                   {"start_frame", std::to_string(spec.start_frame)},
                   {"spacing", std::to_string(spec.spacing)}});
  std::printf("bucket sample: %s score %.4f -> %.0f fps, spacing %d, start %d\n", video_id.c_str(), score, fps,
              spec.spacing, spec.start_frame);
  return 0;
}

int cmd_pipeline(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  check_keys(cfg, {"data", "teachers", "prompts", "ensemble", "student", "eval_prompts"}, "pipeline config");
  SynthDataset data = parse_dataset(cfg.at("data"), seed, "pipeline.data");

  // teachers
  std::vector<TrainedTeacher> teachers;
  fs::create_directories(out);
  int teacher_idx = 0;
  for (const auto& tj : cfg.at("teachers")) {
    check_keys(tj, {"id", "fps_emphasis", "model", "stages", "untrained"}, "pipeline.teachers[]");
    TeacherSpec spec;
    spec.id = need<std::string>(tj, "id", "pipeline.teachers[]");
    spec.fps_emphasis = fps_mode_from_string(opt<std::string>(tj, "fps_emphasis", "8"));
    spec.base_config = parse_model(tj.value("model", json::object()), "pipeline.teachers[].model");
    for (const auto& sj : tj.value("stages", json::array())) spec.recipe.push_back(parse_stage(sj, "stages[]"));
    if (opt(tj, "untrained", false) || spec.recipe.empty()) {
      // negative control: a freshly initialized model
      TrainedTeacher t;
      t.id = spec.id;
      t.model = build_model(spec.base_config, seed + 1000 + teacher_idx);
      t.schedule = ScheduleConfig{}.build();
      teachers.push_back(std::move(t));
    } else {
      TrainedTeacher t = train_teacher(spec, data, seed + teacher_idx);
      teachers.push_back(std::move(t));
    }
    ++teacher_idx;
  }

  // prompt-image pairs
  const json& pj = cfg.at("prompts");
  check_keys(pj, {"n", "images_per_prompt", "resolution", "seed"}, "pipeline.prompts");
  auto pairs = build_hitl_prompts(need<int>(pj, "n", "pipeline.prompts"), opt(pj, "images_per_prompt", 2),
                                  opt(pj, "resolution", 16), opt<uint64_t>(pj, "seed", seed + 17));

  EnsembleOptions eopt;
  if (cfg.contains("ensemble")) {
    const json& ej = cfg.at("ensemble");
    check_keys(ej, {"candidates_per_pair", "solver", "steps", "guided_steps", "scales", "keep_fraction"},
               "pipeline.ensemble");
    eopt.candidates_per_pair = opt(ej, "candidates_per_pair", eopt.candidates_per_pair);
    eopt.solver = solver_from_string(opt<std::string>(ej, "solver", "dpm"));
    eopt.n_steps = opt(ej, "steps", eopt.n_steps);
    eopt.guided_steps = opt(ej, "guided_steps", eopt.guided_steps);
    if (ej.contains("scales")) eopt.scales = parse_scales(ej.at("scales"), "pipeline.ensemble.scales");
    eopt.filter.target_keep_fraction = opt(ej, "keep_fraction", 0.10);
  }
  EnsembleResult ens = run_ensemble(teachers, pairs, eopt, seed);

  // student finetuning on survivors
  const json& sj = cfg.at("student");
  check_keys(sj, {"model", "stage", "init_seed"}, "pipeline.student");
  ModelConfig student_cfg = parse_model(sj.value("model", json::object()), "pipeline.student.model");
  RecipeStage stage = parse_stage(sj.value("stage", json::object()), "pipeline.student.stage");
  Denoiser student = build_model(student_cfg, opt<uint64_t>(sj, "init_seed", seed + 500));

  const json& ej = cfg.contains("eval_prompts") ? cfg.at("eval_prompts") : pj;
  check_keys(ej, {"n", "images_per_prompt", "resolution", "seed"}, "pipeline.eval_prompts");
  auto eval_pairs = build_hitl_prompts(need<int>(ej, "n", "pipeline.eval_prompts"), opt(ej, "images_per_prompt", 1),
                                       opt(ej, "resolution", 16), opt<uint64_t>(ej, "seed", seed + 23));
  NoiseSchedule student_schedule = stage.build_schedule();
  const double share_before = mean_shareability(student, student_schedule, eval_pairs, eopt, seed + 31);
  StageResult fres = finetune_student(student, ens.survivors, stage, seed + 41);
  const double share_after = mean_shareability(student, student_schedule, eval_pairs, eopt, seed + 31);

  // manifests and metrics
  json manifest;
  manifest["teachers"] = json::array();
  for (const auto& t : teachers) manifest["teachers"].push_back(t.id);
  manifest["prompt_pairs"] = pairs.size();
  manifest["filter"] = {{"round1", ens.filter_used.round1.motion_quality},
                        {"round2", ens.filter_used.round2.motion_quality},
                        {"target_keep_fraction", ens.filter_used.target_keep_fraction}};
  json cands = json::array();
  for (const auto& c : ens.candidates)
    cands.push_back({{"pair", c.pair_index},
                     {"teacher", c.teacher_id},
                     {"candidate", c.candidate_index},
                     {"seed", c.seed},
                     {"motion_quality", c.score.motion_quality},
                     {"relevance", c.score.relevance},
                     {"consistency", c.score.consistency},
                     {"pass_round1", c.pass_round1},
                     {"pass_round2", c.pass_round2}});
  manifest["candidates"] = cands;
  json survivors = json::array();
  for (const auto& s : ens.survivors) survivors.push_back({{"teacher", s.teacher_id}, {"seed", s.seed}});
  manifest["survivors"] = survivors;
  manifest["acceptance_rate_by_teacher"] = ens.acceptance_rate_by_teacher;
  json ranking = json::array();
  for (const auto& [id, q] : ens.peak_quality_ranking) ranking.push_back({{"teacher", id}, {"peak_quality", q}});
  manifest["peak_quality_ranking"] = ranking;
  manifest["student"] = {{"shareability_before", share_before}, {"shareability_after", share_after}};
  atomic_write_file(out + "/pipeline_manifest.json", manifest.dump(2));

  write_loss_csv(out + "/student_finetune.csv", fres.curve);
  save_checkpoint(out + "/student.slcp", student,
                  ScheduleConfig{stage.schedule_kind, stage.schedule_steps, stage.prediction_type,
                                 stage.prediction_type == PredictionType::v},
                  {{"command", "pipeline"}, {"seed", std::to_string(seed)}});
  std::vector<std::vector<std::string>> metric_rows = {
      {"candidates", std::to_string(ens.candidates.size())},
      {"survivors", std::to_string(ens.survivors.size())},
      {"keep_fraction", fmt(static_cast<double>(ens.survivors.size()) / ens.candidates.size())},
      {"shareability_before", fmt(share_before)},
      {"shareability_after", fmt(share_after)}};
  write_csv(out + "/pipeline_metrics.csv", {"metric", "value"}, metric_rows);
  write_run_manifest(out, "pipeline", cfg, seed);
  std::printf("pipeline: %zu candidates, %zu survivors (%.1f%%), shareability %.3f -> %.3f\n",
              ens.candidates.size(), ens.survivors.size(),
              100.0 * ens.survivors.size() / ens.candidates.size(), share_before, share_after);
  return 0;
}

int cmd_eval(const std::string& config_path, uint64_t seed, const std::string& out) {
  const json cfg = load_config(config_path);
  check_keys(cfg, {"checkpoint", "prompts", "sampler"}, "eval config");
  Checkpoint ck = load_checkpoint(need<std::string>(cfg, "checkpoint", "eval config"));
  const json& pj = cfg.at("prompts");
  check_keys(pj, {"n", "images_per_prompt", "resolution", "seed"}, "eval.prompts");
  auto pairs = build_hitl_prompts(need<int>(pj, "n", "eval.prompts"), opt(pj, "images_per_prompt", 1),
                                  opt(pj, "resolution", ck.model.config.spatial_resolution),
                                  opt<uint64_t>(pj, "seed", seed + 5));
  EnsembleOptions eopt;
  if (cfg.contains("sampler")) {
    const json& sj = cfg.at("sampler");
    check_keys(sj, {"solver", "steps", "guided_steps", "scales"}, "eval.sampler");
    eopt.solver = solver_from_string(opt<std::string>(sj, "solver", "dpm"));
    eopt.n_steps = opt(sj, "steps", eopt.n_steps);
    eopt.guided_steps = opt(sj, "guided_steps", eopt.guided_steps);
    if (sj.contains("scales")) eopt.scales = parse_scales(sj.at("scales"), "eval.sampler.scales");
  }
  EvalSummary sum = eval_proxies(ck.model, ck.schedule.build(), pairs, eopt, seed);

  json report = {{"samples", pairs.size()},
                 {"pass_rates",
                  {{"existence", sum.pass_rate_existence},
                   {"consistency", sum.pass_rate_consistency},
                   {"looping", sum.pass_rate_looping},
                   {"clipping", sum.pass_rate_clipping},
                   {"background", sum.pass_rate_background}}},
                 {"mean_shareability", sum.mean_shareability},
                 {"not_computed", {"relevance", "expression", "motion_curves"}}};
  fs::create_directories(out);
  atomic_write_file(out + "/eval_report.json", report.dump(2));
  write_run_manifest(out, "eval", cfg, seed);
  std::printf("eval: existence %.2f consistency %.2f looping %.2f clipping %.2f background %.2f\n",
              sum.pass_rate_existence, sum.pass_rate_consistency, sum.pass_rate_looping, sum.pass_rate_clipping,
              sum.pass_rate_background);
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale animated-sticker diffusion lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    if (needs_config) sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed, "master seed; all randomness derives from it");
    sub->add_option("--out", out_dir, "output directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic sticker dataset");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "run a multi-stage training recipe");
  add_common(train);
  CLI::App* dist = app.add_subcommand("distill", "guidance / guidance+step distillation");
  add_common(dist);
  CLI::App* sample = app.add_subcommand("sample", "sample a clip from a checkpoint");
  add_common(sample);
  CLI::App* evalc = app.add_subcommand("eval", "automatic proxy metrics for a checkpoint");
  add_common(evalc);
  CLI::App* pipe = app.add_subcommand("pipeline", "ensemble-of-teachers end to end");
  add_common(pipe);

  CLI::App* bucket = app.add_subcommand("bucket", "motion scoring and fps bucketing");
  bucket->require_subcommand(1);
  std::string bucket_dir, bucket_method = "diff", bucket_map_path, bucket_video;
  std::vector<double> bucket_fps = {4.0, 8.0, 12.0};
  CLI::App* bscore = bucket->add_subcommand("score", "score every video in a dataset");
  bscore->add_option("dir", bucket_dir, "dataset directory")->required();
  bscore->add_option("--method", bucket_method, "mv or diff");
  bscore->add_option("--map", bucket_map_path, "bucket map JSON for fps assignment");
  bscore->add_option("--out", out_dir, "output directory");
  CLI::App* bcal = bucket->add_subcommand("calibrate", "derive thresholds from a labeled corpus");
  bcal->add_option("dir", bucket_dir, "dataset directory")->required();
  bcal->add_option("--method", bucket_method, "mv or diff");
  bcal->add_option("--fps", bucket_fps, "sampling fps per ascending speed class");
  bcal->add_option("--out", out_dir, "output directory");
  CLI::App* bsample = bucket->add_subcommand("sample", "sample one clip at the bucketed fps");
  bsample->add_option("dir", bucket_dir, "dataset directory")->required();
  bsample->add_option("--video", bucket_video, "video id, e.g. item_0003")->required();
  bsample->add_option("--map", bucket_map_path, "bucket map JSON")->required();
  bsample->add_option("--seed", seed, "clip start seed");
  bsample->add_option("--out", out_dir, "output directory");

  std::vector<const char*> argv;
  argv.push_back("stickerlab");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, seed, out_dir);
    if (train->parsed()) return cmd_train(config_path, seed, out_dir);
    if (dist->parsed()) return cmd_distill(config_path, seed, out_dir);
    if (sample->parsed()) return cmd_sample(config_path, seed, out_dir);
    if (evalc->parsed()) return cmd_eval(config_path, seed, out_dir);
    if (pipe->parsed()) return cmd_pipeline(config_path, seed, out_dir);
    if (bucket->parsed()) {
      if (bscore->parsed()) return cmd_bucket_score(bucket_dir, bucket_method, bucket_map_path, out_dir);
      if (bcal->parsed()) return cmd_bucket_calibrate(bucket_dir, bucket_method, bucket_fps, out_dir);
      if (bsample->parsed()) return cmd_bucket_sample(bucket_dir, bucket_video, bucket_map_path, seed, out_dir);
    }
    std::fprintf(stderr, "unknown subcommand\n");
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 2;
  }
}

}  // namespace stickerlab
