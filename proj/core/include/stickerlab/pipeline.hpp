#pragma once

#include <map>
#include <string>
#include <vector>

#include "stickerlab/distiller.hpp"
#include "stickerlab/sampler.hpp"
#include "stickerlab/synth.hpp"
#include "stickerlab/trainer.hpp"

namespace stickerlab {

struct TeacherSpec {
  std::string id;
  std::vector<RecipeStage> recipe;
  FpsMode fps_emphasis = FpsMode::fixed8;
  ModelConfig base_config;
};

struct ShareabilityScore {
  double motion_quality = 0.0;
  double relevance = 0.0;
  double consistency = 0.0;

  double overall() const;  // the binding component
};

struct ShareabilityThresholds {
  double motion_quality = 0.0;
  double relevance = 0.0;
  double consistency = 0.0;
};

bool passes(const ShareabilityScore& s, const ShareabilityThresholds& t);

// Two-round filter; the second round is at least as strict componentwise.
struct FilterConfig {
  ShareabilityThresholds round1;
  ShareabilityThresholds round2;
  double target_keep_fraction = 0.10;

  void validate() const;
};

// Alpha-mask summary of one frame.
struct MaskStats {
  double cx = 0.0;
  double cy = 0.0;
  double area = 0.0;  // pixels with alpha > 0.5
  bool empty = true;
};

MaskStats mask_stats(const Image& frame);

// Recovered trajectory class from the frames alone.
MotionKind classify_motion(const std::vector<Image>& frames);

// Programmatic stand-ins for the three shareability criteria:
// motion quality = band-passed motion score x trajectory smoothness,
// relevance = agreement of the recovered trajectory class with the prompt,
// consistency = 1 - normalized per-frame subject area drift.
ShareabilityScore shareability(const std::vector<Image>& frames, const PromptSpec& truth);

struct TrainedTeacher {
  std::string id;
  Denoiser model;
  NoiseSchedule schedule;
};

TrainedTeacher train_teacher(const TeacherSpec& spec, const SynthDataset& data, uint64_t seed,
                             const BucketMap* bucket_map = nullptr);

struct PromptImagePair {
  PromptSpec spec;
  std::vector<std::string> caption;
  Image image;
};

// HITL prompt set: n prompts, images_per_prompt conditioning renders each.
std::vector<PromptImagePair> build_hitl_prompts(int n_prompts, int images_per_prompt, int resolution, uint64_t seed);

struct EnsembleOptions {
  int candidates_per_pair = 1;
  SolverKind solver = SolverKind::dpm;
  int n_steps = 15;
  int guided_steps = 8;
  GuidanceScales scales;
  FilterConfig filter;
  bool calibrate_filter = true;  // derive thresholds from the candidate pool
};

struct CandidateRecord {
  int pair_index = 0;
  std::string teacher_id;
  int candidate_index = 0;
  uint64_t seed = 0;
  ShareabilityScore score;
  bool pass_round1 = false;
  bool pass_round2 = false;
};

struct HitlItem {
  std::vector<std::string> caption;
  Image conditioning;
  std::vector<Image> frames;
  std::string teacher_id;  // provenance
  uint64_t seed = 0;
  PromptSpec truth;
};

struct EnsembleResult {
  std::vector<CandidateRecord> candidates;
  std::vector<HitlItem> survivors;
  FilterConfig filter_used;
  std::map<std::string, double> acceptance_rate_by_teacher;
  // teachers ranked by their 95th-percentile candidate quality, best first
  std::vector<std::pair<std::string, double>> peak_quality_ranking;
};

// Generates candidates from every teacher for every prompt-image pair,
// filters in two rounds, and returns survivors with provenance.
EnsembleResult run_ensemble(const std::vector<TrainedTeacher>& teachers, const std::vector<PromptImagePair>& pairs,
                            const EnsembleOptions& opt, uint64_t seed);

// Round-1/round-2 thresholds from the candidate pool at the target keep
// fraction; round 1 admits roughly twice the target.
FilterConfig calibrate_filter(const std::vector<ShareabilityScore>& scores, double target_keep_fraction);

// Finetunes the student on survivors only. The stage resolution must match
// the generated frames.
StageResult finetune_student(Denoiser& student, const std::vector<HitlItem>& hitl, const RecipeStage& stage,
                             uint64_t seed);

struct ProxyReport {
  bool existence = false;
  bool consistency = false;
  bool looping = false;
  bool clipping_free = false;
  bool background_still = false;
  double motion_score = 0.0;
  double consistency_score = 0.0;
  double loop_distance = 0.0;
  double border_alpha = 0.0;
  double background_motion = 0.0;
  // categories that need human judgment are reported, not computed
  std::vector<std::string> not_computed = {"relevance", "expression", "motion_curves"};
};

ProxyReport eval_proxies_clip(const std::vector<Image>& frames);

struct EvalSummary {
  std::vector<ProxyReport> per_sample;
  double pass_rate_existence = 0.0;
  double pass_rate_consistency = 0.0;
  double pass_rate_looping = 0.0;
  double pass_rate_clipping = 0.0;
  double pass_rate_background = 0.0;
  double mean_shareability = 0.0;
};

// Samples the model over the prompt set and reports automatic proxy metrics.
EvalSummary eval_proxies(const Denoiser& model, const NoiseSchedule& schedule,
                         const std::vector<PromptImagePair>& pairs, const EnsembleOptions& opt, uint64_t seed);

// Mean shareability of generated samples against their prompt specs.
double mean_shareability(const Denoiser& model, const NoiseSchedule& schedule,
                         const std::vector<PromptImagePair>& pairs, const EnsembleOptions& opt, uint64_t seed);

}  // namespace stickerlab
