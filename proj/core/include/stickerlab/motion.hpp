#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "stickerlab/image.hpp"
#include "stickerlab/rng.hpp"

namespace stickerlab {

enum class MotionMethod { temporal_diff, mv_norm };

struct MotionScore {
  double value = 0.0;
  MotionMethod method = MotionMethod::temporal_diff;
};

// Ascending score thresholds; fps_per_bucket has one more entry than
// thresholds. A score exactly on a threshold belongs to the upper bucket.
struct BucketMap {
  std::vector<double> thresholds;
  std::vector<double> fps_per_bucket;

  void validate() const;
};

struct ClipSpec {
  int start_frame = 0;
  int spacing = 1;
  int n_frames = 8;
};

// min(round(video_fps / desired_fps), floor(video_frames / desired_frames)),
// round half away from zero, clamped to at least 1.
int frame_spacing(double video_fps, double desired_fps, int video_frames, int desired_frames);

// Mean absolute adjacent-frame luma difference after a 5x5 binomial blur,
// naturally normalized to [0,1].
MotionScore temporal_diff_score(const std::vector<Image>& frames);

// Exhaustive SAD block matching between adjacent frames; the score is the
// mean Euclidean norm of the best-match offsets. Ties prefer the smaller
// displacement, so static content scores exactly zero.
MotionScore mv_norm_score(const std::vector<Image>& frames, int block_size = 16, int search_range = 4);

double assign_bucket(double score, const BucketMap& map);

// Uniform random valid start; spacing from frame_spacing. Videos shorter
// than the requested clip are rejected.
std::pair<ClipSpec, std::vector<Image>> sample_clip(const std::vector<Image>& video, double video_fps,
                                                    double sampling_fps, Rng& rng);

// Quantile-free calibration from a labeled corpus: thresholds sit midway
// between the extremes of adjacent (ascending-motion) classes. Classes whose
// score ranges overlap cannot be separated and are rejected.
BucketMap calibrate_buckets(const std::vector<std::vector<double>>& scores_per_class,
                            const std::vector<double>& fps_per_class);

}  // namespace stickerlab
