#include "stickerlab/motion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace stickerlab {

namespace {

std::vector<double> luma_map(const Image& im) {
  std::vector<double> out(static_cast<size_t>(im.width) * im.height);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) out[static_cast<size_t>(y) * im.width + x] = luma(im, y, x);
  return out;
}

// Separable binomial blur [1,4,6,4,1]/16 with edge replication, so constant
// images stay constant.
std::vector<double> binomial5(const std::vector<double>& in, int W, int H) {
  static const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  std::vector<double> tmp(in.size()), out(in.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int d = -2; d <= 2; ++d) acc += k[d + 2] * in[static_cast<size_t>(y) * W + std::clamp(x + d, 0, W - 1)];
      tmp[static_cast<size_t>(y) * W + x] = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int d = -2; d <= 2; ++d) acc += k[d + 2] * tmp[static_cast<size_t>(std::clamp(y + d, 0, H - 1)) * W + x];
      out[static_cast<size_t>(y) * W + x] = acc;
    }
  return out;
}

}  // namespace

void BucketMap::validate() const {
  if (fps_per_bucket.size() != thresholds.size() + 1)
    throw std::invalid_argument("bucket map: need one fps per interval (" + std::to_string(thresholds.size() + 1) +
                                "), got " + std::to_string(fps_per_bucket.size()));
  for (size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw std::invalid_argument("bucket map: thresholds must be strictly ascending");
}

int frame_spacing(double video_fps, double desired_fps, int video_frames, int desired_frames) {
  if (video_fps <= 0.0 || desired_fps <= 0.0 || video_frames <= 0 || desired_frames <= 0)
    throw std::invalid_argument("frame_spacing: all inputs must be positive");
  const double ratio = video_fps / desired_fps;
  const double rounded = std::round(ratio);  // std::round is half away from zero
  const int by_fps = static_cast<int>(rounded);
  const int by_len = video_frames / desired_frames;
  return std::max(1, std::min(by_fps, by_len));
}

MotionScore temporal_diff_score(const std::vector<Image>& frames) {
  if (frames.size() < 2) throw std::invalid_argument("temporal_diff_score: need at least 2 frames");
  const int W = frames[0].width, H = frames[0].height;
  std::vector<std::vector<double>> blurred;
  blurred.reserve(frames.size());
  for (const auto& f : frames) blurred.push_back(binomial5(luma_map(f), W, H));
  double acc = 0.0;
  for (size_t i = 1; i < blurred.size(); ++i) {
    double mad = 0.0;
    for (size_t p = 0; p < blurred[i].size(); ++p) mad += std::abs(blurred[i][p] - blurred[i - 1][p]);
    acc += mad / static_cast<double>(blurred[i].size());
  }
  return {acc / static_cast<double>(blurred.size() - 1), MotionMethod::temporal_diff};
}

MotionScore mv_norm_score(const std::vector<Image>& frames, int block_size, int search_range) {
  if (frames.size() < 2) throw std::invalid_argument("mv_norm_score: need at least 2 frames");
  const int W = frames[0].width, H = frames[0].height;
  // pad to a block multiple by edge replication (via clamped reads)
  const int bw = (W + block_size - 1) / block_size;
  const int bh = (H + block_size - 1) / block_size;
  std::vector<std::vector<double>> lumas;
  lumas.reserve(frames.size());
  for (const auto& f : frames) lumas.push_back(luma_map(f));

  auto read = [&](const std::vector<double>& l, int y, int x) {
    return l[static_cast<size_t>(std::clamp(y, 0, H - 1)) * W + std::clamp(x, 0, W - 1)];
  };

  double total = 0.0;
  int64_t count = 0;
  for (size_t i = 1; i < lumas.size(); ++i) {
    const auto& prev = lumas[i - 1];
    const auto& cur = lumas[i];
    for (int by = 0; by < bh; ++by) {
      for (int bx = 0; bx < bw; ++bx) {
        const int y0 = by * block_size, x0 = bx * block_size;
        double best_sad = 0.0;
        int best_dy = 0, best_dx = 0;
        bool first = true;
        for (int dy = -search_range; dy <= search_range; ++dy) {
          for (int dx = -search_range; dx <= search_range; ++dx) {
            double sad = 0.0;
            for (int y = 0; y < block_size; ++y)
              for (int x = 0; x < block_size; ++x)
                sad += std::abs(read(cur, y0 + y, x0 + x) - read(prev, y0 + y + dy, x0 + x + dx));
            const int norm2 = dy * dy + dx * dx;
            const int best_norm2 = best_dy * best_dy + best_dx * best_dx;
            if (first || sad < best_sad || (sad == best_sad && norm2 < best_norm2)) {
              best_sad = sad;
              best_dy = dy;
              best_dx = dx;
              first = false;
            }
          }
        }
        total += std::sqrt(static_cast<double>(best_dy * best_dy + best_dx * best_dx));
        ++count;
      }
    }
  }
  return {total / static_cast<double>(count), MotionMethod::mv_norm};
}

double assign_bucket(double score, const BucketMap& map) {
  map.validate();
  size_t idx = 0;
  while (idx < map.thresholds.size() && score >= map.thresholds[idx]) ++idx;
  return map.fps_per_bucket[idx];
}

std::pair<ClipSpec, std::vector<Image>> sample_clip(const std::vector<Image>& video, double video_fps,
                                                    double sampling_fps, Rng& rng) {
  const int n = 8;
  if (static_cast<int>(video.size()) < n)
    throw std::invalid_argument("sample_clip: video has " + std::to_string(video.size()) +
                                " frames, need at least " + std::to_string(n));
  ClipSpec spec;
  spec.n_frames = n;
  spec.spacing = frame_spacing(video_fps, sampling_fps, static_cast<int>(video.size()), n);
  const int max_start = static_cast<int>(video.size()) - 1 - spec.spacing * (n - 1);
  spec.start_frame = max_start > 0 ? static_cast<int>(rng.below(max_start + 1)) : 0;
  std::vector<Image> frames;
  frames.reserve(n);
  for (int i = 0; i < n; ++i) frames.push_back(video[spec.start_frame + static_cast<size_t>(i) * spec.spacing]);
  return {spec, std::move(frames)};
}

BucketMap calibrate_buckets(const std::vector<std::vector<double>>& scores_per_class,
                            const std::vector<double>& fps_per_class) {
  if (scores_per_class.size() != fps_per_class.size() || scores_per_class.size() < 2)
    throw std::invalid_argument("calibrate_buckets: need >= 2 classes with one fps each");
  BucketMap map;
  map.fps_per_bucket = fps_per_class;
  for (size_t c = 0; c + 1 < scores_per_class.size(); ++c) {
    if (scores_per_class[c].empty() || scores_per_class[c + 1].empty())
      throw std::invalid_argument("calibrate_buckets: empty class");
    const double hi = *std::max_element(scores_per_class[c].begin(), scores_per_class[c].end());
    const double lo = *std::min_element(scores_per_class[c + 1].begin(), scores_per_class[c + 1].end());
    if (!(hi < lo))
      throw std::invalid_argument("calibrate_buckets: classes " + std::to_string(c) + " and " + std::to_string(c + 1) +
                                  " overlap (max " + std::to_string(hi) + " vs min " + std::to_string(lo) + ")");
    map.thresholds.push_back(0.5 * (hi + lo));
  }
  map.validate();
  return map;
}

}  // namespace stickerlab
