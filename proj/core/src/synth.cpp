#include "stickerlab/synth.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "stickerlab/rng.hpp"

namespace stickerlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Trajectory gains, as fractions of the canvas.
constexpr double kSlideStepFrac = 1.0 / 64.0;  // px per frame per speed unit, relative to width
constexpr double kOscAmpFrac = 0.075;          // bounce/wave half-sine amplitude per speed unit
constexpr double kPulseAmp = 0.07;             // relative scale swing per speed unit
constexpr double kSpinPerClip = kPi;           // radians per speed unit across a clip

struct Rgb {
  double r, g, b;
};

const std::map<std::string, Rgb>& color_table() {
  static const std::map<std::string, Rgb> table = {
      {"red", {0.86, 0.20, 0.18}},    {"green", {0.22, 0.72, 0.29}}, {"blue", {0.23, 0.42, 0.86}},
      {"yellow", {0.94, 0.80, 0.19}}, {"magenta", {0.82, 0.26, 0.74}}, {"cyan", {0.22, 0.74, 0.76}},
  };
  return table;
}

double size_fraction(const std::vector<std::string>& attributes) {
  for (const auto& a : attributes) {
    if (a == "small") return 0.16;
    if (a == "large") return 0.26;
  }
  return 0.21;  // medium
}

Rgb fill_color(const std::vector<std::string>& attributes, double shade) {
  for (const auto& a : attributes) {
    auto it = color_table().find(a);
    if (it != color_table().end())
      return {std::clamp(it->second.r * shade, 0.0, 1.0), std::clamp(it->second.g * shade, 0.0, 1.0),
              std::clamp(it->second.b * shade, 0.0, 1.0)};
  }
  return {std::clamp(0.85 * shade, 0.0, 1.0), std::clamp(0.47 * shade, 0.0, 1.0), std::clamp(0.19 * shade, 0.0, 1.0)};
}

// Polar radius profile of a subject at unit scale.
double subject_radius(const std::string& subject, double theta, double blob_phase) {
  if (subject == "disc") return 1.0;
  if (subject == "star") return 0.62 + 0.38 * std::cos(5.0 * theta);
  if (subject == "blob") return 0.80 + 0.20 * std::sin(3.0 * theta + blob_phase);
  throw std::invalid_argument("unknown subject token: " + subject);
}

struct RenderParams {
  Rgb fill;
  Rgb background;
  double base_radius = 0.0;  // px
  double blob_phase = 0.0;
};

void render_frame(Image& im, const PromptSpec& spec, const Pose& pose, const RenderParams& rp, double ring_scale) {
  const int W = im.width, H = im.height;
  const double r = rp.base_radius * pose.scale;
  const double ring = std::max(1.0, 0.12 * r) * ring_scale;
  const double aa = 1.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double px = x + 0.5 - pose.cx;
      const double py = y + 0.5 - pose.cy;
      const double dist = std::sqrt(px * px + py * py);
      const double theta = std::atan2(py, px) - pose.angle;
      const double rr = r * subject_radius(spec.subject, theta, rp.blob_phase);
      const double sdf = dist - rr;
      const double alpha = std::clamp(0.5 - (sdf - ring) / aa, 0.0, 1.0);
      if (alpha <= 0.0) {
        im.at(0, y, x) = rp.background.r;
        im.at(1, y, x) = rp.background.g;
        im.at(2, y, x) = rp.background.b;
        im.at(3, y, x) = 0.0;
      } else {
        const double fill_t = std::clamp(0.5 - sdf / aa, 0.0, 1.0);  // 1 inside the fill, 0 on the ring
        im.at(0, y, x) = fill_t * rp.fill.r + (1.0 - fill_t) * 1.0;
        im.at(1, y, x) = fill_t * rp.fill.g + (1.0 - fill_t) * 1.0;
        im.at(2, y, x) = fill_t * rp.fill.b + (1.0 - fill_t) * 1.0;
        im.at(3, y, x) = alpha;
      }
    }
  }
}

struct Layout {
  double base_cx, base_cy;
  double radius_px;
};

// Base placement keeps every frame of the trajectory inside the canvas.
Layout layout_for(const PromptSpec& spec, int W, int H, Rng& rng) {
  const double mn = std::min(W, H);
  Layout l;
  l.radius_px = size_fraction(spec.attributes) * mn;
  const double jx = rng.uniform(-0.03, 0.03) * W;
  const double jy = rng.uniform(-0.03, 0.03) * H;
  l.base_cx = 0.5 * W + jx + spec.forced_offset_x;
  l.base_cy = 0.5 * H + jy;
  return l;
}

Pose clip_pose(const PromptSpec& spec, const Layout& l, int i, int n, int W, int H) {
  const double u = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
  const double mn = std::min(W, H);
  Pose p{l.base_cx, l.base_cy, 1.0, 0.0};
  switch (spec.motion) {
    case MotionKind::none:
      break;
    case MotionKind::slide: {
      const double step = spec.speed * kSlideStepFrac * W;
      const double total = step * (n - 1);
      p.cx = l.base_cx - 0.5 * total + step * i;
      break;
    }
    case MotionKind::bounce: {
      const double amp = kOscAmpFrac * mn * spec.speed;
      p.cy = l.base_cy + 0.5 * amp - amp * std::sin(kPi * u);
      break;
    }
    case MotionKind::wave: {
      const double amp = kOscAmpFrac * mn * spec.speed;
      p.cx = l.base_cx - 0.5 * amp + amp * std::sin(kPi * u);
      break;
    }
    case MotionKind::spin:
      p.angle = kSpinPerClip * spec.speed * u;
      break;
    case MotionKind::pulse:
      p.scale = 1.0 + kPulseAmp * spec.speed * std::sin(kPi * u);
      break;
  }
  return p;
}

Pose video_pose(const PromptSpec& spec, const Layout& l, int i, int W, int H) {
  const double mn = std::min(W, H);
  Pose p{l.base_cx, l.base_cy, 1.0, 0.0};
  switch (spec.motion) {
    case MotionKind::none:
      break;
    case MotionKind::slide: {
      // ping-pong between margins, constant per-frame step
      const double step = spec.speed * kSlideStepFrac * W;
      const double span = 0.16 * W;
      const double path = std::fmod(step * i, 4.0 * span);
      const double tri = path < 2.0 * span ? path - span : 3.0 * span - path;
      p.cx = l.base_cx + tri;
      break;
    }
    case MotionKind::bounce:
      p.cy = l.base_cy + 0.5 * kOscAmpFrac * mn * spec.speed * std::sin(2.0 * kPi * i / 12.0);
      break;
    case MotionKind::wave:
      p.cx = l.base_cx + 0.5 * kOscAmpFrac * mn * spec.speed * std::sin(2.0 * kPi * i / 12.0);
      break;
    case MotionKind::spin:
      p.angle = 2.0 * kPi * spec.speed * i / 16.0;
      break;
    case MotionKind::pulse:
      p.scale = 1.0 + kPulseAmp * spec.speed * std::sin(2.0 * kPi * i / 12.0);
      break;
  }
  return p;
}

void check_in_canvas(const StickerClip& clip, const PromptSpec& spec, double radius_px) {
  if (spec.forced_offset_x != 0.0) return;
  const int W = clip.frames[0].width, H = clip.frames[0].height;
  for (const auto& pose : clip.poses) {
    const double r = radius_px * pose.scale;
    // alpha reaches exact zero at sdf >= ring + aa/2
    const double reach = r + std::max(1.0, 0.12 * r) + 0.5;
    if (pose.cx - reach < 0.0 || pose.cx + reach > W || pose.cy - reach < 0.0 || pose.cy + reach > H)
      throw std::invalid_argument("generate: spec would clip the canvas (subject=" + spec.subject +
                                  ", motion=" + std::string(to_string(spec.motion)) +
                                  ", speed=" + std::to_string(spec.speed) + ")");
  }
}

StickerClip generate_impl(const PromptSpec& spec, int resolution, int n_frames, double fps, uint64_t seed,
                          bool video_mode) {
  spec.validate();
  if (resolution < 8 || resolution % 2 != 0)
    throw std::invalid_argument("generate: resolution must be even and >= 8, got " + std::to_string(resolution));
  Rng rng(seed, 0xc11b);
  const int W = resolution, H = resolution;
  Layout l = layout_for(spec, W, H, rng);

  RenderParams rp;
  rp.base_radius = l.radius_px;
  rp.fill = fill_color(spec.attributes, rng.uniform(0.9, 1.1));
  rp.background = {0.93, 0.93, 0.88};
  rp.blob_phase = spec.subject == "blob" ? rng.uniform(0.0, 2.0 * kPi) : 0.0;

  StickerClip clip;
  clip.truth = spec;
  clip.background = {rp.background.r, rp.background.g, rp.background.b};
  clip.fps = fps;
  clip.frames.reserve(n_frames);
  clip.poses.reserve(n_frames);
  for (int i = 0; i < n_frames; ++i) {
    Pose pose = video_mode ? video_pose(spec, l, i, W, H) : clip_pose(spec, l, i, n_frames, W, H);
    double ring_scale = 1.0;
    if (spec.secondary_motion) {
      const double u = n_frames > 1 ? static_cast<double>(i) / (n_frames - 1) : 0.0;
      ring_scale = 1.0 + 0.3 * std::sin(kPi * (video_mode ? std::fmod(i / 12.0, 1.0) : u));
    }
    Image im(W, H);
    render_frame(im, spec, pose, rp, ring_scale);
    clip.frames.push_back(std::move(im));
    clip.poses.push_back(pose);
  }
  check_in_canvas(clip, spec, l.radius_px);
  return clip;
}

}  // namespace

const char* to_string(PromptBucket b) {
  switch (b) {
    case PromptBucket::action: return "action";
    case PromptBucket::emotion: return "emotion";
    case PromptBucket::open_ended: return "open_ended";
  }
  return "?";
}

const char* to_string(MotionKind m) {
  switch (m) {
    case MotionKind::none: return "still";
    case MotionKind::slide: return "slide";
    case MotionKind::bounce: return "bounce";
    case MotionKind::spin: return "spin";
    case MotionKind::pulse: return "pulse";
    case MotionKind::wave: return "wave";
  }
  return "?";
}

MotionKind motion_from_string(const std::string& s) {
  if (s == "still" || s == "none") return MotionKind::none;
  if (s == "slide") return MotionKind::slide;
  if (s == "bounce") return MotionKind::bounce;
  if (s == "spin") return MotionKind::spin;
  if (s == "pulse") return MotionKind::pulse;
  if (s == "wave") return MotionKind::wave;
  throw std::invalid_argument("unknown motion token: " + s);
}

PromptBucket bucket_from_string(const std::string& s) {
  if (s == "action") return PromptBucket::action;
  if (s == "emotion") return PromptBucket::emotion;
  if (s == "open_ended" || s == "open-ended") return PromptBucket::open_ended;
  throw std::invalid_argument("unknown prompt bucket: " + s);
}

PromptBucket bucket_of(MotionKind m) {
  switch (m) {
    case MotionKind::slide:
    case MotionKind::bounce:
    case MotionKind::spin:
      return PromptBucket::action;
    case MotionKind::pulse:
    case MotionKind::wave:
      return PromptBucket::emotion;
    case MotionKind::none:
      return PromptBucket::open_ended;
  }
  return PromptBucket::open_ended;
}

void PromptSpec::validate() const {
  if (motion == MotionKind::none && bucket != PromptBucket::open_ended)
    throw std::invalid_argument("spec: motion 'still' is only valid in the open_ended bucket");
  if (speed <= 0.0) throw std::invalid_argument("spec: speed must be positive");
  subject_radius(subject, 0.0, 0.0);  // validates the token
}

StickerClip generate_clip(const PromptSpec& spec, int resolution, uint64_t seed) {
  return generate_impl(spec, resolution, kClipFrames, 8.0, seed, false);
}

StickerClip generate_video(const PromptSpec& spec, int resolution, int n_frames, double fps, uint64_t seed) {
  if (n_frames < kClipFrames)
    throw std::invalid_argument("generate_video: need at least " + std::to_string(kClipFrames) + " frames");
  return generate_impl(spec, resolution, n_frames, fps, seed, true);
}

std::vector<std::string> caption(const PromptSpec& spec) {
  spec.validate();
  std::vector<std::string> out = {spec.subject, to_string(spec.motion)};
  out.insert(out.end(), spec.attributes.begin(), spec.attributes.end());
  return out;
}

StickerClip render_item(const SynthDataset& ds, const SynthItem& item) {
  if (ds.video_frames == kClipFrames) return generate_clip(item.spec, ds.resolution, item.seed);
  return generate_video(item.spec, ds.resolution, ds.video_frames, ds.video_fps, item.seed);
}

SynthDataset build_dataset(int n, const std::array<double, 3>& mix, uint64_t seed, const DatasetOptions& opt) {
  if (n < 1) throw std::invalid_argument("build_dataset: n must be >= 1");
  if (opt.resolution < 16)
    throw std::invalid_argument("build_dataset: resolution must be >= 16 so the sampled size/speed grid fits");
  SynthDataset ds;
  ds.resolution = opt.resolution;
  ds.video_frames = opt.video_frames;
  ds.video_fps = opt.video_fps;

  // largest-remainder apportionment of the bucket mix
  double total = mix[0] + mix[1] + mix[2];
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (int b = 0; b < 3; ++b) {
    const double exact = n * mix[b] / total;
    counts[b] = static_cast<int>(std::floor(exact));
    rem[b] = exact - counts[b];
    assigned += counts[b];
  }
  while (assigned < n) {
    int best = 0;
    for (int b = 1; b < 3; ++b)
      if (rem[b] > rem[best]) best = b;
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }

  static const std::vector<std::string> subjects = {"disc", "star", "blob"};
  static const std::vector<std::string> colors = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  const std::vector<MotionKind> action = {MotionKind::slide, MotionKind::bounce, MotionKind::spin};
  const std::vector<MotionKind> emotion = {MotionKind::pulse, MotionKind::wave};
  const std::vector<MotionKind> open = {MotionKind::none,  MotionKind::slide, MotionKind::bounce,
                                        MotionKind::spin,  MotionKind::pulse, MotionKind::wave};

  std::vector<MotionKind> restricted;
  for (const auto& name : opt.motions) restricted.push_back(motion_from_string(name));

  Rng rng(seed, 0xda7a);
  for (int b = 0; b < 3; ++b) {
    const auto& motions = !restricted.empty() ? restricted : (b == 0 ? action : (b == 1 ? emotion : open));
    for (int i = 0; i < counts[b]; ++i) {
      SynthItem item;
      item.spec.motion = motions[rng.below(static_cast<int64_t>(motions.size()))];
      item.spec.bucket = !restricted.empty() ? bucket_of(item.spec.motion) : static_cast<PromptBucket>(b);
      // spin needs an oriented subject to be visible
      item.spec.subject = item.spec.motion == MotionKind::spin
                              ? (rng.below(2) == 0 ? "star" : "blob")
                              : subjects[rng.below(static_cast<int64_t>(subjects.size()))];
      item.spec.attributes = {colors[rng.below(static_cast<int64_t>(colors.size()))]};
      if (!opt.sizes.empty()) {
        item.spec.attributes.push_back(opt.sizes[rng.below(static_cast<int64_t>(opt.sizes.size()))]);
      } else if (item.spec.motion == MotionKind::slide) {
        // sliding at high speed with a large subject would clip, so cap size
        item.spec.attributes.push_back(rng.below(2) == 0 ? "small" : "medium");
      } else if (rng.below(3) == 0) {
        item.spec.attributes.push_back("large");
      }
      item.spec.speed = opt.speeds[rng.below(static_cast<int64_t>(opt.speeds.size()))];
      item.seed = rng.next_u64();
      item.caption = caption(item.spec);
      ds.items.push_back(std::move(item));
    }
  }
  return ds;
}

std::vector<Triplet> render_triplets(const SynthDataset& ds, int cond_frame_index) {
  std::vector<Triplet> out;
  out.reserve(ds.items.size());
  for (const auto& item : ds.items) {
    Triplet t;
    t.caption = item.caption;
    t.clip = render_item(ds, item);
    t.conditioning = t.clip.frames.at(cond_frame_index);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace stickerlab
