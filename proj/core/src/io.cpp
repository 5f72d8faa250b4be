#include "stickerlab/io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace stickerlab {

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& s, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

uint64_t get_u64(const std::string& s, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

float get_f32(const std::string& s, size_t off) {
  const uint32_t bits = get_u32(s, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

json config_to_json(const ModelConfig& c) {
  return json{{"size_tag", to_string(c.size_tag)},
              {"base_channels", c.base_channels},
              {"transformer_depth", c.transformer_depth},
              {"res_blocks_per_stage", c.res_blocks_per_stage},
              {"latent_channels", c.latent_channels},
              {"frames", c.frames},
              {"use_second_encoder", c.use_second_encoder},
              {"spatial_resolution", c.spatial_resolution},
              {"ablation_small_latent", c.ablation_small_latent}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.size_tag = size_tag_from_string(j.at("size_tag").get<std::string>());
  c.base_channels = j.at("base_channels").get<int>();
  c.transformer_depth = j.at("transformer_depth").get<int>();
  c.res_blocks_per_stage = j.at("res_blocks_per_stage").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.frames = j.at("frames").get<int>();
  c.use_second_encoder = j.at("use_second_encoder").get<bool>();
  c.spatial_resolution = j.at("spatial_resolution").get<int>();
  c.ablation_small_latent = j.value("ablation_small_latent", false);
  return c;
}

json schedule_to_json(const ScheduleConfig& s) {
  return json{{"kind", to_string(s.kind)},
              {"steps", s.steps},
              {"prediction_type", to_string(s.prediction_type)},
              {"zero_terminal_snr", s.zero_terminal_snr}};
}

ScheduleConfig schedule_from_json(const json& j) {
  ScheduleConfig s;
  s.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
  s.steps = j.at("steps").get<int>();
  s.prediction_type = prediction_type_from_string(j.at("prediction_type").get<std::string>());
  s.zero_terminal_snr = j.at("zero_terminal_snr").get<bool>();
  return s;
}

json spec_to_json(const PromptSpec& s) {
  return json{{"bucket", to_string(s.bucket)},        {"subject", s.subject},
              {"motion", to_string(s.motion)},        {"attributes", s.attributes},
              {"speed", s.speed},                     {"secondary_motion", s.secondary_motion}};
}

PromptSpec spec_from_json(const json& j) {
  PromptSpec s;
  s.bucket = bucket_from_string(j.at("bucket").get<std::string>());
  s.subject = j.at("subject").get<std::string>();
  s.motion = motion_from_string(j.at("motion").get<std::string>());
  s.attributes = j.at("attributes").get<std::vector<std::string>>();
  s.speed = j.at("speed").get<double>();
  s.secondary_motion = j.value("secondary_motion", false);
  return s;
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& contents) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& path, const Denoiser& model, const ScheduleConfig& schedule,
                     const std::map<std::string, std::string>& provenance) {
  json blobs = json::array();
  std::string blob_section;
  for (const auto& [name, t] : model.params) {
    blobs.push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", blob_section.size()}, {"count", t.size()}});
    for (double v : t.data()) put_f32(blob_section, static_cast<float>(v));
  }
  json header = {{"format_version", kCheckpointVersion},
                 {"model", config_to_json(model.config)},
                 {"schedule", schedule_to_json(schedule)},
                 {"provenance", provenance},
                 {"blobs", blobs}};
  const std::string header_str = header.dump();

  std::string out = "SLCP";
  put_u32(out, kCheckpointVersion);
  put_u64(out, header_str.size());
  out += header_str;
  out += blob_section;
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(blob_section.data()), static_cast<uInt>(blob_section.size())));
  put_u32(out, crc);
  atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string s = read_file(path);
  if (s.size() < 20 || s.compare(0, 4, "SLCP") != 0)
    throw std::runtime_error("checkpoint: bad magic or truncated file: " + path);
  const uint32_t version = get_u32(s, 4);
  if (version > kCheckpointVersion)
    throw std::runtime_error("checkpoint: format version " + std::to_string(version) + " is newer than supported " +
                             std::to_string(kCheckpointVersion));
  const uint64_t header_len = get_u64(s, 8);
  if (s.size() < 16 + header_len + 4) throw std::runtime_error("checkpoint: truncated header: " + path);
  const json header = json::parse(s.substr(16, header_len));

  Checkpoint ck;
  ck.schedule = schedule_from_json(header.at("schedule"));
  for (const auto& [k, v] : header.at("provenance").items()) ck.provenance[k] = v.get<std::string>();
  const ModelConfig config = config_from_json(header.at("model"));

  const size_t blob_start = 16 + header_len;
  const size_t blob_size = s.size() - blob_start - 4;
  const uint32_t stored_crc = get_u32(s, s.size() - 4);
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(s.data() + blob_start), static_cast<uInt>(blob_size)));
  if (crc != stored_crc) throw std::runtime_error("checkpoint: checksum failure: " + path);

  // a fresh skeleton guarantees the blob set matches the architecture
  ck.model = build_model(config, 0);
  size_t seen = 0;
  for (const auto& blob : header.at("blobs")) {
    const std::string name = blob.at("name").get<std::string>();
    const Shape shape = blob.at("shape").get<Shape>();
    const uint64_t offset = blob.at("offset").get<uint64_t>();
    const int64_t count = blob.at("count").get<int64_t>();
    auto it = ck.model.params.find(name);
    if (it == ck.model.params.end()) throw std::runtime_error("checkpoint: unknown parameter " + name);
    if (it->second.shape() != shape) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    if (blob_start + offset + static_cast<uint64_t>(count) * 4 > s.size() - 4)
      throw std::runtime_error("checkpoint: truncated blob " + name);
    std::vector<double> data(count);
    for (int64_t i = 0; i < count; ++i) data[i] = get_f32(s, blob_start + offset + static_cast<size_t>(i) * 4);
    it->second = Tensor::from_data(shape, std::move(data), true);
    ++seen;
  }
  if (seen != ck.model.params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch (" + std::to_string(seen) + " vs " +
                             std::to_string(ck.model.params.size()) + ")");
  return ck;
}

// --- PAM --------------------------------------------------------------------

void write_pam(const std::string& path, const Image& image) {
  std::string out = "P7\nWIDTH " + std::to_string(image.width) + "\nHEIGHT " + std::to_string(image.height) +
                    "\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n";
  out.reserve(out.size() + static_cast<size_t>(image.width) * image.height * 4);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 4; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
      }
  atomic_write_file(path, out);
}

Image read_pam(const std::string& path) {
  const std::string s = read_file(path);
  if (s.compare(0, 3, "P7\n") != 0) throw std::runtime_error("pam: bad magic in " + path);
  size_t pos = 3;
  int width = 0, height = 0, depth = 0, maxval = 0;
  while (true) {
    const size_t eol = s.find('\n', pos);
    if (eol == std::string::npos) throw std::runtime_error("pam: unterminated header in " + path);
    const std::string line = s.substr(pos, eol - pos);
    pos = eol + 1;
    if (line == "ENDHDR") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "WIDTH") ls >> width;
    else if (key == "HEIGHT") ls >> height;
    else if (key == "DEPTH") ls >> depth;
    else if (key == "MAXVAL") ls >> maxval;
  }
  if (width <= 0 || height <= 0 || depth != 4 || maxval != 255)
    throw std::runtime_error("pam: unsupported header in " + path);
  const size_t need = static_cast<size_t>(width) * height * 4;
  if (s.size() - pos < need) throw std::runtime_error("pam: truncated pixel data in " + path);
  Image im(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 4; ++c)
        im.at(c, y, x) = static_cast<unsigned char>(s[pos + (static_cast<size_t>(y) * width + x) * 4 + c]) / 255.0;
  return im;
}

void save_clip_files(const std::string& dir, const std::vector<Image>& frames, double fps,
                     const std::map<std::string, std::string>& provenance) {
  fs::create_directories(dir);
  json manifest;
  manifest["fps"] = fps;
  manifest["frame_count"] = frames.size();
  manifest["width"] = frames.empty() ? 0 : frames[0].width;
  manifest["height"] = frames.empty() ? 0 : frames[0].height;
  manifest["provenance"] = provenance;
  json order = json::array();
  for (size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.pam", i);
    write_pam(dir + "/" + name, frames[i]);
    order.push_back(name);
  }
  manifest["frames"] = order;
  atomic_write_file(dir + "/manifest.json", manifest.dump(2));
}

ClipFiles load_clip_files(const std::string& dir) {
  const json manifest = json::parse(read_file(dir + "/manifest.json"));
  ClipFiles out;
  out.fps = manifest.at("fps").get<double>();
  for (const auto& [k, v] : manifest.at("provenance").items()) out.provenance[k] = v.get<std::string>();
  for (const auto& name : manifest.at("frames")) out.frames.push_back(read_pam(dir + "/" + name.get<std::string>()));
  if (out.frames.size() != manifest.at("frame_count").get<size_t>())
    throw std::runtime_error("clip manifest disagrees with frame files in " + dir);
  for (const auto& f : out.frames)
    if (f.width != manifest.at("width").get<int>() || f.height != manifest.at("height").get<int>())
      throw std::runtime_error("clip manifest dimensions disagree with frames in " + dir);
  return out;
}

// --- GIF --------------------------------------------------------------------

namespace {

// 6x6x6 color cube plus 16 grays; index 0 is black.
int palette_index(double r, double g, double b) {
  const int ri = static_cast<int>(std::lround(std::clamp(r, 0.0, 1.0) * 5.0));
  const int gi = static_cast<int>(std::lround(std::clamp(g, 0.0, 1.0) * 5.0));
  const int bi = static_cast<int>(std::lround(std::clamp(b, 0.0, 1.0) * 5.0));
  return ri * 36 + gi * 6 + bi;
}

class LzwWriter {
 public:
  explicit LzwWriter(std::string& out) : out_(out) {}

  void encode(const std::vector<uint8_t>& pixels) {
    out_.push_back(8);  // minimum code size
    reset_dict();
    emit(clear_);
    int32_t prefix = -1;
    for (uint8_t p : pixels) {
      const int64_t key = (static_cast<int64_t>(prefix) << 8) | p;
      if (prefix >= 0 && dict_.count(key)) {
        prefix = dict_[key];
        continue;
      }
      if (prefix >= 0) {
        emit(prefix);
        dict_[key] = next_code_++;
        if (next_code_ > (1 << width_) && width_ < 12) ++width_;
        if (next_code_ >= 4096) {
          emit(clear_);
          reset_dict();
        }
      }
      prefix = p;
    }
    if (prefix >= 0) emit(prefix);
    emit(eoi_);
    flush_bits();
    flush_block();
    out_.push_back(0);  // block terminator
  }

 private:
  void reset_dict() {
    dict_.clear();
    next_code_ = 258;
    width_ = 9;
  }
  void emit(int code) {
    bits_ |= static_cast<uint64_t>(code) << nbits_;
    nbits_ += width_;
    while (nbits_ >= 8) {
      block_.push_back(static_cast<char>(bits_ & 0xff));
      bits_ >>= 8;
      nbits_ -= 8;
      if (block_.size() == 255) flush_block();
    }
  }
  void flush_bits() {
    if (nbits_ > 0) {
      block_.push_back(static_cast<char>(bits_ & 0xff));
      bits_ = 0;
      nbits_ = 0;
      if (block_.size() == 255) flush_block();
    }
  }
  void flush_block() {
    if (block_.empty()) return;
    out_.push_back(static_cast<char>(block_.size()));
    out_ += block_;
    block_.clear();
  }

  std::string& out_;
  std::map<int64_t, int> dict_;
  int next_code_ = 258;
  int width_ = 9;
  const int clear_ = 256;
  const int eoi_ = 257;
  uint64_t bits_ = 0;
  int nbits_ = 0;
  std::string block_;
};

}  // namespace

void write_gif_animation(const std::string& path, const std::vector<Image>& frames, double fps,
                         const std::array<double, 3>& background) {
  if (frames.empty()) throw std::invalid_argument("gif: no frames");
  const int W = frames[0].width, H = frames[0].height;
  std::string out = "GIF89a";
  out.push_back(static_cast<char>(W & 0xff));
  out.push_back(static_cast<char>(W >> 8));
  out.push_back(static_cast<char>(H & 0xff));
  out.push_back(static_cast<char>(H >> 8));
  out.push_back(static_cast<char>(0xf7));  // global color table, 256 entries
  out.push_back(0);                        // background index
  out.push_back(0);                        // aspect
  for (int i = 0; i < 216; ++i) {
    out.push_back(static_cast<char>((i / 36) * 51));
    out.push_back(static_cast<char>(((i / 6) % 6) * 51));
    out.push_back(static_cast<char>((i % 6) * 51));
  }
  for (int i = 216; i < 256; ++i) {
    const int g = (i - 216) * 255 / 39;
    out.push_back(static_cast<char>(g));
    out.push_back(static_cast<char>(g));
    out.push_back(static_cast<char>(g));
  }
  // netscape loop extension
  const char loop_ext[] = {0x21, static_cast<char>(0xff), 0x0b, 'N', 'E', 'T', 'S', 'C', 'A', 'P',
                           'E',  '2',  '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.append(loop_ext, sizeof(loop_ext));

  const int delay = std::max(2, static_cast<int>(std::lround(100.0 / fps)));
  for (const auto& f : frames) {
    if (f.width != W || f.height != H) throw std::invalid_argument("gif: frame dimensions differ");
    // graphic control
    out.push_back(0x21);
    out.push_back(static_cast<char>(0xf9));
    out.push_back(0x04);
    out.push_back(0x00);
    out.push_back(static_cast<char>(delay & 0xff));
    out.push_back(static_cast<char>(delay >> 8));
    out.push_back(0x00);
    out.push_back(0x00);
    // image descriptor
    out.push_back(0x2c);
    for (int v : {0, 0, W, H}) {
      out.push_back(static_cast<char>(v & 0xff));
      out.push_back(static_cast<char>(v >> 8));
    }
    out.push_back(0x00);
    std::vector<uint8_t> pixels;
    pixels.reserve(static_cast<size_t>(W) * H);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double a = std::clamp(f.at(3, y, x), 0.0, 1.0);
        const double r = a * f.at(0, y, x) + (1.0 - a) * background[0];
        const double g = a * f.at(1, y, x) + (1.0 - a) * background[1];
        const double b = a * f.at(2, y, x) + (1.0 - a) * background[2];
        pixels.push_back(static_cast<uint8_t>(palette_index(r, g, b)));
      }
    LzwWriter(out).encode(pixels);
  }
  out.push_back(0x3b);  // trailer
  atomic_write_file(path, out);
}

// --- CSV / datasets ---------------------------------------------------------

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) out += ",";
    out += header[i];
  }
  out += "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      out += row[i];
    }
    out += "\n";
  }
  atomic_write_file(path, out);
}

void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& pt : curve) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", pt.loss);
    rows.push_back({std::to_string(pt.step), buf, std::to_string(pt.stage_id)});
  }
  write_csv(path, {"step", "loss", "stage_id"}, rows);
}

void save_dataset(const std::string& dir, const SynthDataset& ds) {
  fs::create_directories(dir);
  json items = json::array();
  for (size_t i = 0; i < ds.items.size(); ++i) {
    const auto& item = ds.items[i];
    char name[32];
    std::snprintf(name, sizeof(name), "item_%04zu", i);
    StickerClip clip = render_item(ds, item);
    save_clip_files(dir + "/" + name, clip.frames, clip.fps,
                    {{"seed", std::to_string(item.seed)}, {"caption", json(item.caption).dump()}});
    items.push_back({{"id", name},
                     {"caption", item.caption},
                     {"seed", item.seed},
                     {"spec", spec_to_json(item.spec)},
                     {"path", std::string(name)}});
  }
  json manifest = {{"resolution", ds.resolution},
                   {"video_frames", ds.video_frames},
                   {"video_fps", ds.video_fps},
                   {"items", items}};
  atomic_write_file(dir + "/manifest.json", manifest.dump(2));
}

SynthDataset load_dataset_manifest(const std::string& dir) {
  const json manifest = json::parse(read_file(dir + "/manifest.json"));
  SynthDataset ds;
  ds.resolution = manifest.at("resolution").get<int>();
  ds.video_frames = manifest.at("video_frames").get<int>();
  ds.video_fps = manifest.at("video_fps").get<double>();
  for (const auto& item : manifest.at("items")) {
    SynthItem si;
    si.spec = spec_from_json(item.at("spec"));
    si.seed = item.at("seed").get<uint64_t>();
    si.caption = item.at("caption").get<std::vector<std::string>>();
    ds.items.push_back(std::move(si));
  }
  return ds;
}

std::vector<std::vector<Image>> load_dataset_frames(const std::string& dir) {
  const json manifest = json::parse(read_file(dir + "/manifest.json"));
  std::vector<std::vector<Image>> out;
  for (const auto& item : manifest.at("items"))
    out.push_back(load_clip_files(dir + "/" + item.at("path").get<std::string>()).frames);
  return out;
}

}  // namespace stickerlab
