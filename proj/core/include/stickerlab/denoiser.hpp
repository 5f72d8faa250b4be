#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stickerlab/image.hpp"
#include "stickerlab/tensor.hpp"

namespace stickerlab {

enum class SizeTag { sm, med, lg, lg_e };

const char* to_string(SizeTag t);
SizeTag size_tag_from_string(const std::string& s);

// The four scaling knobs, desk scale: base channels, transformer depth, res
// blocks per stage, and whether a second text encoder is attached.
struct ModelConfig {
  SizeTag size_tag = SizeTag::sm;
  int base_channels = 16;
  int transformer_depth = 1;
  int res_blocks_per_stage = 1;
  int latent_channels = 8;
  int frames = 8;
  bool use_second_encoder = false;
  int spatial_resolution = 16;       // pixels, pre-codec
  bool ablation_small_latent = false;  // allows latent_channels < 8

  static ModelConfig preset(SizeTag tag);
  void validate() const;
};

struct LatentVideo {
  Tensor data;  // [T, C, H, W]
  int frames() const { return data.defined() ? data.shape()[0] : 0; }
};

// Image latent plus per-encoder text embeddings. Dropped conditioning is
// replaced inside forward(): a zero latent for the image, the null-token
// embedding for text.
struct ConditioningBundle {
  Tensor image_latent;                  // [C, H, W]
  std::vector<Tensor> text_embeddings;  // one [L, kTextDim] per encoder
  bool drop_image = false;
  bool drop_text = false;

  ConditioningBundle with_drops(bool di, bool dt) const {
    ConditioningBundle c = *this;
    c.drop_image = di;
    c.drop_text = dt;
    return c;
  }
};

enum class ExpandMode { naive, optimized };

inline constexpr int kTextDim = 16;

// --- toy text encoders (fixed seeded embedding tables, not learned) --------

// Deterministic embedding per token; encoder 2 must be enabled by the config.
Tensor encode_prompt(const std::vector<std::string>& tokens, int encoder_id, bool second_encoder_available);
Tensor null_text_embedding(int encoder_id);

// --- latent codec (invertible space-to-depth, alpha-exact) -----------------

// Block extents (bh, bw) with 4*bh*bw == latent_channels.
std::pair<int, int> codec_block(int latent_channels);
Tensor codec_encode_frame(const Image& frame, int latent_channels);
Image codec_decode_frame(const Tensor& latent);
LatentVideo codec_encode(const std::vector<Image>& frames, int latent_channels);
std::vector<Image> codec_decode(const LatentVideo& video);

// --- context expansion ------------------------------------------------------

// Text keys/values replicated per frame. Both modes return identical values;
// naive projects the replicated context (T times the multiply-adds),
// optimized projects once and then replicates.
struct ContextKV {
  Tensor k;  // [T, L, C]
  Tensor v;
};
ContextKV expand_context(const Tensor& text, int frames, const Tensor& w_k, const Tensor& w_v, ExpandMode mode);

// --- the denoiser -----------------------------------------------------------

// Factorized spatiotemporal UNet: every spatial conv in a res block is
// followed by a temporal 1D conv, every spatial attention block by a temporal
// attention block. Temporal blocks are residual with zero-initialized output
// projections, so a fresh model is an exact identity in time.
struct Denoiser {
  ModelConfig config;
  std::map<std::string, Tensor> params;

  // Prediction for the schedule's parameterization, same shape as z.
  // z is [T, latent_channels, H, W]; t may be fractional at inference.
  Tensor forward(const Tensor& z, double t, const ConditioningBundle& cond,
                 ExpandMode mode = ExpandMode::optimized) const;

  Tensor encode_prompt_tokens(const std::vector<std::string>& tokens, int encoder_id) const {
    return stickerlab::encode_prompt(tokens, encoder_id, config.use_second_encoder);
  }

  int64_t parameter_count() const;
  void zero_grads();
};

// "temporal" parameters are the ones frozen/unfrozen separately from spatial.
bool is_temporal_param(const std::string& name);

Denoiser build_model(const ModelConfig& config, uint64_t seed);

// Conditioning from a prompt and a raw RGBA frame (codec-encoded).
ConditioningBundle make_conditioning(const Denoiser& model, const std::vector<std::string>& prompt_tokens,
                                     const Image& cond_frame);

}  // namespace stickerlab
