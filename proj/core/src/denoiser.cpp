#include "stickerlab/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace stickerlab {

namespace {

int norm_groups(int channels) {
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

Tensor token_embedding(const std::string& token, int encoder_id) {
  Rng rng(fnv1a(token), 0x7e70 + static_cast<uint64_t>(encoder_id));
  std::vector<double> row(kTextDim);
  const double inv = 1.0 / std::sqrt(static_cast<double>(kTextDim));
  for (auto& v : row) v = rng.normal() * inv;
  return Tensor::from_data({1, kTextDim}, std::move(row));
}

// Deterministic parameter factory; every tensor draws from its own stream so
// the build is reproducible and order-independent.
struct ParamBuilder {
  std::map<std::string, Tensor>& params;
  Rng base;
  uint64_t counter = 0;

  Tensor draw(const std::string& name, const Shape& shape, double stddev) {
    Rng rng = base.split(++counter);
    Tensor t = Tensor::randn(shape, rng, stddev, true);
    params.emplace(name, t);
    return t;
  }
  Tensor conv_w(const std::string& name, int co, int ci, int kh, int kw) {
    return draw(name, {co, ci, kh, kw}, std::sqrt(2.0 / (static_cast<double>(ci) * kh * kw)));
  }
  Tensor tconv_w(const std::string& name, int co, int ci, int k) {
    ++counter;  // keep stream numbering aligned with the draw-based params
    Rng rng = base.split(counter);
    Tensor t = Tensor::randn({co, ci, k}, rng, std::sqrt(2.0 / (static_cast<double>(ci) * k)), true);
    params.emplace(name, t);
    return t;
  }
  Tensor linear_w(const std::string& name, int in, int out) {
    return draw(name, {in, out}, std::sqrt(1.0 / in));
  }
  Tensor zeros(const std::string& name, const Shape& shape) {
    Tensor t = Tensor::zeros(shape, true);
    params.emplace(name, t);
    return t;
  }
  Tensor ones(const std::string& name, const Shape& shape) {
    Tensor t = Tensor::full(shape, 1.0, true);
    params.emplace(name, t);
    return t;
  }
};

void build_res_block(ParamBuilder& b, const std::string& p, int cin, int cout, int temb_dim) {
  b.ones(p + ".gn1.g", {cin});
  b.zeros(p + ".gn1.b", {cin});
  b.conv_w(p + ".conv1.w", cout, cin, 3, 3);
  b.zeros(p + ".conv1.b", {cout});
  b.tconv_w(p + ".tconv1.conv.w", cout, cout, 3);
  b.zeros(p + ".tconv1.conv.b", {cout});
  b.zeros(p + ".tconv1.proj.w", {cout, cout, 1});  // identity at init
  b.zeros(p + ".emb.scale.w", {temb_dim, cout});
  b.zeros(p + ".emb.scale.b", {cout});
  b.zeros(p + ".emb.shift.w", {temb_dim, cout});
  b.zeros(p + ".emb.shift.b", {cout});
  b.conv_w(p + ".conv2.w", cout, cout, 3, 3);
  b.zeros(p + ".conv2.b", {cout});
  b.tconv_w(p + ".tconv2.conv.w", cout, cout, 3);
  b.zeros(p + ".tconv2.conv.b", {cout});
  b.zeros(p + ".tconv2.proj.w", {cout, cout, 1});
  if (cin != cout) {
    b.conv_w(p + ".skip.w", cout, cin, 1, 1);
    b.zeros(p + ".skip.b", {cout});
  }
}

void build_transformer(ParamBuilder& b, const std::string& p, int c, int depth) {
  for (int j = 0; j < depth; ++j) {
    const std::string q = p + ".layer" + std::to_string(j);
    b.ones(q + ".sa.gn.g", {c});
    b.zeros(q + ".sa.gn.b", {c});
    b.linear_w(q + ".sa.q.w", c, c);
    b.linear_w(q + ".sa.k.w", c, c);
    b.linear_w(q + ".sa.v.w", c, c);
    b.linear_w(q + ".sa.o.w", c, c);
    b.zeros(q + ".sa.o.b", {c});
    b.ones(q + ".ca.gn.g", {c});
    b.zeros(q + ".ca.gn.b", {c});
    b.linear_w(q + ".ca.q.w", c, c);
    b.linear_w(q + ".ca.k.w", kTextDim, c);
    b.linear_w(q + ".ca.v.w", kTextDim, c);
    b.linear_w(q + ".ca.o.w", c, c);
    b.zeros(q + ".ca.o.b", {c});
    b.ones(q + ".ff.gn.g", {c});
    b.zeros(q + ".ff.gn.b", {c});
    b.linear_w(q + ".ff.fc1.w", c, 4 * c);
    b.zeros(q + ".ff.fc1.b", {4 * c});
    b.linear_w(q + ".ff.fc2.w", 4 * c, c);
    b.zeros(q + ".ff.fc2.b", {c});
    b.ones(q + ".tattn.gn.g", {c});
    b.zeros(q + ".tattn.gn.b", {c});
    b.linear_w(q + ".tattn.q.w", c, c);
    b.linear_w(q + ".tattn.k.w", c, c);
    b.linear_w(q + ".tattn.v.w", c, c);
    b.zeros(q + ".tattn.o.w", {c, c});  // identity at init
  }
}

// --- forward helpers --------------------------------------------------------

struct ForwardCtx {
  const Denoiser& m;
  Tensor temb;     // [1, temb_dim]
  Tensor context;  // [L, kTextDim]
  ExpandMode mode;
  int T, H, W;

  const Tensor& P(const std::string& name) const {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw std::logic_error("missing parameter: " + name);
    return it->second;
  }
};

Tensor linear(const ForwardCtx& ctx, const Tensor& x2d, const std::string& w, const std::string& bias = "") {
  Tensor y = matmul(x2d, ctx.P(w));
  if (!bias.empty()) y = add(y, broadcast_to(ctx.P(bias), y.shape()));
  return y;
}

// [T,C,H,W] -> [T, H*W, C]
Tensor to_spatial_tokens(const Tensor& x) {
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

Tensor from_spatial_tokens(const Tensor& tok, int T, int C, int H, int W) {
  return permute(reshape(tok, {T, H, W, C}), {0, 3, 1, 2});
}

Tensor temporal_conv_block(const ForwardCtx& ctx, const Tensor& h, const std::string& p) {
  Tensor u = conv1d_time(h, ctx.P(p + ".conv.w"), ctx.P(p + ".conv.b"));
  u = silu(u);
  return conv1d_time(u, ctx.P(p + ".proj.w"));
}

Tensor res_block(const ForwardCtx& ctx, const Tensor& x, const std::string& p, int cin, int cout) {
  Tensor h = group_norm(x, ctx.P(p + ".gn1.g"), ctx.P(p + ".gn1.b"), norm_groups(cin));
  h = silu(h);
  h = conv2d(h, ctx.P(p + ".conv1.w"), ctx.P(p + ".conv1.b"));
  h = add(h, temporal_conv_block(ctx, h, p + ".tconv1"));
  // timestep enters as a per-channel affine on the second norm
  Tensor s = reshape(linear(ctx, ctx.temb, p + ".emb.scale.w", p + ".emb.scale.b"), {cout});
  Tensor sh = reshape(linear(ctx, ctx.temb, p + ".emb.shift.w", p + ".emb.shift.b"), {cout});
  h = group_norm(h, add_scalar(s, 1.0), sh, norm_groups(cout));
  h = silu(h);
  h = conv2d(h, ctx.P(p + ".conv2.w"), ctx.P(p + ".conv2.b"));
  h = add(h, temporal_conv_block(ctx, h, p + ".tconv2"));
  Tensor skip = cin == cout ? x : conv2d(x, ctx.P(p + ".skip.w"), ctx.P(p + ".skip.b"));
  return add(skip, h);
}

Tensor transformer(const ForwardCtx& ctx, Tensor x, const std::string& p, int c, int depth) {
  const int T = ctx.T, H = x.shape()[2], W = x.shape()[3];
  const int hw = H * W;
  for (int j = 0; j < depth; ++j) {
    const std::string q = p + ".layer" + std::to_string(j);
    // spatial self-attention, per frame
    {
      Tensor h = group_norm(x, ctx.P(q + ".sa.gn.g"), ctx.P(q + ".sa.gn.b"), norm_groups(c));
      Tensor tok = reshape(to_spatial_tokens(h), {T * hw, c});
      Tensor att = attention(reshape(linear(ctx, tok, q + ".sa.q.w"), {T, hw, c}),
                             reshape(linear(ctx, tok, q + ".sa.k.w"), {T, hw, c}),
                             reshape(linear(ctx, tok, q + ".sa.v.w"), {T, hw, c}));
      Tensor out = linear(ctx, reshape(att, {T * hw, c}), q + ".sa.o.w", q + ".sa.o.b");
      x = add(x, from_spatial_tokens(reshape(out, {T, hw, c}), T, c, H, W));
    }
    // cross-attention to the text context, keys/values shared across frames
    {
      Tensor h = group_norm(x, ctx.P(q + ".ca.gn.g"), ctx.P(q + ".ca.gn.b"), norm_groups(c));
      Tensor tok = reshape(to_spatial_tokens(h), {T * hw, c});
      ContextKV kv = expand_context(ctx.context, T, ctx.P(q + ".ca.k.w"), ctx.P(q + ".ca.v.w"), ctx.mode);
      Tensor att = attention(reshape(linear(ctx, tok, q + ".ca.q.w"), {T, hw, c}), kv.k, kv.v);
      Tensor out = linear(ctx, reshape(att, {T * hw, c}), q + ".ca.o.w", q + ".ca.o.b");
      x = add(x, from_spatial_tokens(reshape(out, {T, hw, c}), T, c, H, W));
    }
    // feed-forward over tokens
    {
      Tensor h = group_norm(x, ctx.P(q + ".ff.gn.g"), ctx.P(q + ".ff.gn.b"), norm_groups(c));
      Tensor tok = reshape(to_spatial_tokens(h), {T * hw, c});
      Tensor u = silu(linear(ctx, tok, q + ".ff.fc1.w", q + ".ff.fc1.b"));
      Tensor out = linear(ctx, u, q + ".ff.fc2.w", q + ".ff.fc2.b");
      x = add(x, from_spatial_tokens(reshape(out, {T, hw, c}), T, c, H, W));
    }
    // temporal attention, per spatial position; zero out-projection at init
    {
      Tensor h = group_norm(x, ctx.P(q + ".tattn.gn.g"), ctx.P(q + ".tattn.gn.b"), norm_groups(c));
      Tensor tok = reshape(permute(h, {2, 3, 0, 1}), {hw, T, c});  // [HW, T, C]
      Tensor flat = reshape(tok, {hw * T, c});
      Tensor att = attention(reshape(linear(ctx, flat, q + ".tattn.q.w"), {hw, T, c}),
                             reshape(linear(ctx, flat, q + ".tattn.k.w"), {hw, T, c}),
                             reshape(linear(ctx, flat, q + ".tattn.v.w"), {hw, T, c}));
      Tensor out = linear(ctx, reshape(att, {hw * T, c}), q + ".tattn.o.w");
      x = add(x, permute(reshape(out, {H, W, T, c}), {2, 3, 0, 1}));
    }
  }
  return x;
}

Tensor timestep_embedding(double t, int dim) {
  const int half = dim / 2;
  std::vector<double> e(dim);
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
    e[k] = std::sin(t * w);
    e[half + k] = std::cos(t * w);
  }
  return Tensor::from_data({1, dim}, std::move(e));
}

}  // namespace

const char* to_string(SizeTag t) {
  switch (t) {
    case SizeTag::sm: return "sm";
    case SizeTag::med: return "med";
    case SizeTag::lg: return "lg";
    case SizeTag::lg_e: return "lg-e";
  }
  return "?";
}

SizeTag size_tag_from_string(const std::string& s) {
  if (s == "sm") return SizeTag::sm;
  if (s == "med") return SizeTag::med;
  if (s == "lg") return SizeTag::lg;
  if (s == "lg-e" || s == "lg_e") return SizeTag::lg_e;
  throw std::invalid_argument("unknown size tag: " + s);
}

ModelConfig ModelConfig::preset(SizeTag tag) {
  ModelConfig c;
  c.size_tag = tag;
  switch (tag) {
    case SizeTag::sm:
      c.base_channels = 16;
      c.transformer_depth = 1;
      c.res_blocks_per_stage = 1;
      c.use_second_encoder = false;
      break;
    case SizeTag::med:
      c.base_channels = 24;
      c.transformer_depth = 1;
      c.res_blocks_per_stage = 2;
      c.use_second_encoder = false;
      break;
    case SizeTag::lg:
      c.base_channels = 32;
      c.transformer_depth = 2;
      c.res_blocks_per_stage = 2;
      c.use_second_encoder = true;
      break;
    case SizeTag::lg_e:
      c.base_channels = 32;
      c.transformer_depth = 2;
      c.res_blocks_per_stage = 1;
      c.use_second_encoder = false;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  if (size_tag == SizeTag::lg_e && use_second_encoder)
    throw std::invalid_argument("config: lg-e drops the second text encoder");
  if (latent_channels < 8 && !ablation_small_latent)
    throw std::invalid_argument("config: latent_channels must be >= 8 (set ablation_small_latent to override)");
  if (latent_channels < 4 || latent_channels % 4 != 0)
    throw std::invalid_argument("config: latent_channels must be a positive multiple of 4");
  if (base_channels < 4 || base_channels % 2 != 0)
    throw std::invalid_argument("config: base_channels must be even and >= 4");
  if (transformer_depth < 1 || res_blocks_per_stage < 1 || frames < 1)
    throw std::invalid_argument("config: depth, res blocks and frames must be >= 1");
  auto [bh, bw] = codec_block(latent_channels);
  if (spatial_resolution % bh != 0 || spatial_resolution % bw != 0)
    throw std::invalid_argument("config: spatial_resolution " + std::to_string(spatial_resolution) +
                                " not divisible by codec block " + std::to_string(bh) + "x" + std::to_string(bw));
  if ((spatial_resolution / bh) % 2 != 0 || (spatial_resolution / bw) % 2 != 0)
    throw std::invalid_argument("config: latent extents must be even for the downsampling stage");
}

// --- text encoders ----------------------------------------------------------

Tensor encode_prompt(const std::vector<std::string>& tokens, int encoder_id, bool second_encoder_available) {
  if (encoder_id != 1 && encoder_id != 2)
    throw std::invalid_argument("encode_prompt: unknown encoder id " + std::to_string(encoder_id));
  if (encoder_id == 2 && !second_encoder_available)
    throw std::invalid_argument("encode_prompt: encoder 2 requested but this configuration has no second encoder");
  std::vector<Tensor> rows;
  for (const auto& tok : tokens)
    if (!tok.empty()) rows.push_back(token_embedding(tok, encoder_id));
  if (rows.empty()) return null_text_embedding(encoder_id);
  return concat(rows, 0);
}

Tensor null_text_embedding(int encoder_id) { return token_embedding("<null>", encoder_id); }

// --- codec ------------------------------------------------------------------

std::pair<int, int> codec_block(int latent_channels) {
  if (latent_channels < 4 || latent_channels % 4 != 0)
    throw std::invalid_argument("codec: latent_channels must be a positive multiple of 4, got " +
                                std::to_string(latent_channels));
  const int m = latent_channels / 4;
  int bh = static_cast<int>(std::sqrt(static_cast<double>(m)));
  while (m % bh != 0) --bh;
  return {bh, m / bh};
}

Tensor codec_encode_frame(const Image& frame, int latent_channels) {
  auto [bh, bw] = codec_block(latent_channels);
  if (frame.height % bh != 0 || frame.width % bw != 0)
    throw std::invalid_argument("codec: resolution " + std::to_string(frame.width) + "x" +
                                std::to_string(frame.height) + " not divisible by block " + std::to_string(bw) + "x" +
                                std::to_string(bh));
  const int Ho = frame.height / bh, Wo = frame.width / bw;
  std::vector<double> out(static_cast<size_t>(latent_channels) * Ho * Wo);
  for (int c4 = 0; c4 < 4; ++c4)
    for (int by = 0; by < bh; ++by)
      for (int bx = 0; bx < bw; ++bx) {
        const int co = c4 * bh * bw + by * bw + bx;
        for (int y = 0; y < Ho; ++y)
          for (int x = 0; x < Wo; ++x)
            out[(static_cast<size_t>(co) * Ho + y) * Wo + x] = frame.at(c4, y * bh + by, x * bw + bx);
      }
  return Tensor::from_data({latent_channels, Ho, Wo}, std::move(out));
}

Image codec_decode_frame(const Tensor& latent) {
  if (latent.shape().size() != 3)
    throw std::invalid_argument("codec: latent frame must be [C,H,W], got " + shape_str(latent.shape()));
  const int C = latent.shape()[0], Ho = latent.shape()[1], Wo = latent.shape()[2];
  auto [bh, bw] = codec_block(C);
  Image out(Wo * bw, Ho * bh);
  for (int c4 = 0; c4 < 4; ++c4)
    for (int by = 0; by < bh; ++by)
      for (int bx = 0; bx < bw; ++bx) {
        const int co = c4 * bh * bw + by * bw + bx;
        for (int y = 0; y < Ho; ++y)
          for (int x = 0; x < Wo; ++x) out.at(c4, y * bh + by, x * bw + bx) = latent.at({co, y, x});
      }
  return out;
}

LatentVideo codec_encode(const std::vector<Image>& frames, int latent_channels) {
  if (frames.empty()) throw std::invalid_argument("codec: no frames");
  std::vector<Tensor> per_frame;
  per_frame.reserve(frames.size());
  const int T = static_cast<int>(frames.size());
  for (const auto& f : frames) {
    Tensor lat = codec_encode_frame(f, latent_channels);
    per_frame.push_back(reshape(lat, {1, lat.shape()[0], lat.shape()[1], lat.shape()[2]}));
  }
  LatentVideo v;
  v.data = T == 1 ? per_frame[0] : concat(per_frame, 0);
  return v;
}

std::vector<Image> codec_decode(const LatentVideo& video) {
  const auto& s = video.data.shape();
  if (s.size() != 4) throw std::invalid_argument("codec: latent video must be [T,C,H,W]");
  const int T = s[0], C = s[1], H = s[2], W = s[3];
  std::vector<Image> frames;
  frames.reserve(T);
  const auto& data = video.data.data();
  for (int t = 0; t < T; ++t) {
    std::vector<double> one(data.begin() + static_cast<size_t>(t) * C * H * W,
                            data.begin() + static_cast<size_t>(t + 1) * C * H * W);
    frames.push_back(codec_decode_frame(Tensor::from_data({C, H, W}, std::move(one))));
  }
  return frames;
}

// --- context expansion ------------------------------------------------------

ContextKV expand_context(const Tensor& text, int frames, const Tensor& w_k, const Tensor& w_v, ExpandMode mode) {
  if (frames < 1) throw std::invalid_argument("expand_context: frames must be >= 1");
  if (text.shape().size() != 2)
    throw std::invalid_argument("expand_context: text must be [L,D], got " + shape_str(text.shape()));
  const int L = text.shape()[0], D = text.shape()[1];
  const int C = w_k.shape()[1];
  ContextKV kv;
  if (mode == ExpandMode::naive) {
    Tensor rep = reshape(broadcast_to(text, {frames, L, D}), {frames * L, D});
    kv.k = reshape(matmul(rep, w_k), {frames, L, C});
    kv.v = reshape(matmul(rep, w_v), {frames, L, C});
  } else {
    kv.k = broadcast_to(matmul(text, w_k), {frames, L, C});
    kv.v = broadcast_to(matmul(text, w_v), {frames, L, C});
  }
  return kv;
}

// --- build / forward --------------------------------------------------------

bool is_temporal_param(const std::string& name) {
  return name.find("tconv") != std::string::npos || name.find("tattn") != std::string::npos;
}

Denoiser build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Denoiser m;
  m.config = config;
  ParamBuilder b{m.params, Rng(seed, 0xb01d)};
  const int ch = config.base_channels;
  const int ch2 = 2 * ch;
  const int temb_dim = 2 * ch;
  const int cin = 2 * config.latent_channels;  // noise + replicated image latent
  const int r = config.res_blocks_per_stage;
  const int d = config.transformer_depth;

  b.linear_w("temb.fc1.w", 16, temb_dim);
  b.zeros("temb.fc1.b", {temb_dim});
  b.linear_w("temb.fc2.w", temb_dim, temb_dim);
  b.zeros("temb.fc2.b", {temb_dim});

  b.conv_w("conv_in.w", ch, cin, 3, 3);
  b.zeros("conv_in.b", {ch});

  for (int i = 0; i < r; ++i) build_res_block(b, "enc0.rb" + std::to_string(i), ch, ch, temb_dim);
  b.conv_w("down.w", ch2, ch, 3, 3);  // stride 2
  b.zeros("down.b", {ch2});
  for (int i = 0; i < r; ++i) build_res_block(b, "enc1.rb" + std::to_string(i), ch2, ch2, temb_dim);
  build_transformer(b, "enc1.trf", ch2, d);

  build_res_block(b, "mid.rb0", ch2, ch2, temb_dim);
  build_transformer(b, "mid.trf", ch2, d);
  build_res_block(b, "mid.rb1", ch2, ch2, temb_dim);

  build_res_block(b, "dec1.rb0", 2 * ch2, ch2, temb_dim);
  for (int i = 1; i < r; ++i) build_res_block(b, "dec1.rb" + std::to_string(i), ch2, ch2, temb_dim);
  build_transformer(b, "dec1.trf", ch2, d);
  b.conv_w("up.w", ch, ch2, 3, 3);  // after nearest upsample
  b.zeros("up.b", {ch});
  build_res_block(b, "dec0.rb0", 2 * ch, ch, temb_dim);
  for (int i = 1; i < r; ++i) build_res_block(b, "dec0.rb" + std::to_string(i), ch, ch, temb_dim);

  b.ones("out.gn.g", {ch});
  b.zeros("out.gn.b", {ch});
  b.conv_w("out.conv.w", config.latent_channels, ch, 3, 3);
  b.zeros("out.conv.b", {config.latent_channels});
  // preconditioning heads: timestep-dependent output gain and input skip,
  // both vanishing at init. Low-noise timesteps need output magnitudes of
  // order 1/sigma that the normalized trunk cannot reach on its own.
  b.zeros("out.gain.w", {temb_dim, config.latent_channels});
  b.zeros("out.gain.b", {config.latent_channels});
  b.zeros("out.skip.w", {temb_dim, config.latent_channels});
  b.zeros("out.skip.b", {config.latent_channels});
  return m;
}

Tensor Denoiser::forward(const Tensor& z, double t, const ConditioningBundle& cond, ExpandMode mode) const {
  if (z.shape().size() != 4)
    throw std::invalid_argument("forward: z must be [T,C,H,W], got " + shape_str(z.shape()));
  const int T = z.shape()[0], C = z.shape()[1], H = z.shape()[2], W = z.shape()[3];
  if (C != config.latent_channels)
    throw std::invalid_argument("forward: z has " + std::to_string(C) + " channels, config wants " +
                                std::to_string(config.latent_channels));
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("forward: latent extents must be even, got " + shape_str(z.shape()));

  Tensor image_latent;
  if (cond.drop_image) {
    image_latent = Tensor::zeros({C, H, W});  // null image latent
  } else {
    if (!cond.image_latent.defined() || cond.image_latent.shape() != Shape{C, H, W})
      throw std::invalid_argument("forward: image latent must be [" + std::to_string(C) + "," + std::to_string(H) +
                                  "," + std::to_string(W) + "]");
    image_latent = cond.image_latent;
  }

  Tensor context;
  const int encoders = config.use_second_encoder ? 2 : 1;
  if (cond.drop_text) {
    std::vector<Tensor> nulls;
    for (int e = 1; e <= encoders; ++e) nulls.push_back(null_text_embedding(e));
    context = encoders == 1 ? nulls[0] : concat(nulls, 0);
  } else {
    if (static_cast<int>(cond.text_embeddings.size()) != encoders)
      throw std::invalid_argument("forward: expected " + std::to_string(encoders) + " text embedding sequences, got " +
                                  std::to_string(cond.text_embeddings.size()));
    context = encoders == 1 ? cond.text_embeddings[0] : concat(cond.text_embeddings, 0);
  }

  ForwardCtx ctx{*this, {}, context, mode, T, H, W};
  {
    Tensor e = timestep_embedding(t, 16);
    e = silu(linear(ctx, e, "temb.fc1.w", "temb.fc1.b"));
    ctx.temb = linear(ctx, e, "temb.fc2.w", "temb.fc2.b");
  }

  // image conditioning: clone across time, append on channels
  Tensor x = concat({z, broadcast_to(image_latent, {T, C, H, W})}, 1);
  x = conv2d(x, ctx.P("conv_in.w"), ctx.P("conv_in.b"));

  const int ch = config.base_channels;
  const int ch2 = 2 * ch;
  const int r = config.res_blocks_per_stage;
  const int d = config.transformer_depth;

  for (int i = 0; i < r; ++i) x = res_block(ctx, x, "enc0.rb" + std::to_string(i), ch, ch);
  Tensor skip0 = x;
  x = conv2d(x, ctx.P("down.w"), ctx.P("down.b"), 2);
  for (int i = 0; i < r; ++i) x = res_block(ctx, x, "enc1.rb" + std::to_string(i), ch2, ch2);
  x = transformer(ctx, x, "enc1.trf", ch2, d);
  Tensor skip1 = x;

  x = res_block(ctx, x, "mid.rb0", ch2, ch2);
  x = transformer(ctx, x, "mid.trf", ch2, d);
  x = res_block(ctx, x, "mid.rb1", ch2, ch2);

  x = res_block(ctx, concat({x, skip1}, 1), "dec1.rb0", 2 * ch2, ch2);
  for (int i = 1; i < r; ++i) x = res_block(ctx, x, "dec1.rb" + std::to_string(i), ch2, ch2);
  x = transformer(ctx, x, "dec1.trf", ch2, d);
  x = conv2d(upsample2x(x), ctx.P("up.w"), ctx.P("up.b"));
  x = res_block(ctx, concat({x, skip0}, 1), "dec0.rb0", 2 * ch, ch);
  for (int i = 1; i < r; ++i) x = res_block(ctx, x, "dec0.rb" + std::to_string(i), ch, ch);

  x = group_norm(x, ctx.P("out.gn.g"), ctx.P("out.gn.b"), norm_groups(ch));
  x = silu(x);
  x = conv2d(x, ctx.P("out.conv.w"), ctx.P("out.conv.b"));

  // out = trunk * (1 + gain(t)) + z * skip(t), per channel
  auto per_channel = [&](const Tensor& v) {
    return permute(broadcast_to(v, {H, W, T, config.latent_channels}), {2, 3, 0, 1});
  };
  Tensor gain = reshape(linear(ctx, ctx.temb, "out.gain.w", "out.gain.b"), {config.latent_channels});
  Tensor skip = reshape(linear(ctx, ctx.temb, "out.skip.w", "out.skip.b"), {config.latent_channels});
  return add(add(x, mul(x, per_channel(gain))), mul(z, per_channel(skip)));
}

int64_t Denoiser::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

void Denoiser::zero_grads() {
  for (auto& [name, t] : params) t.zero_grad();
}

ConditioningBundle make_conditioning(const Denoiser& model, const std::vector<std::string>& prompt_tokens,
                                     const Image& cond_frame) {
  ConditioningBundle cond;
  cond.image_latent = codec_encode_frame(cond_frame, model.config.latent_channels);
  cond.text_embeddings.push_back(model.encode_prompt_tokens(prompt_tokens, 1));
  if (model.config.use_second_encoder) cond.text_embeddings.push_back(model.encode_prompt_tokens(prompt_tokens, 2));
  return cond;
}

}  // namespace stickerlab
