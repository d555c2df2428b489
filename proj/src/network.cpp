#include "tbd/network.hpp"

#include <cmath>

#include "tbd/ops.hpp"

namespace tbd {

void NoisePredictorConfig::validate() const {
  if (levels < 2) throw ShapeError("network needs at least 2 resolution levels");
  if (static_cast<int>(channels.size()) != levels) {
    throw ShapeError("channels list has " + std::to_string(channels.size()) + " entries for " +
                     std::to_string(levels) + " levels");
  }
  if (heads <= 0 || d_k <= 0) throw ShapeError("heads and d_k must be positive");
  for (int c : channels) {
    if (c <= 0 || c % heads != 0) {
      throw ShapeError("channel width " + std::to_string(c) + " not divisible by heads");
    }
    if (c % groupnorm_groups != 0) {
      throw ShapeError("channel width " + std::to_string(c) + " not divisible by groupnorm groups");
    }
  }
  if (latent_size % (1 << (levels - 1)) != 0) {
    throw ShapeError("latent size " + std::to_string(latent_size) +
                     " not divisible by the downsampling factor");
  }
  if (frames < 1) throw ShapeError("frames must be >= 1");
  if (time_dim % 2 != 0) throw ShapeError("time_dim must be even");
}

AttentionLayerWeights AttentionLayerWeights::make(nn::ParameterStore& store,
                                                  const std::string& name, int query_dim,
                                                  int context_dim, int inner_dim, int heads,
                                                  Rng& rng, bool zero_out) {
  AttentionLayerWeights w;
  w.to_q = nn::Linear::make(store, name + ".to_q", query_dim, inner_dim, rng, false, false);
  w.to_k = nn::Linear::make(store, name + ".to_k", context_dim, inner_dim, rng, false, false);
  w.to_v = nn::Linear::make(store, name + ".to_v", context_dim, inner_dim, rng, false, false);
  w.to_out = nn::Linear::make(store, name + ".to_out", inner_dim, query_dim, rng, zero_out);
  w.heads = heads;
  return w;
}

Tensor cross_attention(const Tensor& tokens, const Tensor& context,
                       const AttentionLayerWeights& w) {
  if (tokens.rank() != 3 || context.rank() != 3) {
    throw ShapeError("cross_attention: tokens " + shape_str(tokens.shape()) + " context " +
                     shape_str(context.shape()));
  }
  if (tokens.dim(2) != w.to_q.weight.dim(0) || context.dim(2) != w.to_k.weight.dim(0)) {
    throw ShapeError("cross_attention: projection width mismatch");
  }
  const Tensor q = w.to_q(tokens);
  const Tensor k = w.to_k(context);
  const Tensor v = w.to_v(context);
  Tensor out = w.to_out(ops::attention(q, k, v, w.heads));
  check_finite(out, "cross_attention output");
  return out;
}

FeedForward FeedForward::make(nn::ParameterStore& store, const std::string& name, int dim,
                              int mult, Rng& rng) {
  FeedForward f;
  f.in = nn::Linear::make(store, name + ".in", dim, dim * mult, rng);
  f.out = nn::Linear::make(store, name + ".out", dim * mult, dim, rng);
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const { return out(ops::gelu(in(x))); }

ReferenceAttentionLayer ReferenceAttentionLayer::make(nn::ParameterStore& store,
                                                      const std::string& name, int channels,
                                                      const NoisePredictorConfig& cfg, Rng& rng) {
  ReferenceAttentionLayer l;
  l.norm = nn::LayerNorm::make(store, name + ".norm", channels, rng);
  l.attn = AttentionLayerWeights::make(store, name + ".attn", channels, channels, cfg.inner_dim(),
                                       cfg.heads, rng, true);
  return l;
}

Tensor ReferenceAttentionLayer::operator()(const Tensor& x, const Tensor& reference) const {
  if (x.rank() != 4 || reference.rank() != 3 || reference.dim(0) != x.dim(1) ||
      reference.dim(1) != x.dim(2) || reference.dim(2) != x.dim(3)) {
    throw ShapeError("reference attention: features " + shape_str(x.shape()) + " reference " +
                     shape_str(reference.shape()));
  }
  const int f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Tensor xt = norm(ops::permute(x, {0, 2, 3, 1}));             // (F, H, W, C)
  const Tensor rt = norm(ops::permute(reference, {1, 2, 0}));        // (H, W, C)
  const Tensor rows = ops::concat({xt, ops::repeat_leading(rt, f)}, 2);  // (F, H, 2W, C)
  const Tensor q = ops::reshape(xt, {f * h, w, c});
  const Tensor ctx = ops::reshape(rows, {f * h, 2 * w, c});
  const Tensor out = ops::reshape(cross_attention(q, ctx, attn), {f, h, w, c});
  return ops::add(x, ops::permute(out, {0, 3, 1, 2}));
}

ConditionAttentionLayer ConditionAttentionLayer::make(nn::ParameterStore& store,
                                                      const std::string& name, int channels,
                                                      int context_dim,
                                                      const NoisePredictorConfig& cfg, Rng& rng) {
  const int inner = cfg.inner_dim();
  ConditionAttentionLayer l;
  l.norm = nn::GroupNorm::make(store, name + ".norm", channels, cfg.groupnorm_groups, rng);
  l.proj_in = nn::Conv2d::make(store, name + ".proj_in", channels, inner, 1, 1, 0, rng);
  l.norm_attn = nn::LayerNorm::make(store, name + ".norm_attn", inner, rng);
  l.attn = AttentionLayerWeights::make(store, name + ".attn", inner, context_dim, inner, cfg.heads,
                                       rng);
  l.norm_ff = nn::LayerNorm::make(store, name + ".norm_ff", inner, rng);
  l.ff = FeedForward::make(store, name + ".ff", inner, cfg.ff_mult, rng);
  l.proj_out = nn::Conv2d::make(store, name + ".proj_out", inner, channels, 1, 1, 0, rng, true);
  return l;
}

Tensor ConditionAttentionLayer::operator()(const Tensor& x, const Tensor& context) const {
  if (x.rank() != 4 || x.dim(1) != norm.gamma.dim(0)) {
    throw ShapeError("condition attention: features " + shape_str(x.shape()));
  }
  if (context.rank() != 3 || (context.dim(0) != 1 && context.dim(0) != x.dim(0))) {
    throw ShapeError("condition attention: context " + shape_str(context.shape()) +
                     " for features " + shape_str(x.shape()));
  }
  const int f = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int inner = proj_in.weight.dim(0);
  Tensor t = proj_in(norm(x));
  t = ops::permute(ops::reshape(t, {f, inner, h * w}), {0, 2, 1});  // (F, HW, inner)
  t = ops::add(t, cross_attention(norm_attn(t), context, attn));
  t = ops::add(t, ff(norm_ff(t)));
  t = ops::reshape(ops::permute(t, {0, 2, 1}), {f, inner, h, w});
  return ops::add(x, proj_out(t));
}

TemporalAttentionLayer TemporalAttentionLayer::make(nn::ParameterStore& store,
                                                    const std::string& name, int channels,
                                                    const NoisePredictorConfig& cfg, Rng& rng) {
  const int inner = cfg.inner_dim();
  TemporalAttentionLayer l;
  l.norm = nn::GroupNorm::make(store, name + ".norm", channels, cfg.groupnorm_groups, rng);
  l.proj_in = nn::Linear::make(store, name + ".proj_in", channels, inner, rng);
  l.norm_attn = nn::LayerNorm::make(store, name + ".norm_attn", inner, rng);
  l.attn = AttentionLayerWeights::make(store, name + ".attn", inner, inner, inner, cfg.heads, rng);
  l.norm_ff = nn::LayerNorm::make(store, name + ".norm_ff", inner, rng);
  l.ff = FeedForward::make(store, name + ".ff", inner, cfg.ff_mult, rng);
  l.proj_out = nn::Linear::make(store, name + ".proj_out", inner, channels, rng, true);
  return l;
}

Tensor TemporalAttentionLayer::operator()(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != norm.gamma.dim(0)) {
    throw ShapeError("temporal attention: features " + shape_str(x.shape()));
  }
  const int f = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  // Normalize over (frames, space) jointly, then attend along frames.
  Tensor t = ops::reshape(ops::permute(x, {1, 0, 2, 3}), {1, c, f * h * w});
  t = norm(t);
  t = ops::permute(ops::reshape(t, {c, f, h * w}), {2, 1, 0});  // (HW, F, C)
  t = proj_in(t);
  const Tensor n = norm_attn(t);
  t = ops::add(t, cross_attention(n, n, attn));
  t = ops::add(t, ff(norm_ff(t)));
  t = proj_out(t);                                                  // (HW, F, C)
  t = ops::reshape(ops::permute(t, {1, 2, 0}), {f, c, h, w});
  return ops::add(x, t);
}

AttentionBlock AttentionBlock::make(nn::ParameterStore& store, const std::string& name,
                                    int channels, const NoisePredictorConfig& cfg, Rng& rng) {
  AttentionBlock b;
  b.reference = ReferenceAttentionLayer::make(store, name + ".reference", channels, cfg, rng);
  b.text = ConditionAttentionLayer::make(store, name + ".text", channels, cfg.text_dim, cfg, rng);
  b.audio = ConditionAttentionLayer::make(store, name + ".audio", channels, cfg.audio_dim, cfg, rng);
  b.temporal = TemporalAttentionLayer::make(store, name + ".temporal", channels, cfg, rng);
  return b;
}

ResBlock ResBlock::make(nn::ParameterStore& store, const std::string& name, int channels,
                        int groups, int temb_dim, Rng& rng) {
  ResBlock r;
  r.norm = nn::GroupNorm::make(store, name + ".norm", channels, groups, rng);
  r.conv = nn::Conv2d::make(store, name + ".conv", channels, channels, 3, 1, 1, rng);
  if (temb_dim > 0) r.time_proj = nn::Linear::make(store, name + ".time_proj", temb_dim, channels, rng);
  return r;
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& temb) const {
  Tensor h = conv(ops::silu(norm(x)));
  if (time_proj.weight.defined() && temb.defined()) {
    h = ops::add_channelwise(h, ops::reshape(time_proj(temb), {h.dim(1)}));
  }
  return ops::add(x, h);
}

std::vector<double> timestep_embedding(double t, int dim) {
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

NoisePredictor::NoisePredictor(nn::ParameterStore& store, const NoisePredictorConfig& cfg,
                               Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int temb_dim = 2 * cfg_.time_dim;
  const int groups = cfg_.groupnorm_groups;
  time_in_ = nn::Linear::make(store, prefix + ".time.in", cfg_.time_dim, temb_dim, rng);
  time_out_ = nn::Linear::make(store, prefix + ".time.out", temb_dim, temb_dim, rng);
  conv_in_ = nn::Conv2d::make(store, prefix + ".conv_in", cfg_.latent_channels, cfg_.channels[0], 3,
                              1, 1, rng);
  downsample_.resize(static_cast<std::size_t>(cfg_.levels));
  for (int l = 0; l < cfg_.levels; ++l) {
    const std::string name = prefix + ".down" + std::to_string(l);
    const int c = cfg_.channels[l];
    if (l > 0) {
      downsample_[l] = nn::Conv2d::make(store, name + ".downsample", cfg_.channels[l - 1], c, 3, 2,
                                        1, rng);
    }
    down_res_.push_back(ResBlock::make(store, name + ".res", c, groups, temb_dim, rng));
    down_attn_.push_back(AttentionBlock::make(store, name + ".attn", c, cfg_, rng));
  }
  up_conv_.resize(static_cast<std::size_t>(cfg_.levels - 1));
  merge_.resize(static_cast<std::size_t>(cfg_.levels - 1));
  up_res_.resize(static_cast<std::size_t>(cfg_.levels - 1));
  up_attn_.resize(static_cast<std::size_t>(cfg_.levels - 1));
  for (int l = cfg_.levels - 2; l >= 0; --l) {
    const std::string name = prefix + ".up" + std::to_string(l);
    const int c = cfg_.channels[l];
    up_conv_[l] = nn::Conv2d::make(store, name + ".upsample", cfg_.channels[l + 1], c, 3, 1, 1, rng);
    merge_[l] = nn::Conv2d::make(store, name + ".merge", 2 * c, c, 3, 1, 1, rng);
    up_res_[l] = ResBlock::make(store, name + ".res", c, groups, temb_dim, rng);
    up_attn_[l] = AttentionBlock::make(store, name + ".attn", c, cfg_, rng);
  }
  norm_out_ = nn::GroupNorm::make(store, prefix + ".norm_out", cfg_.channels[0], groups, rng);
  conv_out_ = nn::Conv2d::make(store, prefix + ".conv_out", cfg_.channels[0], cfg_.latent_channels,
                               3, 1, 1, rng);
}

Tensor NoisePredictor::apply_attention(const AttentionBlock& block, const Tensor& h,
                                       const NetworkConditioning& cond, int level) const {
  if (static_cast<int>(cond.reference.size()) != cfg_.levels) {
    throw ShapeError("expected " + std::to_string(cfg_.levels) + " reference maps, got " +
                     std::to_string(cond.reference.size()));
  }
  if (!cond.text.defined() || !cond.audio.defined()) {
    throw ShapeError("missing text or audio conditioning");
  }
  if (cond.audio.rank() != 3 || cond.audio.dim(0) != h.dim(0)) {
    throw ShapeError("audio conditioning " + shape_str(cond.audio.shape()) + " for " +
                     std::to_string(h.dim(0)) + " frames");
  }
  Tensor x = block.reference(h, cond.reference[static_cast<std::size_t>(level)]);
  x = block.text(x, ops::reshape(cond.text, {1, cond.text.dim(0), cond.text.dim(1)}));
  x = block.audio(x, cond.audio);
  return block.temporal(x);
}

Tensor NoisePredictor::forward(const Tensor& z, double t, const NetworkConditioning& cond,
                               bool spine_only) const {
  const int s = cfg_.latent_size;
  if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) != s || z.dim(3) != s) {
    throw ShapeError("latent " + shape_str(z.shape()) + " does not match network config");
  }
  const auto emb = timestep_embedding(t, cfg_.time_dim);
  Tensor temb = Tensor::from({1, cfg_.time_dim}, emb);
  temb = ops::silu(time_out_(ops::silu(time_in_(temb))));

  std::vector<Tensor> skips(static_cast<std::size_t>(cfg_.levels));
  Tensor h = conv_in_(z);
  for (int l = 0; l < cfg_.levels; ++l) {
    if (l > 0) h = downsample_[l](h);
    h = down_res_[l](h, temb);
    if (!spine_only) h = apply_attention(down_attn_[l], h, cond, l);
    skips[l] = h;
  }
  for (int l = cfg_.levels - 2; l >= 0; --l) {
    h = up_conv_[l](ops::upsample_nearest2x(h));
    h = merge_[l](ops::concat({h, skips[l]}, 1));
    h = up_res_[l](h, temb);
    if (!spine_only) h = apply_attention(up_attn_[l], h, cond, l);
  }
  Tensor out = conv_out_(ops::silu(norm_out_(h)));
  check_finite(out, "noise prediction");
  return out;
}

}  // namespace tbd
