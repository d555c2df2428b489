#pragma once

#include <string>
#include <vector>

#include "tbd/nn.hpp"
#include "tbd/tensor.hpp"

namespace tbd {

/// Shape hyperparameters of the toy denoising network.
struct NoisePredictorConfig {
  int levels = 2;
  std::vector<int> channels{32, 64};  // width per resolution level
  int d_k = 32;                       // key width per head
  int heads = 2;
  int frames = 4;
  int text_dim = 32;
  int audio_dim = 32;
  int groupnorm_groups = 8;
  int latent_channels = 3;
  int latent_size = 16;
  int time_dim = 32;
  int ff_mult = 2;

  int inner_dim() const { return d_k * heads; }
  int level_size(int level) const { return latent_size >> level; }
  /// Throws ShapeError describing the first inconsistency.
  void validate() const;
};

/// W_Q, W_K, W_V and the output projection of one multi-head attention.
struct AttentionLayerWeights {
  nn::Linear to_q;
  nn::Linear to_k;
  nn::Linear to_v;
  nn::Linear to_out;
  int heads = 1;

  static AttentionLayerWeights make(nn::ParameterStore& store, const std::string& name,
                                    int query_dim, int context_dim, int inner_dim, int heads,
                                    Rng& rng, bool zero_out = false);
};

/// softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, then projected.
/// tokens: (B, N, Dq); context: (B or 1, M, Dc). Returns (B, N, Dq_out).
Tensor cross_attention(const Tensor& tokens, const Tensor& context,
                       const AttentionLayerWeights& w);

struct FeedForward {
  nn::Linear in;
  nn::Linear out;
  static FeedForward make(nn::ParameterStore& store, const std::string& name, int dim, int mult,
                          Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Row-wise attention from denoiser features to [features | reference] rows.
struct ReferenceAttentionLayer {
  nn::LayerNorm norm;
  AttentionLayerWeights attn;

  static ReferenceAttentionLayer make(nn::ParameterStore& store, const std::string& name,
                                      int channels, const NoisePredictorConfig& cfg, Rng& rng);
  /// x: (F, C, H, W); reference: (C, H, W).
  Tensor operator()(const Tensor& x, const Tensor& reference) const;
};

/// GroupNorm -> 1x1 conv -> cross-attention transformer block -> 1x1 conv,
/// added to the input. Shared by the text and audio layers.
struct ConditionAttentionLayer {
  nn::GroupNorm norm;
  nn::Conv2d proj_in;
  nn::LayerNorm norm_attn;
  AttentionLayerWeights attn;
  nn::LayerNorm norm_ff;
  FeedForward ff;
  nn::Conv2d proj_out;

  static ConditionAttentionLayer make(nn::ParameterStore& store, const std::string& name,
                                      int channels, int context_dim,
                                      const NoisePredictorConfig& cfg, Rng& rng);
  /// x: (F, C, H, W); context: (1 or F, M, context_dim). With F rows of
  /// context each frame attends only to its own slice.
  Tensor operator()(const Tensor& x, const Tensor& context) const;
};

/// Self-attention along the frame axis at every spatial position.
struct TemporalAttentionLayer {
  nn::GroupNorm norm;
  nn::Linear proj_in;
  nn::LayerNorm norm_attn;
  AttentionLayerWeights attn;
  nn::LayerNorm norm_ff;
  FeedForward ff;
  nn::Linear proj_out;

  static TemporalAttentionLayer make(nn::ParameterStore& store, const std::string& name,
                                     int channels, const NoisePredictorConfig& cfg, Rng& rng);
  /// x: (F, C, H, W).
  Tensor operator()(const Tensor& x) const;
};

/// Reference, text, audio and temporal attention, applied in that order.
struct AttentionBlock {
  ReferenceAttentionLayer reference;
  ConditionAttentionLayer text;
  ConditionAttentionLayer audio;
  TemporalAttentionLayer temporal;

  static AttentionBlock make(nn::ParameterStore& store, const std::string& name, int channels,
                             const NoisePredictorConfig& cfg, Rng& rng);
};

/// x + conv(silu(norm(x))) [+ time projection].
struct ResBlock {
  nn::GroupNorm norm;
  nn::Conv2d conv;
  nn::Linear time_proj;  // undefined weight when the block takes no timestep

  static ResBlock make(nn::ParameterStore& store, const std::string& name, int channels,
                       int groups, int temb_dim, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& temb) const;
};

/// Conditioning consumed by one forward pass of the noise predictor.
struct NetworkConditioning {
  Tensor text;                    // (tokens, text_dim)
  Tensor audio;                   // (F, audio_tokens, audio_dim)
  std::vector<Tensor> reference;  // one (C_l, H_l, W_l) map per level
};

/// Sinusoidal embedding of a (possibly fractional) timestep.
std::vector<double> timestep_embedding(double t, int dim);

/// The conditional noise predictor eps_theta.
class NoisePredictor {
 public:
  NoisePredictor(nn::ParameterStore& store, const NoisePredictorConfig& cfg, Rng& rng,
                 const std::string& prefix = "unet");

  /// z: (F, latent_channels, S, S) at timestep t. With spine_only the
  /// attention blocks are skipped and only the convolutional path runs.
  Tensor forward(const Tensor& z, double t, const NetworkConditioning& cond,
                 bool spine_only = false) const;

  const NoisePredictorConfig& config() const { return cfg_; }
  const std::vector<AttentionBlock>& down_attention() const { return down_attn_; }
  const std::vector<AttentionBlock>& up_attention() const { return up_attn_; }

 private:
  Tensor apply_attention(const AttentionBlock& block, const Tensor& h,
                         const NetworkConditioning& cond, int level) const;

  NoisePredictorConfig cfg_;
  nn::Linear time_in_;
  nn::Linear time_out_;
  nn::Conv2d conv_in_;
  std::vector<nn::Conv2d> downsample_;  // index l for l >= 1
  std::vector<ResBlock> down_res_;
  std::vector<AttentionBlock> down_attn_;
  std::vector<nn::Conv2d> up_conv_;  // index l for l < levels-1
  std::vector<nn::Conv2d> merge_;
  std::vector<ResBlock> up_res_;
  std::vector<AttentionBlock> up_attn_;
  nn::GroupNorm norm_out_;
  nn::Conv2d conv_out_;
};

}  // namespace tbd
