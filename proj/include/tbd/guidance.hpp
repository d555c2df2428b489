#pragma once

#include <span>
#include <vector>

#include "tbd/tensor.hpp"

// Progressive guidance: coarse-to-fine text conditioning across the
// denoising trajectory. Step index 0 is the noisiest sampling step.
namespace tbd::guidance {

struct GuidanceError : Error {
  using Error::Error;
};

struct AlphaParams {
  double t_start = 0.0;
  double t_end = 1.0;
  double alpha_max = 1.0;
  double alpha_min = 0.5;
};

/// Linear decay from alpha_max at t_start to alpha_min at t_end.
double calculate_alpha(double t, const AlphaParams& params);

/// Weights applied to (e_s1, e_s2) for one timestep; they sum to 1.
struct BlendWeights {
  double first = 1.0;
  double second = 0.0;
};

struct BlendOptions {
  double alpha_max = 1.0;
  double alpha_min = 0.5;
  /// Replace the post-boundary schedule with one that starts at alpha_min
  /// and rises to alpha_max, removing the jump at t_end.
  bool smooth_boundary = false;
};

/// Two-stage blend weights for timestep t on the progress axis.
/// Before t_end the first embedding dominates; from t_end on the second does.
BlendWeights blend_weights(double t, double t_end, double total, const BlendOptions& opts = {});

/// Blend for one sample.
Tensor adjust_text_embedding(double t, const Tensor& e_s1, const Tensor& e_s2, double t_end,
                             double total, const BlendOptions& opts = {});

/// Blend for a batch; sample i uses t_batch[i], e_s1[i] and e_s2[i].
std::vector<Tensor> adjust_text_embedding(std::span<const double> t_batch,
                                          const std::vector<Tensor>& e_s1,
                                          const std::vector<Tensor>& e_s2, double t_end,
                                          double total, const BlendOptions& opts = {});

/// Steps per stage: round(ratio * total), last stage absorbs the remainder.
std::vector<int> allocate_steps(int k, int total, std::span<const double> ratios);

struct GuidanceSchedule {
  int k = 1;
  int total_steps = 40;
  std::vector<Tensor> embeddings;  // coarse to fine
  std::vector<int> allocations;
  BlendOptions blend;

  /// First-stage boundary (the two-stage t_end).
  int t_end() const { return allocations.front(); }
  int stage_start(int stage) const;
  int stage_of(int step) const;
};

GuidanceSchedule build_schedule(int k, int total, std::span<const double> ratios,
                                std::vector<Tensor> embeddings, const BlendOptions& blend = {});

/// Text condition for sampling step `step` in [0, total_steps).
Tensor embedding_for_step(const GuidanceSchedule& schedule, int step);

}  // namespace tbd::guidance
