#include "tbd/guidance.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "tbd/ops.hpp"

namespace tbd::guidance {

double calculate_alpha(double t, const AlphaParams& params) {
  if (!(params.t_end > params.t_start)) {
    throw GuidanceError("degenerate stage: t_end (" + std::to_string(params.t_end) +
                        ") must exceed t_start (" + std::to_string(params.t_start) + ")");
  }
  if (params.alpha_max < params.alpha_min) throw GuidanceError("alpha_max < alpha_min");
  if (t < params.t_start || t > params.t_end) {
    throw GuidanceError("timestep " + std::to_string(t) + " outside stage [" +
                        std::to_string(params.t_start) + ", " + std::to_string(params.t_end) + "]");
  }
  const double p = (t - params.t_start) / (params.t_end - params.t_start);
  return params.alpha_max - p * (params.alpha_max - params.alpha_min);
}

namespace {

double post_boundary_alpha(double alpha, const BlendOptions& opts) {
  return opts.smooth_boundary ? opts.alpha_min + opts.alpha_max - alpha : alpha;
}

}  // namespace

BlendWeights blend_weights(double t, double t_end, double total, const BlendOptions& opts) {
  if (t < 0.0 || t >= total) {
    throw GuidanceError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(total) + ")");
  }
  if (t < t_end) {
    const double a = calculate_alpha(t, {0.0, t_end, opts.alpha_max, opts.alpha_min});
    return {a, 1.0 - a};
  }
  const double a =
      post_boundary_alpha(calculate_alpha(t, {t_end, total, opts.alpha_max, opts.alpha_min}), opts);
  return {1.0 - a, a};
}

Tensor adjust_text_embedding(double t, const Tensor& e_s1, const Tensor& e_s2, double t_end,
                             double total, const BlendOptions& opts) {
  if (e_s1.shape() != e_s2.shape()) {
    throw ShapeError("embedding shapes differ: " + shape_str(e_s1.shape()) + " vs " +
                     shape_str(e_s2.shape()));
  }
  const BlendWeights w = blend_weights(t, t_end, total, opts);
  if (t < t_end) return ops::blend(e_s1, e_s2, w.first);
  return ops::blend(e_s2, e_s1, w.second);
}

std::vector<Tensor> adjust_text_embedding(std::span<const double> t_batch,
                                          const std::vector<Tensor>& e_s1,
                                          const std::vector<Tensor>& e_s2, double t_end,
                                          double total, const BlendOptions& opts) {
  if (e_s1.size() != t_batch.size() || e_s2.size() != t_batch.size()) {
    throw ShapeError("batch size mismatch between timesteps and embeddings");
  }
  std::vector<Tensor> out;
  out.reserve(t_batch.size());
  for (std::size_t i = 0; i < t_batch.size(); ++i) {
    out.push_back(adjust_text_embedding(t_batch[i], e_s1[i], e_s2[i], t_end, total, opts));
  }
  return out;
}

std::vector<int> allocate_steps(int k, int total, std::span<const double> ratios) {
  if (k < 1) throw GuidanceError("stage count must be >= 1");
  if (static_cast<int>(ratios.size()) != k) {
    throw GuidanceError("expected " + std::to_string(k) + " ratios, got " +
                        std::to_string(ratios.size()));
  }
  if (total < k) {
    throw GuidanceError("total steps " + std::to_string(total) + " < stage count " + std::to_string(k));
  }
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw GuidanceError("stage ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw GuidanceError("stage ratios sum to " + std::to_string(sum) + ", expected 1");
  }
  std::vector<int> steps(static_cast<std::size_t>(k));
  int used = 0;
  for (int i = 0; i + 1 < k; ++i) {
    steps[i] = static_cast<int>(std::lround(ratios[i] * total));
    used += steps[i];
  }
  steps[k - 1] = total - used;
  for (int s : steps) {
    if (s < 1) throw GuidanceError("a stage received no sampling steps");
  }
  return steps;
}

int GuidanceSchedule::stage_start(int stage) const {
  return std::accumulate(allocations.begin(), allocations.begin() + stage, 0);
}

int GuidanceSchedule::stage_of(int step) const {
  if (step < 0 || step >= total_steps) {
    throw GuidanceError("step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + ")");
  }
  int end = 0;
  for (int i = 0; i < k; ++i) {
    end += allocations[i];
    if (step < end) return i;
  }
  return k - 1;
}

GuidanceSchedule build_schedule(int k, int total, std::span<const double> ratios,
                                std::vector<Tensor> embeddings, const BlendOptions& blend) {
  GuidanceSchedule s;
  s.allocations = allocate_steps(k, total, ratios);
  if (static_cast<int>(embeddings.size()) != k) {
    throw GuidanceError("expected " + std::to_string(k) + " embeddings, got " +
                        std::to_string(embeddings.size()));
  }
  for (const auto& e : embeddings) {
    if (!e.defined() || e.shape() != embeddings.front().shape()) {
      throw ShapeError("stage embeddings must share one shape");
    }
  }
  s.k = k;
  s.total_steps = total;
  s.embeddings = std::move(embeddings);
  s.blend = blend;
  return s;
}

Tensor embedding_for_step(const GuidanceSchedule& schedule, int step) {
  const int stage = schedule.stage_of(step);
  const auto& e = schedule.embeddings;
  if (schedule.k == 1) return e[0];
  if (schedule.k == 2) {
    return adjust_text_embedding(step, e[0], e[1], schedule.t_end(), schedule.total_steps,
                                 schedule.blend);
  }
  // More than two stages: each stage blends with its neighbour only. The
  // first stage leans toward the second, later stages toward the previous one.
  const int start = schedule.stage_start(stage);
  const int end = start + schedule.allocations[stage];
  const AlphaParams params{static_cast<double>(start), static_cast<double>(end),
                           schedule.blend.alpha_max, schedule.blend.alpha_min};
  const double alpha = calculate_alpha(step, params);
  if (stage == 0) return ops::blend(e[0], e[1], alpha);
  return ops::blend(e[stage], e[stage - 1], post_boundary_alpha(alpha, schedule.blend));
}

}  // namespace tbd::guidance
