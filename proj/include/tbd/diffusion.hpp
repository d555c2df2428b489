#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tbd/guidance.hpp"
#include "tbd/rng.hpp"
#include "tbd/tensor.hpp"

namespace tbd::diffusion {

struct DiffusionError : Error {
  using Error::Error;
};

/// Linear beta schedule and its cumulative products.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int t_train = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  int t_train() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.
Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Inverse of forward_noise given the noise that produced z_t.
Tensor predict_x0(const Tensor& zt, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Position of training timestep t on the sampling progress axis [0, steps).
/// Large t (heavy noise) maps near 0, matching sampling step order.
double progress_of(int t_train_step, int t_train, int sample_steps);

enum class SamplerKind { kDeterministic, kStochastic };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::kDeterministic;
  int steps = 40;
  /// Clamp each x0 estimate to [-1, 1] and re-derive eps from it.
  bool clip_x0 = true;
};

/// Training timesteps visited by the sampler, from T_train - 1 down to 0.
std::vector<int> sampling_timesteps(int t_train, int steps);

/// eps_theta(z_t, t, text): everything except text is bound by the caller.
using NoisePredictorFn = std::function<Tensor(const Tensor& zt, int t, const Tensor& text)>;

/// Runs the reverse process from `noise` with the text condition of step i
/// taken from embedding_for_step(guidance, i). The seed feeds the stochastic
/// sampler only.
Tensor sample(const Tensor& noise, const NoisePredictorFn& predictor,
              const guidance::GuidanceSchedule& guidance, const SamplerSpec& sampler,
              const NoiseSchedule& schedule, std::uint64_t seed);

/// Text condition used during training for one sample: coarse and fine
/// blended on the progress axis, or the coarse embedding alone.
struct TrainingText {
  Tensor coarse;
  Tensor fine;  // undefined when the entry has a single prompt
};

struct TrainingSample {
  Tensor z0;
  TrainingText text;
  NoisePredictorFn predictor;  // overrides the batch-wide predictor when set
};

struct LossResult {
  Tensor loss;         // mean over the batch of per-sample squared-error sums
  double mse = 0.0;    // mean squared error per element, for logging
  std::vector<int> timesteps;
};

struct TrainingGuidance {
  int sample_steps = 40;
  double first_stage_ratio = 0.4;
  guidance::BlendOptions blend;
};

/// Draws t and eps per sample from rng and evaluates the noise-prediction loss.
/// `predictor` serves samples that do not carry their own.
LossResult training_loss(const std::vector<TrainingSample>& batch, const NoisePredictorFn& predictor,
                         const NoiseSchedule& schedule, const TrainingGuidance& guidance,
                         Rng& rng);

/// Loss for one sample with t and eps given.
Tensor sample_loss(const TrainingSample& sample, int t, const Tensor& eps,
                   const NoisePredictorFn& predictor, const NoiseSchedule& schedule,
                   const TrainingGuidance& guidance);

Tensor gaussian_like(const Shape& shape, Rng& rng);

}  // namespace tbd::diffusion
