#include "tbd/diffusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "tbd/ops.hpp"

namespace tbd::diffusion {

NoiseSchedule::NoiseSchedule(int t_train, double beta_start, double beta_end) {
  if (t_train < 2) throw DiffusionError("T_train must be >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw DiffusionError("beta endpoints must satisfy 0 < start < end < 1");
  }
  beta_.resize(static_cast<std::size_t>(t_train));
  alpha_bar_.resize(beta_.size());
  double prod = 1.0;
  for (int t = 0; t < t_train; ++t) {
    beta_[t] = beta_start + (beta_end - beta_start) * t / (t_train - 1);
    prod *= 1.0 - beta_[t];
    alpha_bar_[t] = prod;
  }
}

namespace {

void check_timestep(int t, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.t_train()) {
    throw DiffusionError("timestep " + std::to_string(t) + " outside [0, " +
                         std::to_string(schedule.t_train()) + ")");
  }
}

}  // namespace

Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  if (z0.shape() != eps.shape()) {
    throw ShapeError("forward_noise: latent " + shape_str(z0.shape()) + " noise " +
                     shape_str(eps.shape()));
  }
  const double ab = schedule.alpha_bar(t);
  return ops::add(ops::scale(z0, std::sqrt(ab)), ops::scale(eps, std::sqrt(1.0 - ab)));
}

Tensor predict_x0(const Tensor& zt, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  const double ab = schedule.alpha_bar(t);
  return ops::scale(ops::sub(zt, ops::scale(eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

double progress_of(int t_train_step, int t_train, int sample_steps) {
  return sample_steps * (1.0 - static_cast<double>(t_train_step + 1) / t_train);
}

std::vector<int> sampling_timesteps(int t_train, int steps) {
  if (steps < 1 || steps > t_train) {
    throw DiffusionError("sampler steps " + std::to_string(steps) + " must lie in [1, " +
                         std::to_string(t_train) + "]");
  }
  if (steps == 1) return {t_train - 1};
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    ts[i] = static_cast<int>(
        std::lround(static_cast<double>(t_train - 1) * (steps - 1 - i) / (steps - 1)));
  }
  return ts;
}

Tensor sample(const Tensor& noise, const NoisePredictorFn& predictor,
              const guidance::GuidanceSchedule& guidance, const SamplerSpec& sampler,
              const NoiseSchedule& schedule, std::uint64_t seed) {
  if (guidance.total_steps != sampler.steps) {
    throw DiffusionError("guidance schedule has " + std::to_string(guidance.total_steps) +
                         " steps, sampler " + std::to_string(sampler.steps));
  }
  NoGradGuard no_grad;
  const std::vector<int> ts = sampling_timesteps(schedule.t_train(), sampler.steps);
  Rng rng = Rng::derive(seed, "sampler");
  std::vector<double> z = noise.values();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Tensor text = guidance::embedding_for_step(guidance, static_cast<int>(i));
    const Tensor eps = predictor(Tensor::from(noise.shape(), z), ts[i], text);
    if (eps.shape() != noise.shape()) {
      throw ShapeError("noise prediction " + shape_str(eps.shape()) + " for latent " +
                       shape_str(noise.shape()));
    }
    check_finite(eps, "noise prediction");
    const double ab = schedule.alpha_bar(ts[i]);
    const double ab_prev = i + 1 < ts.size() ? schedule.alpha_bar(ts[i + 1]) : 1.0;
    double sigma = 0.0;
    if (sampler.kind == SamplerKind::kStochastic) {
      sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
    }
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    for (std::size_t j = 0; j < z.size(); ++j) {
      double x0 = (z[j] - std::sqrt(1.0 - ab) * eps[j]) / std::sqrt(ab);
      double e = eps[j];
      if (sampler.clip_x0 && std::abs(x0) > 1.0) {
        x0 = std::clamp(x0, -1.0, 1.0);
        e = (z[j] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      }
      z[j] = std::sqrt(ab_prev) * x0 + dir * e;
      if (sigma > 0.0) z[j] += sigma * rng.normal();
    }
  }
  return Tensor::from(noise.shape(), std::move(z));
}

Tensor gaussian_like(const Shape& shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v));
}

Tensor sample_loss(const TrainingSample& sample, int t, const Tensor& eps,
                   const NoisePredictorFn& predictor, const NoiseSchedule& schedule,
                   const TrainingGuidance& guidance) {
  const Tensor zt = forward_noise(sample.z0, t, eps, schedule);
  Tensor text = sample.text.coarse;
  if (sample.text.fine.defined()) {
    const std::array<double, 2> ratios{guidance.first_stage_ratio, 1.0 - guidance.first_stage_ratio};
    const int t_end = guidance::allocate_steps(2, guidance.sample_steps, ratios).front();
    const double p = progress_of(t, schedule.t_train(), guidance.sample_steps);
    text = guidance::adjust_text_embedding(p, sample.text.coarse, sample.text.fine, t_end,
                                           guidance.sample_steps, guidance.blend);
  }
  return ops::squared_error(predictor(zt, t, text), eps);
}

LossResult training_loss(const std::vector<TrainingSample>& batch, const NoisePredictorFn& predictor,
                         const NoiseSchedule& schedule, const TrainingGuidance& guidance,
                         Rng& rng) {
  if (batch.empty()) throw DiffusionError("empty training batch");
  LossResult r;
  Tensor total;
  std::size_t elements = 0;
  for (const auto& s : batch) {
    const int t = rng.uniform_int(schedule.t_train());
    const Tensor eps = gaussian_like(s.z0.shape(), rng);
    const NoisePredictorFn& fn = s.predictor ? s.predictor : predictor;
    if (!fn) throw DiffusionError("training sample has no noise predictor");
    const Tensor l = sample_loss(s, t, eps, fn, schedule, guidance);
    total = total.defined() ? ops::add(total, l) : l;
    elements += s.z0.size();
    r.timesteps.push_back(t);
  }
  r.loss = ops::scale(total, 1.0 / static_cast<double>(batch.size()));
  if (!std::isfinite(r.loss.item())) throw NumericError("training loss is not finite");
  r.mse = total.item() / static_cast<double>(elements);
  return r;
}

}  // namespace tbd::diffusion
