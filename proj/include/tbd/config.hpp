#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/diffusion.hpp"
#include "tbd/encoders.hpp"
#include "tbd/guidance.hpp"
#include "tbd/network.hpp"

namespace tbd {

struct ConfigError : Error {
  using Error::Error;
};

struct GuidanceConfig {
  int k = 2;
  std::vector<double> ratios{0.4, 0.6};
  guidance::BlendOptions blend;
};

struct DiffusionConfig {
  int t_train = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct TrainingConfig {
  // Full-scale reference: 30000 steps per phase, batch 2, 512x512, 14 frames, lr 1e-5.
  int phase1_steps = 2000;
  int phase2_steps = 2000;
  int batch_size = 2;
  double learning_rate = 1e-3;
  int checkpoint_every = 500;
  int log_every = 50;
};

struct DatasetConfig {
  int clips = 4;
  int frames_per_clip = 8;
  int image_size = 32;
};

struct PathConfig {
  std::string dataset_manifest = "run/dataset/manifest.jsonl";
  std::string output_dir = "run";
  std::string checkpoint = "run/model.ckpt";
  std::string facs_knowledge;  // empty: shipped file
  std::string prompts_dir;     // empty: shipped templates
};

struct RunConfig {
  std::uint64_t seed = 1234;
  NoisePredictorConfig network;
  encoders::TextEncoderConfig text;
  encoders::AudioEncoderConfig audio;
  DiffusionConfig diffusion;
  diffusion::SamplerSpec sampler;
  GuidanceConfig guidance;
  TrainingConfig training;
  DatasetConfig dataset;
  PathConfig paths;
  std::string cot_backend = "rules";

  /// Throws ConfigError naming the first inconsistency.
  void validate() const;
  /// Short content hash of the canonical JSON form.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Applies "a.b.c=value" overrides; value is parsed as JSON when possible,
/// otherwise taken as a string. Unknown keys are rejected.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Defaults, then the file (if non-empty), then overrides; validated.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

}  // namespace tbd
