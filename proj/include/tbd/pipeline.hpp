#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/config.hpp"
#include "tbd/cot.hpp"
#include "tbd/dataset.hpp"
#include "tbd/diffusion.hpp"
#include "tbd/encoders.hpp"
#include "tbd/metrics.hpp"
#include "tbd/network.hpp"

namespace tbd::pipeline {

struct PipelineError : Error {
  using Error::Error;
};

/// Keeps glibc from returning freed tensor buffers to the OS on every step.
void tune_allocator();

/// Every trainable module, created in a fixed order from the config seed.
class Model {
 public:
  explicit Model(const RunConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Builds the model and loads weights from a checkpoint.
  static std::unique_ptr<Model> load(const RunConfig& cfg, const std::string& checkpoint);

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  const NoisePredictor& net() const { return net_; }
  const encoders::TextEncoder& text() const { return text_; }
  const encoders::AudioEncoder& audio() const { return audio_; }
  const encoders::ReferenceEncoder& reference() const { return reference_; }
  const RunConfig& config() const { return cfg_; }

  /// Audio for frames [start, start + frames) and reference features; text is left unset.
  NetworkConditioning condition(const Tensor& reference_latent, const std::vector<double>& wave,
                                int start_frame, int frames) const;
  /// Binds conditioning; the text argument of each call fills cond.text.
  diffusion::NoisePredictorFn predictor(NetworkConditioning cond) const;

 private:
  RunConfig cfg_;
  nn::ParameterStore store_;
  Rng rng_;
  NoisePredictor net_;
  encoders::TextEncoder text_;
  encoders::AudioEncoder audio_;
  encoders::ReferenceEncoder reference_;
};

/// Runs CoT-FA with the backend, knowledge base and templates named in the config.
class PromptService {
 public:
  explicit PromptService(const RunConfig& cfg);
  ~PromptService();
  cot::PromptBundle run(const cot::CotRequest& request);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Stage texts for k stages: the coarse text, then growing prefixes of the
/// fine text's sentences ending with the whole fine text.
std::vector<std::string> stage_texts(const cot::PromptBundle& bundle, int k);

/// Stage ratios for k stages: the configured ones when k matches, otherwise
/// 0.4 for the first stage and an even split of the rest.
std::vector<double> stage_ratios(const RunConfig& cfg, int k);

/// Loaded clip: latents of every frame, waveform and prompt bundle.
struct Clip {
  dataset::ManifestEntry entry;
  Tensor frames;     // (F, 3, S, S)
  Tensor reference;  // (3, S, S)
  std::vector<double> wave;
  cot::PromptBundle bundle;
};

/// Reads the manifest and its media. Entries without a bundle get one from
/// `prompts`, saved under <output_dir>/prompts.
std::vector<Clip> load_clips(const RunConfig& cfg, PromptService& prompts);

Tensor load_reference_latent(const RunConfig& cfg, const std::string& image_path);
std::vector<double> load_wave(const RunConfig& cfg, const std::string& audio_path);

struct StepLog {
  int step = 0;  // global step, phase 1 first
  int phase = 1;
  double loss = 0.0;
  double mse = 0.0;
  std::vector<int> timesteps;
};
void to_json(nlohmann::json& j, const StepLog& s);
void from_json(const nlohmann::json& j, StepLog& s);

struct TrainOptions {
  bool resume = false;
  int stop_after = -1;  // stop once this many global steps are done
  std::ostream* progress = nullptr;
};

struct TrainSummary {
  std::vector<StepLog> log;  // whole log, including steps before a resume
  int steps_done = 0;
  std::string checkpoint;
  std::string log_path;
};

/// Phase 1 trains everything except temporal layers on single frames,
/// phase 2 trains all layers on random windows of network.frames frames.
/// Writes <output_dir>/train_log.jsonl and the checkpoint. A non-finite loss
/// aborts without touching the last checkpoint.
TrainSummary train(const RunConfig& cfg, PromptService& prompts, const TrainOptions& opts = {});

/// Mean mse over the first and last `window` entries of a log.
double initial_mse(const std::vector<StepLog>& log, int window);
double final_mse(const std::vector<StepLog>& log, int window);

/// Samples `frames` latent frames (F, 3, S, S) under NoGrad.
Tensor sample_video(const Model& model, const Tensor& reference_latent,
                    const std::vector<double>& wave, int frames,
                    const std::vector<std::string>& stage_texts, std::uint64_t seed);

/// Latents in [-1, 1] to 8-bit frames.
std::vector<io::Image> decode_frames(const RunConfig& cfg, const Tensor& latents);

/// Mean absolute pixel difference in [0, 1] between videos sampled with
/// two sets of stage texts under one seed.
double conditioning_sensitivity(const Model& model, const Tensor& reference_latent,
                                const std::vector<double>& wave, int frames,
                                const std::vector<std::string>& texts_a,
                                const std::vector<std::string>& texts_b, std::uint64_t seed);

struct GenerateRequest {
  std::string reference_image;
  std::string audio;
  std::string emotion;
  int intensity = 2;
  int frames = 0;                 // 0: as many as the audio covers
  std::string bundle_path;        // optional precomputed bundle
  std::string out_dir;
};

struct GenerateResult {
  std::vector<std::string> frame_paths;
  std::string metadata_path;
  nlohmann::json metadata;
};

inline constexpr const char* kMetadataFile = "generation.json";

GenerateResult generate(const RunConfig& cfg, const Model& model, PromptService& prompts,
                        const GenerateRequest& request);

/// Regenerates from a metadata file into out_dir with the recorded config,
/// bundle, inputs and seed.
GenerateResult replay(const std::string& metadata_path, const std::string& out_dir);

/// PSNR and SSIM per clip between <generated>/<clip> and <reference>/<clip>
/// (frames directly inside or under frames/).
metrics::MetricReport evaluate(const std::string& generated_dir, const std::string& reference_dir);

}  // namespace tbd::pipeline
