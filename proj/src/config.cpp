#include "tbd/config.hpp"

#include <cmath>
#include <fstream>

#include "tbd/io.hpp"

namespace tbd {

using nlohmann::json;

namespace {

const char* sampler_name(diffusion::SamplerKind k) {
  return k == diffusion::SamplerKind::kDeterministic ? "deterministic" : "stochastic";
}

void check_known_keys(const json& defaults, const json& doc, const std::string& prefix) {
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (value.is_object() && defaults.at(key).is_object()) check_known_keys(defaults.at(key), value, path);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

}  // namespace

void to_json(json& j, const RunConfig& c) {
  const auto& n = c.network;
  j = json{
      {"seed", c.seed},
      {"network",
       {{"levels", n.levels}, {"channels", n.channels}, {"d_k", n.d_k}, {"heads", n.heads},
        {"frames", n.frames}, {"text_dim", n.text_dim}, {"audio_dim", n.audio_dim},
        {"groupnorm_groups", n.groupnorm_groups}, {"latent_channels", n.latent_channels},
        {"latent_size", n.latent_size}, {"time_dim", n.time_dim}, {"ff_mult", n.ff_mult}}},
      {"text_encoder", {{"dim", c.text.dim}, {"vocab", c.text.vocab}, {"max_tokens", c.text.max_tokens}}},
      {"audio_encoder",
       {{"dim", c.audio.dim}, {"tokens_per_frame", c.audio.tokens_per_frame}, {"bands", c.audio.bands},
        {"sample_rate", c.audio.sample_rate}, {"fps", c.audio.fps}}},
      {"diffusion",
       {{"t_train", c.diffusion.t_train}, {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end}}},
      {"sampler",
       {{"kind", sampler_name(c.sampler.kind)}, {"steps", c.sampler.steps}, {"clip_x0", c.sampler.clip_x0}}},
      {"guidance",
       {{"k", c.guidance.k}, {"ratios", c.guidance.ratios}, {"alpha_max", c.guidance.blend.alpha_max},
        {"alpha_min", c.guidance.blend.alpha_min}, {"smooth_boundary", c.guidance.blend.smooth_boundary}}},
      {"training",
       {{"phase1_steps", c.training.phase1_steps}, {"phase2_steps", c.training.phase2_steps},
        {"batch_size", c.training.batch_size}, {"learning_rate", c.training.learning_rate},
        {"checkpoint_every", c.training.checkpoint_every}, {"log_every", c.training.log_every}}},
      {"dataset",
       {{"clips", c.dataset.clips}, {"frames_per_clip", c.dataset.frames_per_clip},
        {"image_size", c.dataset.image_size}}},
      {"paths",
       {{"dataset_manifest", c.paths.dataset_manifest}, {"output_dir", c.paths.output_dir},
        {"checkpoint", c.paths.checkpoint}, {"facs_knowledge", c.paths.facs_knowledge},
        {"prompts_dir", c.paths.prompts_dir}}},
      {"cot", {{"backend", c.cot_backend}}}};
}

void from_json(const json& j, RunConfig& c) {
  check_known_keys(json(RunConfig{}), j, "");
  read(j, "seed", c.seed, "");
  if (j.contains("network")) {
    const auto& s = j.at("network");
    auto& n = c.network;
    read(s, "levels", n.levels, "network");
    read(s, "channels", n.channels, "network");
    read(s, "d_k", n.d_k, "network");
    read(s, "heads", n.heads, "network");
    read(s, "frames", n.frames, "network");
    read(s, "text_dim", n.text_dim, "network");
    read(s, "audio_dim", n.audio_dim, "network");
    read(s, "groupnorm_groups", n.groupnorm_groups, "network");
    read(s, "latent_channels", n.latent_channels, "network");
    read(s, "latent_size", n.latent_size, "network");
    read(s, "time_dim", n.time_dim, "network");
    read(s, "ff_mult", n.ff_mult, "network");
  }
  if (j.contains("text_encoder")) {
    const auto& s = j.at("text_encoder");
    read(s, "dim", c.text.dim, "text_encoder");
    read(s, "vocab", c.text.vocab, "text_encoder");
    read(s, "max_tokens", c.text.max_tokens, "text_encoder");
  }
  if (j.contains("audio_encoder")) {
    const auto& s = j.at("audio_encoder");
    read(s, "dim", c.audio.dim, "audio_encoder");
    read(s, "tokens_per_frame", c.audio.tokens_per_frame, "audio_encoder");
    read(s, "bands", c.audio.bands, "audio_encoder");
    read(s, "sample_rate", c.audio.sample_rate, "audio_encoder");
    read(s, "fps", c.audio.fps, "audio_encoder");
  }
  if (j.contains("diffusion")) {
    const auto& s = j.at("diffusion");
    read(s, "t_train", c.diffusion.t_train, "diffusion");
    read(s, "beta_start", c.diffusion.beta_start, "diffusion");
    read(s, "beta_end", c.diffusion.beta_end, "diffusion");
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    std::string kind = sampler_name(c.sampler.kind);
    read(s, "kind", kind, "sampler");
    if (kind == "deterministic") c.sampler.kind = diffusion::SamplerKind::kDeterministic;
    else if (kind == "stochastic") c.sampler.kind = diffusion::SamplerKind::kStochastic;
    else throw ConfigError("sampler.kind must be 'deterministic' or 'stochastic', got '" + kind + "'");
    read(s, "steps", c.sampler.steps, "sampler");
    read(s, "clip_x0", c.sampler.clip_x0, "sampler");
  }
  if (j.contains("guidance")) {
    const auto& s = j.at("guidance");
    read(s, "k", c.guidance.k, "guidance");
    read(s, "ratios", c.guidance.ratios, "guidance");
    read(s, "alpha_max", c.guidance.blend.alpha_max, "guidance");
    read(s, "alpha_min", c.guidance.blend.alpha_min, "guidance");
    read(s, "smooth_boundary", c.guidance.blend.smooth_boundary, "guidance");
  }
  if (j.contains("training")) {
    const auto& s = j.at("training");
    auto& t = c.training;
    read(s, "phase1_steps", t.phase1_steps, "training");
    read(s, "phase2_steps", t.phase2_steps, "training");
    read(s, "batch_size", t.batch_size, "training");
    read(s, "learning_rate", t.learning_rate, "training");
    read(s, "checkpoint_every", t.checkpoint_every, "training");
    read(s, "log_every", t.log_every, "training");
  }
  if (j.contains("dataset")) {
    const auto& s = j.at("dataset");
    read(s, "clips", c.dataset.clips, "dataset");
    read(s, "frames_per_clip", c.dataset.frames_per_clip, "dataset");
    read(s, "image_size", c.dataset.image_size, "dataset");
  }
  if (j.contains("paths")) {
    const auto& s = j.at("paths");
    read(s, "dataset_manifest", c.paths.dataset_manifest, "paths");
    read(s, "output_dir", c.paths.output_dir, "paths");
    read(s, "checkpoint", c.paths.checkpoint, "paths");
    read(s, "facs_knowledge", c.paths.facs_knowledge, "paths");
    read(s, "prompts_dir", c.paths.prompts_dir, "paths");
  }
  if (j.contains("cot")) read(j.at("cot"), "backend", c.cot_backend, "cot");
}

void RunConfig::validate() const {
  try {
    network.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
  if (text.dim != network.text_dim) {
    throw ConfigError("text_encoder.dim (" + std::to_string(text.dim) + ") != network.text_dim (" +
                      std::to_string(network.text_dim) + ")");
  }
  if (audio.dim != network.audio_dim) {
    throw ConfigError("audio_encoder.dim (" + std::to_string(audio.dim) + ") != network.audio_dim (" +
                      std::to_string(network.audio_dim) + ")");
  }
  if (network.latent_channels != 3) throw ConfigError("network.latent_channels must be 3 (RGB latents)");
  if (dataset.image_size % network.latent_size != 0) {
    throw ConfigError("dataset.image_size must be a multiple of network.latent_size");
  }
  if (network.frames < 2) throw ConfigError("network.frames (phase-2 window) must be >= 2");
  if (dataset.frames_per_clip < network.frames) {
    throw ConfigError("dataset.frames_per_clip must be >= network.frames");
  }
  if (dataset.clips < 1) throw ConfigError("dataset.clips must be >= 1");
  if (!(training.learning_rate > 0.0)) throw ConfigError("training.learning_rate must be > 0");
  if (training.phase1_steps < 0 || training.phase2_steps < 0) throw ConfigError("negative step count");
  if (training.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (training.log_every < 1) throw ConfigError("training.log_every must be >= 1");
  if (training.checkpoint_every < 1) throw ConfigError("training.checkpoint_every must be >= 1");
  if (diffusion.t_train < 2) throw ConfigError("diffusion.t_train must be >= 2");
  if (!(diffusion.beta_start > 0 && diffusion.beta_start < diffusion.beta_end && diffusion.beta_end < 1)) {
    throw ConfigError("diffusion betas must satisfy 0 < beta_start < beta_end < 1");
  }
  if (sampler.steps < 1 || sampler.steps > diffusion.t_train) {
    throw ConfigError("sampler.steps must lie in [1, diffusion.t_train]");
  }
  if (guidance.k < 1 || static_cast<int>(guidance.ratios.size()) != guidance.k) {
    throw ConfigError("guidance.ratios must have k entries");
  }
  if (sampler.steps < guidance.k) throw ConfigError("sampler.steps must be >= guidance.k");
  double sum = 0.0;
  for (double r : guidance.ratios) {
    if (!(r > 0.0)) throw ConfigError("guidance.ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("guidance.ratios must sum to 1");
  if (guidance.blend.alpha_max < guidance.blend.alpha_min) {
    throw ConfigError("guidance.alpha_max must be >= alpha_min");
  }
  if (cot_backend != "rules" && cot_backend != "llm") {
    throw ConfigError("cot.backend must be 'rules' or 'llm'");
  }
}

std::string RunConfig::hash() const { return io::content_hash(json(*this).dump()); }

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json doc = json(RunConfig{});
  if (!path.empty()) {
    json file;
    try {
      file = json::parse(io::read_text_file(path), nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError(path + ": config must be a JSON object");
    check_known_keys(doc, file, "");
    doc.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = doc.get<RunConfig>();
  c.validate();
  return c;
}

}  // namespace tbd
