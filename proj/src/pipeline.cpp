#include "tbd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tbd/io.hpp"
#include "tbd/llm.hpp"
#include "tbd/ops.hpp"

namespace tbd::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

// ---------------------------------------------------------------- model

Model::Model(const RunConfig& cfg)
    : cfg_(cfg),
      rng_(Rng::derive(cfg.seed, "init")),
      net_(store_, cfg.network, rng_, "unet"),
      text_(store_, cfg.text, rng_, "text"),
      audio_(store_, cfg.audio, rng_, "audio"),
      reference_(store_, cfg.network, rng_, "reference") {}

std::unique_ptr<Model> Model::load(const RunConfig& cfg, const std::string& checkpoint) {
  if (!fs::exists(checkpoint)) throw PipelineError("checkpoint not found: " + checkpoint);
  auto model = std::make_unique<Model>(cfg);
  io::load_checkpoint(checkpoint, model->store_, nullptr);
  return model;
}

NetworkConditioning Model::condition(const Tensor& reference_latent, const std::vector<double>& wave,
                                     int start_frame, int frames) const {
  const std::size_t spf = static_cast<std::size_t>(cfg_.audio.samples_per_frame());
  const std::size_t begin = std::min(wave.size(), static_cast<std::size_t>(start_frame) * spf);
  const std::size_t end = std::min(wave.size(), begin + static_cast<std::size_t>(frames) * spf);
  const std::vector<double> window(wave.begin() + static_cast<std::ptrdiff_t>(begin),
                                   wave.begin() + static_cast<std::ptrdiff_t>(end));
  NetworkConditioning cond;
  cond.audio = audio_.encode(window, frames);
  cond.reference = reference_.encode(reference_latent);
  return cond;
}

diffusion::NoisePredictorFn Model::predictor(NetworkConditioning cond) const {
  return [this, cond = std::move(cond)](const Tensor& zt, int t, const Tensor& text) {
    NetworkConditioning c = cond;
    c.text = text;
    return net_.forward(zt, t, c);
  };
}

// ---------------------------------------------------------------- prompts

struct PromptService::Impl {
  cot::Backend backend = cot::Backend::kRules;
  std::optional<facs::KnowledgeBase> knowledge;
  std::optional<cot::PromptTemplates> templates;
  std::unique_ptr<llm::HttpChatClient> client;
};

PromptService::PromptService(const RunConfig& cfg) : impl_(std::make_unique<Impl>()) {
  if (!cfg.paths.facs_knowledge.empty()) impl_->knowledge = facs::KnowledgeBase::load(cfg.paths.facs_knowledge);
  if (!cfg.paths.prompts_dir.empty()) impl_->templates = cot::PromptTemplates::load(cfg.paths.prompts_dir);
  if (cfg.cot_backend == "llm") {
    impl_->backend = cot::Backend::kLlm;
    impl_->client = std::make_unique<llm::HttpChatClient>(llm::ClientConfig::from_env());
  }
}

PromptService::~PromptService() = default;

cot::PromptBundle PromptService::run(const cot::CotRequest& request) {
  cot::CotOptions opt;
  opt.backend = impl_->backend;
  opt.knowledge = impl_->knowledge ? &*impl_->knowledge : nullptr;
  opt.templates = impl_->templates ? &*impl_->templates : nullptr;
  opt.chat = impl_->client.get();
  return cot::run_cot(request, opt);
}

std::vector<std::string> stage_texts(const cot::PromptBundle& bundle, int k) {
  if (k < 1) throw PipelineError("k must be >= 1");
  if (k == 1) return {bundle.coarse_text};
  if (k == 2) return {bundle.coarse_text, bundle.fine_text};
  std::vector<std::string> sentences;
  std::string current;
  const std::string& fine = bundle.fine_text;
  for (std::size_t i = 0; i < fine.size(); ++i) {
    current += fine[i];
    const bool stop = fine[i] == '.' || fine[i] == '!' || fine[i] == '?';
    if (stop && (i + 1 == fine.size() || fine[i + 1] == ' ')) {
      sentences.push_back(current);
      current.clear();
    }
  }
  if (current.find_first_not_of(' ') != std::string::npos) sentences.push_back(current);
  std::vector<std::string> out{bundle.coarse_text};
  const int n = static_cast<int>(sentences.size());
  for (int stage = 1; stage < k; ++stage) {
    const int take = std::max(1, (stage * n + (k - 2)) / (k - 1));
    std::string text;
    for (int s = 0; s < std::min(take, n); ++s) text += sentences[s];
    const auto first = text.find_first_not_of(' ');
    out.push_back(first == std::string::npos ? fine : text.substr(first));
  }
  return out;
}

std::vector<double> stage_ratios(const RunConfig& cfg, int k) {
  if (k == cfg.guidance.k) return cfg.guidance.ratios;
  if (k == 1) return {1.0};
  std::vector<double> r(static_cast<std::size_t>(k), 0.6 / (k - 1));
  r.front() = 0.4;
  return r;
}

// ---------------------------------------------------------------- data

Tensor load_reference_latent(const RunConfig& cfg, const std::string& image_path) {
  const io::Image img = io::read_png(image_path);
  if (img.width != img.height || img.width % cfg.network.latent_size != 0) {
    throw PipelineError(image_path + ": image must be square with a side divisible by " +
                        std::to_string(cfg.network.latent_size));
  }
  return io::image_to_latent(img, cfg.network.latent_size);
}

std::vector<double> load_wave(const RunConfig& cfg, const std::string& audio_path) {
  io::Wave w = io::read_wav(audio_path);
  if (w.sample_rate != cfg.audio.sample_rate) {
    throw PipelineError(audio_path + ": sample rate " + std::to_string(w.sample_rate) +
                        " does not match audio_encoder.sample_rate " +
                        std::to_string(cfg.audio.sample_rate));
  }
  return std::move(w.samples);
}

std::vector<Clip> load_clips(const RunConfig& cfg, PromptService& prompts) {
  const auto entries = dataset::read_manifest(cfg.paths.dataset_manifest, cfg.network.frames);
  std::vector<Clip> clips;
  for (const auto& e : entries) {
    Clip c;
    c.entry = e;
    const int n = dataset::count_frames(e.frames_path);
    std::vector<Tensor> frames;
    for (int f = 0; f < n; ++f) {
      const std::string path = (fs::path(e.frames_path) / dataset::frame_filename(f)).string();
      Tensor lat = load_reference_latent(cfg, path);
      frames.push_back(ops::reshape(lat, {1, 3, cfg.network.latent_size, cfg.network.latent_size}));
    }
    c.frames = ops::concat(frames, 0);
    const std::string ref_path =
        (fs::path(e.frames_path) / dataset::frame_filename(e.reference_frame_index)).string();
    c.reference = load_reference_latent(cfg, ref_path);
    c.wave = load_wave(cfg, e.audio_path);

    if (!e.prompt_bundle_path.empty() && fs::exists(e.prompt_bundle_path)) {
      c.bundle = cot::load_bundle(e.prompt_bundle_path);
    } else {
      c.bundle = prompts.run({ref_path, e.emotion, e.intensity});
      const fs::path out = fs::path(cfg.paths.output_dir) / "prompts" / cot::bundle_filename(e.clip_id);
      fs::create_directories(out.parent_path());
      cot::save_bundle(c.bundle, out.string());
      c.entry.prompt_bundle_path = out.string();
    }
    if (c.bundle.emotion != e.emotion || c.bundle.intensity != e.intensity) {
      throw PipelineError(e.clip_id + ": prompt bundle labels do not match the manifest");
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

// ---------------------------------------------------------------- training

void to_json(json& j, const StepLog& s) {
  j = json{{"step", s.step}, {"phase", s.phase}, {"loss", s.loss}, {"mse", s.mse}, {"t", s.timesteps}};
}

void from_json(const json& j, StepLog& s) {
  s.step = j.at("step").get<int>();
  s.phase = j.at("phase").get<int>();
  s.loss = j.at("loss").get<double>();
  s.mse = j.at("mse").get<double>();
  s.timesteps = j.at("t").get<std::vector<int>>();
}

namespace {

std::vector<StepLog> read_log(const std::string& path, int before_step) {
  std::vector<StepLog> log;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepLog s = json::parse(line).get<StepLog>();
    if (s.step < before_step) log.push_back(std::move(s));
  }
  return log;
}

double mean_mse(std::vector<StepLog>::const_iterator b, std::vector<StepLog>::const_iterator e) {
  if (b == e) throw PipelineError("empty training log");
  double sum = 0.0;
  for (auto it = b; it != e; ++it) sum += it->mse;
  return sum / static_cast<double>(e - b);
}

}  // namespace

double initial_mse(const std::vector<StepLog>& log, int window) {
  return mean_mse(log.begin(), log.begin() + std::min<std::ptrdiff_t>(window, std::ssize(log)));
}

double final_mse(const std::vector<StepLog>& log, int window) {
  return mean_mse(log.end() - std::min<std::ptrdiff_t>(window, std::ssize(log)), log.end());
}

TrainSummary train(const RunConfig& cfg, PromptService& prompts, const TrainOptions& opts) {
  cfg.validate();
  const std::vector<Clip> clips = load_clips(cfg, prompts);
  Model model(cfg);
  nn::Adam adam(model.store(), cfg.training.learning_rate);
  const diffusion::NoiseSchedule schedule(cfg.diffusion.t_train, cfg.diffusion.beta_start,
                                          cfg.diffusion.beta_end);
  diffusion::TrainingGuidance tg;
  tg.sample_steps = cfg.sampler.steps;
  tg.first_stage_ratio = cfg.guidance.k >= 2 ? cfg.guidance.ratios.front() : 0.4;
  tg.blend = cfg.guidance.blend;

  TrainSummary summary;
  summary.checkpoint = cfg.paths.checkpoint;
  summary.log_path = (fs::path(cfg.paths.output_dir) / "train_log.jsonl").string();
  fs::create_directories(cfg.paths.output_dir);
  if (!fs::path(cfg.paths.checkpoint).parent_path().empty()) {
    fs::create_directories(fs::path(cfg.paths.checkpoint).parent_path());
  }

  const int p1 = cfg.training.phase1_steps;
  const int total = p1 + cfg.training.phase2_steps;
  int step = 0;
  std::uint64_t temporal_at_start = model.store().checksum(".temporal.");
  if (opts.resume && fs::exists(cfg.paths.checkpoint)) {
    const auto contents = io::load_checkpoint(cfg.paths.checkpoint, model.store(), &adam);
    if (contents.config.value("hash", std::string()) != cfg.hash()) {
      throw PipelineError("checkpoint was written with a different config");
    }
    step = contents.meta.at("next_step").get<int>();
    temporal_at_start = std::stoull(contents.meta.at("temporal_checksum").get<std::string>());
  }
  summary.log = read_log(summary.log_path, opts.resume ? step : 0);
  {
    std::string kept;
    for (const auto& s : summary.log) kept += json(s).dump() + "\n";
    io::write_text_file(summary.log_path, kept);
  }
  std::ofstream log_out(summary.log_path, std::ios::app);

  int last_saved = -1;
  auto save = [&](int next_step) {
    for (const auto& [name, p] : model.store().items()) check_finite(p, name);
    json meta{{"next_step", next_step},
              {"phase", next_step <= p1 ? 1 : 2},
              {"temporal_checksum", std::to_string(temporal_at_start)}};
    json config{{"hash", cfg.hash()}, {"run", cfg}};
    io::save_checkpoint(cfg.paths.checkpoint, model.store(), &adam, config, meta);
    last_saved = next_step;
  };

  const int end = opts.stop_after >= 0 ? std::min(total, opts.stop_after) : total;
  while (step < end) {
    const int phase = step < p1 ? 1 : 2;
    const int frames = phase == 1 ? 1 : cfg.network.frames;
    model.store().set_trainable("", true);
    if (phase == 1) model.store().set_trainable(".temporal.", false);

    Rng rng = Rng::derive(cfg.seed, "train/" + std::to_string(step));
    std::vector<diffusion::TrainingSample> batch;
    for (int b = 0; b < cfg.training.batch_size; ++b) {
      const Clip& clip = clips[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(clips.size())))];
      const int start = rng.uniform_int(clip.frames.dim(0) - frames + 1);
      diffusion::TrainingSample s;
      s.z0 = ops::slice(clip.frames, 0, start, frames);
      s.text.coarse = model.text().encode(clip.bundle.coarse_text);
      if (!clip.bundle.fine_text.empty()) s.text.fine = model.text().encode(clip.bundle.fine_text);
      s.predictor = model.predictor(model.condition(clip.reference, clip.wave, start, frames));
      batch.push_back(std::move(s));
    }

    model.store().zero_grad();
    diffusion::LossResult r;
    try {
      r = diffusion::training_loss(batch, {}, schedule, tg, rng);
    } catch (const NumericError& e) {
      throw PipelineError("non-finite loss at step " + std::to_string(step) + " (" + e.what() +
                          "); " +
                          (last_saved >= 0 || fs::exists(cfg.paths.checkpoint)
                               ? "last good checkpoint kept at " + cfg.paths.checkpoint
                               : std::string("no checkpoint was written")));
    }
    r.loss.backward();
    adam.step();

    StepLog entry{step, phase, r.loss.item(), r.mse, r.timesteps};
    log_out << json(entry).dump() << "\n" << std::flush;
    summary.log.push_back(entry);
    ++step;

    if (opts.progress && (step % cfg.training.log_every == 0 || step == total)) {
      *opts.progress << "step " << step << "/" << total << " phase " << phase << " mse "
                     << std::setprecision(5) << r.mse << "\n";
    }
    if (step == p1 && p1 > 0) {
      if (model.store().checksum(".temporal.") != temporal_at_start) {
        throw PipelineError("temporal weights changed during phase 1");
      }
      save(step);
    } else if (step % cfg.training.checkpoint_every == 0 || step == total) {
      save(step);
    }
  }
  if (last_saved != step) save(step);
  summary.steps_done = step;
  return summary;
}

// ---------------------------------------------------------------- sampling

Tensor sample_video(const Model& model, const Tensor& reference_latent,
                    const std::vector<double>& wave, int frames,
                    const std::vector<std::string>& texts, std::uint64_t seed) {
  const RunConfig& cfg = model.config();
  NoGradGuard no_grad;
  std::vector<Tensor> embeddings;
  for (const auto& t : texts) embeddings.push_back(model.text().encode(t));
  const int k = static_cast<int>(texts.size());
  const auto sched = guidance::build_schedule(k, cfg.sampler.steps, stage_ratios(cfg, k),
                                              std::move(embeddings), cfg.guidance.blend);
  const int s = cfg.network.latent_size;
  Rng noise_rng = Rng::derive(seed, "noise");
  const Tensor noise = diffusion::gaussian_like({frames, cfg.network.latent_channels, s, s}, noise_rng);
  const diffusion::NoiseSchedule schedule(cfg.diffusion.t_train, cfg.diffusion.beta_start,
                                          cfg.diffusion.beta_end);
  return diffusion::sample(noise, model.predictor(model.condition(reference_latent, wave, 0, frames)),
                           sched, cfg.sampler, schedule, seed);
}

std::vector<io::Image> decode_frames(const RunConfig& cfg, const Tensor& latents) {
  const int s = cfg.network.latent_size;
  const int scale = cfg.dataset.image_size / s;
  std::vector<io::Image> out;
  for (int f = 0; f < latents.dim(0); ++f) {
    out.push_back(io::latent_to_image(ops::reshape(ops::slice(latents, 0, f, 1), {3, s, s}), scale));
  }
  return out;
}

namespace {

Tensor image_tensor(const io::Image& img) {
  std::vector<double> v(static_cast<std::size_t>(3) * img.height * img.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        v[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] = img.at(y, x, c) / 255.0;
      }
    }
  }
  return Tensor::from({3, img.height, img.width}, std::move(v));
}

}  // namespace

double conditioning_sensitivity(const Model& model, const Tensor& reference_latent,
                                const std::vector<double>& wave, int frames,
                                const std::vector<std::string>& texts_a,
                                const std::vector<std::string>& texts_b, std::uint64_t seed) {
  const auto a = decode_frames(model.config(), sample_video(model, reference_latent, wave, frames, texts_a, seed));
  const auto b = decode_frames(model.config(), sample_video(model, reference_latent, wave, frames, texts_b, seed));
  double sum = 0.0;
  for (std::size_t f = 0; f < a.size(); ++f) sum += metrics::mean_abs_diff(image_tensor(a[f]), image_tensor(b[f]));
  return sum / static_cast<double>(a.size());
}

// ---------------------------------------------------------------- generation

namespace {

struct ResolvedInputs {
  Tensor reference;
  std::vector<double> wave;
  int frames = 0;
};

ResolvedInputs resolve_inputs(const RunConfig& cfg, const GenerateRequest& req) {
  ResolvedInputs in;
  in.reference = load_reference_latent(cfg, req.reference_image);
  in.wave = load_wave(cfg, req.audio);
  const int available = static_cast<int>(in.wave.size() / static_cast<std::size_t>(cfg.audio.samples_per_frame()));
  in.frames = req.frames > 0 ? req.frames : available;
  if (in.frames < 1) throw PipelineError(req.audio + ": audio shorter than one frame");
  if (in.frames > available) {
    throw PipelineError("requested " + std::to_string(in.frames) + " frames but the audio covers " +
                        std::to_string(available));
  }
  return in;
}

GenerateResult write_generation(const RunConfig& cfg, const Model& model, const GenerateRequest& req,
                                const cot::PromptBundle& bundle, const ResolvedInputs& in) {
  const auto texts = stage_texts(bundle, cfg.guidance.k);
  const Tensor latents = sample_video(model, in.reference, in.wave, in.frames, texts, cfg.seed);
  const auto images = decode_frames(cfg, latents);
  fs::create_directories(req.out_dir);
  GenerateResult result;
  json frame_hashes = json::array();
  for (std::size_t f = 0; f < images.size(); ++f) {
    const std::string path = (fs::path(req.out_dir) / dataset::frame_filename(static_cast<int>(f))).string();
    io::write_png(path, images[f]);
    frame_hashes.push_back(io::content_hash(io::read_text_file(path)));
    result.frame_paths.push_back(path);
  }
  const auto allocations = guidance::allocate_steps(
      cfg.guidance.k, cfg.sampler.steps, cfg.guidance.ratios);
  result.metadata = json{
      {"format", "tbd-generation"},
      {"version", 1},
      {"config", cfg},
      {"config_hash", cfg.hash()},
      {"seed", cfg.seed},
      {"checkpoint", fs::absolute(cfg.paths.checkpoint).string()},
      {"inputs",
       {{"reference_image", fs::absolute(req.reference_image).string()},
        {"audio", fs::absolute(req.audio).string()},
        {"emotion", req.emotion},
        {"intensity", req.intensity},
        {"frames", in.frames}}},
      {"bundle", bundle},
      {"stage_texts", texts},
      {"schedule",
       {{"k", cfg.guidance.k},
        {"total_steps", cfg.sampler.steps},
        {"allocations", allocations},
        {"alpha_max", cfg.guidance.blend.alpha_max},
        {"alpha_min", cfg.guidance.blend.alpha_min},
        {"smooth_boundary", cfg.guidance.blend.smooth_boundary},
        {"sampler", json(cfg)["sampler"]}}},
      {"frame_hashes", frame_hashes}};
  result.metadata_path = (fs::path(req.out_dir) / kMetadataFile).string();
  io::write_text_file(result.metadata_path, result.metadata.dump(2) + "\n");
  return result;
}

}  // namespace

GenerateResult generate(const RunConfig& cfg, const Model& model, PromptService& prompts,
                        const GenerateRequest& request) {
  if (request.out_dir.empty()) throw PipelineError("generate needs an output directory");
  const ResolvedInputs in = resolve_inputs(cfg, request);
  cot::PromptBundle bundle;
  if (!request.bundle_path.empty()) {
    bundle = cot::load_bundle(request.bundle_path);
    if (bundle.emotion != request.emotion || bundle.intensity != request.intensity) {
      throw PipelineError(request.bundle_path + ": bundle labels do not match the request");
    }
  } else {
    bundle = prompts.run({request.reference_image, request.emotion, request.intensity});
  }
  return write_generation(cfg, model, request, bundle, in);
}

GenerateResult replay(const std::string& metadata_path, const std::string& out_dir) {
  json meta;
  try {
    meta = json::parse(io::read_text_file(metadata_path));
  } catch (const json::parse_error& e) {
    throw PipelineError(metadata_path + ": " + e.what());
  }
  if (meta.value("format", "") != "tbd-generation") throw PipelineError(metadata_path + ": not a generation record");
  RunConfig cfg = meta.at("config").get<RunConfig>();
  cfg.validate();
  cfg.paths.checkpoint = meta.at("checkpoint").get<std::string>();
  const json& inputs = meta.at("inputs");
  GenerateRequest req;
  req.reference_image = inputs.at("reference_image").get<std::string>();
  req.audio = inputs.at("audio").get<std::string>();
  req.emotion = inputs.at("emotion").get<std::string>();
  req.intensity = inputs.at("intensity").get<int>();
  req.frames = inputs.at("frames").get<int>();
  req.out_dir = out_dir;
  const auto model = Model::load(cfg, cfg.paths.checkpoint);
  return write_generation(cfg, *model, req, meta.at("bundle").get<cot::PromptBundle>(),
                          resolve_inputs(cfg, req));
}

// ---------------------------------------------------------------- evaluation

namespace {

std::string frames_dir_of(const fs::path& clip_dir) {
  if (fs::exists(clip_dir / dataset::frame_filename(0))) return clip_dir.string();
  if (fs::exists(clip_dir / "frames" / dataset::frame_filename(0))) return (clip_dir / "frames").string();
  return {};
}

std::vector<std::string> clip_ids(const std::string& root) {
  if (!fs::is_directory(root)) throw PipelineError("not a directory: " + root);
  std::vector<std::string> ids;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory() && !frames_dir_of(d.path()).empty()) ids.push_back(d.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

metrics::MetricReport evaluate(const std::string& generated_dir, const std::string& reference_dir) {
  const auto gen = clip_ids(generated_dir);
  const auto ref = clip_ids(reference_dir);
  if (gen.empty()) throw PipelineError(generated_dir + ": no clips found");
  if (gen != ref) throw PipelineError("generated and reference clip sets differ");
  metrics::MetricReport report;
  for (const auto& id : gen) {
    const std::string gd = frames_dir_of(fs::path(generated_dir) / id);
    const std::string rd = frames_dir_of(fs::path(reference_dir) / id);
    const int n = dataset::count_frames(gd);
    if (n > dataset::count_frames(rd)) {
      throw PipelineError(id + ": generated clip has more frames than the reference");
    }
    metrics::ClipMetrics m;
    m.clip_id = id;
    m.frames = n;
    for (int f = 0; f < n; ++f) {
      const Tensor a = image_tensor(io::read_png((fs::path(gd) / dataset::frame_filename(f)).string()));
      const Tensor b = image_tensor(io::read_png((fs::path(rd) / dataset::frame_filename(f)).string()));
      if (a.shape() != b.shape()) throw PipelineError(id + ": frame size mismatch");
      m.psnr += metrics::psnr(a, b, 1.0);
      m.ssim += metrics::ssim(a, b);
    }
    m.psnr /= n;
    m.ssim /= n;
    report.clips.push_back(m);
  }
  report.aggregate();
  return report;
}

}  // namespace tbd::pipeline
