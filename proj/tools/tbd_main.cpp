#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "tbd/config.hpp"
#include "tbd/cot.hpp"
#include "tbd/dataset.hpp"
#include "tbd/llm.hpp"
#include "tbd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tbd;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string facs;
};

RunConfig resolve_config(const GlobalOptions& g) {
  std::vector<std::string> overrides = g.overrides;
  if (g.seed) overrides.push_back("seed=" + std::to_string(*g.seed));
  if (!g.facs.empty()) overrides.push_back("paths.facs_knowledge=\"" + g.facs + "\"");
  return load_config(g.config, overrides);
}

int cmd_dataset(const RunConfig& cfg, std::string out_dir) {
  if (out_dir.empty()) out_dir = fs::path(cfg.paths.dataset_manifest).parent_path().string();
  if (out_dir.empty()) out_dir = ".";
  dataset::SyntheticSpec spec;
  spec.clips = cfg.dataset.clips;
  spec.frames = cfg.dataset.frames_per_clip;
  spec.image_size = cfg.dataset.image_size;
  spec.sample_rate = cfg.audio.sample_rate;
  spec.fps = cfg.audio.fps;
  const auto entries = dataset::generate_synthetic_dataset(out_dir, spec, cfg.seed);
  for (const auto& e : entries) {
    std::cout << e.clip_id << "  " << e.emotion << " " << e.intensity << "\n";
  }
  std::cout << "wrote " << (fs::path(out_dir) / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_prompt(const RunConfig& cfg, const std::string& image, const std::string& emotion,
               int intensity, const std::string& out) {
  pipeline::PromptService prompts(cfg);
  const auto bundle = prompts.run({image, emotion, intensity});
  if (out.empty()) {
    std::cout << nlohmann::json(bundle).dump(2) << "\n";
  } else {
    cot::save_bundle(bundle, out);
    std::cout << "coarse: " << bundle.coarse_text << "\nfine:   " << bundle.fine_text << "\nwrote " << out << "\n";
  }
  return 0;
}

int cmd_train(const RunConfig& cfg, bool resume, int stop_after) {
  pipeline::PromptService prompts(cfg);
  pipeline::TrainOptions opts;
  opts.resume = resume;
  opts.stop_after = stop_after;
  opts.progress = &std::cout;
  const auto summary = pipeline::train(cfg, prompts, opts);
  const int window = std::min<int>(50, static_cast<int>(summary.log.size()));
  std::cout << "steps " << summary.steps_done << "  initial mse " << pipeline::initial_mse(summary.log, window)
            << "  final mse " << pipeline::final_mse(summary.log, window) << "\n"
            << "checkpoint " << summary.checkpoint << "\nlog " << summary.log_path << "\n";
  return 0;
}

int cmd_generate(const RunConfig& cfg, pipeline::GenerateRequest req, const std::string& replay_path) {
  if (!replay_path.empty()) {
    if (req.out_dir.empty()) throw pipeline::PipelineError("--out is required");
    const auto r = pipeline::replay(replay_path, req.out_dir);
    std::cout << "replayed " << r.frame_paths.size() << " frames into " << req.out_dir << "\n";
    return 0;
  }
  if (req.reference_image.empty() || req.audio.empty() || req.emotion.empty() || req.out_dir.empty()) {
    throw pipeline::PipelineError("generate needs --reference, --audio, --emotion and --out (or --replay)");
  }
  const auto model = pipeline::Model::load(cfg, cfg.paths.checkpoint);
  pipeline::PromptService prompts(cfg);
  const auto r = pipeline::generate(cfg, *model, prompts, req);
  std::cout << "wrote " << r.frame_paths.size() << " frames and " << r.metadata_path << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& generated, const std::string& reference,
                 std::string out, bool probe) {
  auto report = pipeline::evaluate(generated, reference);
  if (probe) {
    const auto model = pipeline::Model::load(cfg, cfg.paths.checkpoint);
    pipeline::PromptService prompts(cfg);
    const auto clips = pipeline::load_clips(cfg, prompts);
    const auto& clip = clips.front();
    const int frames = clip.frames.dim(0);
    const auto happy = pipeline::stage_texts(prompts.run({"", "happy", 3}), cfg.guidance.k);
    const auto sad = pipeline::stage_texts(prompts.run({"", "sad", 3}), cfg.guidance.k);
    report.conditioning_sensitivity = pipeline::conditioning_sensitivity(
        *model, clip.reference, clip.wave, frames, happy, sad, cfg.seed);
    const Tensor a = pipeline::sample_video(*model, clip.reference, clip.wave, frames, happy, cfg.seed);
    const Tensor b = pipeline::sample_video(*model, clip.reference, clip.wave, frames, happy, cfg.seed);
    report.deterministic = a.values() == b.values();
  }
  report.print_table(std::cout);
  if (out.empty()) out = (fs::path(cfg.paths.output_dir) / "report.json").string();
  if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream(out) << report.to_json().dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  CLI::App app{"Emotional talking-head generation with coarse-to-fine text guidance"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--override", g.overrides, "Dotted key=value override (repeatable)");
  app.add_option("--facs", g.facs, "FACS knowledge file")->check(CLI::ExistingFile);

  auto* ds = app.add_subcommand("dataset", "Generate the synthetic sprite-face dataset");
  std::string ds_out;
  ds->add_option("--out", ds_out, "Output directory (default: the manifest's directory)");

  auto* pr = app.add_subcommand("prompt", "Run CoT-FA and print or save the prompt bundle");
  std::string pr_image, pr_emotion, pr_out;
  int pr_intensity = 2;
  pr->add_option("--image", pr_image, "Reference image");
  pr->add_option("--emotion", pr_emotion, "Emotion label")->required();
  pr->add_option("--intensity", pr_intensity, "1 mild, 2 moderate, 3 intense")->check(CLI::Range(1, 3));
  pr->add_option("--out", pr_out, "Bundle file to write");

  auto* tr = app.add_subcommand("train", "Two-phase training");
  bool tr_resume = false;
  int tr_stop = -1;
  tr->add_flag("--resume", tr_resume, "Continue from the configured checkpoint");
  tr->add_option("--stop-after", tr_stop, "Stop after this many total steps");

  auto* gen = app.add_subcommand("generate", "Generate frames for a reference image and audio");
  pipeline::GenerateRequest req;
  std::string replay_path;
  gen->add_option("--reference", req.reference_image, "Reference image (PNG)");
  gen->add_option("--audio", req.audio, "Driving audio (mono WAV)");
  gen->add_option("--emotion", req.emotion, "Emotion label");
  gen->add_option("--intensity", req.intensity, "1 mild, 2 moderate, 3 intense")->check(CLI::Range(1, 3));
  gen->add_option("--frames", req.frames, "Frame count (default: audio length)");
  gen->add_option("--bundle", req.bundle_path, "Use this prompt bundle instead of running CoT-FA");
  gen->add_option("--out", req.out_dir, "Output directory");
  gen->add_option("--replay", replay_path, "Regenerate from a generation.json record");

  auto* ev = app.add_subcommand("evaluate", "PSNR/SSIM of generated clips against ground truth");
  std::string ev_gen, ev_ref, ev_out;
  bool ev_probe = false;
  ev->add_option("--generated", ev_gen, "Directory of generated clips")->required();
  ev->add_option("--reference", ev_ref, "Directory of ground-truth clips")->required();
  ev->add_option("--out", ev_out, "Report path (default: <output_dir>/report.json)");
  ev->add_flag("--probe", ev_probe, "Also measure conditioning sensitivity and determinism");

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig cfg = resolve_config(g);
    if (ds->parsed()) return cmd_dataset(cfg, ds_out);
    if (pr->parsed()) return cmd_prompt(cfg, pr_image, pr_emotion, pr_intensity, pr_out);
    if (tr->parsed()) return cmd_train(cfg, tr_resume, tr_stop);
    if (gen->parsed()) return cmd_generate(cfg, req, replay_path);
    if (ev->parsed()) return cmd_evaluate(cfg, ev_gen, ev_ref, ev_out, ev_probe);
  } catch (const llm::LlmError& e) {
    std::cerr << "error (llm): " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
