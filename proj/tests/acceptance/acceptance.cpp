// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures. Tolerances and time limits are pinned below.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "tbd/cot.hpp"
#include "tbd/dataset.hpp"
#include "tbd/diffusion.hpp"
#include "tbd/guidance.hpp"
#include "tbd/metrics.hpp"
#include "tbd/network.hpp"
#include "tbd/ops.hpp"
#include "tbd/pipeline.hpp"

using namespace tbd;
namespace fs = std::filesystem;

namespace {

constexpr double kAlphaTol = 1e-12;
constexpr double kBlendTol = 1e-12;
constexpr double kAttentionTol = 1e-10;
constexpr double kGradTol = 1e-4;
constexpr int kGradWeights = 64;
constexpr int kGradOutProjWeights = 16;
constexpr double kGradStep = 1e-6;
constexpr double kGradFloor = 1e-6;
constexpr double kSamplerTol = 1e-5;
constexpr double kLossRatio = 0.1;
// First green desk run: mse 0.2901 -> 0.01491. Later runs may not regress
// past 1.5x this ratio.
constexpr double kLossRatioBaseline = 0.0514;
constexpr double kLossRegression = 1.5;
constexpr int kLossWindow = 50;
constexpr double kSensitivityThreshold = 0.01;
constexpr double kPsnrHalfRangeTol = 1e-6;
constexpr double kSsimTol = 1e-10;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failed checks for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 4) failures_.push_back(what);
    ok_ = ok_ && ok;
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
  Outcome outcome() const {
    Outcome o;
    o.pass = ok_;
    o.detail = notes_;
    for (const auto& f : failures_) o.detail += (o.detail.empty() ? "failed: " : "; failed: ") + f;
    return o;
  }

 private:
  bool ok_ = true;
  std::vector<std::string> failures_;
  std::string notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

NoisePredictorConfig grad_config() {
  NoisePredictorConfig c;
  c.levels = 2;
  c.channels = {8, 16};
  c.d_k = 4;
  c.heads = 2;
  c.frames = 2;
  c.text_dim = 6;
  c.audio_dim = 5;
  c.groupnorm_groups = 4;
  c.latent_size = 8;
  c.time_dim = 8;
  return c;
}

NetworkConditioning random_conditioning(const NoisePredictorConfig& c, int frames, Rng& rng) {
  NetworkConditioning cond;
  cond.text = random_tensor({5, c.text_dim}, rng);
  cond.audio = random_tensor({frames, 3, c.audio_dim}, rng);
  for (int l = 0; l < c.levels; ++l) {
    cond.reference.push_back(random_tensor({c.channels[l], c.level_size(l), c.level_size(l)}, rng));
  }
  return cond;
}

// Moves every weight off its initial value so attention paths carry gradient.
void perturb(nn::ParameterStore& store, Rng& rng, double scale) {
  for (const auto& [name, p] : store.items()) {
    Tensor t = p;
    for (double& v : t.mutable_data()) v += scale * rng.normal();
  }
}

// ---------------------------------------------------------------- 1-4

Outcome alpha_exactness() {
  Checks c;
  using guidance::AlphaParams;
  const std::array<AlphaParams, 3> cases{AlphaParams{0.0, 16.0, 1.0, 0.5},
                                         AlphaParams{16.0, 40.0, 1.0, 0.5},
                                         AlphaParams{3.0, 29.0, 0.9, 0.2}};
  double worst = 0.0;
  for (const auto& p : cases) {
    worst = std::max(worst, std::abs(guidance::calculate_alpha(p.t_start, p) - p.alpha_max));
    worst = std::max(worst, std::abs(guidance::calculate_alpha(p.t_end, p) - p.alpha_min));
    double prev = guidance::calculate_alpha(p.t_start, p);
    bool monotone = true;
    for (int i = 1; i < 1000; ++i) {
      const double a = guidance::calculate_alpha(p.t_start + (p.t_end - p.t_start) * i / 999.0, p);
      monotone = monotone && a <= prev;
      prev = a;
    }
    c.expect(monotone, "sweep not monotone for t_start " + fmt(p.t_start));
  }
  c.expect(worst <= kAlphaTol, "endpoint error " + fmt(worst));
  c.note("endpoint error " + fmt(worst) + " over 3 parameter sets, 1000-point sweeps");
  return c.outcome();
}

Outcome blend_fidelity() {
  Checks c;
  const double t_end = 16.0, total = 40.0;
  double worst = 0.0;
  for (int i = 0; i < 4000; ++i) {
    const auto w = guidance::blend_weights(i * total / 4000.0, t_end, total);
    worst = std::max(worst, std::abs(w.first + w.second - 1.0));
  }
  c.expect(worst <= kBlendTol, "weight sum error " + fmt(worst));
  const Tensor e1 = Tensor::from({2, 2}, {1.0, -2.0, 0.25, 8.0});
  const Tensor e2 = Tensor::from({2, 2}, {-3.0, 5.0, 7.5, 0.125});
  c.expect(bytes_equal(guidance::adjust_text_embedding(0.0, e1, e2, t_end, total), e1), "t=0 is not e_s1");
  c.expect(bytes_equal(guidance::adjust_text_embedding(t_end, e1, e2, t_end, total), e2), "t=t_end is not e_s2");
  const Tensor m = guidance::adjust_text_embedding(28.0, e1, e2, t_end, total);
  bool mix = true;
  for (std::size_t i = 0; i < 4; ++i) mix = mix && m[i] == 0.75 * e2[i] + 0.25 * e1[i];
  c.expect(mix, "t=28 is not 0.75 e_s2 + 0.25 e_s1");
  c.note("sum error " + fmt(worst) + " over 4000 t; endpoints and t=28 compared exactly");
  return c.outcome();
}

Outcome schedule_partitioning() {
  Checks c;
  const int total = 40;
  std::string allocs;
  for (int k = 1; k <= 4; ++k) {
    std::vector<double> ratios(static_cast<std::size_t>(k), 1.0 / k);
    if (k == 2) ratios = {0.4, 0.6};
    std::vector<Tensor> emb(static_cast<std::size_t>(k), Tensor::zeros({1, 1}));
    const auto s = guidance::build_schedule(k, total, ratios, emb);
    int sum = 0;
    for (int a : s.allocations) sum += a;
    c.expect(sum == total, "k=" + std::to_string(k) + " sums to " + std::to_string(sum));
    // Each step belongs to exactly one stage and stages are contiguous, in order.
    int expected_stage = 0, run = 0;
    bool partition = true;
    for (int step = 0; step < total; ++step) {
      while (expected_stage < k && run == s.allocations[static_cast<std::size_t>(expected_stage)]) {
        ++expected_stage;
        run = 0;
      }
      partition = partition && s.stage_of(step) == expected_stage &&
                  s.stage_start(expected_stage) == step - run;
      ++run;
    }
    c.expect(partition, "k=" + std::to_string(k) + " stages do not partition [0,40)");
    allocs += (allocs.empty() ? "" : " ") + nlohmann::json(s.allocations).dump();
    if (k == 2) c.expect(s.allocations.front() == 16, "k=2 s1 = " + std::to_string(s.allocations.front()));
  }
  c.note("allocations " + allocs);
  return c.outcome();
}

AttentionLayerWeights identity_projections(int d) {
  std::vector<double> eye(static_cast<std::size_t>(d * d), 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<std::size_t>(i * d + i)] = 1.0;
  AttentionLayerWeights w;
  w.to_q.weight = Tensor::from({d, d}, eye);
  w.to_k.weight = Tensor::from({d, d}, eye);
  w.to_v.weight = Tensor::from({d, d}, eye);
  w.to_out.weight = Tensor::from({d, d}, eye);
  w.heads = 1;
  return w;
}

Outcome attention_oracle() {
  Checks c;
  // Q = K = I (d = 2), V rows [1 2] and [3 4]: each query puts weight
  // p = sigmoid(1/sqrt(2)) on its own key.
  auto w = identity_projections(2);
  w.to_v.weight = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor eye = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
  const Tensor out = cross_attention(eye, eye, w);
  const double p = 1.0 / (1.0 + std::exp(-1.0 / std::sqrt(2.0)));
  const double expected[4] = {p * 1 + (1 - p) * 3, p * 2 + (1 - p) * 4, (1 - p) * 1 + p * 3,
                              (1 - p) * 2 + p * 4};
  double err = 0.0;
  for (int i = 0; i < 4; ++i) err = std::max(err, std::abs(out[i] - expected[i]));
  c.expect(err <= kAttentionTol, "2x2 error " + fmt(err));

  Rng rng(41);
  nn::ParameterStore store;
  auto single = AttentionLayerWeights::make(store, "single", 8, 5, 8, 2, rng);
  single.to_out = identity_projections(8).to_out;
  const Tensor q = random_tensor({2, 4, 8}, rng);
  const Tensor key = random_tensor({1, 1, 5}, rng);
  const Tensor got = cross_attention(q, key, single);
  const Tensor v = single.to_v(key);
  bool exact = true;
  for (std::size_t i = 0; i < got.size(); ++i) exact = exact && got[i] == v[i % 8];
  c.expect(exact, "single key does not return its value exactly");

  const auto wp = AttentionLayerWeights::make(store, "perm", 4, 4, 8, 2, rng);
  const Tensor q2 = random_tensor({1, 3, 4}, rng);
  const Tensor ctx = random_tensor({1, 4, 4}, rng);
  const std::array<std::array<int, 4>, 3> perms{{{1, 0, 3, 2}, {3, 2, 1, 0}, {2, 0, 3, 1}}};
  const Tensor base = cross_attention(q2, ctx, wp);
  for (const auto& perm : perms) {
    std::vector<Tensor> rows;
    for (int r : perm) rows.push_back(ops::slice(ctx, 1, r, 1));
    c.expect(bytes_equal(cross_attention(q2, ops::concat(rows, 1), wp), base),
             "context permutation changed the output");
  }
  c.note("2x2 error " + fmt(err) + "; single key and 3 context permutations compared bitwise");
  return c.outcome();
}

// ---------------------------------------------------------------- 5-8

Outcome identity_at_init() {
  Checks c;
  const NoisePredictorConfig cfg;
  Rng rng(51);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  int layers = 0;
  auto check_block = [&](const AttentionBlock& b, int level, const std::string& where) {
    const int ch = cfg.channels[static_cast<std::size_t>(level)];
    const int s = cfg.level_size(level);
    const Tensor x = random_tensor({cfg.frames, ch, s, s}, rng);
    c.expect(bytes_equal(b.reference(x, random_tensor({ch, s, s}, rng)), x), where + " reference");
    c.expect(bytes_equal(b.text(x, random_tensor({1, 7, cfg.text_dim}, rng)), x), where + " text");
    c.expect(bytes_equal(b.audio(x, random_tensor({cfg.frames, 4, cfg.audio_dim}, rng)), x), where + " audio");
    c.expect(bytes_equal(b.temporal(x), x), where + " temporal");
    layers += 4;
  };
  for (std::size_t l = 0; l < net.down_attention().size(); ++l) {
    check_block(net.down_attention()[l], static_cast<int>(l), "down" + std::to_string(l));
  }
  for (std::size_t l = 0; l < net.up_attention().size(); ++l) {
    check_block(net.up_attention()[l], static_cast<int>(l), "up" + std::to_string(l));
  }
  const Tensor z = random_tensor({cfg.frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, rng);
  const auto cond = random_conditioning(cfg, cfg.frames, rng);
  c.expect(bytes_equal(net.forward(z, 517, cond), net.forward(z, 517, cond, true)),
           "predictor differs from its spine");
  c.note(std::to_string(layers) + " layers and the full predictor compared bitwise");
  return c.outcome();
}

Outcome gradient_check() {
  Checks c;
  const auto cfg = grad_config();
  Rng rng(61);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  perturb(store, rng, 0.1);
  const auto cond = random_conditioning(cfg, cfg.frames, rng);
  diffusion::TrainingSample smp;
  smp.z0 = random_tensor({cfg.frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, rng, 0.5);
  smp.text.coarse = random_tensor({5, cfg.text_dim}, rng);
  smp.text.fine = random_tensor({5, cfg.text_dim}, rng);
  const Tensor eps = random_tensor(smp.z0.shape(), rng);
  const diffusion::NoisePredictorFn pred = [&](const Tensor& zt, int t, const Tensor& text) {
    NetworkConditioning k = cond;
    k.text = text;
    return net.forward(zt, t, k);
  };
  const diffusion::NoiseSchedule schedule;
  const int t = 400;
  auto loss = [&] { return diffusion::sample_loss(smp, t, eps, pred, schedule, {}); };

  store.zero_grad();
  loss().backward();

  // Output projections of the attention layers first, then any weight.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  const auto& items = store.items();
  std::vector<std::size_t> out_proj;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first.find("to_out") != std::string::npos) out_proj.push_back(i);
  }
  Rng pick(62);
  while (static_cast<int>(picks.size()) < kGradWeights) {
    const bool from_out = static_cast<int>(picks.size()) < kGradOutProjWeights;
    const std::size_t p = from_out ? out_proj[static_cast<std::size_t>(pick.uniform_int(static_cast<int>(out_proj.size())))]
                                   : static_cast<std::size_t>(pick.uniform_int(static_cast<int>(items.size())));
    const std::size_t e = static_cast<std::size_t>(pick.uniform_int(static_cast<int>(items[p].second.size())));
    if (seen.insert({p, e}).second) picks.emplace_back(p, e);
  }
  double worst = 0.0;
  for (const auto& [p, e] : picks) {
    Tensor w = items[p].second;
    const double analytic = w.grad()[e];
    const double orig = w[e];
    w.mutable_data()[e] = orig + kGradStep;
    const double up = loss().item();
    w.mutable_data()[e] = orig - kGradStep;
    const double down = loss().item();
    w.mutable_data()[e] = orig;
    const double numeric = (up - down) / (2.0 * kGradStep);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  c.expect(worst <= kGradTol, "worst relative error " + fmt(worst));
  c.note(std::to_string(picks.size()) + " weights (" + std::to_string(kGradOutProjWeights) +
         " in attention output projections), worst relative error " + fmt(worst, 3));
  return c.outcome();
}

Outcome sampler_identity() {
  Checks c;
  const diffusion::NoiseSchedule schedule;
  Rng rng(71);
  // Latents live in [-1, 1].
  std::vector<double> v(2 * 3 * 8 * 8);
  for (double& x : v) x = 1.9 * rng.uniform() - 0.95;
  const Tensor z0 = Tensor::from({2, 3, 8, 8}, std::move(v));
  const Tensor noise = random_tensor(z0.shape(), rng);
  const diffusion::NoisePredictorFn oracle = [&](const Tensor& zt, int t, const Tensor&) {
    const double ab = schedule.alpha_bar(t);
    return ops::scale(ops::sub(zt, ops::scale(z0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
  };
  const std::array<double, 1> r{1.0};
  double worst = 0.0;
  for (int steps : {10, 40, 100}) {
    const auto g = guidance::build_schedule(1, steps, r, {Tensor::zeros({1, 1})});
    const diffusion::SamplerSpec spec{diffusion::SamplerKind::kDeterministic, steps};
    const Tensor a = diffusion::sample(noise, oracle, g, spec, schedule, 5);
    const Tensor b = diffusion::sample(noise, oracle, g, spec, schedule, 5);
    worst = std::max(worst, max_abs_diff(a, z0));
    c.expect(bytes_equal(a, b), "rerun differs at " + std::to_string(steps) + " steps");
  }
  c.expect(worst <= kSamplerTol, "recovery error " + fmt(worst));
  c.note("recovery error " + fmt(worst) + " at 10/40/100 steps; reruns compared bitwise");
  return c.outcome();
}

Outcome guidance_degeneracy() {
  Checks c;
  const auto cfg = grad_config();
  Rng rng(81);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  perturb(store, rng, 0.05);
  const auto cond = random_conditioning(cfg, cfg.frames, rng);
  const diffusion::NoisePredictorFn pred = [&](const Tensor& zt, int t, const Tensor& text) {
    NetworkConditioning k = cond;
    k.text = text;
    return net.forward(zt, t, k);
  };
  const diffusion::NoiseSchedule schedule;
  const Tensor noise = random_tensor({cfg.frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size}, rng);
  const Tensor e = random_tensor({5, cfg.text_dim}, rng);
  const int steps = 40;
  auto run = [&](int k, const std::vector<Tensor>& emb) {
    std::vector<double> ratios(static_cast<std::size_t>(k), 1.0 / k);
    if (k == 2) ratios = {0.4, 0.6};
    const auto g = guidance::build_schedule(k, steps, ratios, emb);
    return diffusion::sample(noise, pred, g, {diffusion::SamplerKind::kDeterministic, steps}, schedule, 9);
  };
  const Tensor one = run(1, {e});
  for (int k : {2, 4}) {
    c.expect(bytes_equal(run(k, std::vector<Tensor>(static_cast<std::size_t>(k), e)), one),
             "k=" + std::to_string(k) + " differs from k=1");
  }
  // The text path is live, so the equality above is not vacuous.
  const double moved = max_abs_diff(run(2, {e, random_tensor(e.shape(), rng)}), one);
  c.expect(moved > 0.0, "a different fine embedding did not change the output");
  c.note("k=1,2,4 compared bitwise; distinct embeddings move the output by " + fmt(moved, 3));
  return c.outcome();
}

// ---------------------------------------------------------------- 9

Outcome cot_rules() {
  Checks c;
  const auto b = cot::run_cot({"", "happy", 2});
  for (const char* phrase : {"cheek raiser", "lip corner puller", "zygomaticus major"}) {
    c.expect(b.fine_text.find(phrase) != std::string::npos, std::string("missing \"") + phrase + "\"");
  }
  int valid = 0;
  for (const auto& e : facs::emotion_labels()) {
    for (int i = 1; i <= 3; ++i) {
      const auto x = cot::run_cot({"", e, i});
      const auto report = cot::validate_bundle(x);
      c.expect(report.ok(), e + "/" + std::to_string(i) + ": " + report.summary());
      valid += report.ok();
      c.expect(nlohmann::json(x).dump() == nlohmann::json(cot::run_cot({"", e, i})).dump(),
               e + "/" + std::to_string(i) + " not byte-identical");
    }
  }
  c.note(std::to_string(valid) + "/24 bundles valid, reruns compared bytewise");
  return c.outcome();
}

// ---------------------------------------------------------------- 10-11

struct Desk {
  RunConfig cfg;
  bool trained = false;
};

RunConfig desk_config(const fs::path& root) {
  RunConfig cfg;
  cfg.paths.dataset_manifest = (root / "dataset" / "manifest.jsonl").string();
  cfg.paths.output_dir = (root / "run").string();
  cfg.paths.checkpoint = (root / "run" / "model.ckpt").string();
  cfg.validate();
  return cfg;
}

Outcome overfit(Desk& desk, bool verbose) {
  Checks c;
  const RunConfig& cfg = desk.cfg;
  dataset::SyntheticSpec spec;
  spec.clips = cfg.dataset.clips;
  spec.frames = cfg.dataset.frames_per_clip;
  spec.image_size = cfg.dataset.image_size;
  spec.sample_rate = cfg.audio.sample_rate;
  spec.fps = cfg.audio.fps;
  dataset::generate_synthetic_dataset(fs::path(cfg.paths.dataset_manifest).parent_path().string(), spec, cfg.seed);
  pipeline::PromptService prompts(cfg);
  pipeline::TrainOptions opts;
  if (verbose) opts.progress = &std::cerr;
  const auto summary = pipeline::train(cfg, prompts, opts);
  desk.trained = true;
  const double first = pipeline::initial_mse(summary.log, kLossWindow);
  const double last = pipeline::final_mse(summary.log, kLossWindow);
  const double ratio = last / first;
  c.expect(summary.steps_done == cfg.training.phase1_steps + cfg.training.phase2_steps, "incomplete run");
  c.expect(ratio < kLossRatio, "final/initial = " + fmt(ratio));
  c.expect(ratio <= kLossRatioBaseline * kLossRegression,
           "regressed past " + fmt(kLossRegression) + "x the pinned baseline " + fmt(kLossRatioBaseline));
  c.note(std::to_string(cfg.dataset.clips) + " clips, " + std::to_string(cfg.training.phase1_steps) + "+" +
         std::to_string(cfg.training.phase2_steps) + " steps, mse " + fmt(first) + " -> " + fmt(last) +
         " (ratio " + fmt(ratio, 3) + ", bound " + fmt(kLossRatio) + ", baseline " + fmt(kLossRatioBaseline) + ")");
  return c.outcome();
}

Outcome sensitivity(const Desk& desk, std::string* extra) {
  Checks c;
  const RunConfig& cfg = desk.cfg;
  c.expect(desk.trained, "no trained model (run criterion 10 first)");
  if (!desk.trained) return c.outcome();
  const auto model = pipeline::Model::load(cfg, cfg.paths.checkpoint);
  const auto entries = dataset::read_manifest(cfg.paths.dataset_manifest, cfg.dataset.frames_per_clip);
  const auto& clip = entries.front();
  const std::string ref_path =
      (fs::path(clip.frames_path) / dataset::frame_filename(clip.reference_frame_index)).string();
  const Tensor ref = pipeline::load_reference_latent(cfg, ref_path);
  const auto wave = pipeline::load_wave(cfg, clip.audio_path);
  const int frames = cfg.network.frames;
  const auto happy = pipeline::stage_texts(cot::run_cot({"", "happy", 3}), cfg.guidance.k);
  const auto sad = pipeline::stage_texts(cot::run_cot({"", "sad", 3}), cfg.guidance.k);
  const double diff = pipeline::conditioning_sensitivity(*model, ref, wave, frames, happy, sad, cfg.seed);
  const double same = pipeline::conditioning_sensitivity(*model, ref, wave, frames, happy, happy, cfg.seed);
  c.expect(diff > kSensitivityThreshold, "happy vs sad " + fmt(diff));
  c.expect(same == 0.0, "identical bundles " + fmt(same));
  c.note("happy vs sad " + fmt(diff) + " (threshold " + fmt(kSensitivityThreshold) + "), identical " + fmt(same));

  if (extra) {
    // Reconstruction of the clip's own frames, trained against untrained weights.
    const auto texts = pipeline::stage_texts(cot::run_cot({"", clip.emotion, clip.intensity}), cfg.guidance.k);
    const pipeline::Model fresh(cfg);
    double psnr_trained = 0.0, psnr_fresh = 0.0;
    const auto a = pipeline::decode_frames(cfg, pipeline::sample_video(*model, ref, wave, frames, texts, cfg.seed));
    const auto b = pipeline::decode_frames(cfg, pipeline::sample_video(fresh, ref, wave, frames, texts, cfg.seed));
    auto to_tensor = [](const io::Image& img) {
      std::vector<double> v(img.pixels.begin(), img.pixels.end());
      for (double& x : v) x /= 255.0;
      const int n = static_cast<int>(v.size());
      return Tensor::from({n}, std::move(v));
    };
    for (int f = 0; f < frames; ++f) {
      const auto truth = to_tensor(io::read_png((fs::path(clip.frames_path) / dataset::frame_filename(f)).string()));
      psnr_trained += metrics::psnr(to_tensor(a[static_cast<std::size_t>(f)]), truth, 1.0) / frames;
      psnr_fresh += metrics::psnr(to_tensor(b[static_cast<std::size_t>(f)]), truth, 1.0) / frames;
    }
    *extra = std::string(psnr_trained > psnr_fresh ? "PASS" : "FAIL") + " [extra] trained model reconstructs " +
             clip.clip_id + " better than untrained: PSNR " + fmt(psnr_trained) + " dB vs " + fmt(psnr_fresh) + " dB";
  }
  return c.outcome();
}

// ---------------------------------------------------------------- 12

double ssim_window(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const double mx = sx / n, my = sy / n;
  const double vx = sxx / n - mx * mx, vy = syy / n - my * my, cxy = sxy / n - mx * my;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

Outcome metric_oracles() {
  Checks c;
  const Tensor zeros = Tensor::zeros({3, 8, 8});
  const Tensor ones = Tensor::full({3, 8, 8}, 1.0);
  const Tensor half = Tensor::full({3, 8, 8}, 0.5);
  Rng rng(121);
  std::vector<double> u(192);
  for (double& x : u) x = rng.uniform();
  const Tensor img = Tensor::from({3, 8, 8}, u);
  c.expect(metrics::psnr(img, img, 1.0) == 99.0, "identical PSNR is not the cap");
  const double zero_db = metrics::psnr(zeros, ones, 1.0);
  c.expect(std::abs(zero_db) <= kPsnrHalfRangeTol, "extreme case " + fmt(zero_db));
  const double half_db = metrics::psnr(zeros, half, 1.0);
  c.expect(std::abs(half_db - 20.0 * std::log10(2.0)) <= kPsnrHalfRangeTol, "half range " + fmt(half_db, 10));
  c.expect(metrics::ssim(img, img) == 1.0, "identical SSIM is not 1");

  std::vector<double> x(64), y(64);
  for (int i = 0; i < 64; ++i) {
    x[static_cast<std::size_t>(i)] = i / 63.0;
    y[static_cast<std::size_t>(i)] = ((i * 37) % 64) / 63.0;
  }
  double expected = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      std::vector<double> wx, wy;
      for (int r = 0; r < 7; ++r) {
        for (int s = 0; s < 7; ++s) {
          wx.push_back(x[static_cast<std::size_t>((i + r) * 8 + j + s)]);
          wy.push_back(y[static_cast<std::size_t>((i + r) * 8 + j + s)]);
        }
      }
      expected += ssim_window(wx, wy) / 4.0;
    }
  }
  const double got = metrics::ssim(Tensor::from({8, 8}, x), Tensor::from({8, 8}, y));
  c.expect(std::abs(got - expected) <= kSsimTol, "8x8 SSIM " + fmt(got, 12) + " vs " + fmt(expected, 12));
  c.note("PSNR cap 99, " + fmt(zero_db, 3) + " dB, " + fmt(half_db, 8) + " dB; 8x8 SSIM error " +
         fmt(std::abs(got - expected), 3));
  return c.outcome();
}

struct Criterion {
  int id;
  std::string name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string workdir;
  bool keep = false, verbose = false;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--workdir", workdir, "Directory for the training run (default: a fresh temp dir)");
  app.add_flag("--keep", keep, "Keep the working directory");
  app.add_flag("--verbose", verbose, "Print training progress to stderr");
  CLI11_PARSE(app, argc, argv);

  pipeline::tune_allocator();
  const bool temp = workdir.empty();
  const fs::path root = temp ? fs::temp_directory_path() / ("tbd_acceptance_" + std::to_string(::getpid()))
                             : fs::path(workdir);
  const bool train_now = only.empty() || std::find(only.begin(), only.end(), 10) != only.end();
  if (train_now) fs::remove_all(root / "run");
  fs::create_directories(root);
  Desk desk{desk_config(root)};
  // Without criterion 10 in this run, 11 reuses a model left in --workdir.
  desk.trained = !train_now && fs::exists(desk.cfg.paths.checkpoint);
  std::string extra;

  const std::vector<Criterion> criteria{
      {1, "alpha schedule endpoints and monotonicity", 1, alpha_exactness},
      {2, "two-stage embedding blend", 1, blend_fidelity},
      {3, "stage allocation partitions the steps", 1, schedule_partitioning},
      {4, "cross-attention oracles", 1, attention_oracle},
      {5, "attention layers are the identity at init", 5, identity_at_init},
      {6, "loss gradients vs finite differences", 120, gradient_check},
      {7, "deterministic sampler with an oracle predictor", 10, sampler_identity},
      {8, "equal stage embeddings make k irrelevant", 30, guidance_degeneracy},
      {9, "rules CoT-FA bundles", 5, cot_rules},
      {10, "two-phase overfit on the desk config", 20 * 60, [&] { return overfit(desk, verbose); }},
      {11, "emotion text changes the trained model's output", 120,
       [&] { return sensitivity(desk, &extra); }},
      {12, "PSNR and SSIM oracles", 1, metric_oracles},
  };

  int failures = 0, ran = 0;
  for (const auto& cr : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), cr.id) == only.end()) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > cr.limit_s) {
      o.pass = false;
      o.detail += "; took longer than " + fmt(cr.limit_s) + " s";
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << std::setw(2) << cr.id << "] " << cr.name << " ("
              << std::fixed << std::setprecision(2) << secs << " s) " << std::defaultfloat << o.detail
              << std::endl;
  }
  if (!extra.empty()) std::cout << extra << std::endl;
  std::cout << (ran - failures) << "/" << ran << " criteria passed" << std::endl;
  if (temp && !keep) fs::remove_all(root);
  return failures;
}
