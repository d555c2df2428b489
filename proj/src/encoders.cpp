#include "tbd/encoders.hpp"

#include <cctype>
#include <cmath>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "tbd/ops.hpp"

namespace tbd::encoders {

std::vector<double> sinusoidal_positions(int count, int dim) {
  std::vector<double> p(static_cast<std::size_t>(count) * dim);
  for (int i = 0; i < count; ++i) {
    const auto e = timestep_embedding(i, dim);
    std::copy(e.begin(), e.end(), p.begin() + static_cast<std::ptrdiff_t>(i) * dim);
  }
  return p;
}

TextEncoder::TextEncoder(nn::ParameterStore& store, const TextEncoderConfig& cfg, Rng& rng,
                         const std::string& prefix)
    : cfg_(cfg) {
  if (cfg_.vocab < 2 || cfg_.dim < 2 || cfg_.dim % 2 != 0 || cfg_.max_tokens < 1) {
    throw EncoderError("invalid text encoder configuration");
  }
  table_ = store.create(prefix + ".embedding", {cfg_.vocab, cfg_.dim}, nn::Init::kNormal, rng, 1);
  positions_ = sinusoidal_positions(cfg_.max_tokens, cfg_.dim);
}

std::vector<int> TextEncoder::tokenize(const std::string& text, int vocab) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    std::uint32_t h = 2166136261u;
    for (unsigned char c : word) {
      h ^= c;
      h *= 16777619u;
    }
    ids.push_back(static_cast<int>(h % static_cast<std::uint32_t>(vocab - 1)) + 1);
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      word += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return ids;
}

Tensor TextEncoder::encode(const std::string& text) const {
  std::vector<int> ids = tokenize(text, cfg_.vocab);
  if (ids.empty()) throw EncoderError("cannot encode empty text");
  ids.resize(static_cast<std::size_t>(cfg_.max_tokens), 0);
  return ops::add(ops::embedding(table_, ids),
                  Tensor::from({cfg_.max_tokens, cfg_.dim}, positions_));
}

std::vector<std::vector<double>> mel_filterbank(int bands, int n, int sample_rate) {
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const int bins = n / 2 + 1;
  const double top = mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(bands) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = hz(top * i / (bands + 1));
  std::vector<std::vector<double>> w(static_cast<std::size_t>(bands),
                                     std::vector<double>(static_cast<std::size_t>(bins), 0.0));
  for (int b = 0; b < bands; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n;
      if (f > lo && f < mid) w[b][k] = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) w[b][k] = (hi - f) / (hi - mid);
    }
  }
  return w;
}

namespace {

// FFTW planning is not thread-safe; execution with fresh arrays is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffers {
  double* in;
  fftw_complex* out;
  explicit FftwBuffers(int n)
      : in(fftw_alloc_real(static_cast<std::size_t>(n))),
        out(fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1))) {}
  ~FftwBuffers() {
    fftw_free(in);
    fftw_free(out);
  }
  FftwBuffers(const FftwBuffers&) = delete;
  FftwBuffers& operator=(const FftwBuffers&) = delete;
};

}  // namespace

struct AudioEncoder::Fft {
  int n = 0;
  fftw_plan plan = nullptr;

  explicit Fft(int size) : n(size) {
    FftwBuffers probe(n);
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, probe.in, probe.out, FFTW_ESTIMATE);
  }
  ~Fft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
};

AudioEncoder::AudioEncoder(nn::ParameterStore& store, const AudioEncoderConfig& cfg, Rng& rng,
                           const std::string& prefix)
    : cfg_(cfg) {
  if (cfg_.fps <= 0 || cfg_.sample_rate % cfg_.fps != 0 || cfg_.tokens_per_frame < 1 ||
      cfg_.samples_per_frame() % cfg_.tokens_per_frame != 0 || cfg_.window() < 4 ||
      cfg_.bands < 1 || cfg_.dim % 2 != 0) {
    throw EncoderError("invalid audio encoder configuration");
  }
  proj_ = nn::Linear::make(store, prefix + ".proj", cfg_.bands, cfg_.dim, rng);
  positions_ = sinusoidal_positions(cfg_.tokens_per_frame, cfg_.dim);
  filters_ = mel_filterbank(cfg_.bands, cfg_.window(), cfg_.sample_rate);
  fft_ = std::make_unique<Fft>(cfg_.window());
}

AudioEncoder::~AudioEncoder() = default;
AudioEncoder::AudioEncoder(AudioEncoder&&) noexcept = default;
AudioEncoder& AudioEncoder::operator=(AudioEncoder&&) noexcept = default;

std::vector<double> AudioEncoder::band_features(const std::vector<double>& wave, int frames) const {
  if (frames < 1) throw EncoderError("frame count must be >= 1");
  if (static_cast<int>(wave.size()) < frames) {
    throw EncoderError("waveform of " + std::to_string(wave.size()) + " samples is too short for " +
                       std::to_string(frames) + " frames");
  }
  const int n = cfg_.window();
  const int bins = n / 2 + 1;
  std::vector<double> hann(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);

  std::vector<double> feats(static_cast<std::size_t>(frames) * cfg_.tokens_per_frame * cfg_.bands);
  std::vector<double> power(static_cast<std::size_t>(bins));
  FftwBuffers buf(n);
  std::size_t o = 0;
  for (int f = 0; f < frames; ++f) {
    for (int a = 0; a < cfg_.tokens_per_frame; ++a) {
      const std::size_t start = static_cast<std::size_t>(f) * cfg_.samples_per_frame() +
                                static_cast<std::size_t>(a) * n;
      for (int i = 0; i < n; ++i) {
        const std::size_t s = start + static_cast<std::size_t>(i);
        buf.in[i] = s < wave.size() ? wave[s] * hann[i] : 0.0;
      }
      fftw_execute_dft_r2c(fft_->plan, buf.in, buf.out);
      for (int k = 0; k < bins; ++k) {
        power[k] = buf.out[k][0] * buf.out[k][0] + buf.out[k][1] * buf.out[k][1];
      }
      for (int b = 0; b < cfg_.bands; ++b) {
        double e = 0.0;
        for (int k = 0; k < bins; ++k) e += filters_[b][k] * power[k];
        feats[o++] = std::log(e / n + 1e-8) / 10.0;
      }
    }
  }
  return feats;
}

Tensor AudioEncoder::encode(const std::vector<double>& wave, int frames) const {
  const int a = cfg_.tokens_per_frame;
  const Tensor bands = Tensor::from({frames, a, cfg_.bands}, band_features(wave, frames));
  std::vector<double> pos(static_cast<std::size_t>(frames) * a * cfg_.dim);
  for (int f = 0; f < frames; ++f) {
    std::copy(positions_.begin(), positions_.end(),
              pos.begin() + static_cast<std::ptrdiff_t>(f) * a * cfg_.dim);
  }
  return ops::add(proj_(bands), Tensor::from({frames, a, cfg_.dim}, std::move(pos)));
}

ReferenceEncoder::ReferenceEncoder(nn::ParameterStore& store, const NoisePredictorConfig& cfg,
                                   Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  conv_in_ = nn::Conv2d::make(store, prefix + ".conv_in", cfg_.latent_channels, cfg_.channels[0], 3,
                              1, 1, rng);
  downsample_.resize(static_cast<std::size_t>(cfg_.levels));
  for (int l = 0; l < cfg_.levels; ++l) {
    const std::string name = prefix + ".down" + std::to_string(l);
    if (l > 0) {
      downsample_[l] = nn::Conv2d::make(store, name + ".downsample", cfg_.channels[l - 1],
                                        cfg_.channels[l], 3, 2, 1, rng);
    }
    res_.push_back(ResBlock::make(store, name + ".res", cfg_.channels[l], cfg_.groupnorm_groups, 0, rng));
  }
}

std::vector<Tensor> ReferenceEncoder::encode(const Tensor& image) const {
  const int s = cfg_.latent_size;
  if (image.rank() != 3 || image.dim(0) != cfg_.latent_channels || image.dim(1) != s ||
      image.dim(2) != s) {
    throw ShapeError("reference image " + shape_str(image.shape()) + " does not match latent (" +
                     std::to_string(cfg_.latent_channels) + ", " + std::to_string(s) + ", " +
                     std::to_string(s) + ")");
  }
  std::vector<Tensor> maps;
  Tensor h = conv_in_(ops::reshape(image, {1, cfg_.latent_channels, s, s}));
  for (int l = 0; l < cfg_.levels; ++l) {
    if (l > 0) h = downsample_[l](h);
    h = res_[l](h, Tensor());
    maps.push_back(ops::reshape(h, {h.dim(1), h.dim(2), h.dim(3)}));
  }
  return maps;
}

}  // namespace tbd::encoders
