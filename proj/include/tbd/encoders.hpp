#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tbd/network.hpp"
#include "tbd/nn.hpp"

namespace tbd::encoders {

struct EncoderError : Error {
  using Error::Error;
};

struct TextEncoderConfig {
  int dim = 32;
  int vocab = 1024;  // id 0 is padding
  int max_tokens = 128;
};

/// Hash-bucket token embedding plus a fixed sinusoidal position signal.
class TextEncoder {
 public:
  TextEncoder(nn::ParameterStore& store, const TextEncoderConfig& cfg, Rng& rng,
              const std::string& prefix = "text");

  /// Lowercased words with punctuation removed, hashed into [1, vocab).
  static std::vector<int> tokenize(const std::string& text, int vocab);

  /// (max_tokens, dim); sequences are padded with id 0 or truncated.
  Tensor encode(const std::string& text) const;

  const TextEncoderConfig& config() const { return cfg_; }

 private:
  TextEncoderConfig cfg_;
  Tensor table_;
  std::vector<double> positions_;
};

struct AudioEncoderConfig {
  int dim = 32;
  int tokens_per_frame = 4;
  int bands = 8;
  int sample_rate = 16000;
  int fps = 25;

  int samples_per_frame() const { return sample_rate / fps; }
  int window() const { return samples_per_frame() / tokens_per_frame; }
};

/// Mel-spaced triangular band weights over the bins of an n-point real FFT.
/// Row b holds band b; columns are bins 0..n/2.
std::vector<std::vector<double>> mel_filterbank(int bands, int n, int sample_rate);

/// Per-frame windowed band log-energies projected to `dim`.
class AudioEncoder {
 public:
  AudioEncoder(nn::ParameterStore& store, const AudioEncoderConfig& cfg, Rng& rng,
               const std::string& prefix = "audio");
  ~AudioEncoder();
  AudioEncoder(AudioEncoder&&) noexcept;
  AudioEncoder& operator=(AudioEncoder&&) noexcept;

  /// (frames, tokens_per_frame, bands) of log(E + 1e-8) / 10, where E is the
  /// Hann-windowed band power normalized by the window length. Missing tail
  /// samples are treated as silence.
  std::vector<double> band_features(const std::vector<double>& wave, int frames) const;

  /// (frames, tokens_per_frame, dim).
  Tensor encode(const std::vector<double>& wave, int frames) const;

  const AudioEncoderConfig& config() const { return cfg_; }

 private:
  struct Fft;
  AudioEncoderConfig cfg_;
  nn::Linear proj_;
  std::vector<double> positions_;
  std::vector<std::vector<double>> filters_;
  std::unique_ptr<Fft> fft_;
};

/// Convolutional copy of the denoiser's down path with its own weights.
class ReferenceEncoder {
 public:
  ReferenceEncoder(nn::ParameterStore& store, const NoisePredictorConfig& cfg, Rng& rng,
                   const std::string& prefix = "reference");

  /// image: (latent_channels, S, S). One (C_l, S_l, S_l) map per level.
  std::vector<Tensor> encode(const Tensor& image) const;

 private:
  NoisePredictorConfig cfg_;
  nn::Conv2d conv_in_;
  std::vector<nn::Conv2d> downsample_;
  std::vector<ResBlock> res_;
};

/// Sinusoidal signal for `count` positions of width `dim`, row-major.
std::vector<double> sinusoidal_positions(int count, int dim);

}  // namespace tbd::encoders
