#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/nn.hpp"
#include "tbd/tensor.hpp"

namespace tbd::io {

struct IoError : Error {
  using Error::Error;
};

/// 8-bit RGB image, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

void write_png(const std::string& path, const Image& image);
/// Gray, palette and alpha inputs are converted to 8-bit RGB.
Image read_png(const std::string& path);

/// Box-filters the image down to size x size and maps [0, 255] to [-1, 1].
/// Returns (3, size, size).
Tensor image_to_latent(const Image& image, int size);
/// Nearest-neighbour upscale by `scale` and map [-1, 1] back to [0, 255].
Image latent_to_image(const Tensor& latent, int scale);

struct Wave {
  int sample_rate = 16000;
  std::vector<double> samples;  // mono, in [-1, 1]
};

/// Writes mono 16-bit PCM.
void write_wav(const std::string& path, const Wave& wave);
/// Accepts mono 16-bit PCM or 32-bit float.
Wave read_wav(const std::string& path);

/// Binary checkpoint: magic, manifest length, JSON manifest, little-endian
/// float32 tensor data.
struct CheckpointContents {
  nlohmann::json config;
  nlohmann::json meta;
};

void save_checkpoint(const std::string& path, const nn::ParameterStore& store,
                     const nn::Adam* optimizer, const nlohmann::json& config,
                     const nlohmann::json& meta);
/// Loads values into `store` (every stored tensor must exist with the same
/// shape) and optimizer moments when `optimizer` is given.
CheckpointContents load_checkpoint(const std::string& path, nn::ParameterStore& store,
                                   nn::Adam* optimizer);
/// Reads only the manifest's config and meta.
CheckpointContents read_checkpoint_header(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// FNV-1a over bytes, as 16 hex digits.
std::string content_hash(const std::string& bytes);

}  // namespace tbd::io
