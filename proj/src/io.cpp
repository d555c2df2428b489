#include "tbd/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <png.h>

namespace tbd::io {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_png(const std::string& path, const Image& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw IoError("image buffer does not match its dimensions");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write PNG " + path + ": " + msg);
  }
}

Image read_png(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path + ": " + msg);
  }
  return out;
}

Tensor image_to_latent(const Image& image, int size) {
  if (size <= 0 || image.width != image.height || image.width % size != 0) {
    throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " cannot be box-filtered to " + std::to_string(size) + "x" + std::to_string(size));
  }
  const int f = image.width / size;
  std::vector<double> v(static_cast<std::size_t>(3) * size * size);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double s = 0.0;
        for (int dy = 0; dy < f; ++dy) {
          for (int dx = 0; dx < f; ++dx) s += image.at(y * f + dy, x * f + dx, c);
        }
        v[(static_cast<std::size_t>(c) * size + y) * size + x] = s / (f * f) / 127.5 - 1.0;
      }
    }
  }
  return Tensor::from({3, size, size}, std::move(v));
}

Image latent_to_image(const Tensor& latent, int scale) {
  if (latent.rank() != 3 || latent.dim(0) != 3 || scale < 1) {
    throw ShapeError("latent " + shape_str(latent.shape()) + " is not an RGB map");
  }
  const int h = latent.dim(1), w = latent.dim(2);
  Image img;
  img.width = w * scale;
  img.height = h * scale;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = latent[(static_cast<std::size_t>(c) * h + y / scale) * w + x / scale];
        const double p = std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(p);
      }
    }
  }
  return img;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void write_wav(const std::string& path, const Wave& wave) {
  const auto n = static_cast<std::uint32_t>(wave.samples.size());
  std::string out;
  out += "RIFF";
  put<std::uint32_t>(out, 36 + n * 2);
  out += "WAVEfmt ";
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, 1);  // PCM
  put<std::uint16_t>(out, 1);  // mono
  put<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  put<std::uint16_t>(out, 2);
  put<std::uint16_t>(out, 16);
  out += "data";
  put<std::uint32_t>(out, n * 2);
  for (double s : wave.samples) {
    put<std::int16_t>(out, static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0)));
  }
  write_text_file(path, out);
}

Wave read_wav(const std::string& path) {
  const std::string in = read_text_file(path);
  if (in.size() < 12 || in.compare(0, 4, "RIFF") != 0 || in.compare(8, 4, "WAVE") != 0) {
    throw IoError(path + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  int format = 0, channels = 0, bits = 0;
  Wave w;
  bool have_fmt = false;
  while (pos + 8 <= in.size()) {
    const std::string id = in.substr(pos, 4);
    pos += 4;
    const auto len = get<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw IoError(path + ": truncated chunk '" + id + "'");
    if (id == "fmt ") {
      std::size_t p = pos;
      format = get<std::uint16_t>(in, p);
      channels = get<std::uint16_t>(in, p);
      w.sample_rate = static_cast<int>(get<std::uint32_t>(in, p));
      p += 6;
      bits = get<std::uint16_t>(in, p);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw IoError(path + ": data chunk before fmt chunk");
      if (channels != 1) throw IoError(path + ": expected mono audio, got " + std::to_string(channels) + " channels");
      std::size_t p = pos;
      if (format == 1 && bits == 16) {
        for (std::uint32_t i = 0; i < len / 2; ++i) w.samples.push_back(get<std::int16_t>(in, p) / 32767.0);
      } else if (format == 3 && bits == 32) {
        for (std::uint32_t i = 0; i < len / 4; ++i) w.samples.push_back(get<float>(in, p));
      } else {
        throw IoError(path + ": unsupported sample format " + std::to_string(format) + "/" +
                      std::to_string(bits) + " bit");
      }
      return w;
    }
    pos += len + (len & 1u);
  }
  throw IoError(path + ": no data chunk");
}

namespace {

constexpr char kMagic[8] = {'T', 'B', 'D', 'C', 'K', 'P', 'T', '1'};

struct Parsed {
  json manifest;
  std::string blob;
  std::size_t data_start = 0;
};

Parsed parse_checkpoint(const std::string& path) {
  Parsed p;
  p.blob = read_text_file(path);
  if (p.blob.size() < 16 || std::memcmp(p.blob.data(), kMagic, 8) != 0) {
    throw IoError(path + ": not a checkpoint file");
  }
  std::size_t pos = 8;
  const auto len = get<std::uint64_t>(p.blob, pos);
  if (pos + len > p.blob.size()) throw IoError(path + ": truncated manifest");
  try {
    p.manifest = json::parse(p.blob.substr(pos, len));
  } catch (const json::parse_error& e) {
    throw IoError(path + ": bad manifest: " + e.what());
  }
  p.data_start = pos + len;
  return p;
}

std::vector<double> tensor_values(const Parsed& p, const json& entry, std::size_t expected) {
  const auto offset = entry.at("offset").get<std::size_t>();
  const auto count = entry.at("count").get<std::size_t>();
  if (count != expected) throw IoError("tensor '" + entry.at("name").get<std::string>() + "' size mismatch");
  std::size_t pos = p.data_start + offset;
  std::vector<double> v(count);
  for (auto& x : v) x = get<float>(p.blob, pos);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParameterStore& store,
                     const nn::Adam* optimizer, const json& config, const json& meta) {
  std::string data;
  json tensors = json::array();
  auto add = [&](const std::string& name, const Shape& shape, std::span<const double> values) {
    tensors.push_back({{"name", name}, {"dtype", "f32"}, {"shape", shape}, {"offset", data.size()},
                       {"count", values.size()}});
    for (double v : values) put<float>(data, static_cast<float>(v));
  };
  for (const auto& [name, t] : store.items()) add(name, t.shape(), t.data());
  json adam = json::object();
  if (optimizer) {
    adam["lr"] = optimizer->lr();
    json steps = json::object();
    for (const auto& [name, s] : optimizer->states()) {
      steps[name] = s.steps;
      const Shape shape{static_cast<int>(s.m.size())};
      add("adam.m/" + name, shape, s.m);
      add("adam.v/" + name, shape, s.v);
    }
    adam["steps"] = steps;
  }
  const json manifest{{"format", "tbd-checkpoint"}, {"version", 1}, {"config", config},
                      {"meta", meta},               {"adam", adam}, {"tensors", tensors}};
  const std::string m = manifest.dump();
  std::string out(kMagic, 8);
  put<std::uint64_t>(out, m.size());
  out += m;
  out += data;

  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  write_text_file(tmp, out);
  fs::rename(tmp, target);
}

CheckpointContents load_checkpoint(const std::string& path, nn::ParameterStore& store,
                                   nn::Adam* optimizer) {
  const Parsed p = parse_checkpoint(path);
  std::map<std::string, const json*> by_name;
  for (const auto& e : p.manifest.at("tensors")) by_name[e.at("name").get<std::string>()] = &e;
  for (const auto& [name, t] : store.items()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError(path + ": missing tensor '" + name + "'");
    if (it->second->at("shape").get<Shape>() != t.shape()) {
      throw IoError(path + ": tensor '" + name + "' has shape " +
                    shape_str(it->second->at("shape").get<Shape>()) + ", model expects " +
                    shape_str(t.shape()));
    }
    const auto v = tensor_values(p, *it->second, t.size());
    Tensor target = t;
    std::copy(v.begin(), v.end(), target.mutable_data().begin());
  }
  if (optimizer && p.manifest.at("adam").contains("steps")) {
    optimizer->set_lr(p.manifest.at("adam").at("lr").get<double>());
    for (const auto& [name, steps] : p.manifest.at("adam").at("steps").items()) {
      auto& s = optimizer->state(name);
      s.steps = steps.get<long long>();
      s.m = tensor_values(p, *by_name.at("adam.m/" + name), s.m.size());
      s.v = tensor_values(p, *by_name.at("adam.v/" + name), s.v.size());
    }
  }
  return {p.manifest.at("config"), p.manifest.at("meta")};
}

CheckpointContents read_checkpoint_header(const std::string& path) {
  const Parsed p = parse_checkpoint(path);
  return {p.manifest.at("config"), p.manifest.at("meta")};
}

}  // namespace tbd::io
