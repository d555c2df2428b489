#include "tbd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tbd/facs.hpp"
#include "tbd/rng.hpp"

namespace tbd::dataset {

using nlohmann::json;
namespace fs = std::filesystem;

void to_json(json& j, const ManifestEntry& e) {
  j = json{{"clip_id", e.clip_id},
           {"frames_path", e.frames_path},
           {"audio_path", e.audio_path},
           {"reference_frame_index", e.reference_frame_index},
           {"emotion", e.emotion},
           {"intensity", e.intensity}};
  if (!e.prompt_bundle_path.empty()) j["prompt_bundle_path"] = e.prompt_bundle_path;
}

void from_json(const json& j, ManifestEntry& e) {
  e.clip_id = j.at("clip_id").get<std::string>();
  e.frames_path = j.at("frames_path").get<std::string>();
  e.audio_path = j.at("audio_path").get<std::string>();
  e.reference_frame_index = j.value("reference_frame_index", 0);
  e.emotion = j.at("emotion").get<std::string>();
  e.intensity = j.at("intensity").get<int>();
  e.prompt_bundle_path = j.value("prompt_bundle_path", std::string());
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += json(e).dump() + "\n";
  io::write_text_file(path, out);
}

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d.png", index);
  return buf;
}

int count_frames(const std::string& frames_dir) {
  int n = 0;
  while (fs::exists(fs::path(frames_dir) / frame_filename(n))) ++n;
  return n;
}

std::vector<ManifestEntry> read_manifest(const std::string& path, int min_frames) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    return p.empty() || fs::path(p).is_absolute() ? p : (base / p).string();
  };
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    ManifestEntry e;
    try {
      e = json::parse(line).get<ManifestEntry>();
    } catch (const json::exception& ex) {
      throw DatasetError(where + ": " + ex.what());
    }
    e.frames_path = resolve(e.frames_path);
    e.audio_path = resolve(e.audio_path);
    e.prompt_bundle_path = resolve(e.prompt_bundle_path);
    if (!facs::is_emotion_label(e.emotion)) {
      throw DatasetError(where + ": unknown emotion '" + e.emotion + "'");
    }
    if (e.intensity < 1 || e.intensity > 3) throw DatasetError(where + ": intensity outside 1..3");
    if (!fs::is_directory(e.frames_path)) throw DatasetError(where + ": missing frames directory " + e.frames_path);
    if (!fs::exists(e.audio_path)) throw DatasetError(where + ": missing audio " + e.audio_path);
    const int frames = count_frames(e.frames_path);
    if (frames < min_frames) {
      throw DatasetError(where + ": clip has " + std::to_string(frames) + " frames, need " +
                         std::to_string(min_frames));
    }
    if (e.reference_frame_index < 0 || e.reference_frame_index >= frames) {
      throw DatasetError(where + ": reference_frame_index out of range");
    }
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw DatasetError(path + ": manifest has no entries");
  return entries;
}

FaceStyle face_style(const std::string& emotion, int intensity) {
  if (!facs::is_emotion_label(emotion)) throw DatasetError("unknown emotion '" + emotion + "'");
  if (intensity < 1 || intensity > 3) throw DatasetError("intensity outside 1..3");
  const double s = intensity / 3.0;
  FaceStyle f;
  if (emotion == "happy") {
    f.mouth_corner = 3.0 * s;
    f.eye_open = 1.0 - 0.3 * s;
  } else if (emotion == "sad") {
    f.mouth_corner = -2.0 * s;
    f.brow_raise = 0.5 * s;
    f.brow_tilt = 1.5 * s;
  } else if (emotion == "angry") {
    f.mouth_corner = -1.0 * s;
    f.brow_raise = -1.5 * s;
    f.brow_tilt = -1.5 * s;
  } else if (emotion == "fear") {
    f.mouth_corner = -0.5 * s;
    f.brow_raise = 1.5 * s;
    f.brow_tilt = 1.0 * s;
    f.eye_open = 1.0 + 0.4 * s;
  } else if (emotion == "surprise") {
    f.brow_raise = 2.5 * s;
    f.eye_open = 1.0 + 0.5 * s;
  } else if (emotion == "disgust") {
    f.mouth_corner = -1.5 * s;
    f.brow_raise = -1.0 * s;
  } else if (emotion == "contempt") {
    f.mouth_corner = 1.5 * s;
  }
  return f;
}

Identity draw_identity(std::uint64_t seed, int clip_index) {
  Rng rng = Rng::derive(seed, "clip" + std::to_string(clip_index));
  Identity id;
  const int skin_lo[3] = {200, 150, 120};
  for (int c = 0; c < 3; ++c) id.skin[c] = static_cast<std::uint8_t>(skin_lo[c] + rng.uniform_int(41));
  for (int c = 0; c < 3; ++c) id.background[c] = static_cast<std::uint8_t>(40 + rng.uniform_int(61));
  id.tone_hz = 150.0 + 250.0 * rng.uniform();
  id.syllable_hz = 3.0 + 2.0 * rng.uniform();
  id.phase = 2.0 * std::numbers::pi * rng.uniform();
  return id;
}

double frame_energy(const std::vector<double>& samples, int frame, int samples_per_frame) {
  double e = 0.0;
  const std::size_t start = static_cast<std::size_t>(frame) * samples_per_frame;
  for (int i = 0; i < samples_per_frame; ++i) {
    const std::size_t k = start + static_cast<std::size_t>(i);
    if (k < samples.size()) e += samples[k] * samples[k];
  }
  return e / samples_per_frame;
}

double mouth_aperture(double energy) {
  return std::clamp(std::sqrt(energy / kReferenceEnergy), 0.0, 1.0);
}

std::vector<double> synth_audio(const Identity& id, int samples, int sample_rate) {
  std::vector<double> out(static_cast<std::size_t>(samples));
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (int i = 0; i < samples; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    const double env = 0.5 * (1.0 - std::cos(kTwoPi * id.syllable_hz * t + id.phase));
    const double s = kToneAmplitude * env * std::sin(kTwoPi * id.tone_hz * t);
    out[i] = static_cast<double>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0)) / 32767.0;
  }
  return out;
}

namespace {

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  return std::hypot(px - ax - t * vx, py - ay - t * vy);
}

struct Rgb {
  double r, g, b;
};

// Color at point (u, v) in a 32-unit face coordinate frame.
Rgb face_color(const Identity& id, const FaceStyle& st, double aperture, double u, double v) {
  const Rgb skin{double(id.skin[0]), double(id.skin[1]), double(id.skin[2])};
  const Rgb bg{double(id.background[0]), double(id.background[1]), double(id.background[2])};
  const Rgb dark{40, 30, 30}, brow{70, 45, 30}, lip{150, 60, 60}, inside{50, 20, 20};

  const double fx = (u - 16.0) / 11.0, fy = (v - 16.5) / 13.0;
  if (fx * fx + fy * fy > 1.0) return bg;

  for (double ex : {11.5, 20.5}) {
    const double dx = (u - ex) / 1.8, dy = (v - 14.0) / (1.2 * st.eye_open);
    if (dx * dx + dy * dy <= 1.0) return dark;
  }
  const double y_in = 10.5 - st.brow_raise - st.brow_tilt;
  const double y_out = 10.5 - st.brow_raise + 0.3 * st.brow_tilt;
  if (segment_distance(u, v, 13.5, y_in, 9.0, y_out) <= 0.7 ||
      segment_distance(u, v, 18.5, y_in, 23.0, y_out) <= 0.7) {
    return brow;
  }
  const double half_width = 4.5, cy = 23.0;
  const double t = (u - 16.0) / half_width;
  if (std::abs(t) <= 1.0) {
    const double upper = cy - st.mouth_corner * t * t;
    const double lower = upper + 3.5 * aperture * (1.0 - t * t);
    if (std::abs(v - upper) <= 0.6 || std::abs(v - lower) <= 0.6) return lip;
    if (v > upper && v < lower) return inside;
  }
  return skin;
}

}  // namespace

io::Image render_face(const Identity& id, const FaceStyle& style, double aperture, int size) {
  constexpr int kSub = 4;
  io::Image img;
  img.width = img.height = size;
  img.pixels.resize(static_cast<std::size_t>(size) * size * 3);
  const double unit = 32.0 / size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = (x + (sx + 0.5) / kSub) * unit;
          const double v = (y + (sy + 0.5) / kSub) * unit;
          const Rgb c = face_color(id, style, aperture, u, v);
          acc.r += c.r;
          acc.g += c.g;
          acc.b += c.b;
        }
      }
      const double n = kSub * kSub;
      img.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(acc.r / n));
      img.at(y, x, 1) = static_cast<std::uint8_t>(std::lround(acc.g / n));
      img.at(y, x, 2) = static_cast<std::uint8_t>(std::lround(acc.b / n));
    }
  }
  return img;
}

std::string clip_emotion(int index) {
  static const char* order[] = {"happy", "sad",     "angry",    "surprise",
                                "fear",  "disgust", "contempt", "neutral"};
  return order[index % 8];
}

int clip_intensity(int index) { return 3 - index % 3; }

std::vector<ManifestEntry> generate_synthetic_dataset(const std::string& out_dir,
                                                      const SyntheticSpec& spec,
                                                      std::uint64_t seed) {
  if (spec.clips < 1) throw DatasetError("need at least one clip");
  if (spec.frames < 1 || spec.image_size < 8 || spec.fps <= 0 || spec.sample_rate % spec.fps != 0) {
    throw DatasetError("invalid synthetic dataset spec");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DatasetError("cannot create " + out_dir + ": " + ec.message());
  const int spf = spec.sample_rate / spec.fps;
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < spec.clips; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%03d", i);
    const fs::path clip_dir = fs::path(out_dir) / name;
    fs::create_directories(clip_dir / "frames", ec);
    if (ec) throw DatasetError("cannot create " + clip_dir.string() + ": " + ec.message());

    const Identity id = draw_identity(seed, i);
    ManifestEntry e;
    e.clip_id = name;
    e.emotion = clip_emotion(i);
    e.intensity = clip_intensity(i);
    e.frames_path = std::string(name) + "/frames";
    e.audio_path = std::string(name) + "/audio.wav";

    io::Wave wave;
    wave.sample_rate = spec.sample_rate;
    wave.samples = synth_audio(id, spec.frames * spf, spec.sample_rate);
    io::write_wav((clip_dir / "audio.wav").string(), wave);

    const FaceStyle style = face_style(e.emotion, e.intensity);
    for (int f = 0; f < spec.frames; ++f) {
      const double aperture = mouth_aperture(frame_energy(wave.samples, f, spf));
      io::write_png((clip_dir / "frames" / frame_filename(f)).string(),
                    render_face(id, style, aperture, spec.image_size));
    }
    entries.push_back(e);
  }
  write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), entries);
  return entries;
}

}  // namespace tbd::dataset
