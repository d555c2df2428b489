#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/io.hpp"

namespace tbd::dataset {

struct DatasetError : Error {
  using Error::Error;
};

struct ManifestEntry {
  std::string clip_id;
  std::string frames_path;  // directory of frame_%04d.png
  std::string audio_path;
  int reference_frame_index = 0;
  std::string emotion;
  int intensity = 1;
  std::string prompt_bundle_path;  // optional

  bool operator==(const ManifestEntry&) const = default;
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);

/// Writes one JSON object per line.
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
/// Relative paths in entries resolve against the manifest's directory.
/// Validates labels, intensities, file existence and `min_frames`.
std::vector<ManifestEntry> read_manifest(const std::string& path, int min_frames = 1);

std::string frame_filename(int index);
int count_frames(const std::string& frames_dir);

/// Face geometry controlled by emotion and intensity.
struct FaceStyle {
  double mouth_corner = 0.0;  // pixels, positive lifts the corners
  double brow_raise = 0.0;    // pixels, positive lifts both brows
  double brow_tilt = 0.0;     // pixels, positive lifts the inner ends
  double eye_open = 1.0;      // relative eye height
};
FaceStyle face_style(const std::string& emotion, int intensity);

/// Per-clip constants drawn from the seed.
struct Identity {
  std::uint8_t skin[3];
  std::uint8_t background[3];
  double tone_hz = 200.0;
  double syllable_hz = 4.0;
  double phase = 0.0;
};
Identity draw_identity(std::uint64_t seed, int clip_index);

struct SyntheticSpec {
  int clips = 4;
  int frames = 8;
  int image_size = 32;
  int sample_rate = 16000;
  int fps = 25;
};

/// Mean square of the samples in frame f's window (missing samples are zero).
double frame_energy(const std::vector<double>& samples, int frame, int samples_per_frame);
/// Mouth aperture in [0, 1]: sqrt(energy / kReferenceEnergy), clamped.
double mouth_aperture(double energy);
inline constexpr double kToneAmplitude = 0.8;
inline constexpr double kReferenceEnergy = kToneAmplitude * kToneAmplitude / 2.0;

/// Amplitude-modulated tone for one clip, already quantized to 16-bit levels
/// as they will read back from the WAV file.
std::vector<double> synth_audio(const Identity& id, int samples, int sample_rate);

io::Image render_face(const Identity& id, const FaceStyle& style, double aperture, int size);

/// Emotion assigned to clip i.
std::string clip_emotion(int index);
int clip_intensity(int index);

/// Writes frames, audio and manifest.jsonl under out_dir; returns the entries.
std::vector<ManifestEntry> generate_synthetic_dataset(const std::string& out_dir,
                                                      const SyntheticSpec& spec,
                                                      std::uint64_t seed);

}  // namespace tbd::dataset
