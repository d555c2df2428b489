#include <doctest.h>

#include <complex>
#include <numbers>
#include <thread>

#include "test_util.hpp"
#include "tbd/encoders.hpp"
#include "tbd/ops.hpp"

using namespace tbd;
using namespace tbd::encoders;

namespace {

// Band log-energies from a direct O(n^2) DFT.
std::vector<double> oracle_features(const std::vector<double>& wave, int frames,
                                    const AudioEncoderConfig& cfg) {
  const int n = cfg.window();
  const auto filters = mel_filterbank(cfg.bands, n, cfg.sample_rate);
  std::vector<double> out;
  for (int f = 0; f < frames; ++f) {
    for (int a = 0; a < cfg.tokens_per_frame; ++a) {
      const std::size_t start = static_cast<std::size_t>(f * cfg.samples_per_frame() + a * n);
      std::vector<double> power(static_cast<std::size_t>(n / 2 + 1));
      for (int k = 0; k <= n / 2; ++k) {
        std::complex<double> acc = 0.0;
        for (int i = 0; i < n; ++i) {
          const std::size_t s = start + static_cast<std::size_t>(i);
          const double x = s < wave.size() ? wave[s] : 0.0;
          const double w = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / n));
          acc += x * w * std::polar(1.0, -2.0 * std::numbers::pi * k * i / n);
        }
        power[static_cast<std::size_t>(k)] = std::norm(acc);
      }
      for (int b = 0; b < cfg.bands; ++b) {
        double e = 0.0;
        for (int k = 0; k <= n / 2; ++k) e += filters[b][k] * power[k];
        out.push_back(std::log(e / n + 1e-8) / 10.0);
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("tokenizer: case and punctuation insensitive, ids in [1, vocab)") {
  const auto a = TextEncoder::tokenize("Cheek raiser (AU6), lip corner puller.", 1024);
  const auto b = TextEncoder::tokenize("cheek RAISER au6 lip corner puller", 1024);
  CHECK(a == b);
  CHECK(a.size() == 6);
  for (int id : a) {
    CHECK(id >= 1);
    CHECK(id < 1024);
  }
  CHECK(TextEncoder::tokenize("  ...  ", 1024).empty());
}

TEST_CASE("text encoder pads, truncates and is deterministic") {
  nn::ParameterStore store;
  Rng rng(1);
  const TextEncoder enc(store, {8, 64, 4}, rng);
  const Tensor e = enc.encode("one two");
  CHECK(e.shape() == Shape{4, 8});
  CHECK(test::bytes_equal(e, enc.encode("One, two!")));
  // Padding rows hold the id-0 embedding plus the position signal.
  const Tensor pad = enc.encode("x y z w");
  CHECK_FALSE(test::bytes_equal(ops::slice(e, 0, 2, 2), ops::slice(pad, 0, 2, 2)));
  CHECK(test::bytes_equal(enc.encode("a b c d e f"), enc.encode("a b c d")));
  CHECK_THROWS_AS(enc.encode(" , "), EncoderError);
  CHECK(store.contains("text.embedding"));
}

TEST_CASE("mel filterbank: triangles within [0, 1], ordered centres") {
  const auto w = mel_filterbank(8, 160, 16000);
  REQUIRE(w.size() == 8);
  int prev_peak = -1;
  for (const auto& band : w) {
    REQUIRE(band.size() == 81);
    double peak = 0.0;
    int arg = 0;
    for (int k = 0; k < 81; ++k) {
      CHECK(band[k] >= 0.0);
      CHECK(band[k] <= 1.0);
      if (band[k] > peak) {
        peak = band[k];
        arg = k;
      }
    }
    CHECK(peak > 0.0);
    CHECK(arg >= prev_peak);
    prev_peak = arg;
  }
}

TEST_CASE("audio band features match a direct DFT") {
  nn::ParameterStore store;
  Rng rng(2);
  const AudioEncoderConfig cfg;
  const AudioEncoder enc(store, cfg, rng);
  std::vector<double> wave(static_cast<std::size_t>(3 * cfg.samples_per_frame() - 50));
  for (std::size_t i = 0; i < wave.size(); ++i) {
    wave[i] = 0.6 * std::sin(2.0 * std::numbers::pi * 440.0 * i / cfg.sample_rate) + 0.1 * rng.normal();
  }
  const auto got = enc.band_features(wave, 3);
  const auto want = oracle_features(wave, 3, cfg);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-10);
}

TEST_CASE("a pure tone lights up the band that contains it") {
  nn::ParameterStore store;
  Rng rng(3);
  AudioEncoderConfig cfg;
  const AudioEncoder enc(store, cfg, rng);
  const auto filters = mel_filterbank(cfg.bands, cfg.window(), cfg.sample_rate);
  for (int b : {1, 4, 6}) {
    int centre = 0;
    for (int k = 0; k <= cfg.window() / 2; ++k) {
      if (filters[b][k] > filters[b][centre]) centre = k;
    }
    const double hz = static_cast<double>(centre) * cfg.sample_rate / cfg.window();
    std::vector<double> wave(static_cast<std::size_t>(cfg.samples_per_frame()));
    for (std::size_t i = 0; i < wave.size(); ++i) wave[i] = std::sin(2.0 * std::numbers::pi * hz * i / cfg.sample_rate);
    const auto f = enc.band_features(wave, 1);
    int best = 0;
    for (int j = 0; j < cfg.bands; ++j) {
      if (f[j] > f[best]) best = j;
    }
    CHECK(best == b);
  }
}

TEST_CASE("audio encoder output shape, silence tail and errors") {
  nn::ParameterStore store;
  Rng rng(4);
  const AudioEncoderConfig cfg;
  const AudioEncoder enc(store, cfg, rng);
  const std::vector<double> wave(10, 0.5);
  const Tensor e = enc.encode(wave, 2);
  CHECK(e.shape() == Shape{2, cfg.tokens_per_frame, cfg.dim});
  const auto silent = enc.band_features(wave, 2);
  CHECK(silent.back() == doctest::Approx(std::log(1e-8) / 10.0));
  CHECK_THROWS_AS(enc.band_features(wave, 11), EncoderError);
  CHECK_THROWS_AS(enc.band_features(wave, 0), EncoderError);
  AudioEncoderConfig bad;
  bad.fps = 7;
  CHECK_THROWS_AS(AudioEncoder(store, bad, rng, "bad"), EncoderError);
}

TEST_CASE("band features are safe to compute from several threads") {
  nn::ParameterStore store;
  Rng rng(5);
  const AudioEncoderConfig cfg;
  const AudioEncoder enc(store, cfg, rng);
  std::vector<double> wave(static_cast<std::size_t>(4 * cfg.samples_per_frame()));
  for (double& v : wave) v = rng.normal();
  const auto ref = enc.band_features(wave, 4);
  std::vector<std::vector<double>> results(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] { results[static_cast<std::size_t>(t)] = enc.band_features(wave, 4); });
  }
  for (auto& th : threads) th.join();
  for (const auto& r : results) CHECK(r == ref);
}

TEST_CASE("reference encoder yields one map per level") {
  NoisePredictorConfig cfg;
  nn::ParameterStore store;
  Rng rng(6);
  const ReferenceEncoder enc(store, cfg, rng);
  const auto maps = enc.encode(test::random_tensor({3, 16, 16}, rng));
  REQUIRE(maps.size() == 2);
  CHECK(maps[0].shape() == Shape{32, 16, 16});
  CHECK(maps[1].shape() == Shape{64, 8, 8});
  CHECK_THROWS_AS(enc.encode(test::random_tensor({3, 8, 8}, rng)), ShapeError);
}

}  // TEST_SUITE
