#include <doctest.h>

#include <sstream>

#include "test_util.hpp"
#include "tbd/metrics.hpp"
#include "tbd/ops.hpp"

using namespace tbd;
using namespace tbd::metrics;

namespace {

// Single-window SSIM from raw moments.
double ssim_one_window(const std::vector<double>& x, const std::vector<double>& y, double range) {
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
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("psnr: identical inputs hit the cap, known offsets give known values") {
  Rng rng(1);
  const Tensor a = test::random_tensor({3, 8, 8}, rng);
  CHECK(psnr(a, a, 1.0) == 99.0);
  CHECK(psnr(a, a, 1.0, 60.0) == 60.0);
  const Tensor b = ops::add(a, Tensor::full(a.shape(), 1.0));
  CHECK(psnr(a, b, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  const Tensor c = ops::add(a, Tensor::full(a.shape(), 0.5));
  CHECK(psnr(a, c, 1.0) == doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-12));
  CHECK(psnr(a, c, 255.0) == doctest::Approx(20.0 * std::log10(510.0)).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, Tensor::zeros({3, 8, 7}), 1.0), ShapeError);
  CHECK_THROWS(psnr(a, a, 0.0));
}

TEST_CASE("psnr is symmetric and invariant to a common shift") {
  Rng rng(2);
  const Tensor a = test::random_tensor({2, 5, 5}, rng);
  const Tensor b = test::random_tensor({2, 5, 5}, rng);
  const Tensor s = Tensor::full(a.shape(), 3.25);
  CHECK(psnr(a, b, 1.0) == psnr(b, a, 1.0));
  CHECK(psnr(ops::add(a, s), ops::add(b, s), 1.0) == doctest::Approx(psnr(a, b, 1.0)).epsilon(1e-12));
}

TEST_CASE("ssim on a single window matches the moment formula") {
  Rng rng(3);
  std::vector<double> x(49), y(49);
  for (std::size_t i = 0; i < 49; ++i) {
    x[i] = rng.uniform();
    y[i] = 0.6 * x[i] + 0.4 * rng.uniform();
  }
  const double got = ssim(Tensor::from({7, 7}, x), Tensor::from({7, 7}, y));
  CHECK(std::abs(got - ssim_one_window(x, y, 1.0)) <= 1e-10);
}

TEST_CASE("ssim over 8x8 averages the four window positions") {
  Rng rng(4);
  std::vector<double> x(64), y(64);
  for (std::size_t i = 0; i < 64; ++i) {
    x[i] = rng.uniform();
    y[i] = rng.uniform();
  }
  double expected = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      std::vector<double> wx, wy;
      for (int u = 0; u < 7; ++u)
        for (int v = 0; v < 7; ++v) {
          wx.push_back(x[static_cast<std::size_t>((i + u) * 8 + j + v)]);
          wy.push_back(y[static_cast<std::size_t>((i + u) * 8 + j + v)]);
        }
      expected += ssim_one_window(wx, wy, 1.0) / 4.0;
    }
  CHECK(std::abs(ssim(Tensor::from({8, 8}, x), Tensor::from({8, 8}, y)) - expected) <= 1e-10);
}

TEST_CASE("ssim: identity, symmetry, anti-correlation and channel averaging") {
  Rng rng(5);
  const Tensor a = test::random_tensor({3, 9, 9}, rng);
  const Tensor b = test::random_tensor({3, 9, 9}, rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
  const Tensor u = ops::scale(ops::add(a, Tensor::full(a.shape(), 4.0)), 0.125);
  CHECK(ssim(u, ops::sub(Tensor::full(u.shape(), 1.0), u)) < 0.0);
  double per_channel = 0.0;
  for (int c = 0; c < 3; ++c) per_channel += ssim(ops::reshape(ops::slice(a, 0, c, 1), {9, 9}),
                                                  ops::reshape(ops::slice(b, 0, c, 1), {9, 9}));
  CHECK(ssim(a, b) == doctest::Approx(per_channel / 3).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(Tensor::zeros({6, 6}), Tensor::zeros({6, 6})), ShapeError);
  CHECK_THROWS_AS(ssim(Tensor::zeros({2, 2, 8, 8}), Tensor::zeros({2, 2, 8, 8})), ShapeError);
}

TEST_CASE("mean_abs_diff") {
  const Tensor a = Tensor::from({4}, {0.0, 1.0, 2.0, 3.0});
  const Tensor b = Tensor::from({4}, {1.0, 1.0, 0.0, 3.5});
  CHECK(mean_abs_diff(a, b) == doctest::Approx(3.5 / 4));
  CHECK(mean_abs_diff(a, a) == 0.0);
}

TEST_CASE("report aggregates, serializes and keeps unmeasured metrics null") {
  MetricReport r;
  r.clips = {{"clip_000", 30.0, 0.8, 10}, {"clip_001", 20.0, 0.6, 12}};
  r.aggregate();
  CHECK(r.psnr == 25.0);
  CHECK(r.ssim == doctest::Approx(0.7));
  auto j = r.to_json();
  for (const char* k : {"fid", "fvd", "lpips", "cpbd", "sync_conf", "conditioning_sensitivity", "deterministic"}) {
    CHECK(j.at(k).is_null());
  }
  r.conditioning_sensitivity = 0.05;
  r.deterministic = true;
  j = r.to_json();
  const auto back = MetricReport::from_json(j);
  CHECK(back.clips.size() == 2);
  CHECK(back.clips[1].clip_id == "clip_001");
  CHECK(back.clips[1].frames == 12);
  CHECK(*back.conditioning_sensitivity == 0.05);
  CHECK(*back.deterministic);
  std::ostringstream os;
  back.print_table(os);
  CHECK(os.str().find("clip_000") != std::string::npos);
}

}  // TEST_SUITE
