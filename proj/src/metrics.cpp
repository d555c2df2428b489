#include "tbd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace tbd::metrics {

using nlohmann::json;

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

double ssim_channel(const double* x, const double* y, int h, int w, const SsimOptions& o) {
  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  const int n = o.window;
  const double inv = 1.0 / (n * n);
  double total = 0.0;
  int count = 0;
  for (int i = 0; i + n <= h; ++i) {
    for (int j = 0; j + n <= w; ++j) {
      double mx = 0, my = 0;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          mx += x[(i + u) * w + j + v];
          my += y[(i + u) * w + j + v];
        }
      }
      mx *= inv;
      my *= inv;
      double vx = 0, vy = 0, cxy = 0;
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          const double dx = x[(i + u) * w + j + v] - mx;
          const double dy = y[(i + u) * w + j + v] - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      }
      vx *= inv;
      vy *= inv;
      cxy *= inv;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double max_value, double cap) {
  require_same(a, b, "psnr");
  if (!(max_value > 0.0)) throw Error("psnr: max_value must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(max_value * max_value / mse));
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
  require_same(a, b, "ssim");
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim expects (H, W) or (C, H, W)");
  const int c = a.rank() == 3 ? a.dim(0) : 1;
  const int h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  if (opts.window < 1 || h < opts.window || w < opts.window) {
    throw ShapeError("ssim window " + std::to_string(opts.window) + " does not fit " +
                     shape_str(a.shape()));
  }
  double total = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t off = static_cast<std::size_t>(ch) * h * w;
    total += ssim_channel(a.data().data() + off, b.data().data() + off, h, w, opts);
  }
  return total / c;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mean_abs_diff");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

void MetricReport::aggregate() {
  psnr = ssim = 0.0;
  if (clips.empty()) return;
  for (const auto& c : clips) {
    psnr += c.psnr;
    ssim += c.ssim;
  }
  psnr /= static_cast<double>(clips.size());
  ssim /= static_cast<double>(clips.size());
}

json MetricReport::to_json() const {
  json clip_list = json::array();
  for (const auto& c : clips) {
    clip_list.push_back({{"clip_id", c.clip_id}, {"psnr", c.psnr}, {"ssim", c.ssim}, {"frames", c.frames}});
  }
  json j{{"clips", clip_list},
         {"aggregate", {{"psnr", psnr}, {"ssim", ssim}}},
         {"conditioning_sensitivity", nullptr},
         {"deterministic", nullptr},
         {"fid", nullptr},
         {"fvd", nullptr},
         {"lpips", nullptr},
         {"cpbd", nullptr},
         {"sync_conf", nullptr}};
  if (conditioning_sensitivity) j["conditioning_sensitivity"] = *conditioning_sensitivity;
  if (deterministic) j["deterministic"] = *deterministic;
  return j;
}

MetricReport MetricReport::from_json(const json& j) {
  MetricReport r;
  for (const auto& c : j.at("clips")) {
    r.clips.push_back({c.at("clip_id").get<std::string>(), c.at("psnr").get<double>(),
                       c.at("ssim").get<double>(), c.at("frames").get<int>()});
  }
  r.psnr = j.at("aggregate").at("psnr").get<double>();
  r.ssim = j.at("aggregate").at("ssim").get<double>();
  if (!j.at("conditioning_sensitivity").is_null()) {
    r.conditioning_sensitivity = j.at("conditioning_sensitivity").get<double>();
  }
  if (!j.at("deterministic").is_null()) r.deterministic = j.at("deterministic").get<bool>();
  return r;
}

void MetricReport::print_table(std::ostream& os) const {
  char line[160];
  std::snprintf(line, sizeof line, "%-24s %8s %10s %8s\n", "clip", "frames", "PSNR(dB)", "SSIM");
  os << line;
  for (const auto& c : clips) {
    std::snprintf(line, sizeof line, "%-24s %8d %10.4f %8.4f\n", c.clip_id.c_str(), c.frames, c.psnr,
                  c.ssim);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-24s %8s %10.4f %8.4f\n", "mean", "", psnr, ssim);
  os << line;
  if (conditioning_sensitivity) {
    std::snprintf(line, sizeof line, "conditioning sensitivity %.6f\n", *conditioning_sensitivity);
    os << line;
  }
  if (deterministic) os << "deterministic " << (*deterministic ? "yes" : "no") << "\n";
}

}  // namespace tbd::metrics
