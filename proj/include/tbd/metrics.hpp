#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbd/tensor.hpp"

namespace tbd::metrics {

/// 10 log10(max^2 / MSE); identical inputs report `cap`.
double psnr(const Tensor& a, const Tensor& b, double max_value, double cap = 99.0);

struct SsimOptions {
  int window = 7;            // uniform window side
  double data_range = 1.0;   // L
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all fully contained windows. Inputs are (H, W) or
/// (C, H, W); channels are scored separately and averaged.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});

/// Mean absolute elementwise difference.
double mean_abs_diff(const Tensor& a, const Tensor& b);

struct ClipMetrics {
  std::string clip_id;
  double psnr = 0.0;  // mean over frames
  double ssim = 0.0;
  int frames = 0;
};

struct MetricReport {
  std::vector<ClipMetrics> clips;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> conditioning_sensitivity;
  std::optional<bool> deterministic;

  /// Recomputes the aggregates as arithmetic means of the clip entries.
  void aggregate();
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  void print_table(std::ostream& os) const;
};

}  // namespace tbd::metrics
