#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mop/encoders.hpp"
#include "mop/imgio.hpp"

namespace mop {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE), peak 1, capped at kPsnrCap (identical images hit the cap).
double psnr(const ImagePatch& a, const ImagePatch& b);
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5) over the valid region, K1 0.01, K2 0.03,
/// per channel then averaged.
double ssim(const ImagePatch& a, const ImagePatch& b);
/// CHW tensors.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Mean over tokens of the squared distance between unit-normalized encoder tokens.
double perceptual_proxy(const ImagePatch& a, const ImagePatch& b, const Encoder& encoder);
/// Per-item proxy for two B x 3 x H x W batches.
torch::Tensor perceptual_proxy_batch(const torch::Tensor& a, const torch::Tensor& b, const Encoder& encoder);

/// External perceptual scorer hook (e.g. a real LPIPS); replaces the proxy when set.
using PerceptualScorer = std::function<double(const ImagePatch& a, const ImagePatch& b)>;

struct MetricTriple {
  double psnr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;
};

struct MetricReport {
  MetricTriple aggregate;
  std::map<std::string, MetricTriple> per_slide;
  size_t units = 0;  // slides, or tiles when not grouping by slide
};

MetricTriple score_pair(const ImagePatch& pred, const ImagePatch& ref, const PerceptualScorer& scorer);

/// Matches records by id. Grouped: one score per slide (whole stitched image), averaged over
/// slides. Ungrouped: scores every 256x256 tile of every image and averages over tiles.
MetricReport evaluate_dataset(const std::vector<ManifestRecord>& predictions,
                              const std::vector<ManifestRecord>& references, bool group_by_slide,
                              const PerceptualScorer& scorer, int64_t tile = 256);

/// Aligned text table.
void write_metric_table(const MetricReport& report, const std::filesystem::path& path);
/// One JSON object per line: per-slide rows, then the aggregate.
void write_metric_records(const MetricReport& report, const std::filesystem::path& path);

}  // namespace mop
