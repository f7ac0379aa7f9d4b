#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "mop/imgio.hpp"

namespace mop {

/// Synthetic optics: Gaussian PSF whose width grows linearly with |defocus|.
struct OpticsParams {
  double sigma_per_plane = 0.6;    // blur std (pixels) per unit plane offset
  double f_ref = 0.1;              // reference spatial frequency, cycles/pixel
  double kernel_radius_sigmas = 3.0;

  void validate() const;
  double sigma_at(double d) const;
};

struct DefocusLabel {
  double d = 0.0;  // signed, plane-index units
  double c = 1.0;  // CTF value in (0,1]
};

/// Labels for one plane on a grid of square regions (row-major).
struct LabelMap {
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t block = 32;
  std::vector<DefocusLabel> labels;

  const DefocusLabel& at(int64_t r, int64_t c) const { return labels.at(static_cast<size_t>(r * cols + c)); }
  /// Average label over the regions intersecting [row0,row0+h)x[col0,col0+w).
  DefocusLabel mean_over(int64_t row0, int64_t col0, int64_t h, int64_t w) const;
};

struct SyntheticStack {
  FocalStack stack;
  std::vector<LabelMap> labels;  // one per plane
};

/// Normalized (2r+1)^2 Gaussian kernel, float64; sigma 0 gives the 1x1 identity.
torch::Tensor gaussian_psf(double sigma, const OpticsParams& params);

/// exp(-2 pi^2 (sigma_per_plane |d|)^2 f_ref^2): the Gaussian MTF at f_ref.
double ctf_value(double d, const OpticsParams& params);

/// Per-channel convolution with gaussian_psf(sigma(d)), mirror boundaries, clipped to [0,1].
ImagePatch defocus_blur(const ImagePatch& image, double d, const OpticsParams& params);

/// Convolves a CHW float tensor with a Gaussian of the given sigma (mirror boundaries, no clipping).
torch::Tensor gaussian_filter_chw(const torch::Tensor& chw, double sigma, double radius_sigmas);

/// Defocus of each region column: `offset` at the field centre, changing by `tilt` per column.
/// A fixed slide tilt is what makes the sign of defocus visible in a single plane.
std::vector<double> tilt_ramp(double offset, double tilt, int64_t n_cols);

SyntheticStack synth_focal_stack(const ImagePatch& sharp, std::span<const double> offsets,
                                 const OpticsParams& params, double tilt = 0.0,
                                 int64_t block = 32);

/// Blurs `sharp` according to a label map (one blur level per region).
ImagePatch render_with_labels(const ImagePatch& sharp, const LabelMap& labels, const OpticsParams& params);

// --- stain augmentation --------------------------------------------------

/// Per-channel (mean, std) in CIE L*a*b*.
struct StainStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

struct StainRanges {
  std::array<double, 3> mean_lo{55.0, 10.0, -25.0};
  std::array<double, 3> mean_hi{80.0, 35.0, 0.0};
  std::array<double, 3> std_lo{6.0, 4.0, 3.0};
  std::array<double, 3> std_hi{18.0, 14.0, 10.0};
};

/// sRGB (HWC, [0,1], any real value accepted) -> L*a*b*, float64.
torch::Tensor rgb_to_lab(const torch::Tensor& hwc);
torch::Tensor lab_to_rgb(const torch::Tensor& lab);

StainStats lab_stats(const torch::Tensor& lab);
StainStats draw_stain_target(uint64_t seed, const StainRanges& ranges = {});

/// Matches the image's L*a*b* channel statistics to `target`; returns RGB before clipping.
torch::Tensor stain_transfer_unclipped(const ImagePatch& image, const StainStats& target);
ImagePatch stain_transfer(const ImagePatch& image, const StainStats& target);
ImagePatch stain_augment(const ImagePatch& image, uint64_t seed, const StainRanges& ranges = {});

// --- procedural sources and sidecars ---------------------------------------

/// Pathology-like texture: stroma background, fibres and dark nuclei.
ImagePatch procedural_texture(int64_t height, int64_t width, uint64_t seed);

void write_label_sidecar(const std::vector<LabelMap>& labels, std::span<const double> offsets,
                         const std::filesystem::path& path);
std::vector<LabelMap> read_label_sidecar(const std::filesystem::path& path);

}  // namespace mop
