#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mop/defocus.hpp"
#include "mop/imgio.hpp"

namespace mop {

struct CannyParams {
  double low = 0.1;
  double high = 0.2;
  double sigma = 1.4;
};

/// Binary H x W mask, row-major.
struct EdgeMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> mask;

  uint8_t at(int64_t r, int64_t c) const { return mask[static_cast<size_t>(r * width + c)]; }
  int64_t count() const;
  /// 1 x H x W float tensor of {0,1}.
  torch::Tensor tensor() const;
};

/// Threshold tolerance shared by NMS comparisons, absorbing float round-off between
/// algebraically equal gradient magnitudes.
inline constexpr double kCannyTieTolerance = 1e-7;

/// Luminance -> Gaussian -> Sobel -> 4-direction NMS -> hysteresis. Thresholds apply to
/// the gradient magnitude divided by 4*sqrt(2), its maximum for inputs in [0,1].
EdgeMap canny(const ImagePatch& image, double low = 0.1, double high = 0.2);
EdgeMap canny(const ImagePatch& image, const CannyParams& params);

inline constexpr int64_t kEdgeChannels = 16;

/// 3x3 convolution 1 -> C_e channels.
class EdgeEmbedImpl : public torch::nn::Module {
 public:
  explicit EdgeEmbedImpl(int64_t channels = kEdgeChannels);
  /// B x 1 x H x W -> B x C_e x H x W
  torch::Tensor forward(const torch::Tensor& edges);
  torch::nn::Conv2d& conv() { return conv_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(EdgeEmbed);

/// 1x1 conv on the defocus prompt -> sigmoid -> bilinear resize.
class DefocusConfidenceImpl : public torch::nn::Module {
 public:
  explicit DefocusConfidenceImpl(int64_t defocus_channels = 128);
  /// B x C_d x h x w -> B x 1 x H x W, values in (0,1).
  torch::Tensor forward(const torch::Tensor& p_d, std::pair<int64_t, int64_t> target_hw);
  /// Seeds the map from the estimator's CTF row so high local contrast reads as confident.
  void init_from_ctf_head(DefocusEstimator& estimator, double gain = 4.0);
  torch::nn::Conv2d& conv() { return conv_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(DefocusConfidence);

/// features * confidence, broadcast over channels. Accepts CxHxW with 1xHxW or batched forms.
torch::Tensor weighted_edge_prompt(const torch::Tensor& edge_features, const torch::Tensor& confidence);

}  // namespace mop
