#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mop/degrade.hpp"
#include "mop/imgio.hpp"

namespace mop {

/// Which regression targets drive the estimator loss.
enum class DefocusTargets { kBoth, kDistance, kCtf };

DefocusTargets parse_defocus_targets(const std::string& s);
std::string to_string(DefocusTargets t);

struct DefocusConfig {
  std::vector<int64_t> widths{16, 32, 64, 128};  // one per residual stage
  DefocusTargets targets = DefocusTargets::kBoth;
  int64_t epochs = 100;
  int64_t batch_size = 16;
  double lr = 1e-4;
  double gamma = 0.95;  // per-epoch step decay
  bool stain_augment = true;
  StainStats stain_reference{{70.0, 20.0, -12.0}, {12.0, 8.0, 6.0}};
};

/// Pre-pool feature map of the estimator: the defocus prompt.
struct DefocusPrompt {
  torch::Tensor features;  // C x H/32 x W/32
  std::pair<int64_t, int64_t> source_hw{0, 0};
};

struct DefocusEstimate {
  double d_hat = 0.0;
  double c_hat = 0.0;
  /// CTF clipped into (0,1] for reports; training and inference keep it raw.
  double c_reported() const;
};

struct EstimatorOutput {
  torch::Tensor features;  // B x C x h x w
  torch::Tensor pred;      // B x 2, columns (d_hat, c_hat)
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t in, int64_t out, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Stride-32 residual CNN: strided stem followed by four strided residual stages.
class DefocusEstimatorImpl : public torch::nn::Module {
 public:
  static constexpr int64_t kStride = 32;

  explicit DefocusEstimatorImpl(std::vector<int64_t> widths = {16, 32, 64, 128});
  EstimatorOutput forward(const torch::Tensor& x);

  int64_t feature_channels() const { return widths_.back(); }
  torch::nn::Linear& head() { return head_; }

 private:
  std::vector<int64_t> widths_;
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::ModuleList stages_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(DefocusEstimator);

/// Runs the estimator on one image (eval mode, no grad).
std::pair<DefocusEstimate, DefocusPrompt> estimate(DefocusEstimator& model, const ImagePatch& image,
                                                   bool apply_stain_norm, const StainStats& stain_reference = {});

/// Batched prompts for a B x 3 x H x W tensor (eval mode, no grad).
EstimatorOutput estimate_batch(DefocusEstimator& model, const torch::Tensor& images);

/// |d - d_hat| + |c - c_hat|.
double defocus_loss(const DefocusEstimate& pred, const DefocusLabel& gt);
/// Mean of per-sample losses.
double defocus_loss(std::span<const DefocusEstimate> pred, std::span<const DefocusLabel> gt);
/// Differentiable batch form; pred and target are B x 2.
torch::Tensor defocus_loss(const torch::Tensor& pred, const torch::Tensor& target,
                           DefocusTargets targets = DefocusTargets::kBoth);

/// Applies the distance row of a linear head per location, upsamples bilinearly and takes |.|.
torch::Tensor defocus_heatmap(const DefocusPrompt& prompt, const torch::Tensor& head_weight,
                              const torch::Tensor& head_bias);
torch::Tensor defocus_heatmap(const DefocusPrompt& prompt, DefocusEstimator& model);

struct DefocusSample {
  torch::Tensor image;  // 3 x H x W
  DefocusLabel label;
};

/// Cuts patch-size crops from every plane; labels average the regions each crop covers.
std::vector<DefocusSample> defocus_samples(const SyntheticStack& stack, int64_t patch);

struct DefocusTrainResult {
  DefocusEstimator model{nullptr};
  std::vector<double> epoch_loss;
  std::string optimizer_state;
  int64_t steps = 0;
};

using EpochCallback = std::function<void(int64_t epoch, double loss)>;

DefocusTrainResult train_defocus(const std::vector<DefocusSample>& samples, const DefocusConfig& config,
                                 uint64_t seed, const EpochCallback& on_epoch = {});

/// Accuracy diagnostics on a labelled set.
struct DefocusEvaluation {
  double mae_distance = 0.0;
  double mae_ctf = 0.0;
  double z_accuracy = 0.0;  // fraction with round(d_hat) == round(d)
};
DefocusEvaluation evaluate_defocus(DefocusEstimator& model, const std::vector<DefocusSample>& samples);

}  // namespace mop
