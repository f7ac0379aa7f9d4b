#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mop/edges.hpp"
#include "mop/layers.hpp"

namespace mop {

/// Residual-shift chain: eta[0] = 0 < eta[1] < ... < eta[T] = 1, alpha[t-1] = eta[t] - eta[t-1].
struct DiffusionSchedule {
  int64_t T = 0;
  double kappa = 0.0;
  std::vector<double> eta;
  std::vector<double> alpha;

  double alpha_at(int64_t t) const { return alpha.at(static_cast<size_t>(t - 1)); }
};

/// eta[t] = eta1^((T-t)/(T-1)); T = 1 forces eta = [0, 1].
DiffusionSchedule make_schedule(int64_t T = 4, double kappa = 2.0, double eta1 = 0.04);

/// x0 + eta_t (y - x0) + kappa sqrt(eta_t) noise, t in [0, T].
torch::Tensor forward_marginal(const torch::Tensor& x0, const torch::Tensor& y, int64_t t, const torch::Tensor& noise,
                               const DiffusionSchedule& sched);
/// Per-item steps: t is an int64 tensor of length B.
torch::Tensor forward_marginal(const torch::Tensor& x0, const torch::Tensor& y, const torch::Tensor& t,
                               const torch::Tensor& noise, const DiffusionSchedule& sched);

/// One-step transition x_{t-1} ~ N(x_{t-1} + alpha_t (y - x0), kappa^2 alpha_t), for chain checks.
torch::Tensor transition_step(const torch::Tensor& x_prev, const torch::Tensor& x0, const torch::Tensor& y, int64_t t,
                              const torch::Tensor& noise, const DiffusionSchedule& sched);

struct PosteriorMoments {
  double mean_xt = 0.0;   // coefficient on x_t
  double mean_x0 = 0.0;   // coefficient on x0_hat
  double variance = 0.0;
};
PosteriorMoments posterior_moments(int64_t t, const DiffusionSchedule& sched);

/// Draw from q(x_{t-1} | x_t, x0_hat). The conditioning image cancels out of the mean.
torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, const torch::Tensor& y, int64_t t,
                             const torch::Tensor& noise, const DiffusionSchedule& sched);

struct DenoiserConfig {
  std::vector<int64_t> widths{64, 128, 256};
  int64_t heads = 4;
  int64_t prompt_dim = 192;
  int64_t defocus_dim = 128;
  int64_t edge_channels = kEdgeChannels;
  bool use_raw_lq = false;  // extra conditioning channels with the raw degraded input
  bool use_edges = true;

  void validate() const;
};

class TimeResBlockImpl : public torch::nn::Module {
 public:
  TimeResBlockImpl(int64_t in, int64_t out, int64_t time_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear time_{nullptr};
};
TORCH_MODULE(TimeResBlock);

/// Spatial features attend to prompt tokens; residual.
class CrossAttentionBlockImpl : public torch::nn::Module {
 public:
  CrossAttentionBlockImpl(int64_t channels, int64_t heads, int64_t context_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::LayerNorm norm_ctx_{nullptr};
  nn::Attention attn_{nullptr};
};
TORCH_MODULE(CrossAttentionBlock);

/// 3x3 conv over (x_t, cond) -> concat P_E -> 1x1 fusion.
class EdgeFusionImpl : public torch::nn::Module {
 public:
  EdgeFusionImpl(int64_t in_channels, int64_t width, int64_t edge_channels);
  /// p_e undefined: edge branch ablated (fusion restricted to the shallow channels).
  torch::Tensor forward(const torch::Tensor& inputs, const torch::Tensor& p_e);
  torch::nn::Conv2d& fuse() { return fuse_; }

 private:
  int64_t width_;
  torch::nn::Conv2d shallow_{nullptr}, fuse_{nullptr};
};
TORCH_MODULE(EdgeFusion);

/// Conditional U-Net predicting x0 as cond + zero-initialized residual head.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserConfig& config = {});
  /// x_t, cond: B x 3 x H x W; t: int64 B; p_p: B x N x D_p tokens; p_e: B x C_e x H x W or undefined.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t,
                        const torch::Tensor& p_p, const torch::Tensor& p_e, const torch::Tensor& raw_lq = {});

  EdgeFusion& fusion() { return fusion_; }
  CrossAttentionBlock& lowest_attention() { return mid_attn_; }
  const DenoiserConfig& config() const { return config_; }

 private:
  DenoiserConfig config_;
  EdgeFusion fusion_{nullptr};
  torch::nn::Linear time1_{nullptr}, time2_{nullptr};
  std::vector<TimeResBlock> enc_, dec_;
  std::vector<CrossAttentionBlock> enc_attn_, dec_attn_;  // null where the level has none
  std::vector<torch::nn::Conv2d> down_, up_;
  TimeResBlock mid_{nullptr};
  CrossAttentionBlock mid_attn_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Fine-stage network: edge embedding, defocus confidence and the denoiser.
class PDiffusionImpl : public torch::nn::Module {
 public:
  explicit PDiffusionImpl(const DenoiserConfig& config = {});
  /// Confidence-weighted edge prompt from a B x 1 x H x W edge mask and B x C_d x h x w defocus prompt.
  torch::Tensor edge_prompt(const torch::Tensor& edges, const torch::Tensor& p_d);
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t,
                        const torch::Tensor& p_p, const torch::Tensor& edges, const torch::Tensor& p_d,
                        const torch::Tensor& raw_lq = {});

  EdgeEmbed& embed() { return embed_; }
  DefocusConfidence& confidence() { return confidence_; }
  Denoiser& denoiser() { return denoiser_; }

 private:
  EdgeEmbed embed_{nullptr};
  DefocusConfidence confidence_{nullptr};
  Denoiser denoiser_{nullptr};
};
TORCH_MODULE(PDiffusion);

/// x0 predictor closed over prompts: (x_t, t per item) -> x0_hat.
using DenoiseFn = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

/// Per-item w_t-weighted MSE with fixed steps and noise (w_t = 1 when weights is empty).
torch::Tensor diffusion_loss(const DenoiseFn& f, const torch::Tensor& hq, const torch::Tensor& cond,
                             const torch::Tensor& t, const torch::Tensor& noise, const DiffusionSchedule& sched,
                             const std::vector<double>& weights = {});
/// Draws t ~ U{1..T} and standard noise from `gen`.
torch::Tensor diffusion_loss(const DenoiseFn& f, const torch::Tensor& hq, const torch::Tensor& cond,
                             const DiffusionSchedule& sched, at::Generator& gen);

/// Optional per-step observer for debugging: (t, x_{t-1}).
using SampleObserver = std::function<void(int64_t t, const torch::Tensor& x_prev)>;

/// Reverse chain from x_T = cond + kappa sqrt(eta_T) noise; returns clip(x_0, 0, 1).
torch::Tensor sample(const DenoiseFn& f, const torch::Tensor& cond, const DiffusionSchedule& sched, uint64_t seed,
                     const SampleObserver& observer = {});

struct PDiffusionSample {
  torch::Tensor cond;   // 3 x H x W, coarse output (or degraded input)
  torch::Tensor hq;     // 3 x H x W
  torch::Tensor lq;     // 3 x H x W, raw degraded input
  torch::Tensor p_p;    // N x D_p
  torch::Tensor p_d;    // C_d x h x w
  torch::Tensor edges;  // 1 x H x W
};

struct PDiffusionTrainConfig {
  DenoiserConfig net;
  int64_t T = 4;
  double kappa = 2.0;
  double eta1 = 0.04;
  int64_t steps = 100000;
  int64_t warmup = 10000;
  int64_t batch_size = 8;
  double lr = 1e-4;

  void validate() const;
};

double diffusion_lr(int64_t step, const PDiffusionTrainConfig& config);

struct PDiffusionTrainResult {
  PDiffusion model{nullptr};
  std::vector<double> step_loss;
  std::string optimizer_state;
  int64_t steps = 0;  // total optimizer steps taken, including resumed ones
};

struct PDiffusionResume {
  PDiffusion model{nullptr};
  std::string optimizer_state;
  int64_t step = 0;
};

using DiffusionStepCallback = std::function<bool(int64_t step, double loss)>;

/// Runs steps [start, stop) of the warmup+cosine schedule (stop = config.steps when negative).
/// Batches, steps and noise derive from (seed, step), so resuming reproduces an uninterrupted run.
PDiffusionTrainResult train_pdiffusion(const std::vector<PDiffusionSample>& data, const PDiffusionTrainConfig& config,
                                       uint64_t seed, const PDiffusionResume* resume = nullptr, int64_t stop = -1,
                                       const DiffusionStepCallback& on_step = {});

/// Denoiser closure over one batch of prompts, eval mode.
DenoiseFn bind_denoiser(PDiffusion& model, const torch::Tensor& cond, const torch::Tensor& p_p,
                        const torch::Tensor& edges, const torch::Tensor& p_d, const torch::Tensor& raw_lq = {});

}  // namespace mop
