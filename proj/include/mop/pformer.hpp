#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mop/encoders.hpp"
#include "mop/imgio.hpp"
#include "mop/layers.hpp"

namespace mop {

enum class LrSchedule { kStep, kCosine };
LrSchedule parse_lr_schedule(const std::string& s);
std::string to_string(LrSchedule s);

struct PFormerConfig {
  std::vector<int64_t> widths{48, 96, 192, 384};
  std::vector<int64_t> blocks{2, 3, 3, 4};
  std::vector<int64_t> heads{1, 2, 4, 8};
  int64_t n_experts = 3;
  int64_t prompt_dim = 192;
  double ffn_expansion = 2.66;
  int64_t epochs = 300;
  int64_t batch_size = 8;
  double lr = 1e-4;
  double gamma = 0.98;            // per-epoch decay for kStep
  LrSchedule schedule = LrSchedule::kStep;
  int64_t max_steps = 0;          // > 0: stop after this many optimizer steps

  int64_t levels() const { return static_cast<int64_t>(widths.size()); }
  void validate() const;
};

/// softmax(Linear(concat(GAP(F), p))) for B x C x H x W features and B x D_p pooled prompts.
torch::Tensor router_weights(torch::nn::Linear& router, const torch::Tensor& features, const torch::Tensor& pooled);

/// F_o = E_0 + GeLU(sum_i w_i E_i). e0: B x C x H x W, experts: n tensors shaped like e0, weights: B x n.
torch::Tensor moe_combine(const torch::Tensor& e0, const std::vector<torch::Tensor>& experts,
                          const torch::Tensor& weights);

/// Restormer transposed (channel) attention.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  ChannelAttentionImpl(int64_t channels, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int64_t heads_;
  torch::Tensor temperature_;
  torch::nn::Conv2d qkv_{nullptr}, qkv_dw_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(ChannelAttention);

struct MoETrace {
  torch::Tensor weights;  // B x n
  torch::Tensor hidden;   // input to the experts
  torch::Tensor e0;
  std::vector<torch::Tensor> experts;
  torch::Tensor mixed;    // F_o
};

/// Gated-Dconv feed-forward with the depth-wise conv replaced by a routed expert mixture.
class MoEGDFNImpl : public torch::nn::Module {
 public:
  MoEGDFNImpl(int64_t channels, int64_t prompt_dim, int64_t n_experts, double expansion);
  /// x: normalized block input, gap_source: features the router pools (pre-norm input).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& gap_source, const torch::Tensor& pooled,
                        MoETrace* trace = nullptr);

  torch::nn::Linear& router() { return router_; }
  int64_t n_experts() const { return static_cast<int64_t>(experts_.size()); }
  /// Router weights of the most recent forward, detached (B x n).
  const torch::Tensor& last_weights() const { return last_weights_; }

 private:
  torch::nn::Conv2d project_in_{nullptr}, e0_{nullptr}, project_out_{nullptr};
  std::vector<torch::nn::Conv2d> experts_;
  torch::nn::Linear router_{nullptr};
  torch::Tensor last_weights_;
};
TORCH_MODULE(MoEGDFN);

class PFormerBlockImpl : public torch::nn::Module {
 public:
  PFormerBlockImpl(int64_t channels, int64_t heads, int64_t prompt_dim, int64_t n_experts, double expansion);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& pooled);
  MoEGDFN& ffn() { return ffn_; }

 private:
  nn::ChannelLayerNorm norm1_{nullptr}, norm2_{nullptr};
  ChannelAttention attn_{nullptr};
  MoEGDFN ffn_{nullptr};
};
TORCH_MODULE(PFormerBlock);

/// U-shaped transformer, global residual with a zero-initialized output conv.
class PFormerImpl : public torch::nn::Module {
 public:
  explicit PFormerImpl(const PFormerConfig& config = {});
  /// B x 3 x H x W, B x D_p -> unclipped B x 3 x H x W.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& pooled);

  std::vector<PFormerBlock> all_blocks() const;
  const PFormerConfig& config() const { return config_; }

 private:
  PFormerConfig config_;
  torch::nn::Conv2d embed_{nullptr}, out_{nullptr};
  std::vector<std::vector<PFormerBlock>> encoder_, decoder_;
  std::vector<torch::nn::Sequential> down_, up_;
  std::vector<torch::nn::Conv2d> reduce_;
};
TORCH_MODULE(PFormer);

/// clip(i_lq + residual) for one patch (eval mode, no grad).
ImagePatch pformer_forward(PFormer& model, const ImagePatch& i_lq, const PathologyPrompt& p_p);
/// Batched inference, B x 3 x H x W and B x D_p -> clipped output.
torch::Tensor pformer_forward_batch(PFormer& model, const torch::Tensor& i_lq, const torch::Tensor& pooled);

struct PFormerSample {
  torch::Tensor lq;      // 3 x H x W
  torch::Tensor hq;      // 3 x H x W
  torch::Tensor pooled;  // D_p
};

struct PFormerTrainResult {
  PFormer model{nullptr};
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
  /// [epoch][block][expert], mean router weight; rows sum to 1.
  std::vector<std::vector<std::vector<double>>> utilization;
  std::string optimizer_state;
  int64_t steps = 0;
};

/// Called after each optimizer step; returning false stops training.
using PFormerStepCallback = std::function<bool(int64_t step, double loss, PFormer& model)>;

PFormerTrainResult train_pformer(const std::vector<PFormerSample>& data, const PFormerConfig& config, uint64_t seed,
                                 const PFormerStepCallback& on_step = {});

}  // namespace mop
