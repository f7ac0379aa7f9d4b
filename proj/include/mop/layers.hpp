#pragma once

#include <cstdint>

#include <torch/torch.h>

// Small building blocks shared by the networks.
namespace mop::nn {

/// Exact GeLU, x * Phi(x).
inline torch::Tensor gelu_exact(const torch::Tensor& x) { return torch::gelu(x, "none"); }

/// Fixed 2-D sine/cosine position code, (h*w) x dim; dim must be divisible by 4.
torch::Tensor sincos_2d(int64_t h, int64_t w, int64_t dim, torch::Dtype dtype = torch::kFloat32);

/// Sinusoidal embedding of integer timesteps, (B) -> (B, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

/// LayerNorm over the channel axis of an NCHW tensor.
class ChannelLayerNormImpl : public torch::nn::Module {
 public:
  explicit ChannelLayerNormImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ChannelLayerNorm);

/// Multi-head scaled dot-product attention; queries from `x`, keys/values from `context`.
class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int64_t dim, int64_t heads, int64_t context_dim = -1);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

 private:
  int64_t heads_;
  int64_t head_dim_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(Attention);

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio, int64_t context_dim = 0);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context = {});

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm_ctx_{nullptr}, norm2_{nullptr};
  Attention self_attn_{nullptr}, cross_attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

void zero_init(torch::nn::Linear& layer);
void zero_init(torch::nn::Conv2d& layer);

}  // namespace mop::nn
