#include "mop/layers.hpp"

#include <cmath>

#include "mop/errors.hpp"

namespace mop::nn {

torch::Tensor sincos_2d(int64_t h, int64_t w, int64_t dim, torch::Dtype dtype) {
  if (dim % 4 != 0) throw DimensionError("sincos_2d: dim must be divisible by 4");
  const auto quarter = dim / 4;
  auto omega = 1.0 / torch::pow(10000.0, torch::arange(quarter, torch::kFloat64) / static_cast<double>(quarter));
  auto ys = torch::arange(h, torch::kFloat64).repeat_interleave(w).unsqueeze(1) * omega.unsqueeze(0);
  auto xs = torch::arange(w, torch::kFloat64).repeat({h}).unsqueeze(1) * omega.unsqueeze(0);
  return torch::cat({xs.sin(), xs.cos(), ys.sin(), ys.cos()}, 1).to(dtype);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({args.cos(), args.sin()}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, torch::kFloat64)}, 1);
  return emb;
}

ChannelLayerNormImpl::ChannelLayerNormImpl(int64_t channels) {
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
}

torch::Tensor ChannelLayerNormImpl::forward(const torch::Tensor& x) {
  return norm_(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads, int64_t context_dim) : heads_(heads) {
  if (heads < 1 || dim % heads != 0) {
    throw DimensionError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  head_dim_ = dim / heads;
  const auto cdim = context_dim > 0 ? context_dim : dim;
  q_ = register_module("q", torch::nn::Linear(dim, dim));
  k_ = register_module("k", torch::nn::Linear(cdim, dim));
  v_ = register_module("v", torch::nn::Linear(cdim, dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0);
  const auto n = x.size(1);
  const auto m = context.size(1);
  auto q = q_(x).view({b, n, heads_, head_dim_}).transpose(1, 2);
  auto k = k_(context).view({b, m, heads_, head_dim_}).transpose(1, 2);
  auto v = v_(context).view({b, m, heads_, head_dim_}).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(head_dim_)), -1);
  auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, heads_ * head_dim_});
  return out_(y);
}

TransformerBlockImpl::TransformerBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio, int64_t context_dim) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  self_attn_ = register_module("self_attn", Attention(dim, heads));
  if (context_dim > 0) {
    norm_ctx_ = register_module("norm_ctx", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_attn_ = register_module("cross_attn", Attention(dim, heads, context_dim));
  }
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, dim * mlp_ratio));
  fc2_ = register_module("fc2", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  auto n = norm1_(x);
  auto h = x + self_attn_->forward(n, n);
  if (cross_attn_) {
    if (!context.defined()) throw DimensionError("transformer block: cross-attention needs a context");
    h = h + cross_attn_->forward(norm_ctx_(h), context);
  }
  return h + fc2_(gelu_exact(fc1_(norm2_(h))));
}

void zero_init(torch::nn::Linear& layer) {
  torch::NoGradGuard guard;
  layer->weight.zero_();
  if (layer->bias.defined()) layer->bias.zero_();
}

void zero_init(torch::nn::Conv2d& layer) {
  torch::NoGradGuard guard;
  layer->weight.zero_();
  if (layer->bias.defined()) layer->bias.zero_();
}

}  // namespace mop::nn
