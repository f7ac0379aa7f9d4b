#include "mop/pformer.hpp"

#include <cmath>

#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

namespace F = torch::nn::functional;

namespace mop {

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "step") return LrSchedule::kStep;
  if (s == "cosine") return LrSchedule::kCosine;
  throw ParameterError("unknown lr schedule '" + s + "' (expected step or cosine)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::kStep ? "step" : "cosine"; }

void PFormerConfig::validate() const {
  if (widths.empty() || widths.size() != blocks.size() || widths.size() != heads.size()) {
    throw ParameterError("pformer: widths, blocks and heads need one entry per level");
  }
  for (size_t i = 0; i < widths.size(); ++i) {
    if (heads[i] < 1 || widths[i] % heads[i] != 0) {
      throw ParameterError("pformer: width " + std::to_string(widths[i]) + " not divisible by " +
                           std::to_string(heads[i]) + " heads");
    }
    if (blocks[i] < 1) throw ParameterError("pformer: every level needs at least one block");
    if (i + 1 < widths.size() && widths[i + 1] != 2 * widths[i]) {
      throw ParameterError("pformer: widths must double per level (pixel-shuffle resampling)");
    }
  }
  if (n_experts < 1) throw ParameterError("pformer: n_experts must be >= 1");
  if (prompt_dim < 1 || ffn_expansion <= 0.0) throw ParameterError("pformer: invalid prompt_dim or ffn_expansion");
  if (batch_size < 1 || epochs < 0 || max_steps < 0) throw ParameterError("pformer: invalid training counts");
}

torch::Tensor router_weights(torch::nn::Linear& router, const torch::Tensor& features, const torch::Tensor& pooled) {
  const auto expected = router->weight.size(1);
  if (features.dim() != 4 || pooled.dim() != 2 || features.size(1) + pooled.size(1) != expected ||
      features.size(0) != pooled.size(0)) {
    throw DimensionError("router: GAP(F) " + c10::str(features.sizes()) + " and prompt " + c10::str(pooled.sizes()) +
                         " do not concatenate to " + std::to_string(expected) + " features");
  }
  return torch::softmax(router(torch::cat({features.mean({2, 3}), pooled}, 1)), 1);
}

torch::Tensor moe_combine(const torch::Tensor& e0, const std::vector<torch::Tensor>& experts,
                          const torch::Tensor& weights) {
  if (weights.size(1) != static_cast<int64_t>(experts.size())) {
    throw DimensionError("moe_combine: " + std::to_string(weights.size(1)) + " weights for " +
                         std::to_string(experts.size()) + " experts");
  }
  auto mix = torch::zeros_like(e0);
  for (size_t i = 0; i < experts.size(); ++i) {
    mix = mix + weights.select(1, static_cast<int64_t>(i)).view({-1, 1, 1, 1}) * experts[i];
  }
  return e0 + nn::gelu_exact(mix);
}

ChannelAttentionImpl::ChannelAttentionImpl(int64_t channels, int64_t heads) : heads_(heads) {
  using torch::nn::Conv2dOptions;
  temperature_ = register_parameter("temperature", torch::ones({heads, 1, 1}));
  qkv_ = register_module("qkv", torch::nn::Conv2d(Conv2dOptions(channels, 3 * channels, 1)));
  qkv_dw_ = register_module(
      "qkv_dw", torch::nn::Conv2d(Conv2dOptions(3 * channels, 3 * channels, 3).padding(1).groups(3 * channels)));
  proj_ = register_module("proj", torch::nn::Conv2d(Conv2dOptions(channels, channels, 1)));
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto qkv = qkv_dw_(qkv_(x)).chunk(3, 1);
  auto shape = std::vector<int64_t>{b, heads_, c / heads_, h * w};
  auto norm = F::NormalizeFuncOptions().dim(-1);
  auto q = F::normalize(qkv[0].reshape(shape), norm);
  auto k = F::normalize(qkv[1].reshape(shape), norm);
  auto v = qkv[2].reshape(shape);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) * temperature_, -1);
  return proj_(torch::matmul(attn, v).reshape({b, c, h, w}));
}

MoEGDFNImpl::MoEGDFNImpl(int64_t channels, int64_t prompt_dim, int64_t n_experts, double expansion) {
  using torch::nn::Conv2dOptions;
  const auto hidden = static_cast<int64_t>(static_cast<double>(channels) * expansion);
  const auto h2 = 2 * hidden;
  project_in_ = register_module("project_in", torch::nn::Conv2d(Conv2dOptions(channels, h2, 1)));
  e0_ = register_module("e0", torch::nn::Conv2d(Conv2dOptions(h2, h2, 3).padding(1).groups(h2)));
  for (int64_t i = 0; i < n_experts; ++i) {
    experts_.push_back(register_module("expert" + std::to_string(i + 1),
                                       torch::nn::Conv2d(Conv2dOptions(h2, h2, 3).padding(1).groups(h2))));
  }
  router_ = register_module("router", torch::nn::Linear(channels + prompt_dim, n_experts));
  project_out_ = register_module("project_out", torch::nn::Conv2d(Conv2dOptions(hidden, channels, 1)));
}

torch::Tensor MoEGDFNImpl::forward(const torch::Tensor& x, const torch::Tensor& gap_source,
                                   const torch::Tensor& pooled, MoETrace* trace) {
  auto w = router_weights(router_, gap_source, pooled);
  last_weights_ = w.detach();
  auto h = project_in_(x);
  auto e0 = e0_(h);
  std::vector<torch::Tensor> outs;
  outs.reserve(experts_.size());
  for (auto& e : experts_) outs.push_back(e(h));
  auto mixed = moe_combine(e0, outs, w);
  if (trace) *trace = {w, h, e0, outs, mixed};
  auto parts = mixed.chunk(2, 1);
  return project_out_(nn::gelu_exact(parts[0]) * parts[1]);
}

PFormerBlockImpl::PFormerBlockImpl(int64_t channels, int64_t heads, int64_t prompt_dim, int64_t n_experts,
                                   double expansion) {
  norm1_ = register_module("norm1", nn::ChannelLayerNorm(channels));
  attn_ = register_module("attn", ChannelAttention(channels, heads));
  norm2_ = register_module("norm2", nn::ChannelLayerNorm(channels));
  ffn_ = register_module("ffn", MoEGDFN(channels, prompt_dim, n_experts, expansion));
}

torch::Tensor PFormerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& pooled) {
  // The router pools the block input before the first normalization.
  auto y = x + attn_(norm1_(x));
  return y + ffn_(norm2_(y), x, pooled);
}

PFormerImpl::PFormerImpl(const PFormerConfig& config) : config_(config) {
  config_.validate();
  using torch::nn::Conv2dOptions;
  const auto& wd = config_.widths;
  const auto levels = config_.levels();
  auto make_block = [&](int64_t lvl) {
    return PFormerBlock(wd[lvl], config_.heads[lvl], config_.prompt_dim, config_.n_experts, config_.ffn_expansion);
  };
  embed_ = register_module("embed", torch::nn::Conv2d(Conv2dOptions(3, wd[0], 3).padding(1)));
  encoder_.resize(levels);
  for (int64_t l = 0; l < levels; ++l) {
    for (int64_t b = 0; b < config_.blocks[l]; ++b) {
      encoder_[l].push_back(register_module("enc" + std::to_string(l) + "_" + std::to_string(b), make_block(l)));
    }
  }
  decoder_.resize(levels - 1);
  for (int64_t l = 0; l + 1 < levels; ++l) {
    down_.push_back(register_module(
        "down" + std::to_string(l),
        torch::nn::Sequential(torch::nn::Conv2d(Conv2dOptions(wd[l], wd[l] / 2, 3).padding(1).bias(false)),
                              torch::nn::PixelUnshuffle(2))));
    up_.push_back(register_module(
        "up" + std::to_string(l),
        torch::nn::Sequential(torch::nn::Conv2d(Conv2dOptions(wd[l + 1], wd[l + 1] * 2, 3).padding(1).bias(false)),
                              torch::nn::PixelShuffle(2))));
    reduce_.push_back(
        register_module("reduce" + std::to_string(l), torch::nn::Conv2d(Conv2dOptions(wd[l] * 2, wd[l], 1))));
    for (int64_t b = 0; b < config_.blocks[l]; ++b) {
      decoder_[l].push_back(register_module("dec" + std::to_string(l) + "_" + std::to_string(b), make_block(l)));
    }
  }
  out_ = register_module("out", torch::nn::Conv2d(Conv2dOptions(wd[0], 3, 3).padding(1)));
  nn::zero_init(out_);
}

torch::Tensor PFormerImpl::forward(const torch::Tensor& x, const torch::Tensor& pooled) {
  const int64_t factor = int64_t{1} << (config_.levels() - 1);
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw DimensionError("pformer input " + c10::str(x.sizes()) + " needs 3 channels and sides divisible by " +
                         std::to_string(factor));
  }
  if (pooled.dim() != 2 || pooled.size(0) != x.size(0) || pooled.size(1) != config_.prompt_dim) {
    throw DimensionError("pformer prompt must be B x " + std::to_string(config_.prompt_dim) + ", got " +
                         c10::str(pooled.sizes()));
  }
  auto f = embed_(x);
  std::vector<torch::Tensor> skips;
  for (size_t l = 0; l < encoder_.size(); ++l) {
    for (auto& b : encoder_[l]) f = b->forward(f, pooled);
    if (l < down_.size()) {
      skips.push_back(f);
      f = down_[l]->forward(f);
    }
  }
  for (auto l = static_cast<int64_t>(decoder_.size()) - 1; l >= 0; --l) {
    f = up_[l]->forward(f);
    f = reduce_[l](torch::cat({f, skips[l]}, 1));
    for (auto& b : decoder_[l]) f = b->forward(f, pooled);
  }
  return x + out_(f);
}

std::vector<PFormerBlock> PFormerImpl::all_blocks() const {
  std::vector<PFormerBlock> out;
  for (const auto& lvl : encoder_) out.insert(out.end(), lvl.begin(), lvl.end());
  for (const auto& lvl : decoder_) out.insert(out.end(), lvl.begin(), lvl.end());
  return out;
}

torch::Tensor pformer_forward_batch(PFormer& model, const torch::Tensor& i_lq, const torch::Tensor& pooled) {
  torch::NoGradGuard guard;
  model->eval();
  return model->forward(i_lq.to(torch::kFloat32), pooled.to(torch::kFloat32)).clamp(0.0, 1.0);
}

ImagePatch pformer_forward(PFormer& model, const ImagePatch& i_lq, const PathologyPrompt& p_p) {
  auto out = pformer_forward_batch(model, i_lq.chw().unsqueeze(0), p_p.pooled.unsqueeze(0));
  return ImagePatch::from_chw_clamped(out[0], i_lq.id());
}

PFormerTrainResult train_pformer(const std::vector<PFormerSample>& data, const PFormerConfig& config, uint64_t seed,
                                 const PFormerStepCallback& on_step) {
  if (data.empty()) throw ValidationError("train_pformer: empty dataset");
  config.validate();
  torch::manual_seed(seed);
  PFormerTrainResult result;
  result.model = PFormer(config);
  auto& model = result.model;
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.lr));

  std::vector<torch::Tensor> lq, hq, pp;
  for (const auto& s : data) {
    lq.push_back(s.lq);
    hq.push_back(s.hq);
    pp.push_back(s.pooled);
  }
  auto all_lq = torch::stack(lq).to(torch::kFloat32);
  auto all_hq = torch::stack(hq).to(torch::kFloat32);
  auto all_pp = torch::stack(pp).to(torch::kFloat32);
  const auto n = all_lq.size(0);
  const auto per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const auto total = config.max_steps > 0 ? config.max_steps : config.epochs * per_epoch;
  auto blocks = model->all_blocks();

  auto set_lr = [&](double lr) {
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
  };
  bool stop = false;
  for (int64_t epoch = 0; !stop && (config.max_steps > 0 || epoch < config.epochs); ++epoch) {
    model->train();
    if (config.schedule == LrSchedule::kStep) set_lr(config.lr * std::pow(config.gamma, static_cast<double>(epoch)));
    auto perm = torch::randperm(n, make_generator(derive_seed(seed, {31, static_cast<uint64_t>(epoch)})));
    std::vector<std::vector<double>> util(blocks.size(), std::vector<double>(config.n_experts, 0.0));
    double total_loss = 0.0;
    int64_t batches = 0, seen = 0;
    for (int64_t start = 0; start < n; start += config.batch_size) {
      if (config.schedule == LrSchedule::kCosine) {
        set_lr(config.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(result.steps) / static_cast<double>(total))));
      }
      auto idx = perm.slice(0, start, std::min(n, start + config.batch_size));
      auto pred = model->forward(all_lq.index_select(0, idx), all_pp.index_select(0, idx));
      auto loss = (pred - all_hq.index_select(0, idx)).abs().mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      for (size_t b = 0; b < blocks.size(); ++b) {
        auto w = blocks[b]->ffn()->last_weights().sum(0);
        for (int64_t e = 0; e < config.n_experts; ++e) util[b][e] += w[e].item<double>();
      }
      seen += idx.size(0);
      const double l = loss.item<double>();
      total_loss += l;
      ++batches;
      ++result.steps;
      result.step_loss.push_back(l);
      if (on_step && !on_step(result.steps, l, model)) stop = true;
      if (stop || (config.max_steps > 0 && result.steps >= config.max_steps)) {
        stop = true;
        break;
      }
    }
    for (auto& row : util) {
      for (auto& v : row) v /= static_cast<double>(seen);
    }
    result.utilization.push_back(std::move(util));
    result.epoch_loss.push_back(total_loss / static_cast<double>(batches));
  }
  model->eval();
  result.optimizer_state = serialize_optimizer(opt);
  return result;
}

}  // namespace mop
