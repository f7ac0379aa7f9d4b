#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mop/defocus.hpp"
#include "mop/encoders.hpp"
#include "mop/layers.hpp"

namespace mop {

struct PromptRestorerConfig {
  int64_t blocks = 4;
  int64_t heads = 4;
  int64_t dim = 192;          // D_p
  int64_t defocus_dim = 128;  // channels of the defocus prompt before projection
  int64_t epochs = 500;
  int64_t batch_size = 16;
  double lr = 1e-4;
  double gamma = 0.98;

  void validate() const;
};

/// Transformer mapping (P_LP, P_D) -> P_P. Blocks: self-attention on the pathology
/// tokens, cross-attention onto projected defocus tokens, feed-forward.
class PromptRestorerImpl : public torch::nn::Module {
 public:
  explicit PromptRestorerImpl(const PromptRestorerConfig& config = {});

  /// p_lp: B x N x D_p, p_d: B x C_d x h x w -> B x N x D_p
  torch::Tensor forward(const torch::Tensor& p_lp, const torch::Tensor& p_d);
  /// Flattened and projected defocus tokens with position code, B x (h*w) x D_p.
  torch::Tensor defocus_tokens(const torch::Tensor& p_d);

  nn::TransformerBlock& block(size_t i) { return blocks_[i]; }
  const PromptRestorerConfig& config() const { return config_; }

 private:
  PromptRestorerConfig config_;
  torch::nn::Linear proj_{nullptr};
  std::vector<nn::TransformerBlock> blocks_;
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(PromptRestorer);

PathologyPrompt restore_prompt(PromptRestorer& model, const PathologyPrompt& p_lp, const DefocusPrompt& p_d);

/// Mean |P_P - P_HP| over all token entries.
double prompt_loss(const PathologyPrompt& p_p, const PathologyPrompt& p_hp);

struct PromptDistance {
  double mse_lp = 0.0;
  double mse_p = 0.0;
};
PromptDistance prompt_distance_report(const PathologyPrompt& p_lp, const PathologyPrompt& p_p,
                                      const PathologyPrompt& p_hp);

struct PromptTriple {
  torch::Tensor p_lp;  // N x D_p
  torch::Tensor p_d;   // C_d x h x w
  torch::Tensor p_hp;  // N x D_p
};

struct PromptTrainResult {
  PromptRestorer model{nullptr};
  std::vector<double> epoch_loss;
  std::string optimizer_state;
  int64_t steps = 0;
};

PromptTrainResult train_prompt_restorer(const std::vector<PromptTriple>& data, const PromptRestorerConfig& config,
                                        uint64_t seed, const EpochCallback& on_epoch = {});

}  // namespace mop
