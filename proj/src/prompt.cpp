#include "mop/prompt.hpp"

#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

namespace mop {

void PromptRestorerConfig::validate() const {
  if (blocks < 1) throw ParameterError("prompt restorer needs at least one block");
  if (heads < 1 || dim % heads != 0) throw ParameterError("prompt restorer: D_p must be divisible by heads");
  if (dim % 4 != 0) throw ParameterError("prompt restorer: D_p must be divisible by 4 for the position code");
  if (defocus_dim < 1) throw ParameterError("prompt restorer: defocus_dim must be positive");
}

PromptRestorerImpl::PromptRestorerImpl(const PromptRestorerConfig& config) : config_(config) {
  config_.validate();
  proj_ = register_module("proj", torch::nn::Linear(config_.defocus_dim, config_.dim));
  for (int64_t i = 0; i < config_.blocks; ++i) {
    blocks_.push_back(register_module("block" + std::to_string(i),
                                      nn::TransformerBlock(config_.dim, config_.heads, 2, config_.dim)));
  }
  out_ = register_module("out", torch::nn::Linear(config_.dim, config_.dim));
  nn::zero_init(out_);
}

torch::Tensor PromptRestorerImpl::defocus_tokens(const torch::Tensor& p_d) {
  if (p_d.dim() != 4 || p_d.size(1) != config_.defocus_dim) {
    throw DimensionError("prompt restorer: defocus prompt must be B x " + std::to_string(config_.defocus_dim) +
                         " x h x w, got " + c10::str(p_d.sizes()));
  }
  const auto h = p_d.size(2), w = p_d.size(3);
  return proj_(p_d.flatten(2).transpose(1, 2)) + nn::sincos_2d(h, w, config_.dim, p_d.scalar_type());
}

torch::Tensor PromptRestorerImpl::forward(const torch::Tensor& p_lp, const torch::Tensor& p_d) {
  if (p_lp.dim() != 3 || p_lp.size(2) != config_.dim) {
    throw DimensionError("prompt restorer: P_LP must be B x N x " + std::to_string(config_.dim) + ", got " +
                         c10::str(p_lp.sizes()));
  }
  if (p_d.size(0) != p_lp.size(0)) throw DimensionError("prompt restorer: batch sizes of P_LP and P_D differ");
  auto ctx = defocus_tokens(p_d);
  auto x = p_lp;
  for (auto& b : blocks_) x = b->forward(x, ctx);
  return p_lp + out_(x);
}

PathologyPrompt restore_prompt(PromptRestorer& model, const PathologyPrompt& p_lp, const DefocusPrompt& p_d) {
  torch::NoGradGuard guard;
  model->eval();
  auto out = model->forward(p_lp.tokens.unsqueeze(0), p_d.features.unsqueeze(0));
  return PathologyPrompt::from_tokens(out[0]);
}

namespace {
void same_shape(const PathologyPrompt& a, const PathologyPrompt& b, const char* what) {
  if (a.tokens.sizes() != b.tokens.sizes()) {
    throw DimensionError(std::string(what) + ": prompt shapes " + c10::str(a.tokens.sizes()) + " and " +
                         c10::str(b.tokens.sizes()) + " differ");
  }
}
}  // namespace

double prompt_loss(const PathologyPrompt& p_p, const PathologyPrompt& p_hp) {
  same_shape(p_p, p_hp, "prompt_loss");
  return (p_p.tokens.to(torch::kFloat64) - p_hp.tokens.to(torch::kFloat64)).abs().mean().item<double>();
}

PromptDistance prompt_distance_report(const PathologyPrompt& p_lp, const PathologyPrompt& p_p,
                                      const PathologyPrompt& p_hp) {
  same_shape(p_lp, p_hp, "prompt_distance_report");
  same_shape(p_p, p_hp, "prompt_distance_report");
  auto hp = p_hp.tokens.to(torch::kFloat64);
  return {(p_lp.tokens.to(torch::kFloat64) - hp).pow(2).mean().item<double>(),
          (p_p.tokens.to(torch::kFloat64) - hp).pow(2).mean().item<double>()};
}

PromptTrainResult train_prompt_restorer(const std::vector<PromptTriple>& data, const PromptRestorerConfig& config,
                                        uint64_t seed, const EpochCallback& on_epoch) {
  if (data.empty()) throw ValidationError("train_prompt_restorer: empty dataset");
  config.validate();
  torch::manual_seed(seed);
  PromptTrainResult result;
  result.model = PromptRestorer(config);
  auto& model = result.model;
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.lr));
  torch::optim::StepLR sched(opt, 1, config.gamma);

  std::vector<torch::Tensor> lp, pd, hp;
  for (const auto& t : data) {
    lp.push_back(t.p_lp);
    pd.push_back(t.p_d);
    hp.push_back(t.p_hp);
  }
  auto all_lp = torch::stack(lp).to(torch::kFloat32);
  auto all_pd = torch::stack(pd).to(torch::kFloat32);
  auto all_hp = torch::stack(hp).to(torch::kFloat32);
  const auto n = all_lp.size(0);

  model->train();
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto perm = torch::randperm(n, make_generator(derive_seed(seed, {21, static_cast<uint64_t>(epoch)})));
    double total = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < n; start += config.batch_size) {
      auto idx = perm.slice(0, start, std::min(n, start + config.batch_size));
      auto pred = model->forward(all_lp.index_select(0, idx), all_pd.index_select(0, idx));
      auto loss = (pred - all_hp.index_select(0, idx)).abs().mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++batches;
      ++result.steps;
    }
    sched.step();
    const double mean_loss = total / static_cast<double>(batches);
    result.epoch_loss.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  model->eval();
  result.optimizer_state = serialize_optimizer(opt);
  return result;
}

}  // namespace mop
