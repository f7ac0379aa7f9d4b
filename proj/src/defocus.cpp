#include "mop/defocus.hpp"

#include <algorithm>
#include <cmath>

#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

namespace F = torch::nn::functional;

namespace mop {

DefocusTargets parse_defocus_targets(const std::string& s) {
  if (s == "ctf+distance" || s == "both") return DefocusTargets::kBoth;
  if (s == "distance") return DefocusTargets::kDistance;
  if (s == "ctf") return DefocusTargets::kCtf;
  throw ParameterError("unknown defocus target set '" + s + "' (expected ctf+distance, distance or ctf)");
}

std::string to_string(DefocusTargets t) {
  switch (t) {
    case DefocusTargets::kBoth: return "ctf+distance";
    case DefocusTargets::kDistance: return "distance";
    case DefocusTargets::kCtf: return "ctf";
  }
  return "ctf+distance";
}

double DefocusEstimate::c_reported() const { return std::clamp(c_hat, 1e-6, 1.0); }

ResidualBlockImpl::ResidualBlockImpl(int64_t in, int64_t out, int64_t stride) {
  using torch::nn::Conv2dOptions;
  conv1_ = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
  conv2_ = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(out, out, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
  skip_ = register_module("skip", torch::nn::Conv2d(Conv2dOptions(in, out, 1).stride(stride)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(bn1_(conv1_(x)));
  return torch::relu(bn2_(conv2_(h)) + skip_(x));
}

DefocusEstimatorImpl::DefocusEstimatorImpl(std::vector<int64_t> widths) : widths_(std::move(widths)) {
  if (widths_.size() != 4) throw ParameterError("defocus estimator needs exactly 4 stage widths (stride 32)");
  stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, widths_[0], 3).stride(2).padding(1)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(widths_[0]));
  stages_ = register_module("stages", torch::nn::ModuleList());
  int64_t in = widths_[0];
  for (auto w : widths_) {
    stages_->push_back(ResidualBlock(in, w, 2));
    in = w;
  }
  head_ = register_module("head", torch::nn::Linear(in, 2));
}

EstimatorOutput DefocusEstimatorImpl::forward(const torch::Tensor& x) {
  if (x.size(2) % kStride != 0 || x.size(3) % kStride != 0) {
    throw DimensionError("defocus estimator input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                         " is not divisible by 32");
  }
  auto h = torch::relu(stem_bn_(stem_(x)));
  for (auto& stage : *stages_) h = stage->as<ResidualBlock>()->forward(h);
  auto pooled = h.mean({2, 3});
  return {h, head_(pooled)};
}

std::pair<DefocusEstimate, DefocusPrompt> estimate(DefocusEstimator& model, const ImagePatch& image,
                                                   bool apply_stain_norm, const StainStats& stain_reference) {
  const auto input = apply_stain_norm ? stain_transfer(image, stain_reference) : image;
  auto out = estimate_batch(model, input.chw().unsqueeze(0));
  DefocusEstimate est{out.pred[0][0].item<double>(), out.pred[0][1].item<double>()};
  DefocusPrompt prompt{out.features[0].contiguous(), {image.height(), image.width()}};
  return {est, prompt};
}

EstimatorOutput estimate_batch(DefocusEstimator& model, const torch::Tensor& images) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  auto out = model->forward(images.to(torch::kFloat32));
  if (was_training) model->train();
  return out;
}

double defocus_loss(const DefocusEstimate& pred, const DefocusLabel& gt) {
  return std::abs(gt.d - pred.d_hat) + std::abs(gt.c - pred.c_hat);
}

double defocus_loss(std::span<const DefocusEstimate> pred, std::span<const DefocusLabel> gt) {
  if (pred.size() != gt.size()) throw DimensionError("defocus_loss: batch sizes differ");
  if (pred.empty()) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) sum += defocus_loss(pred[i], gt[i]);
  return sum / static_cast<double>(pred.size());
}

torch::Tensor defocus_loss(const torch::Tensor& pred, const torch::Tensor& target, DefocusTargets targets) {
  auto err = (pred - target).abs();
  switch (targets) {
    case DefocusTargets::kDistance: return err.select(1, 0).mean();
    case DefocusTargets::kCtf: return err.select(1, 1).mean();
    case DefocusTargets::kBoth: break;
  }
  return err.sum(1).mean();
}

torch::Tensor defocus_heatmap(const DefocusPrompt& prompt, const torch::Tensor& head_weight,
                              const torch::Tensor& head_bias) {
  const auto channels = prompt.features.size(0);
  auto w = head_weight.reshape({-1});
  if (w.size(0) != channels) {
    throw DimensionError("defocus_heatmap: head expects " + std::to_string(w.size(0)) + " channels, prompt has " +
                         std::to_string(channels));
  }
  auto feat = prompt.features.to(torch::kFloat32);
  auto dist = torch::einsum("chw,c->hw", {feat, w.to(torch::kFloat32)}) + head_bias.reshape({}).to(torch::kFloat32);
  auto up = F::interpolate(dist.unsqueeze(0).unsqueeze(0),
                           F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{prompt.source_hw.first, prompt.source_hw.second})
                               .mode(torch::kBilinear)
                               .align_corners(false));
  return up.squeeze(0).squeeze(0).abs();
}

torch::Tensor defocus_heatmap(const DefocusPrompt& prompt, DefocusEstimator& model) {
  torch::NoGradGuard guard;
  return defocus_heatmap(prompt, model->head()->weight[0], model->head()->bias[0]);
}

std::vector<DefocusSample> defocus_samples(const SyntheticStack& stack, int64_t patch) {
  std::vector<DefocusSample> out;
  for (size_t k = 0; k < stack.stack.planes.size(); ++k) {
    const auto& plane = stack.stack.planes[k].patch;
    for (const auto& [idx, tile] : tile_image(plane, patch, patch)) {
      out.push_back({tile.chw(), stack.labels[k].mean_over(idx.row0, idx.col0, patch, patch)});
    }
  }
  return out;
}

DefocusTrainResult train_defocus(const std::vector<DefocusSample>& samples, const DefocusConfig& config,
                                 uint64_t seed, const EpochCallback& on_epoch) {
  if (samples.empty()) throw ValidationError("train_defocus: empty dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw ParameterError("train_defocus: invalid batch size or epochs");
  torch::manual_seed(seed);
  DefocusTrainResult result;
  result.model = DefocusEstimator(config.widths);
  auto& model = result.model;
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.lr));
  torch::optim::StepLR sched(opt, 1, config.gamma);

  const auto n = static_cast<int64_t>(samples.size());
  auto targets = torch::empty({n, 2}, torch::kFloat32);
  for (int64_t i = 0; i < n; ++i) {
    targets[i][0] = samples[i].label.d;
    targets[i][1] = samples[i].label.c;
  }
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    model->train();
    auto perm = torch::randperm(n, make_generator(derive_seed(seed, {1, static_cast<uint64_t>(epoch)})));
    auto order = perm.accessor<int64_t, 1>();
    double total = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < n; start += config.batch_size) {
      const auto end = std::min(n, start + config.batch_size);
      std::vector<torch::Tensor> imgs;
      std::vector<int64_t> idx;
      for (int64_t j = start; j < end; ++j) {
        const auto i = order[j];
        idx.push_back(i);
        if (config.stain_augment) {
          ImagePatch p(samples[i].image.permute({1, 2, 0}).contiguous());
          auto aug = stain_augment(p, derive_seed(seed, {2, static_cast<uint64_t>(epoch), static_cast<uint64_t>(i)}));
          imgs.push_back(aug.chw());
        } else {
          imgs.push_back(samples[i].image);
        }
      }
      auto batch = torch::stack(imgs);
      auto tgt = targets.index_select(0, torch::tensor(idx, torch::kLong));
      auto out = model->forward(batch);
      auto loss = defocus_loss(out.pred, tgt, config.targets);
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

DefocusEvaluation evaluate_defocus(DefocusEstimator& model, const std::vector<DefocusSample>& samples) {
  DefocusEvaluation ev;
  if (samples.empty()) return ev;
  constexpr int64_t kChunk = 64;
  int64_t hits = 0;
  for (size_t start = 0; start < samples.size(); start += kChunk) {
    const auto end = std::min(samples.size(), start + kChunk);
    std::vector<torch::Tensor> imgs;
    for (auto i = start; i < end; ++i) imgs.push_back(samples[i].image);
    auto pred = estimate_batch(model, torch::stack(imgs)).pred;
    auto acc = pred.accessor<float, 2>();
    for (auto i = start; i < end; ++i) {
      const auto& gt = samples[i].label;
      const double d_hat = acc[static_cast<int64_t>(i - start)][0];
      const double c_hat = acc[static_cast<int64_t>(i - start)][1];
      ev.mae_distance += std::abs(d_hat - gt.d);
      ev.mae_ctf += std::abs(std::clamp(c_hat, 1e-6, 1.0) - gt.c);
      if (std::lround(d_hat) == std::lround(gt.d)) ++hits;
    }
  }
  const auto n = static_cast<double>(samples.size());
  ev.mae_distance /= n;
  ev.mae_ctf /= n;
  ev.z_accuracy = static_cast<double>(hits) / n;
  return ev;
}

}  // namespace mop
