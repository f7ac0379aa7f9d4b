#include "mop/diffusion.hpp"

#include <cmath>

#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

namespace F = torch::nn::functional;

namespace mop {

DiffusionSchedule make_schedule(int64_t T, double kappa, double eta1) {
  if (T < 1) throw ParameterError("diffusion schedule needs T >= 1");
  if (!(eta1 > 0.0 && eta1 < 1.0)) throw ParameterError("diffusion schedule needs 0 < eta1 < 1");
  if (!(kappa > 0.0)) throw ParameterError("diffusion schedule needs kappa > 0");
  DiffusionSchedule s;
  s.T = T;
  s.kappa = kappa;
  s.eta.assign(static_cast<size_t>(T + 1), 0.0);
  for (int64_t t = 1; t <= T; ++t) {
    s.eta[t] = T == 1 ? 1.0 : std::pow(eta1, static_cast<double>(T - t) / static_cast<double>(T - 1));
  }
  s.eta[T] = 1.0;
  for (int64_t t = 1; t <= T; ++t) s.alpha.push_back(s.eta[t] - s.eta[t - 1]);
  return s;
}

namespace {
void check_t(int64_t t, const DiffusionSchedule& sched, int64_t lo) {
  if (t < lo || t > sched.T) {
    throw ParameterError("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(sched.T) + "]");
  }
}
}  // namespace

torch::Tensor forward_marginal(const torch::Tensor& x0, const torch::Tensor& y, int64_t t, const torch::Tensor& noise,
                               const DiffusionSchedule& sched) {
  check_t(t, sched, 0);
  const double eta = sched.eta[t];
  return x0 + eta * (y - x0) + sched.kappa * std::sqrt(eta) * noise;
}

torch::Tensor forward_marginal(const torch::Tensor& x0, const torch::Tensor& y, const torch::Tensor& t,
                               const torch::Tensor& noise, const DiffusionSchedule& sched) {
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw DimensionError("forward_marginal: need one step per item");
  auto tt = t.to(torch::kLong);
  if (tt.min().item<int64_t>() < 0 || tt.max().item<int64_t>() > sched.T) {
    throw ParameterError("forward_marginal: step outside [0, T]");
  }
  auto eta_table = torch::tensor(sched.eta, torch::kFloat64).to(x0.scalar_type());
  auto eta = eta_table.index_select(0, tt).view({-1, 1, 1, 1});
  return x0 + eta * (y - x0) + sched.kappa * eta.sqrt() * noise;
}

torch::Tensor transition_step(const torch::Tensor& x_prev, const torch::Tensor& x0, const torch::Tensor& y, int64_t t,
                              const torch::Tensor& noise, const DiffusionSchedule& sched) {
  check_t(t, sched, 1);
  const double a = sched.alpha_at(t);
  return x_prev + a * (y - x0) + sched.kappa * std::sqrt(a) * noise;
}

PosteriorMoments posterior_moments(int64_t t, const DiffusionSchedule& sched) {
  check_t(t, sched, 1);
  const double eta_t = sched.eta[t];
  const double eta_prev = sched.eta[t - 1];
  const double a = sched.alpha_at(t);
  return {eta_prev / eta_t, a / eta_t, sched.kappa * sched.kappa * eta_prev * a / eta_t};
}

torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, const torch::Tensor& /*y*/,
                             int64_t t, const torch::Tensor& noise, const DiffusionSchedule& sched) {
  const auto m = posterior_moments(t, sched);
  if (t == 1) return x0_hat.clone();  // eta_0 = 0: zero variance, mean = x0_hat
  return m.mean_xt * x_t + m.mean_x0 * x0_hat + std::sqrt(m.variance) * noise;
}

void DenoiserConfig::validate() const {
  if (widths.size() < 2) throw ParameterError("denoiser needs at least two levels");
  for (auto w : widths) {
    if (w % 8 != 0 || w % heads != 0) throw ParameterError("denoiser widths must be divisible by 8 and by heads");
  }
  if (prompt_dim < 1 || defocus_dim < 1 || edge_channels < 1) throw ParameterError("denoiser: invalid prompt dims");
}

namespace {
torch::nn::GroupNorm group_norm(int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::min<int64_t>(8, channels), channels));
}
}  // namespace

TimeResBlockImpl::TimeResBlockImpl(int64_t in, int64_t out, int64_t time_dim) {
  using torch::nn::Conv2dOptions;
  norm1_ = register_module("norm1", group_norm(in));
  conv1_ = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in, out, 3).padding(1)));
  time_ = register_module("time", torch::nn::Linear(time_dim, out));
  norm2_ = register_module("norm2", group_norm(out));
  conv2_ = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip_ = register_module("skip", torch::nn::Conv2d(Conv2dOptions(in, out, 1)));
}

torch::Tensor TimeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + time_(temb).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return h + (skip_ ? skip_(x) : x);
}

CrossAttentionBlockImpl::CrossAttentionBlockImpl(int64_t channels, int64_t heads, int64_t context_dim) {
  norm_ = register_module("norm", group_norm(channels));
  norm_ctx_ = register_module("norm_ctx", torch::nn::LayerNorm(torch::nn::LayerNormOptions({context_dim})));
  attn_ = register_module("attn", nn::Attention(channels, heads, context_dim));
}

torch::Tensor CrossAttentionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto q = norm_(x).flatten(2).transpose(1, 2);
  auto y = attn_->forward(q, norm_ctx_(context));
  return x + y.transpose(1, 2).reshape({b, c, h, w});
}

EdgeFusionImpl::EdgeFusionImpl(int64_t in_channels, int64_t width, int64_t edge_channels) : width_(width) {
  using torch::nn::Conv2dOptions;
  shallow_ = register_module("shallow", torch::nn::Conv2d(Conv2dOptions(in_channels, width, 3).padding(1)));
  fuse_ = register_module("fuse", torch::nn::Conv2d(Conv2dOptions(width + edge_channels, width, 1)));
}

torch::Tensor EdgeFusionImpl::forward(const torch::Tensor& inputs, const torch::Tensor& p_e) {
  auto s = shallow_(inputs);
  if (!p_e.defined()) {
    return F::conv2d(s, fuse_->weight.slice(1, 0, width_), F::Conv2dFuncOptions().bias(fuse_->bias));
  }
  if (p_e.size(0) != s.size(0) || p_e.size(2) != s.size(2) || p_e.size(3) != s.size(3) ||
      p_e.size(1) != fuse_->weight.size(1) - width_) {
    throw DimensionError("edge fusion: edge prompt " + c10::str(p_e.sizes()) + " does not match features " +
                         c10::str(s.sizes()));
  }
  return fuse_(torch::cat({s, p_e}, 1));
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& config) : config_(config) {
  config_.validate();
  using torch::nn::Conv2dOptions;
  const auto& w = config_.widths;
  const auto levels = static_cast<int64_t>(w.size());
  const auto tdim = 4 * w[0];
  const int64_t in_ch = config_.use_raw_lq ? 9 : 6;
  fusion_ = register_module("fusion", EdgeFusion(in_ch, w[0], config_.edge_channels));
  time1_ = register_module("time1", torch::nn::Linear(w[0], tdim));
  time2_ = register_module("time2", torch::nn::Linear(tdim, tdim));
  // Cross-attention only at the two lowest-resolution levels.
  auto attn_at = [&](int64_t l) { return l >= levels - 2; };
  int64_t prev = w[0];
  for (int64_t l = 0; l < levels; ++l) {
    enc_.push_back(register_module("enc" + std::to_string(l), TimeResBlock(prev, w[l], tdim)));
    enc_attn_.push_back(attn_at(l) ? register_module("enc_attn" + std::to_string(l),
                                                     CrossAttentionBlock(w[l], config_.heads, config_.prompt_dim))
                                   : CrossAttentionBlock{nullptr});
    if (l + 1 < levels) {
      down_.push_back(register_module("down" + std::to_string(l),
                                      torch::nn::Conv2d(Conv2dOptions(w[l], w[l], 3).stride(2).padding(1))));
    }
    prev = w[l];
  }
  mid_ = register_module("mid", TimeResBlock(w.back(), w.back(), tdim));
  mid_attn_ = register_module("mid_attn", CrossAttentionBlock(w.back(), config_.heads, config_.prompt_dim));
  dec_.resize(levels, TimeResBlock{nullptr});
  dec_attn_.resize(levels, CrossAttentionBlock{nullptr});
  up_.resize(levels, torch::nn::Conv2d{nullptr});
  for (int64_t l = levels - 1; l >= 0; --l) {
    const auto from = l + 1 < levels ? w[l + 1] : w[l];
    if (l + 1 < levels) {
      up_[l] = register_module("up" + std::to_string(l), torch::nn::Conv2d(Conv2dOptions(from, w[l], 3).padding(1)));
    }
    dec_[l] = register_module("dec" + std::to_string(l), TimeResBlock(2 * w[l], w[l], tdim));
    if (attn_at(l)) {
      dec_attn_[l] = register_module("dec_attn" + std::to_string(l),
                                     CrossAttentionBlock(w[l], config_.heads, config_.prompt_dim));
    }
  }
  out_norm_ = register_module("out_norm", group_norm(w[0]));
  out_ = register_module("out", torch::nn::Conv2d(Conv2dOptions(w[0], 3, 3).padding(1)));
  nn::zero_init(out_);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t,
                                    const torch::Tensor& p_p, const torch::Tensor& p_e, const torch::Tensor& raw_lq) {
  const auto levels = static_cast<int64_t>(config_.widths.size());
  const int64_t factor = int64_t{1} << (levels - 1);
  if (x_t.sizes() != cond.sizes() || x_t.dim() != 4 || x_t.size(1) != 3 || x_t.size(2) % factor != 0 ||
      x_t.size(3) % factor != 0) {
    throw DimensionError("denoiser: x_t " + c10::str(x_t.sizes()) + " and condition " + c10::str(cond.sizes()) +
                         " must match, 3 channels, sides divisible by " + std::to_string(factor));
  }
  if (p_p.dim() != 3 || p_p.size(0) != x_t.size(0) || p_p.size(2) != config_.prompt_dim) {
    throw DimensionError("denoiser: pathology prompt must be B x N x " + std::to_string(config_.prompt_dim));
  }
  auto inputs = torch::cat({x_t, cond}, 1);
  if (config_.use_raw_lq) {
    if (!raw_lq.defined() || raw_lq.sizes() != cond.sizes()) throw DimensionError("denoiser: raw input missing");
    inputs = torch::cat({inputs, raw_lq}, 1);
  }
  auto f = fusion_(inputs, config_.use_edges ? p_e : torch::Tensor{});
  auto temb = nn::timestep_embedding(t, config_.widths[0]).to(x_t.scalar_type());
  temb = time2_(torch::silu(time1_(temb)));

  std::vector<torch::Tensor> skips;
  for (int64_t l = 0; l < levels; ++l) {
    f = enc_[l]->forward(f, temb);
    if (enc_attn_[l]) f = enc_attn_[l]->forward(f, p_p);
    skips.push_back(f);
    if (l + 1 < levels) f = down_[l](f);
  }
  f = mid_attn_->forward(mid_->forward(f, temb), p_p);
  for (int64_t l = levels - 1; l >= 0; --l) {
    if (l + 1 < levels) {
      f = up_[l](F::interpolate(f, F::InterpolateFuncOptions()
                                       .scale_factor(std::vector<double>{2.0, 2.0})
                                       .mode(torch::kNearest)));
    }
    f = dec_[l]->forward(torch::cat({f, skips[l]}, 1), temb);
    if (dec_attn_[l]) f = dec_attn_[l]->forward(f, p_p);
  }
  return cond + out_(torch::silu(out_norm_(f)));
}

PDiffusionImpl::PDiffusionImpl(const DenoiserConfig& config) {
  embed_ = register_module("embed", EdgeEmbed(config.edge_channels));
  confidence_ = register_module("confidence", DefocusConfidence(config.defocus_dim));
  denoiser_ = register_module("denoiser", Denoiser(config));
}

torch::Tensor PDiffusionImpl::edge_prompt(const torch::Tensor& edges, const torch::Tensor& p_d) {
  auto feats = embed_(edges);
  auto conf = confidence_->forward(p_d, {edges.size(2), edges.size(3)});
  return weighted_edge_prompt(feats, conf);
}

torch::Tensor PDiffusionImpl::forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t,
                                      const torch::Tensor& p_p, const torch::Tensor& edges, const torch::Tensor& p_d,
                                      const torch::Tensor& raw_lq) {
  torch::Tensor p_e;
  if (denoiser_->config().use_edges) p_e = edge_prompt(edges, p_d);
  return denoiser_->forward(x_t, cond, t, p_p, p_e, raw_lq);
}

torch::Tensor diffusion_loss(const DenoiseFn& f, const torch::Tensor& hq, const torch::Tensor& cond,
                             const torch::Tensor& t, const torch::Tensor& noise, const DiffusionSchedule& sched,
                             const std::vector<double>& weights) {
  auto x_t = forward_marginal(hq, cond, t, noise, sched);
  auto per_item = (f(x_t, t) - hq).pow(2).flatten(1).mean(1);
  if (!weights.empty()) {
    if (static_cast<int64_t>(weights.size()) != sched.T) throw DimensionError("diffusion_loss: need T weights");
    auto w = torch::tensor(weights, torch::kFloat64).to(per_item.scalar_type()).index_select(0, t.to(torch::kLong) - 1);
    per_item = per_item * w;
  }
  return per_item.mean();
}

torch::Tensor diffusion_loss(const DenoiseFn& f, const torch::Tensor& hq, const torch::Tensor& cond,
                             const DiffusionSchedule& sched, at::Generator& gen) {
  auto t = torch::randint(1, sched.T + 1, {hq.size(0)}, gen, torch::kLong);
  auto noise = torch::randn(hq.sizes(), gen, hq.scalar_type());
  return diffusion_loss(f, hq, cond, t, noise, sched);
}

torch::Tensor sample(const DenoiseFn& f, const torch::Tensor& cond, const DiffusionSchedule& sched, uint64_t seed,
                     const SampleObserver& observer) {
  torch::NoGradGuard guard;
  auto gen0 = make_generator(derive_seed(seed, {0}));
  auto x = cond + sched.kappa * std::sqrt(sched.eta[sched.T]) * torch::randn(cond.sizes(), gen0, cond.scalar_type());
  for (int64_t t = sched.T; t >= 1; --t) {
    auto tt = torch::full({cond.size(0)}, t, torch::kLong);
    auto x0_hat = f(x, tt);
    auto gen = make_generator(derive_seed(seed, {static_cast<uint64_t>(t)}));
    auto noise = t > 1 ? torch::randn(cond.sizes(), gen, cond.scalar_type()) : torch::zeros_like(cond);
    x = posterior_step(x, x0_hat, cond, t, noise, sched);
    if (observer) observer(t, x);
  }
  return x.clamp(0.0, 1.0);
}

void PDiffusionTrainConfig::validate() const {
  net.validate();
  make_schedule(T, kappa, eta1);
  if (steps < 1 || warmup < 0 || warmup >= steps || batch_size < 1 || !(lr > 0.0)) {
    throw ParameterError("pdiffusion: need steps >= 1, 0 <= warmup < steps, batch >= 1, lr > 0");
  }
}

double diffusion_lr(int64_t step, const PDiffusionTrainConfig& config) {
  if (step < config.warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup);
  const double progress =
      static_cast<double>(step - config.warmup) / static_cast<double>(config.steps - config.warmup);
  return config.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

DenoiseFn bind_denoiser(PDiffusion& model, const torch::Tensor& cond, const torch::Tensor& p_p,
                        const torch::Tensor& edges, const torch::Tensor& p_d, const torch::Tensor& raw_lq) {
  model->eval();
  torch::Tensor p_e;
  {
    torch::NoGradGuard guard;
    if (model->denoiser()->config().use_edges) p_e = model->edge_prompt(edges, p_d);
  }
  return [model, cond, p_p, p_e, raw_lq](const torch::Tensor& x_t, const torch::Tensor& t) mutable {
    return model->denoiser()->forward(x_t, cond, t, p_p, p_e, raw_lq);
  };
}

PDiffusionTrainResult train_pdiffusion(const std::vector<PDiffusionSample>& data, const PDiffusionTrainConfig& config,
                                       uint64_t seed, const PDiffusionResume* resume, int64_t stop,
                                       const DiffusionStepCallback& on_step) {
  if (data.empty()) throw ValidationError("train_pdiffusion: empty dataset");
  config.validate();
  const auto sched = make_schedule(config.T, config.kappa, config.eta1);
  torch::manual_seed(seed);
  PDiffusionTrainResult result;
  int64_t step = 0;
  if (resume) {
    result.model = resume->model;
    step = resume->step;
  } else {
    result.model = PDiffusion(config.net);
  }
  auto& model = result.model;
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.lr));
  if (resume && !resume->optimizer_state.empty()) deserialize_optimizer(opt, resume->optimizer_state);

  auto stack = [&](auto member) {
    std::vector<torch::Tensor> v;
    for (const auto& s : data) v.push_back(s.*member);
    return torch::stack(v).to(torch::kFloat32);
  };
  auto cond = stack(&PDiffusionSample::cond);
  auto hq = stack(&PDiffusionSample::hq);
  auto p_p = stack(&PDiffusionSample::p_p);
  auto p_d = stack(&PDiffusionSample::p_d);
  auto edges = stack(&PDiffusionSample::edges);
  torch::Tensor lq;
  if (config.net.use_raw_lq) lq = stack(&PDiffusionSample::lq);
  const auto n = cond.size(0);
  const auto end = stop < 0 ? config.steps : std::min(stop, config.steps);

  model->train();
  for (; step < end; ++step) {
    for (auto& g : opt.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(g.options()).lr(diffusion_lr(step, config));
    }
    auto gen = make_generator(derive_seed(seed, {41, static_cast<uint64_t>(step)}));
    auto idx = torch::randint(0, n, {std::min(n, config.batch_size)}, gen, torch::kLong);
    auto b_cond = cond.index_select(0, idx);
    auto b_pp = p_p.index_select(0, idx);
    auto b_edges = edges.index_select(0, idx);
    auto b_pd = p_d.index_select(0, idx);
    auto b_lq = lq.defined() ? lq.index_select(0, idx) : torch::Tensor{};
    DenoiseFn f = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
      return model->forward(x_t, b_cond, t, b_pp, b_edges, b_pd, b_lq);
    };
    auto loss = diffusion_loss(f, hq.index_select(0, idx), b_cond, sched, gen);
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double l = loss.item<double>();
    result.step_loss.push_back(l);
    if (on_step && !on_step(step + 1, l)) {
      ++step;
      break;
    }
  }
  result.steps = step;
  model->eval();
  result.optimizer_state = serialize_optimizer(opt);
  return result;
}

}  // namespace mop
