#include "mop/encoders.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/layers.hpp"
#include "mop/random.hpp"

namespace fs = std::filesystem;

namespace mop {

PathologyPrompt PathologyPrompt::from_tokens(torch::Tensor tokens) {
  if (tokens.dim() != 2) throw DimensionError("pathology prompt tokens must be N_t x D_p");
  PathologyPrompt p;
  p.tokens = tokens.contiguous();
  p.pooled = p.tokens.mean(0);
  return p;
}

TinyVitImpl::TinyVitImpl(int64_t patch, int64_t dim, int64_t depth, int64_t heads, int64_t classes)
    : patch_(patch), dim_(dim), depth_(depth), heads_(heads), classes_(classes) {
  if (patch < 1 || dim % 4 != 0 || dim % heads != 0) throw ParameterError("tiny-vit: invalid patch/dim/heads");
  embed_ = register_module("embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, dim, patch).stride(patch)));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < depth; ++i) blocks_->push_back(nn::TransformerBlock(dim, heads, 2));
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  head_ = register_module("head", torch::nn::Linear(dim, classes));
}

torch::Tensor TinyVitImpl::forward(const torch::Tensor& x) {
  if (x.size(2) % patch_ != 0 || x.size(3) % patch_ != 0) {
    throw DimensionError("tiny-vit input " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                         " not divisible by patch " + std::to_string(patch_));
  }
  auto f = embed_(x);
  const auto h = f.size(2), w = f.size(3);
  auto t = f.flatten(2).transpose(1, 2) + nn::sincos_2d(h, w, dim_, x.scalar_type());
  for (auto& b : *blocks_) t = b->as<nn::TransformerBlock>()->forward(t);
  return norm_(t);
}

torch::Tensor TinyVitImpl::classify(const torch::Tensor& tokens) { return head_(tokens.mean(1)); }

void Encoder::check_dims(int64_t h, int64_t w) const {
  const auto p = spec().patch;
  if (h % p != 0 || w % p != 0) {
    throw DimensionError("encoder '" + spec().name + "': image " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(p));
  }
}

PathologyPrompt Encoder::encode(const ImagePatch& image) const {
  check_dims(image.height(), image.width());
  auto tokens = encode_batch(image.chw().unsqueeze(0), {image.id()});
  return PathologyPrompt::from_tokens(tokens[0]);
}

TinyVitEncoder::TinyVitEncoder(TinyVit model, std::string name) : model_(std::move(model)) {
  spec_ = {std::move(name), model_->patch(), model_->dim(), true};
  model_->eval();
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
}

torch::Tensor TinyVitEncoder::encode_batch(const torch::Tensor& images, const std::vector<std::string>&) const {
  check_dims(images.size(2), images.size(3));
  torch::NoGradGuard guard;
  // forward() is non-const in libtorch; eval mode and frozen weights keep this pure.
  return const_cast<TinyVit&>(model_)->forward(images.to(torch::kFloat32));
}

SidecarEncoder::SidecarEncoder(fs::path dir, EncoderSpec spec) : dir_(std::move(dir)), spec_(std::move(spec)) {}

torch::Tensor SidecarEncoder::encode_batch(const torch::Tensor& images, const std::vector<std::string>& ids) const {
  check_dims(images.size(2), images.size(3));
  if (static_cast<int64_t>(ids.size()) != images.size(0)) {
    throw ValidationError("sidecar encoder needs one image id per batch item");
  }
  const auto expected = (images.size(2) / spec_.patch) * (images.size(3) / spec_.patch);
  std::vector<torch::Tensor> out;
  for (const auto& id : ids) {
    if (id.empty()) throw ValidationError("sidecar encoder: image has no id");
    auto t = read_token_sidecar(dir_ / (id + ".tok"));
    if (t.size(0) != expected || t.size(1) != spec_.dim) {
      throw DimensionError("sidecar " + id + ".tok holds " + std::to_string(t.size(0)) + "x" +
                           std::to_string(t.size(1)) + " tokens, expected " + std::to_string(expected) + "x" +
                           std::to_string(spec_.dim));
    }
    out.push_back(t);
  }
  return torch::stack(out);
}

void write_token_sidecar(const torch::Tensor& tokens, const fs::path& path) {
  if (tokens.dim() != 2) throw DimensionError("token sidecar expects an N_t x D_p tensor");
  auto t = tokens.detach().to(torch::kFloat32).contiguous();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const uint32_t dims[2] = {static_cast<uint32_t>(t.size(0)), static_cast<uint32_t>(t.size(1))};
  os.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!os) throw IoError("failed writing " + path.string());
}

torch::Tensor read_token_sidecar(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open token sidecar " + path.string());
  uint32_t dims[2];
  is.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!is || dims[0] == 0 || dims[1] == 0) throw FormatError("malformed token sidecar header in " + path.string());
  auto t = torch::empty({dims[0], dims[1]}, torch::kFloat32);
  is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!is) throw FormatError("truncated token sidecar " + path.string());
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in token sidecar " + path.string());
  if (!torch::isfinite(t).all().item<bool>()) throw FormatError("non-finite tokens in " + path.string());
  return t;
}

void EncoderRegistry::add(const EncoderSpec& spec, Factory factory) {
  if (entries_.count(spec.name)) throw RegistryError("encoder '" + spec.name + "' is already registered");
  entries_.emplace(spec.name, std::make_pair(spec, std::move(factory)));
}

std::shared_ptr<Encoder> EncoderRegistry::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    std::string names;
    for (const auto& [k, _] : entries_) names += (names.empty() ? "" : ", ") + k;
    throw RegistryError("unknown encoder '" + name + "' (available: " + names + ")");
  }
  return it->second.second();
}

std::vector<EncoderSpec> EncoderRegistry::list() const {
  std::vector<EncoderSpec> out;
  for (const auto& [_, entry] : entries_) out.push_back(entry.first);
  return out;
}

void store_tiny_vit(TinyVit& model, Checkpoint& ckpt) {
  ckpt.metadata["patch"] = std::to_string(model->patch());
  ckpt.metadata["dim"] = std::to_string(model->dim());
  ckpt.metadata["depth"] = std::to_string(model->depth());
  ckpt.metadata["heads"] = std::to_string(model->heads());
  ckpt.metadata["classes"] = std::to_string(model->classes());
  store_module(*model, ckpt, "");
}

TinyVit restore_tiny_vit(const Checkpoint& ck) {
  auto meta = [&](const char* key) {
    auto it = ck.metadata.find(key);
    if (it == ck.metadata.end()) throw FormatError(std::string("encoder checkpoint lacks '") + key + "'");
    return std::stoll(it->second);
  };
  TinyVit model(meta("patch"), meta("dim"), meta("depth"), meta("heads"), meta("classes"));
  restore_module(*model, ck, "");
  model->eval();
  return model;
}

EncoderRegistry EncoderRegistry::with_defaults(fs::path tiny_vit_weights, std::string fingerprint,
                                               bool allow_mismatch) {
  EncoderRegistry reg;
  reg.add({"tiny-vit", 16, 192, true},
          [path = std::move(tiny_vit_weights), fp = std::move(fingerprint), allow_mismatch]() -> std::shared_ptr<Encoder> {
            if (path.empty()) throw DependencyError("tiny-vit encoder weights not configured (train the encoder first)");
            return std::make_shared<TinyVitEncoder>(restore_tiny_vit(load_checkpoint(path, "encoder", fp, allow_mismatch)));
          });
  return reg;
}

std::vector<EncoderSpec> list_encoders() { return EncoderRegistry::with_defaults().list(); }

TinyVit pretrain_tiny_vit(const std::vector<torch::Tensor>& images, const std::vector<double>& distances,
                          const EncoderPretrainConfig& config, uint64_t seed, std::vector<double>* epoch_loss) {
  if (images.empty() || images.size() != distances.size()) {
    throw ValidationError("pretrain_tiny_vit: need a nonempty set of images with matching labels");
  }
  torch::manual_seed(seed);
  TinyVit model(16, 192, 4, 3, config.buckets);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.lr));
  const auto n = static_cast<int64_t>(images.size());
  auto labels = torch::empty({n}, torch::kLong);
  for (int64_t i = 0; i < n; ++i) {
    labels[i] = std::min<int64_t>(std::llround(std::abs(distances[i])), config.buckets - 1);
  }
  auto all = torch::stack(images).to(torch::kFloat32);
  model->train();
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto perm = torch::randperm(n, make_generator(derive_seed(seed, {11, static_cast<uint64_t>(epoch)})));
    double total = 0.0;
    int64_t batches = 0;
    for (int64_t start = 0; start < n; start += config.batch_size) {
      auto idx = perm.slice(0, start, std::min(n, start + config.batch_size));
      auto logits = model->classify(model->forward(all.index_select(0, idx)));
      auto loss = torch::nn::functional::cross_entropy(logits, labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++batches;
    }
    if (epoch_loss) epoch_loss->push_back(total / static_cast<double>(batches));
  }
  model->eval();
  for (auto& p : model->parameters()) p.set_requires_grad(false);
  return model;
}

}  // namespace mop
