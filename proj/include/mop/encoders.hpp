#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mop/imgio.hpp"

namespace mop {

/// Patch-token embedding of an image: the pathology prompt.
struct PathologyPrompt {
  torch::Tensor tokens;  // N_t x D_p
  torch::Tensor pooled;  // D_p, mean of tokens

  static PathologyPrompt from_tokens(torch::Tensor tokens);
};

struct EncoderSpec {
  std::string name;
  int64_t patch = 16;
  int64_t dim = 192;
  bool frozen = true;
};

/// Small vision transformer: strided patch embedding, fixed 2-D sin/cos positions,
/// pre-norm blocks, final LayerNorm. `classify` is the pre-training head.
class TinyVitImpl : public torch::nn::Module {
 public:
  TinyVitImpl(int64_t patch = 16, int64_t dim = 192, int64_t depth = 4, int64_t heads = 3, int64_t classes = 7);
  /// B x 3 x H x W -> B x N x D
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor classify(const torch::Tensor& tokens);

  int64_t patch() const { return patch_; }
  int64_t dim() const { return dim_; }
  int64_t depth() const { return depth_; }
  int64_t heads() const { return heads_; }
  int64_t classes() const { return classes_; }

 private:
  int64_t patch_, dim_, depth_, heads_, classes_;
  torch::nn::Conv2d embed_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(TinyVit);

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  /// B x 3 x H x W -> B x N x D (no grad).
  virtual torch::Tensor encode_batch(const torch::Tensor& images, const std::vector<std::string>& ids = {}) const = 0;

  PathologyPrompt encode(const ImagePatch& image) const;
  void check_dims(int64_t h, int64_t w) const;
};

/// Frozen in-repo ViT.
class TinyVitEncoder final : public Encoder {
 public:
  TinyVitEncoder(TinyVit model, std::string name = "tiny-vit");
  const EncoderSpec& spec() const override { return spec_; }
  torch::Tensor encode_batch(const torch::Tensor& images, const std::vector<std::string>& ids = {}) const override;
  TinyVit& model() { return model_; }

 private:
  EncoderSpec spec_;
  TinyVit model_;
};

/// Tokens precomputed offline (e.g. by a foundation model), read from `<dir>/<image-id>.tok`.
class SidecarEncoder final : public Encoder {
 public:
  SidecarEncoder(std::filesystem::path dir, EncoderSpec spec);
  const EncoderSpec& spec() const override { return spec_; }
  torch::Tensor encode_batch(const torch::Tensor& images, const std::vector<std::string>& ids) const override;

 private:
  std::filesystem::path dir_;
  EncoderSpec spec_;
};

/// Sidecar record: u32 N_t, u32 D_p, N_t*D_p float32 (little-endian).
void write_token_sidecar(const torch::Tensor& tokens, const std::filesystem::path& path);
torch::Tensor read_token_sidecar(const std::filesystem::path& path);

class EncoderRegistry {
 public:
  using Factory = std::function<std::shared_ptr<Encoder>()>;

  void add(const EncoderSpec& spec, Factory factory);
  std::shared_ptr<Encoder> get(const std::string& name) const;
  std::vector<EncoderSpec> list() const;
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  /// Registry holding the default `tiny-vit` entry. Its factory needs trained
  /// weights, so `tiny_vit_weights` must point at an encoder checkpoint when used.
  static EncoderRegistry with_defaults(std::filesystem::path tiny_vit_weights = {}, std::string fingerprint = {},
                                       bool allow_mismatch = true);

 private:
  std::map<std::string, std::pair<EncoderSpec, Factory>> entries_;
};

/// Lists the specs in the default registry.
std::vector<EncoderSpec> list_encoders();

struct EncoderPretrainConfig {
  int64_t epochs = 5;
  int64_t batch_size = 32;
  double lr = 5e-4;
  int64_t buckets = 7;  // classes: round(|d|) clipped to buckets-1
};

struct Checkpoint;
/// Architecture metadata plus weights of a tiny ViT, as stored under component "encoder".
void store_tiny_vit(TinyVit& model, Checkpoint& ckpt);
TinyVit restore_tiny_vit(const Checkpoint& ckpt);

/// Pre-trains the tiny ViT to classify the defocus bucket of each patch.
TinyVit pretrain_tiny_vit(const std::vector<torch::Tensor>& images, const std::vector<double>& distances,
                          const EncoderPretrainConfig& config, uint64_t seed,
                          std::vector<double>* epoch_loss = nullptr);

}  // namespace mop
