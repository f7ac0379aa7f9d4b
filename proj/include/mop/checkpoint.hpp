#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

namespace mop {

/// Versioned binary container for one trainable component.
///
/// Layout (little-endian): magic "MOPCKPT\0", u32 format version, component,
/// config fingerprint, i64 step, i64 epoch, metadata map, named tensors
/// (dtype code, rank, dims, raw data), named opaque blobs. Strings are
/// u32-length prefixed.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;

  uint32_t format_version = kFormatVersion;
  std::string component;
  std::string config_fingerprint;
  int64_t step = 0;
  int64_t epoch = 0;
  std::map<std::string, std::string> metadata;
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> blobs;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Loads and checks the component name and (unless allowed) the fingerprint.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& component,
                           const std::string& expected_fingerprint, bool allow_mismatch = false);

/// Copies parameters and buffers into `ckpt.tensors` under `prefix`.
void store_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix);
/// Inverse of store_module; every parameter and buffer must be present with matching shape.
void restore_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix);

std::string serialize_optimizer(torch::optim::Optimizer& optimizer);
void deserialize_optimizer(torch::optim::Optimizer& optimizer, const std::string& blob);

/// FNV-1a over every parameter and buffer (names and raw bytes).
uint64_t parameter_hash(const torch::nn::Module& module);

}  // namespace mop
