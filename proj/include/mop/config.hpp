#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mop/defocus.hpp"
#include "mop/degrade.hpp"
#include "mop/diffusion.hpp"
#include "mop/edges.hpp"
#include "mop/encoders.hpp"
#include "mop/pformer.hpp"
#include "mop/prompt.hpp"

namespace mop {

struct DataConfig {
  std::vector<std::string> sources;  // sharp images; empty -> procedural texture
  int64_t n_stacks = 4;
  int64_t field_size = 256;
  std::vector<double> offsets;       // default -6..6
  double tilt = 1.0;                 // plane-units of defocus across the field
  int64_t block = 32;
  double spacing_um = 0.8;
  int64_t patch = 64;                // training crop
  int64_t tile = 256;                // inference tile
  int64_t tile_stride = 256;
  double restore_min_abs_offset = 1.0;  // planes used for restoration pairs
  double restore_max_abs_offset = 4.0;
};

struct EncoderSection {
  std::string name = "tiny-vit";
  std::string sidecar_dir;
  EncoderPretrainConfig pretrain;
};

struct EdgeSection {
  CannyParams canny;
  double confidence_gain = 4.0;
};

struct MetricsSection {
  bool group_by_slide = true;
  int64_t tile = 256;
};

struct RunSection {
  uint64_t seed = 0;
  int64_t threads = 1;
};

/// Fully typed view of the JSON configuration document.
struct PipelineConfig {
  DataConfig data;
  OpticsParams optics;
  DefocusConfig defocus;
  EncoderSection encoder;
  PromptRestorerConfig prompt_restorer;
  EdgeSection edges;
  PFormerConfig pformer;
  PDiffusionTrainConfig pdiffusion;
  MetricsSection metrics;
  RunSection run;

  nlohmann::json document;  // canonical source of the fields above
  std::string fingerprint() const;
};

/// Every key with its default value.
nlohmann::json default_config_document();

/// Overlays `user` on the defaults; unknown keys or type changes raise ValidationError.
nlohmann::json merge_config(const nlohmann::json& user);
PipelineConfig config_from_document(const nlohmann::json& merged);
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig default_config();

/// FNV-1a 64 over the canonical dump (keys sorted), as 16 hex digits.
std::string config_fingerprint(const nlohmann::json& doc);

}  // namespace mop
