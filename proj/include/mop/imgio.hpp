#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace mop {

/// RGB image, HWC float32 in [0,1], at least 16x16.
class ImagePatch {
 public:
  static constexpr int64_t kMinSide = 16;

  ImagePatch() = default;
  /// Validates shape, finiteness and range; throws DimensionError / ValidationError.
  explicit ImagePatch(torch::Tensor hwc, std::string id = {});

  /// Builds from a CHW (or 1xCHW) tensor, clamping to [0,1] first.
  static ImagePatch from_chw_clamped(const torch::Tensor& chw, std::string id = {});

  const torch::Tensor& pixels() const { return pixels_; }
  torch::Tensor chw() const { return pixels_.permute({2, 0, 1}).contiguous(); }
  int64_t height() const { return pixels_.size(0); }
  int64_t width() const { return pixels_.size(1); }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  bool empty() const { return !pixels_.defined(); }

 private:
  torch::Tensor pixels_;
  std::string id_;
};

struct FocalPlane {
  double offset = 0.0;  // signed, plane-index units
  ImagePatch patch;
};

struct FocalStack {
  std::string id;
  std::vector<FocalPlane> planes;
  ImagePatch fused;
  double spacing_um = 0.8;
  std::filesystem::path labels_path;  // optional label sidecar

  /// Offsets strictly increasing, shared plane dimensions.
  void validate() const;
};

struct TileIndex {
  int64_t row0 = 0;
  int64_t col0 = 0;
  int64_t tile_size = 0;
  int64_t stride = 0;
};

using Tile = std::pair<TileIndex, ImagePatch>;

ImagePatch load_image(const std::filesystem::path& path);
/// Writes 8-bit RGB PNG (values rounded from [0,1]).
void save_png(const ImagePatch& image, const std::filesystem::path& path);
/// Writes an HxWx3 uint8 tensor or an HxW/HxWx1 single channel tensor.
void save_png_u8(const torch::Tensor& hwc_u8, const std::filesystem::path& path);

/// Top-left coordinates along one axis: stride-spaced, last one clamped inward.
std::vector<int64_t> tile_positions(int64_t extent, int64_t tile_size, int64_t stride);

std::vector<Tile> tile_image(const ImagePatch& image, int64_t tile_size, int64_t stride);

/// Separable linear feather weight for one axis of a tile.
std::vector<double> feather_profile(int64_t tile_size, int64_t stride);

ImagePatch stitch_tiles(const std::vector<Tile>& tiles, int64_t out_h, int64_t out_w);

/// Same blend for arbitrary channel-first tensors (C,h,w tiles -> C,H,W).
torch::Tensor stitch_chw(const std::vector<std::pair<TileIndex, torch::Tensor>>& tiles,
                         int64_t out_h, int64_t out_w);

/// One manifest line before any image is read.
struct ManifestRecord {
  std::string id;
  std::filesystem::path fused;
  double spacing_um = 0.8;
  std::vector<std::pair<double, std::filesystem::path>> planes;
  std::filesystem::path labels;
  int line = 0;
};

/// Parses the line-delimited manifest; relative paths resolve against its directory.
std::vector<ManifestRecord> parse_manifest(const std::filesystem::path& path);
std::vector<FocalStack> load_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest directory when possible.
void write_manifest(const std::vector<ManifestRecord>& records, const std::filesystem::path& path);

}  // namespace mop
