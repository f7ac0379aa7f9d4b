#include "mop/imgio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "mop/errors.hpp"

namespace fs = std::filesystem;

namespace mop {

ImagePatch::ImagePatch(torch::Tensor hwc, std::string id) : id_(std::move(id)) {
  if (hwc.dim() != 3 || hwc.size(2) != 3) {
    throw DimensionError("ImagePatch expects HxWx3, got " + std::to_string(hwc.dim()) + "-d tensor " +
                         c10::str(hwc.sizes()));
  }
  if (hwc.size(0) < kMinSide || hwc.size(1) < kMinSide) {
    throw DimensionError("ImagePatch must be at least 16x16, got " + std::to_string(hwc.size(0)) + "x" +
                         std::to_string(hwc.size(1)));
  }
  pixels_ = hwc.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(pixels_).all().item<bool>()) {
    throw ValidationError("ImagePatch '" + id_ + "' has non-finite pixels");
  }
  if (pixels_.min().item<float>() < 0.0f || pixels_.max().item<float>() > 1.0f) {
    throw ValidationError("ImagePatch '" + id_ + "' has pixels outside [0,1]");
  }
}

ImagePatch ImagePatch::from_chw_clamped(const torch::Tensor& chw, std::string id) {
  auto t = chw.dim() == 4 ? chw.squeeze(0) : chw;
  return ImagePatch(t.detach().to(torch::kFloat32).clamp(0.0, 1.0).permute({1, 2, 0}).contiguous(),
                    std::move(id));
}

void FocalStack::validate() const {
  if (planes.empty()) {
    throw ValidationError("focal stack '" + id + "' has no planes");
  }
  for (size_t i = 1; i < planes.size(); ++i) {
    if (!(planes[i].offset > planes[i - 1].offset)) {
      throw ValidationError("focal stack '" + id + "': offsets must be strictly increasing (" +
                            std::to_string(planes[i - 1].offset) + " then " +
                            std::to_string(planes[i].offset) + ")");
    }
  }
  const auto h = planes.front().patch.height();
  const auto w = planes.front().patch.width();
  for (const auto& p : planes) {
    if (p.patch.height() != h || p.patch.width() != w) {
      throw DimensionError("focal stack '" + id + "': planes differ in size");
    }
  }
  if (!fused.empty() && (fused.height() != h || fused.width() != w)) {
    throw DimensionError("focal stack '" + id + "': fused image differs in size from planes");
  }
}

// ---------------------------------------------------------------------------
// PNG

namespace {

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngWriteGuard() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace

ImagePatch load_image(const fs::path& path) {
  PngReadGuard g;
  g.fp = std::fopen(path.c_str(), "rb");
  if (!g.fp) throw IoError("cannot open image " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, g.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  g.info = png_create_info_struct(g.png);
  if (!g.png || !g.info) throw IoError("libpng initialisation failed");
  if (setjmp(png_jmpbuf(g.png))) throw FormatError("corrupt PNG " + path.string());
  png_init_io(g.png, g.fp);
  png_set_sig_bytes(g.png, 8);
  png_read_info(g.png, g.info);

  const auto width = static_cast<int64_t>(png_get_image_width(g.png, g.info));
  const auto height = static_cast<int64_t>(png_get_image_height(g.png, g.info));
  const int color_type = png_get_color_type(g.png, g.info);
  int bit_depth = png_get_bit_depth(g.png, g.info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(g.png);
    bit_depth = 8;
  } else if (color_type != PNG_COLOR_TYPE_RGB) {
    const int channels = png_get_channels(g.png, g.info);
    throw FormatError(path.string() + ": expected an RGB image, found " + std::to_string(channels) +
                      " channel(s)");
  }
  if (bit_depth != 8 && bit_depth != 16) {
    throw FormatError(path.string() + ": unsupported bit depth " + std::to_string(bit_depth));
  }
  if (bit_depth == 16) png_set_swap(g.png);  // host little-endian order
  png_read_update_info(g.png, g.info);

  const size_t rowbytes = png_get_rowbytes(g.png, g.info);
  std::vector<png_byte> data(rowbytes * static_cast<size_t>(height));
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int64_t r = 0; r < height; ++r) rows[r] = data.data() + r * rowbytes;
  png_read_image(g.png, rows.data());
  png_read_end(g.png, nullptr);

  torch::Tensor out;
  if (bit_depth == 8) {
    auto raw = torch::from_blob(data.data(), {height, width, 3}, torch::kUInt8);
    out = raw.to(torch::kFloat32) / 255.0f;
  } else {
    std::vector<float> values(static_cast<size_t>(height * width * 3));
    for (int64_t r = 0; r < height; ++r) {
      const auto* row = reinterpret_cast<const uint16_t*>(rows[r]);
      for (int64_t i = 0; i < width * 3; ++i) {
        values[r * width * 3 + i] = static_cast<float>(static_cast<double>(row[i]) / 65535.0);
      }
    }
    out = torch::from_blob(values.data(), {height, width, 3}, torch::kFloat32).clone();
  }
  return ImagePatch(out.contiguous(), path.stem().string());
}

namespace {
// Kept apart from save_png_u8 so no locals live across setjmp.
bool write_png_rows(png_structp png, png_infop info, std::FILE* fp, const uint8_t* base, png_uint_32 width,
                    png_uint_32 height, int channels) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 r = 0; r < height; ++r) png_write_row(png, base + static_cast<size_t>(r) * width * channels);
  png_write_end(png, nullptr);
  return true;
}
}  // namespace

void save_png_u8(const torch::Tensor& image_u8, const fs::path& path) {
  auto t = image_u8.to(torch::kUInt8).contiguous();
  if (t.dim() == 3 && t.size(2) == 1) t = t.squeeze(2);
  const bool gray = t.dim() == 2;
  if (!gray && !(t.dim() == 3 && t.size(2) == 3)) {
    throw DimensionError("save_png_u8 expects HxW or HxWx3");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  PngWriteGuard g;
  g.fp = std::fopen(path.c_str(), "wb");
  if (!g.fp) throw IoError("cannot write " + path.string());
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  g.info = png_create_info_struct(g.png);
  if (!g.png || !g.info) throw IoError("libpng initialisation failed");
  if (!write_png_rows(g.png, g.info, g.fp, t.data_ptr<uint8_t>(), static_cast<png_uint_32>(t.size(1)),
                      static_cast<png_uint_32>(t.size(0)), gray ? 1 : 3)) {
    throw IoError("failed writing PNG " + path.string());
  }
}

void save_png(const ImagePatch& image, const fs::path& path) {
  auto q = (image.pixels() * 255.0f).round().clamp(0, 255).to(torch::kUInt8);
  save_png_u8(q, path);
}

// ---------------------------------------------------------------------------
// Tiling

std::vector<int64_t> tile_positions(int64_t extent, int64_t tile_size, int64_t stride) {
  if (tile_size < 1 || stride < 1 || stride > tile_size) {
    throw ParameterError("tiling requires tile_size >= stride >= 1 (tile " + std::to_string(tile_size) +
                         ", stride " + std::to_string(stride) + ")");
  }
  if (extent < tile_size) {
    throw DimensionError("image extent " + std::to_string(extent) + " is smaller than tile size " +
                         std::to_string(tile_size));
  }
  std::vector<int64_t> pos;
  for (int64_t p = 0;; p += stride) {
    if (p + tile_size >= extent) {
      pos.push_back(extent - tile_size);
      break;
    }
    pos.push_back(p);
  }
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  return pos;
}

std::vector<Tile> tile_image(const ImagePatch& image, int64_t tile_size, int64_t stride) {
  const auto rows = tile_positions(image.height(), tile_size, stride);
  const auto cols = tile_positions(image.width(), tile_size, stride);
  std::vector<Tile> tiles;
  tiles.reserve(rows.size() * cols.size());
  using torch::indexing::Slice;
  for (auto r : rows) {
    for (auto c : cols) {
      auto px = image.pixels().index({Slice(r, r + tile_size), Slice(c, c + tile_size)}).clone();
      tiles.emplace_back(TileIndex{r, c, tile_size, stride},
                         ImagePatch(px, image.id() + "@" + std::to_string(r) + "_" + std::to_string(c)));
    }
  }
  return tiles;
}

std::vector<double> feather_profile(int64_t tile_size, int64_t stride) {
  constexpr double kFloor = 1e-3;
  const double ramp = static_cast<double>(std::max<int64_t>(1, tile_size - stride));
  std::vector<double> w(static_cast<size_t>(tile_size));
  for (int64_t i = 0; i < tile_size; ++i) {
    const double dist = static_cast<double>(std::min(i, tile_size - 1 - i));
    w[i] = kFloor + (1.0 - kFloor) * std::min(1.0, dist / ramp);
  }
  return w;
}

torch::Tensor stitch_chw(const std::vector<std::pair<TileIndex, torch::Tensor>>& tiles, int64_t out_h,
                         int64_t out_w) {
  if (tiles.empty()) throw CoverageError("stitch: no tiles supplied");
  const auto channels = tiles.front().second.size(0);
  auto acc = torch::zeros({channels, out_h, out_w}, torch::kFloat64);
  auto wsum = torch::zeros({out_h, out_w}, torch::kFloat64);
  using torch::indexing::Slice;
  for (const auto& [idx, t] : tiles) {
    const auto th = t.size(1);
    const auto tw = t.size(2);
    if (idx.row0 < 0 || idx.col0 < 0 || idx.row0 + th > out_h || idx.col0 + tw > out_w) {
      throw DimensionError("stitch: tile at (" + std::to_string(idx.row0) + "," + std::to_string(idx.col0) +
                           ") falls outside the output");
    }
    const auto stride = idx.stride > 0 ? idx.stride : idx.tile_size;
    auto wr = torch::tensor(feather_profile(th, std::min(stride, th)), torch::kFloat64);
    auto wc = torch::tensor(feather_profile(tw, std::min(stride, tw)), torch::kFloat64);
    auto w2 = wr.unsqueeze(1) * wc.unsqueeze(0);
    auto rs = Slice(idx.row0, idx.row0 + th);
    auto cs = Slice(idx.col0, idx.col0 + tw);
    acc.index({Slice(), rs, cs}) += t.to(torch::kFloat64) * w2;
    wsum.index({rs, cs}) += w2;
  }
  auto uncovered = (wsum <= 0.0).nonzero();
  if (uncovered.size(0) > 0) {
    throw CoverageError("stitch: pixel (" + std::to_string(uncovered[0][0].item<int64_t>()) + "," +
                        std::to_string(uncovered[0][1].item<int64_t>()) + ") is not covered by any tile");
  }
  return (acc / wsum).to(torch::kFloat32);
}

ImagePatch stitch_tiles(const std::vector<Tile>& tiles, int64_t out_h, int64_t out_w) {
  std::vector<std::pair<TileIndex, torch::Tensor>> chw;
  chw.reserve(tiles.size());
  for (const auto& [idx, patch] : tiles) chw.emplace_back(idx, patch.chw());
  auto out = stitch_chw(chw, out_h, out_w);
  return ImagePatch(out.clamp(0.0, 1.0).permute({1, 2, 0}).contiguous());
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

double parse_double(const std::string& s, const fs::path& file, int line) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(file.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

std::string relative_or_absolute(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  auto rel = fs::relative(p, base, ec);
  if (ec || rel.empty()) return fs::absolute(p).string();
  return rel.string();
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestRecord> out;
  std::string text;
  int line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    auto first = text.find_first_not_of(" \t\r");
    if (first == std::string::npos || text[first] == '#') continue;
    ManifestRecord rec;
    rec.line = line_no;
    std::istringstream fields(text);
    std::string field;
    bool has_fused = false;
    bool has_planes = false;
    while (fields >> field) {
      auto eq = field.find('=');
      if (eq == std::string::npos) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": malformed field '" + field +
                              "'");
      }
      const auto key = field.substr(0, eq);
      const auto value = field.substr(eq + 1);
      if (key == "fused") {
        rec.fused = resolve(base, value);
        has_fused = true;
      } else if (key == "spacing_um") {
        rec.spacing_um = parse_double(value, path, line_no);
      } else if (key == "id") {
        rec.id = value;
      } else if (key == "labels") {
        rec.labels = resolve(base, value);
      } else if (key == "planes") {
        has_planes = true;
        std::istringstream items(value);
        std::string item;
        while (std::getline(items, item, ',')) {
          auto colon = item.find(':');
          if (colon == std::string::npos) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": plane entry '" + item +
                                  "' lacks '<offset>:<path>'");
          }
          rec.planes.emplace_back(parse_double(item.substr(0, colon), path, line_no),
                                  resolve(base, item.substr(colon + 1)));
        }
      } else {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": unknown field '" + key + "'");
      }
    }
    if (!has_fused || !has_planes || rec.planes.empty()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": record needs both fused= and planes=");
    }
    for (size_t i = 1; i < rec.planes.size(); ++i) {
      if (!(rec.planes[i].first > rec.planes[i - 1].first)) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": plane offsets must be strictly increasing");
      }
    }
    if (rec.id.empty()) rec.id = rec.fused.stem().string();
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<FocalStack> load_manifest(const fs::path& path) {
  std::vector<FocalStack> stacks;
  for (const auto& rec : parse_manifest(path)) {
    auto load_at_line = [&](const fs::path& p) {
      if (!fs::exists(p)) {
        throw IoError(path.string() + ":" + std::to_string(rec.line) + ": missing image file " + p.string());
      }
      return load_image(p);
    };
    FocalStack st;
    st.id = rec.id;
    st.spacing_um = rec.spacing_um;
    st.fused = load_at_line(rec.fused);
    st.labels_path = rec.labels;
    for (const auto& [offset, p] : rec.planes) st.planes.push_back({offset, load_at_line(p)});
    st.validate();
    stacks.push_back(std::move(st));
  }
  return stacks;
}

void write_manifest(const std::vector<ManifestRecord>& records, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  const auto base = path.parent_path().empty() ? fs::current_path() : path.parent_path();
  out << "# mop focal-stack manifest: one stack per line\n";
  out.precision(17);
  for (const auto& rec : records) {
    out << "id=" << rec.id << " fused=" << relative_or_absolute(rec.fused, base) << " spacing_um=" << rec.spacing_um
        << " planes=";
    for (size_t i = 0; i < rec.planes.size(); ++i) {
      if (i) out << ',';
      out << rec.planes[i].first << ':' << relative_or_absolute(rec.planes[i].second, base);
    }
    if (!rec.labels.empty()) out << " labels=" << relative_or_absolute(rec.labels, base);
    out << '\n';
  }
}

}  // namespace mop
