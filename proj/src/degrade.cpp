#include "mop/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "mop/errors.hpp"
#include "mop/random.hpp"

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace mop {

void OpticsParams::validate() const {
  if (!(sigma_per_plane > 0.0)) throw ParameterError("optics.sigma_per_plane must be > 0");
  if (!(f_ref > 0.0 && f_ref < 0.5)) throw ParameterError("optics.f_ref must lie in (0, 0.5)");
  if (!(kernel_radius_sigmas >= 3.0)) throw ParameterError("optics.kernel_radius_sigmas must be >= 3");
}

double OpticsParams::sigma_at(double d) const { return sigma_per_plane * std::abs(d); }

DefocusLabel LabelMap::mean_over(int64_t row0, int64_t col0, int64_t h, int64_t w) const {
  const auto r0 = row0 / block;
  const auto r1 = std::min(rows - 1, (row0 + h - 1) / block);
  const auto c0 = col0 / block;
  const auto c1 = std::min(cols - 1, (col0 + w - 1) / block);
  DefocusLabel acc{0.0, 0.0};
  int64_t n = 0;
  for (auto r = r0; r <= r1; ++r) {
    for (auto c = c0; c <= c1; ++c) {
      acc.d += at(r, c).d;
      acc.c += at(r, c).c;
      ++n;
    }
  }
  acc.d /= static_cast<double>(n);
  acc.c /= static_cast<double>(n);
  return acc;
}

// ---------------------------------------------------------------------------
// Optics

namespace {

int64_t kernel_radius(double sigma, double radius_sigmas) {
  return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(radius_sigmas * sigma)));
}

std::vector<double> gaussian_1d(double sigma, int64_t radius) {
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

int64_t mirror(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

torch::Tensor mirror_indices(int64_t n, int64_t pad) {
  std::vector<int64_t> idx(static_cast<size_t>(n + 2 * pad));
  for (int64_t i = 0; i < n + 2 * pad; ++i) idx[i] = mirror(i - pad, n);
  return torch::tensor(idx, torch::kLong);
}

}  // namespace

torch::Tensor gaussian_psf(double sigma, const OpticsParams& params) {
  if (sigma < 0.0 || !std::isfinite(sigma)) throw ParameterError("gaussian_psf: sigma must be >= 0");
  if (sigma == 0.0) return torch::ones({1, 1}, torch::kFloat64);
  const auto r = kernel_radius(sigma, params.kernel_radius_sigmas);
  auto k = torch::empty({2 * r + 1, 2 * r + 1}, torch::kFloat64);
  auto acc = k.accessor<double, 2>();
  double sum = 0.0;
  for (int64_t i = -r; i <= r; ++i) {
    for (int64_t j = -r; j <= r; ++j) {
      const double v = std::exp(-static_cast<double>(i * i + j * j) / (2.0 * sigma * sigma));
      acc[i + r][j + r] = v;
      sum += v;
    }
  }
  return k / sum;
}

double ctf_value(double d, const OpticsParams& params) {
  const double s = params.sigma_at(d);
  return std::exp(-2.0 * std::numbers::pi * std::numbers::pi * s * s * params.f_ref * params.f_ref);
}

torch::Tensor gaussian_filter_chw(const torch::Tensor& chw, double sigma, double radius_sigmas) {
  if (sigma < 0.0) throw ParameterError("gaussian filter: sigma must be >= 0");
  if (sigma == 0.0) return chw.clone();
  const auto r = kernel_radius(sigma, radius_sigmas);
  const auto c = chw.size(0);
  const auto h = chw.size(1);
  const auto w = chw.size(2);
  auto x = chw.to(torch::kFloat64);
  x = x.index_select(1, mirror_indices(h, r)).index_select(2, mirror_indices(w, r)).unsqueeze(0);
  auto k = torch::tensor(gaussian_1d(sigma, r), torch::kFloat64);
  auto kx = k.view({1, 1, 1, -1}).expand({c, 1, 1, 2 * r + 1}).contiguous();
  auto ky = k.view({1, 1, -1, 1}).expand({c, 1, 2 * r + 1, 1}).contiguous();
  x = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(c));
  x = F::conv2d(x, ky, F::Conv2dFuncOptions().groups(c));
  return x.squeeze(0).to(chw.scalar_type());
}

ImagePatch defocus_blur(const ImagePatch& image, double d, const OpticsParams& params) {
  const double sigma = params.sigma_at(d);
  if (sigma == 0.0) return ImagePatch(image.pixels().clone(), image.id());
  auto out = gaussian_filter_chw(image.chw().to(torch::kFloat64), sigma, params.kernel_radius_sigmas);
  return ImagePatch(out.clamp(0.0, 1.0).to(torch::kFloat32).permute({1, 2, 0}).contiguous(), image.id());
}

std::vector<double> tilt_ramp(double offset, double tilt, int64_t n_cols) {
  std::vector<double> d(static_cast<size_t>(n_cols));
  const double centre = 0.5 * static_cast<double>(n_cols - 1);
  for (int64_t j = 0; j < n_cols; ++j) d[j] = offset + tilt * (static_cast<double>(j) - centre);
  return d;
}

ImagePatch render_with_labels(const ImagePatch& sharp, const LabelMap& labels, const OpticsParams& params) {
  std::map<double, torch::Tensor> blurred;  // keyed by sigma
  for (const auto& l : labels.labels) {
    const double s = params.sigma_at(l.d);
    if (!blurred.count(s)) blurred[s] = defocus_blur(sharp, l.d, params).pixels();
  }
  if (blurred.size() == 1) return ImagePatch(blurred.begin()->second.clone(), sharp.id());
  auto out = torch::empty_like(sharp.pixels());
  using torch::indexing::Slice;
  for (int64_t r = 0; r < labels.rows; ++r) {
    for (int64_t c = 0; c < labels.cols; ++c) {
      const auto rs = Slice(r * labels.block, std::min(sharp.height(), (r + 1) * labels.block));
      const auto cs = Slice(c * labels.block, std::min(sharp.width(), (c + 1) * labels.block));
      out.index_put_({rs, cs}, blurred.at(params.sigma_at(labels.at(r, c).d)).index({rs, cs}));
    }
  }
  return ImagePatch(out, sharp.id());
}

SyntheticStack synth_focal_stack(const ImagePatch& sharp, std::span<const double> offsets,
                                 const OpticsParams& params, double tilt, int64_t block) {
  params.validate();
  if (offsets.empty()) throw ValidationError("synth_focal_stack: no offsets");
  for (size_t i = 1; i < offsets.size(); ++i) {
    if (!(offsets[i] > offsets[i - 1])) throw ValidationError("synth_focal_stack: offsets must be strictly increasing");
  }
  if (block < 1) throw ParameterError("synth_focal_stack: block must be >= 1");
  SyntheticStack out;
  out.stack.id = sharp.id();
  out.stack.fused = sharp;
  const auto rows = (sharp.height() + block - 1) / block;
  const auto cols = (sharp.width() + block - 1) / block;
  for (size_t k = 0; k < offsets.size(); ++k) {
    LabelMap lm{rows, cols, block, {}};
    const auto ramp = tilt_ramp(offsets[k], tilt, cols);
    lm.labels.reserve(static_cast<size_t>(rows * cols));
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < cols; ++c) lm.labels.push_back({ramp[c], ctf_value(ramp[c], params)});
    }
    auto plane = render_with_labels(sharp, lm, params);
    plane.set_id(sharp.id() + "_p" + std::to_string(k));
    out.stack.planes.push_back({offsets[k], std::move(plane)});
    out.labels.push_back(std::move(lm));
  }
  out.stack.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Colour

namespace {

// D65 white, sRGB primaries.
constexpr double kRgbToXyz[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                                    {0.2126729, 0.7151522, 0.0721750},
                                    {0.0193339, 0.1191920, 0.9503041}};
constexpr double kWhite[3] = {0.95047, 1.0, 1.08883};
constexpr double kDelta = 6.0 / 29.0;

// Odd extensions keep the transforms bijective on all reals (needed before clipping).
double srgb_to_linear(double v) {
  const double a = std::abs(v);
  const double r = a <= 0.04045 ? a / 12.92 : std::pow((a + 0.055) / 1.055, 2.4);
  return std::copysign(r, v);
}
double linear_to_srgb(double v) {
  const double a = std::abs(v);
  const double r = a <= 0.0031308 ? a * 12.92 : 1.055 * std::pow(a, 1.0 / 2.4) - 0.055;
  return std::copysign(r, v);
}
double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
double lab_finv(double f) { return f > kDelta ? f * f * f : 3.0 * kDelta * kDelta * (f - 4.0 / 29.0); }

torch::Tensor rgb_to_xyz_inverse() {
  auto m = torch::empty({3, 3}, torch::kFloat64);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = kRgbToXyz[i][j];
  return torch::linalg_inv(m);
}

}  // namespace

torch::Tensor rgb_to_lab(const torch::Tensor& hwc) {
  auto src = hwc.to(torch::kFloat64).contiguous();
  auto out = torch::empty_like(src);
  const auto n = src.numel() / 3;
  const double* s = src.data_ptr<double>();
  double* o = out.data_ptr<double>();
  for (int64_t i = 0; i < n; ++i) {
    double lin[3];
    for (int c = 0; c < 3; ++c) lin[c] = srgb_to_linear(s[3 * i + c]);
    double f[3];
    for (int r = 0; r < 3; ++r) {
      const double xyz = kRgbToXyz[r][0] * lin[0] + kRgbToXyz[r][1] * lin[1] + kRgbToXyz[r][2] * lin[2];
      f[r] = lab_f(xyz / kWhite[r]);
    }
    o[3 * i + 0] = 116.0 * f[1] - 16.0;
    o[3 * i + 1] = 500.0 * (f[0] - f[1]);
    o[3 * i + 2] = 200.0 * (f[1] - f[2]);
  }
  return out;
}

torch::Tensor lab_to_rgb(const torch::Tensor& lab) {
  static const torch::Tensor inv = rgb_to_xyz_inverse();
  auto src = lab.to(torch::kFloat64).contiguous();
  auto out = torch::empty_like(src);
  const auto n = src.numel() / 3;
  const double* s = src.data_ptr<double>();
  double* o = out.data_ptr<double>();
  auto m = inv.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const double fy = (s[3 * i] + 16.0) / 116.0;
    const double fx = fy + s[3 * i + 1] / 500.0;
    const double fz = fy - s[3 * i + 2] / 200.0;
    const double xyz[3] = {kWhite[0] * lab_finv(fx), kWhite[1] * lab_finv(fy), kWhite[2] * lab_finv(fz)};
    for (int r = 0; r < 3; ++r) {
      o[3 * i + r] = linear_to_srgb(m[r][0] * xyz[0] + m[r][1] * xyz[1] + m[r][2] * xyz[2]);
    }
  }
  return out;
}

StainStats lab_stats(const torch::Tensor& lab) {
  StainStats st;
  auto flat = lab.reshape({-1, 3});
  auto mean = flat.mean(0);
  auto std = flat.std(0, /*unbiased=*/false);
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = mean[c].item<double>();
    st.std[c] = std[c].item<double>();
  }
  return st;
}

StainStats draw_stain_target(uint64_t seed, const StainRanges& ranges) {
  Rng rng(derive_seed(seed, {0x57a1u}));
  StainStats st;
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = rng.uniform(ranges.mean_lo[c], ranges.mean_hi[c]);
    st.std[c] = rng.uniform(ranges.std_lo[c], ranges.std_hi[c]);
  }
  return st;
}

torch::Tensor stain_transfer_unclipped(const ImagePatch& image, const StainStats& target) {
  auto lab = rgb_to_lab(image.pixels());
  const auto src = lab_stats(lab);
  auto mapped = torch::empty_like(lab);
  for (int c = 0; c < 3; ++c) {
    auto ch = lab.select(2, c);
    if (src.std[c] > 1e-8) {
      mapped.select(2, c).copy_((ch - src.mean[c]) * (target.std[c] / src.std[c]) + target.mean[c]);
    } else {
      mapped.select(2, c).copy_(ch - src.mean[c] + target.mean[c]);
    }
  }
  return lab_to_rgb(mapped);
}

ImagePatch stain_transfer(const ImagePatch& image, const StainStats& target) {
  auto rgb = stain_transfer_unclipped(image, target);
  return ImagePatch(rgb.clamp(0.0, 1.0).to(torch::kFloat32), image.id());
}

ImagePatch stain_augment(const ImagePatch& image, uint64_t seed, const StainRanges& ranges) {
  return stain_transfer(image, draw_stain_target(seed, ranges));
}

// ---------------------------------------------------------------------------
// Procedural texture

namespace {

torch::Tensor value_noise(Rng& rng, int64_t h, int64_t w, int64_t cell) {
  const auto gh = h / cell + 2;
  const auto gw = w / cell + 2;
  std::vector<float> grid(static_cast<size_t>(gh * gw));
  for (auto& g : grid) g = static_cast<float>(rng.uniform());
  auto t = torch::from_blob(grid.data(), {1, 1, gh, gw}, torch::kFloat32).clone();
  auto up = F::interpolate(t, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{gh * cell, gw * cell})
                                  .mode(torch::kBicubic)
                                  .align_corners(false));
  using torch::indexing::Slice;
  return up.index({0, 0, Slice(0, h), Slice(0, w)}).contiguous();
}

}  // namespace

ImagePatch procedural_texture(int64_t height, int64_t width, uint64_t seed) {
  Rng rng(derive_seed(seed, {0x7e47u}));
  const auto base = torch::tensor({0.93f, 0.75f, 0.85f});
  auto img = base.view({1, 1, 3}) * (0.85f + 0.15f * value_noise(rng, height, width, 16)).unsqueeze(2);
  img = img * (0.8f + 0.2f * value_noise(rng, height, width, 4)).unsqueeze(2);

  auto grain = value_noise(rng, height, width, 2);
  auto yy = torch::arange(height, torch::kFloat32).view({-1, 1}).expand({height, width});
  auto xx = torch::arange(width, torch::kFloat32).view({1, -1}).expand({height, width});
  const double area_scale = static_cast<double>(height * width) / 4096.0;
  const auto n_nuclei = static_cast<int64_t>(std::round(rng.uniform(6.0, 16.0) * area_scale));
  for (int64_t k = 0; k < n_nuclei; ++k) {
    const double cy = rng.uniform() * height;
    const double cx = rng.uniform() * width;
    const double a = 2.0 + rng.uniform() * 5.0;
    const double b = 2.0 + rng.uniform() * 5.0;
    const double th = rng.uniform() * std::numbers::pi;
    const double shade = 0.6 + 0.4 * rng.uniform();
    auto dy = yy - cy;
    auto dx = xx - cx;
    auto u = (dx * std::cos(th) + dy * std::sin(th)) / a;
    auto v = (-dx * std::sin(th) + dy * std::cos(th)) / b;
    auto inside = (u * u + v * v <= 1.0).unsqueeze(2);
    auto colour = torch::tensor({0.35f, 0.2f, 0.55f}).view({1, 1, 3}) * static_cast<float>(shade) *
                  (0.85f + 0.3f * grain).unsqueeze(2);
    img = torch::where(inside, colour, img);
  }
  std::vector<float> jitter(static_cast<size_t>(height * width * 3));
  for (auto& j : jitter) j = static_cast<float>(0.03 * (rng.uniform() - 0.5));
  img = img + torch::from_blob(jitter.data(), {height, width, 3}, torch::kFloat32);
  return ImagePatch(img.clamp(0.0, 1.0).contiguous(), "tex" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Label sidecar

void write_label_sidecar(const std::vector<LabelMap>& labels, std::span<const double> offsets,
                         const fs::path& path) {
  if (labels.empty()) throw ValidationError("label sidecar: no planes");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  const auto& first = labels.front();
  out << "# mop defocus labels v1\n";
  out << "# planes=" << labels.size() << " rows=" << first.rows << " cols=" << first.cols
      << " block=" << first.block << "\n";
  for (size_t k = 0; k < labels.size(); ++k) {
    out << "# plane " << k << " offset=" << offsets[k] << "\n";
    for (const auto& l : labels[k].labels) out << l.d << ' ' << l.c << '\n';
  }
}

std::vector<LabelMap> read_label_sidecar(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label sidecar " + path.string());
  std::string line;
  int64_t planes = -1, rows = 0, cols = 0, block = 32;
  std::vector<DefocusLabel> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.find("planes=") != std::string::npos) {
        std::istringstream hs(line.substr(1));
        std::string kv;
        while (hs >> kv) {
          auto eq = kv.find('=');
          if (eq == std::string::npos) continue;
          const auto key = kv.substr(0, eq);
          const auto val = std::stoll(kv.substr(eq + 1));
          if (key == "planes") planes = val;
          if (key == "rows") rows = val;
          if (key == "cols") cols = val;
          if (key == "block") block = val;
        }
      }
      continue;
    }
    std::istringstream ls(line);
    DefocusLabel l;
    if (!(ls >> l.d >> l.c)) throw FormatError(path.string() + ": malformed label line '" + line + "'");
    values.push_back(l);
  }
  if (planes < 1 || rows < 1 || cols < 1 || static_cast<int64_t>(values.size()) != planes * rows * cols) {
    throw FormatError(path.string() + ": label count does not match header");
  }
  std::vector<LabelMap> out;
  for (int64_t k = 0; k < planes; ++k) {
    LabelMap lm{rows, cols, block, {}};
    lm.labels.assign(values.begin() + k * rows * cols, values.begin() + (k + 1) * rows * cols);
    out.push_back(std::move(lm));
  }
  return out;
}

}  // namespace mop
