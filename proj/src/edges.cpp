#include "mop/edges.hpp"

#include <cmath>
#include <deque>

#include "mop/errors.hpp"

namespace F = torch::nn::functional;

namespace mop {

namespace {

int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

using Plane = std::vector<double>;

// Separable correlation with reflected borders: rows first, then columns.
Plane separable(const Plane& src, int64_t h, int64_t w, const std::vector<double>& kr, const std::vector<double>& kc) {
  const auto rr = static_cast<int64_t>(kr.size() / 2);
  const auto rc = static_cast<int64_t>(kc.size() / 2);
  Plane tmp(src.size()), out(src.size());
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int64_t j = -rc; j <= rc; ++j) s += kc[j + rc] * src[y * w + reflect(x + j, w)];
      tmp[y * w + x] = s;
    }
  }
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int64_t i = -rr; i <= rr; ++i) s += kr[i + rr] * tmp[reflect(y + i, h) * w + x];
      out[y * w + x] = s;
    }
  }
  return out;
}

}  // namespace

int64_t EdgeMap::count() const {
  int64_t n = 0;
  for (auto v : mask) n += v;
  return n;
}

torch::Tensor EdgeMap::tensor() const {
  auto t = torch::empty({1, height, width}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (size_t i = 0; i < mask.size(); ++i) p[i] = mask[i];
  return t;
}

EdgeMap canny(const ImagePatch& image, double low, double high) { return canny(image, CannyParams{low, high, 1.4}); }

EdgeMap canny(const ImagePatch& image, const CannyParams& params) {
  if (!(params.low >= 0.0 && params.low < params.high && params.high <= 1.0)) {
    throw ParameterError("canny thresholds must satisfy 0 <= low < high <= 1");
  }
  if (params.sigma <= 0.0) throw ParameterError("canny sigma must be positive");
  const auto h = image.height(), w = image.width();
  auto px = image.pixels().to(torch::kFloat64).contiguous();
  const auto* p = px.data_ptr<double>();

  Plane gray(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < h * w; ++i) gray[i] = 0.299 * p[3 * i] + 0.587 * p[3 * i + 1] + 0.114 * p[3 * i + 2];

  const auto radius = static_cast<int64_t>(std::ceil(3.0 * params.sigma));
  std::vector<double> g(static_cast<size_t>(2 * radius + 1));
  double gs = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) gs += g[i + radius] = std::exp(-0.5 * i * i / (params.sigma * params.sigma));
  for (auto& v : g) v /= gs;
  auto smooth = separable(gray, h, w, g, g);

  // Sobel: gx = [1 2 1]^T (x) [-1 0 1], gy the transpose.
  auto gx = separable(smooth, h, w, {1.0, 2.0, 1.0}, {-1.0, 0.0, 1.0});
  auto gy = separable(smooth, h, w, {-1.0, 0.0, 1.0}, {1.0, 2.0, 1.0});
  const double norm = 4.0 * std::sqrt(2.0);
  Plane mag(gray.size());
  for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::hypot(gx[i], gy[i]) / norm;

  auto m = [&](int64_t y, int64_t x) { return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag[y * w + x]; };
  Plane thin(gray.size(), 0.0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double a = mag[y * w + x];
      if (a <= 0.0) continue;
      double ang = std::atan2(gy[y * w + x], gx[y * w + x]) * 180.0 / M_PI;
      if (ang < 0.0) ang += 180.0;
      int64_t dy = 0, dx = 1;
      if (ang >= 22.5 && ang < 67.5) {
        dy = 1;
        dx = 1;
      } else if (ang >= 67.5 && ang < 112.5) {
        dy = 1;
        dx = 0;
      } else if (ang >= 112.5 && ang < 157.5) {
        dy = 1;
        dx = -1;
      }
      const double prev = m(y - dy, x - dx);
      const double next = m(y + dy, x + dx);
      // Plateaus keep the first pixel along the gradient direction only.
      if (a > prev + kCannyTieTolerance && a >= next - kCannyTieTolerance) thin[y * w + x] = a;
    }
  }

  EdgeMap out{h, w, std::vector<uint8_t>(gray.size(), 0)};
  std::deque<int64_t> queue;
  for (int64_t i = 0; i < h * w; ++i) {
    if (thin[i] >= params.high) {
      out.mask[i] = 1;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    const auto i = queue.front();
    queue.pop_front();
    const auto y = i / w, x = i % w;
    for (int64_t dy = -1; dy <= 1; ++dy) {
      for (int64_t dx = -1; dx <= 1; ++dx) {
        const auto yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const auto j = yy * w + xx;
        if (!out.mask[j] && thin[j] >= params.low) {
          out.mask[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return out;
}

EdgeEmbedImpl::EdgeEmbedImpl(int64_t channels) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, channels, 3).padding(1)));
}

torch::Tensor EdgeEmbedImpl::forward(const torch::Tensor& edges) {
  if (edges.dim() != 4 || edges.size(1) != 1) throw DimensionError("edge embed expects B x 1 x H x W");
  return conv_(edges);
}

DefocusConfidenceImpl::DefocusConfidenceImpl(int64_t defocus_channels) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(defocus_channels, 1, 1)));
}

torch::Tensor DefocusConfidenceImpl::forward(const torch::Tensor& p_d, std::pair<int64_t, int64_t> target_hw) {
  if (p_d.dim() != 4 || p_d.size(1) != conv_->options.in_channels()) {
    throw DimensionError("defocus confidence expects B x " + std::to_string(conv_->options.in_channels()) +
                         " x h x w, got " + c10::str(p_d.sizes()));
  }
  auto c = torch::sigmoid(conv_(p_d));
  return F::interpolate(c, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{target_hw.first, target_hw.second})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

void DefocusConfidenceImpl::init_from_ctf_head(DefocusEstimator& estimator, double gain) {
  torch::NoGradGuard guard;
  auto& head = estimator->head();
  if (head->weight.size(1) != conv_->weight.size(1)) {
    throw DimensionError("defocus confidence: estimator feature width does not match");
  }
  conv_->weight.copy_((gain * head->weight[1]).view_as(conv_->weight));
  conv_->bias.fill_(gain * (head->bias[1].item<double>() - 0.5));
}

torch::Tensor weighted_edge_prompt(const torch::Tensor& edge_features, const torch::Tensor& confidence) {
  const auto nd = edge_features.dim();
  if (nd != confidence.dim() || (nd != 3 && nd != 4)) {
    throw DimensionError("weighted_edge_prompt: expected matching CxHxW/1xHxW or BxCxHxW/Bx1xHxW ranks");
  }
  if (edge_features.size(-1) != confidence.size(-1) || edge_features.size(-2) != confidence.size(-2) ||
      confidence.size(-3) != 1 || (nd == 4 && confidence.size(0) != edge_features.size(0))) {
    throw DimensionError("weighted_edge_prompt: feature shape " + c10::str(edge_features.sizes()) +
                         " incompatible with confidence shape " + c10::str(confidence.sizes()));
  }
  return edge_features * confidence;
}

}  // namespace mop
