#include "mop/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

#include "json.hpp"
#include "mop/errors.hpp"

namespace F = torch::nn::functional;

namespace mop {

namespace {

void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw DimensionError(std::string(what) + ": shapes " + c10::str(a.sizes()) + " and " + c10::str(b.sizes()) +
                         " differ");
  }
}

torch::Tensor ssim_window() {
  constexpr int64_t kSize = 11;
  constexpr double kSigma = 1.5;
  auto x = torch::arange(kSize, torch::kFloat64) - (kSize - 1) / 2.0;
  auto g = torch::exp(-x.pow(2) / (2.0 * kSigma * kSigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, kSize, kSize});
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "psnr");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double psnr(const ImagePatch& a, const ImagePatch& b) { return psnr(a.pixels(), b.pixels()); }

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  same_shape(a, b, "ssim");
  if (a.dim() != 3 || a.size(1) < 11 || a.size(2) < 11) {
    throw DimensionError("ssim needs CHW images with both sides >= 11, got " + c10::str(a.sizes()));
  }
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  auto x = a.to(torch::kFloat64).unsqueeze(1);  // C x 1 x H x W: channels as batch
  auto y = b.to(torch::kFloat64).unsqueeze(1);
  const auto w = ssim_window();
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, w); };
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2));
  return map.flatten(1).mean(1).mean().item<double>();
}

double ssim(const ImagePatch& a, const ImagePatch& b) { return ssim(a.chw(), b.chw()); }

torch::Tensor perceptual_proxy_batch(const torch::Tensor& a, const torch::Tensor& b, const Encoder& encoder) {
  same_shape(a, b, "perceptual_proxy");
  auto opts = F::NormalizeFuncOptions().dim(-1);
  auto ta = F::normalize(encoder.encode_batch(a).to(torch::kFloat64), opts);
  auto tb = F::normalize(encoder.encode_batch(b).to(torch::kFloat64), opts);
  return (ta - tb).pow(2).sum(-1).mean(-1);
}

double perceptual_proxy(const ImagePatch& a, const ImagePatch& b, const Encoder& encoder) {
  same_shape(a.pixels(), b.pixels(), "perceptual_proxy");
  auto opts = F::NormalizeFuncOptions().dim(-1);
  auto ta = F::normalize(encoder.encode(a).tokens.to(torch::kFloat64), opts);
  auto tb = F::normalize(encoder.encode(b).tokens.to(torch::kFloat64), opts);
  return (ta - tb).pow(2).sum(-1).mean().item<double>();
}

MetricTriple score_pair(const ImagePatch& pred, const ImagePatch& ref, const PerceptualScorer& scorer) {
  if (!scorer) throw RegistryError("no perceptual scorer configured");
  return {psnr(pred, ref), ssim(pred, ref), scorer(pred, ref)};
}

MetricReport evaluate_dataset(const std::vector<ManifestRecord>& predictions,
                              const std::vector<ManifestRecord>& references, bool group_by_slide,
                              const PerceptualScorer& scorer, int64_t tile) {
  std::map<std::string, const ManifestRecord*> refs;
  for (const auto& r : references) refs[r.id] = &r;
  std::set<std::string> seen;
  MetricReport report;
  MetricTriple sum;
  auto add = [&sum](const MetricTriple& m) {
    sum.psnr += m.psnr;
    sum.ssim += m.ssim;
    sum.perceptual += m.perceptual;
  };
  for (const auto& p : predictions) {
    auto it = refs.find(p.id);
    if (it == refs.end()) throw ValidationError("prediction '" + p.id + "' has no matching reference");
    seen.insert(p.id);
    auto pred = load_image(p.fused);
    auto ref = load_image(it->second->fused);
    if (pred.height() != ref.height() || pred.width() != ref.width()) {
      throw DimensionError("prediction '" + p.id + "' and its reference differ in size");
    }
    const auto slide = score_pair(pred, ref, scorer);
    report.per_slide[p.id] = slide;
    if (group_by_slide) {
      add(slide);
      ++report.units;
    } else {
      const auto ps = tile_image(pred, tile, tile);
      const auto rs = tile_image(ref, tile, tile);
      for (size_t i = 0; i < ps.size(); ++i) {
        add(score_pair(ps[i].second, rs[i].second, scorer));
        ++report.units;
      }
    }
  }
  for (const auto& r : references) {
    if (!seen.count(r.id)) throw ValidationError("reference '" + r.id + "' has no matching prediction");
  }
  if (report.units > 0) {
    const auto n = static_cast<double>(report.units);
    report.aggregate = {sum.psnr / n, sum.ssim / n, sum.perceptual / n};
  }
  return report;
}

void write_metric_table(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  size_t width = 9;
  for (const auto& [id, _] : report.per_slide) width = std::max(width, id.size());
  auto row = [&](const std::string& name, const MetricTriple& m) {
    os << std::left << std::setw(static_cast<int>(width)) << name << std::right << std::fixed << std::setprecision(4)
       << std::setw(12) << m.psnr << std::setw(10) << m.ssim << std::setw(12) << m.perceptual << '\n';
  };
  os << std::left << std::setw(static_cast<int>(width)) << "slide" << std::right << std::setw(12) << "psnr_db"
     << std::setw(10) << "ssim" << std::setw(12) << "perceptual" << '\n';
  for (const auto& [id, m] : report.per_slide) row(id, m);
  row("aggregate", report.aggregate);
}

void write_metric_records(const MetricReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  auto rec = [](const std::string& id, const MetricTriple& m) {
    return nlohmann::json{{"id", id}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"perceptual", m.perceptual}};
  };
  for (const auto& [id, m] : report.per_slide) os << rec(id, m).dump() << '\n';
  auto agg = rec("aggregate", report.aggregate);
  agg["units"] = report.units;
  os << agg.dump() << '\n';
}

}  // namespace mop
