#include <cmath>
#include <fstream>

#include "support/doctest_torch.hpp"
#include "mop/encoders.hpp"
#include "mop/errors.hpp"
#include "mop/metrics.hpp"
#include "mop/random.hpp"
#include "support/tmpdir.hpp"

using namespace mop;

namespace {

// Direct per-window SSIM: explicit loops, normalised Gaussian weights, biased moments.
double ssim_reference(const torch::Tensor& a_chw, const torch::Tensor& b_chw) {
  auto a = a_chw.to(torch::kFloat64).contiguous(), b = b_chw.to(torch::kFloat64).contiguous();
  const int64_t C = a.size(0), H = a.size(1), W = a.size(2), K = 11;
  double w[11][11], ws = 0.0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) ws += w[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  const auto* pa = a.data_ptr<double>();
  const auto* pb = b.data_ptr<double>();
  double total = 0.0;
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (int64_t y = 0; y + K <= H; ++y) {
      for (int64_t x = 0; x + K <= W; ++x) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int i = 0; i < K; ++i) {
          for (int j = 0; j < K; ++j) {
            const double g = w[i][j] / ws;
            const double u = pa[(c * H + y + i) * W + x + j], v = pb[(c * H + y + i) * W + x + j];
            mx += g * u;
            my += g * v;
            xx += g * u * u;
            yy += g * v * v;
            xy += g * u * v;
          }
        }
        const double vx = xx - mx * mx, vy = yy - my * my, cv = xy - mx * my;
        sum += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
    total += sum / static_cast<double>((H - K + 1) * (W - K + 1));
  }
  return total / static_cast<double>(C);
}

std::shared_ptr<Encoder> random_encoder() {
  torch::manual_seed(7);
  TinyVit vit(16, 32, 1, 2, 7);
  vit->eval();
  return std::make_shared<TinyVitEncoder>(vit);
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("PSNR from a known MSE and the cap") {
    auto a = torch::full({3, 16, 16}, 0.5), b = torch::full({3, 16, 16}, 0.6);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-6));
    CHECK(psnr(a, a) == kPsnrCap);
    CHECK(psnr(a, a + 1e-7) == kPsnrCap);
    CHECK_THROWS_AS(psnr(a, torch::zeros({3, 16, 15})), DimensionError);
  }

  TEST_CASE("SSIM agrees with a direct window computation") {
    auto gen = make_generator(3);
    for (int k = 0; k < 5; ++k) {
      auto a = torch::rand({3, 20 + k, 24}, gen);
      auto b = (a + 0.1 * k * torch::randn({3, 20 + k, 24}, gen)).clamp(0, 1);
      CHECK(ssim(a, b) == doctest::Approx(ssim_reference(a, b)).epsilon(1e-10));
    }
    auto a = torch::rand({3, 16, 16}, gen);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
    CHECK_THROWS_AS(ssim(torch::rand({3, 10, 16}), torch::rand({3, 10, 16})), DimensionError);
  }

  TEST_CASE("property: SSIM is symmetric and bounded") {
    auto gen = make_generator(4);
    for (int k = 0; k < 10; ++k) {
      auto a = torch::rand({3, 16, 16}, gen), b = torch::rand({3, 16, 16}, gen);
      const double s = ssim(a, b);
      CHECK(s == doctest::Approx(ssim(b, a)).epsilon(1e-12));
      CHECK(s <= 1.0 + 1e-12);
      CHECK(s >= -1.0 - 1e-12);
    }
  }

  TEST_CASE("perceptual proxy is a bounded, symmetric distance") {
    auto enc = random_encoder();
    auto gen = make_generator(5);
    auto a = ImagePatch(torch::rand({32, 32, 3}, gen)), b = ImagePatch(torch::rand({32, 32, 3}, gen));
    CHECK(perceptual_proxy(a, a, *enc) == doctest::Approx(0.0));
    const double d = perceptual_proxy(a, b, *enc);
    CHECK(d > 0.0);
    CHECK(d <= 4.0);
    CHECK(d == doctest::Approx(perceptual_proxy(b, a, *enc)));
    auto batch = perceptual_proxy_batch(torch::stack({a.chw(), b.chw()}), torch::stack({b.chw(), b.chw()}), *enc);
    CHECK(batch[0].item<double>() == doctest::Approx(d).epsilon(1e-5));
    CHECK(batch[1].item<double>() == doctest::Approx(0.0));
  }

  TEST_CASE("dataset grouping: slides versus tiles") {
    mop::testing::TempDir dir;
    auto gen = make_generator(6);
    std::vector<ManifestRecord> pred, ref;
    for (int s = 0; s < 2; ++s) {
      const auto id = "s" + std::to_string(s);
      auto r = ImagePatch(torch::rand({64, 32 * (s + 1), 3}, gen));
      auto p = ImagePatch((r.pixels() + 0.05 * torch::randn(r.pixels().sizes(), gen)).clamp(0, 1));
      save_png(r, dir / (id + "_ref.png"));
      save_png(p, dir / (id + "_pred.png"));
      ref.push_back({id, dir / (id + "_ref.png"), 0.8, {{0.0, dir / (id + "_ref.png")}}, {}, 0});
      pred.push_back({id, dir / (id + "_pred.png"), 0.8, {{0.0, dir / (id + "_pred.png")}}, {}, 0});
    }
    PerceptualScorer zero = [](const ImagePatch&, const ImagePatch&) { return 0.0; };
    auto grouped = evaluate_dataset(pred, ref, true, zero, 32);
    CHECK(grouped.units == 2);
    CHECK(grouped.aggregate.psnr ==
          doctest::Approx((grouped.per_slide["s0"].psnr + grouped.per_slide["s1"].psnr) / 2));
    auto tiled = evaluate_dataset(pred, ref, false, zero, 32);
    CHECK(tiled.units == 2 + 4);  // 64x32 -> 2 tiles, 64x64 -> 4 tiles
    // tile oracle: mean of per-tile PSNR
    double sum = 0.0;
    for (const auto& r : pred) {
      auto p = load_image(r.fused), q = load_image(ref[&r - pred.data()].fused);
      auto pt = tile_image(p, 32, 32), qt = tile_image(q, 32, 32);
      for (size_t i = 0; i < pt.size(); ++i) sum += psnr(pt[i].second, qt[i].second);
    }
    CHECK(tiled.aggregate.psnr == doctest::Approx(sum / 6));
    auto missing = ref;
    missing.pop_back();
    CHECK_THROWS_AS(evaluate_dataset(pred, missing, true, zero), ValidationError);
    CHECK_THROWS_AS(evaluate_dataset(pred, ref, true, PerceptualScorer{}), RegistryError);

    write_metric_records(grouped, dir / "m.jsonl");
    std::ifstream in(dir / "m.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 3);
  }

  TEST_CASE("property: PSNR strictly decreases with MSE") {
    auto base = torch::full({3, 16, 16}, 0.5);
    double prev = kPsnrCap;
    for (double e : {0.001, 0.01, 0.05, 0.1, 0.3}) {
      const double v = psnr(base, base + e);
      CHECK(v < prev);
      CHECK(v == doctest::Approx(-10.0 * std::log10(e * e)).epsilon(1e-4));  // float32 inputs
      prev = v;
    }
  }

  TEST_CASE("SSIM reaches one only for identical images") {
    auto gen = make_generator(9);
    auto a = torch::rand({3, 16, 16}, gen);
    CHECK(std::abs(ssim(a, a) - 1.0) < 1e-9);
    auto b = a.clone();
    b[1][8][8] += 0.01;
    CHECK(ssim(a, b) < 1.0 - 1e-9);
  }
}
