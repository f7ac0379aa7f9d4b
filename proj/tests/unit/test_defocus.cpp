#include "support/doctest_torch.hpp"
#include "mop/defocus.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"
#include "support/synth.hpp"

using namespace mop;

TEST_SUITE("defocus") {
  TEST_CASE("estimator output shapes follow the stride") {
    torch::manual_seed(0);
    DefocusEstimator m;
    m->eval();
    auto out = m->forward(torch::rand({2, 3, 64, 96}));
    CHECK(out.pred.sizes() == torch::IntArrayRef{2, 2});
    CHECK(out.features.sizes() == torch::IntArrayRef{2, 128, 2, 3});
    auto [est, prompt] = estimate(m, procedural_texture(64, 64, 1), false);
    CHECK(prompt.features.sizes() == torch::IntArrayRef{128, 2, 2});
    CHECK(prompt.source_hw == std::pair<int64_t, int64_t>{64, 64});
    CHECK(std::isfinite(est.d_hat));
  }

  TEST_CASE("per-sample loss is the L1 sum over both targets") {
    CHECK(defocus_loss(DefocusEstimate{1.5, 0.7}, DefocusLabel{-0.5, 0.9}) == doctest::Approx(2.2));
    std::vector<DefocusEstimate> p{{0, 1}, {2, 0.5}};
    std::vector<DefocusLabel> g{{1, 1}, {2, 0.25}};
    CHECK(defocus_loss(p, g) == doctest::Approx((1.0 + 0.25) / 2));
    auto pred = torch::tensor({{1.5, 0.7}, {0.0, 1.0}});
    auto tgt = torch::tensor({{-0.5, 0.9}, {1.0, 1.0}});
    CHECK(defocus_loss(pred, tgt).item<double>() == doctest::Approx((2.2 + 1.0) / 2).epsilon(1e-6));
    CHECK(defocus_loss(pred, tgt, DefocusTargets::kDistance).item<double>() == doctest::Approx(1.5).epsilon(1e-6));
    CHECK(defocus_loss(pred, tgt, DefocusTargets::kCtf).item<double>() == doctest::Approx(0.1).epsilon(1e-5));
  }

  TEST_CASE("reported CTF is clipped into (0, 1]") {
    CHECK(DefocusEstimate{0, 1.3}.c_reported() == 1.0);
    CHECK(DefocusEstimate{0, -0.2}.c_reported() > 0.0);
    CHECK(DefocusEstimate{0, 0.4}.c_reported() == 0.4);
  }

  TEST_CASE("heatmap applies the distance row per location") {
    // the explicit overload takes the distance row of the head only
    DefocusPrompt p;
    auto gen = make_generator(2);
    p.features = torch::randn({4, 2, 2}, gen);
    p.source_hw = {64, 64};
    auto w = torch::randn({2, 4}, gen), b = torch::randn({2}, gen);
    auto hm = defocus_heatmap(p, w[0], b[0]);
    CHECK(hm.size(-1) == 64);
    CHECK(hm.size(-2) == 64);
    CHECK(hm.min().item<double>() >= 0.0);
    // a constant feature map gives a constant heatmap equal to |w_d . f + b_d|
    p.features = torch::ones({4, 2, 2});
    auto flat = defocus_heatmap(p, w[0], b[0]);
    const double expect = std::abs((w[0].sum() + b[0]).item<double>());
    CHECK((flat - expect).abs().max().item<double>() < 1e-5);
  }

  TEST_CASE("sample crops carry region-averaged labels") {
    auto st = synth_focal_stack(procedural_texture(64, 128, 3), std::vector<double>{-2.0, 2.0}, OpticsParams{}, 1.0);
    auto s = defocus_samples(st, 64);
    REQUIRE(s.size() == 4);
    CHECK(s[0].image.sizes() == torch::IntArrayRef{3, 64, 64});
    CHECK(s[0].label.d == doctest::Approx(st.labels[0].mean_over(0, 0, 64, 64).d));
    CHECK(s[1].label.d == doctest::Approx(st.labels[0].mean_over(0, 64, 64, 64).d));
  }

  TEST_CASE("targets parse and print") {
    CHECK(parse_defocus_targets("both") == DefocusTargets::kBoth);
    CHECK(to_string(parse_defocus_targets("ctf")) == "ctf");
    CHECK_THROWS_AS(parse_defocus_targets("depth"), ParameterError);
  }

  TEST_CASE("short training lowers the loss and is seeded") {
    auto data = mop::testing::defocus_set(1, 32);
    DefocusConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.lr = 1e-3;
    auto a = train_defocus(data, cfg, 5), b = train_defocus(data, cfg, 5);
    REQUIRE(a.epoch_loss.size() == 3);
    CHECK(a.epoch_loss.back() < a.epoch_loss.front());
    CHECK(a.epoch_loss == b.epoch_loss);
    auto ev = evaluate_defocus(a.model, data);
    CHECK(ev.z_accuracy >= 0.0);
    CHECK(ev.z_accuracy <= 1.0);
  }

  TEST_CASE("loss gradient is the sign of the residual") {
    auto gen = make_generator(12);
    auto pred = torch::randn({6, 2}, torch::TensorOptions().dtype(torch::kFloat64)).set_requires_grad(true);
    auto tgt = torch::randn({6, 2}, torch::kFloat64);
    auto loss = defocus_loss(pred, tgt);
    loss.backward();
    const double h = 1e-6;
    for (int64_t i = 0; i < 6; ++i) {
      for (int64_t j = 0; j < 2; ++j) {
        auto p = pred.detach().clone(), m = pred.detach().clone();
        p[i][j] += h;
        m[i][j] -= h;
        const double fd = (defocus_loss(p, tgt) - defocus_loss(m, tgt)).item<double>() / (2 * h);
        const double analytic = pred.grad()[i][j].item<double>();
        const double expect = ((pred[i][j] - tgt[i][j]).item<double>() > 0 ? 1.0 : -1.0) / 6.0;
        CHECK(analytic == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(fd - analytic) <= 1e-4 * std::abs(analytic));
      }
    }
  }

  TEST_CASE("property: heatmaps are non-negative with the source shape") {
    auto gen = make_generator(13);
    Rng rng(13);
    for (int k = 0; k < 20; ++k) {
      DefocusPrompt p;
      const auto h = rng.integer(1, 4), w = rng.integer(1, 4);
      p.features = 5.0 * torch::randn({4, h, w}, gen);
      p.source_hw = {h * 32, w * 32};
      auto hm = defocus_heatmap(p, torch::randn({4}, gen), torch::randn({1}, gen));
      CHECK(hm.size(0) == h * 32);
      CHECK(hm.size(1) == w * 32);
      CHECK(hm.min().item<double>() >= 0.0);
    }
  }

  TEST_CASE("without stain normalisation estimates depend only on pixels and weights") {
    torch::manual_seed(4);
    DefocusEstimator m;
    auto img = procedural_texture(64, 64, 14);
    auto a = estimate(m, img, false), b = estimate(m, img, false);
    CHECK(a.first.d_hat == b.first.d_hat);
    CHECK(torch::equal(a.second.features, b.second.features));
    DefocusConfig cfg;
    auto c = estimate(m, img, true, cfg.stain_reference);
    CHECK(std::isfinite(c.first.d_hat));
  }
}
