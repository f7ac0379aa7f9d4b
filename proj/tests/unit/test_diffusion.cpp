#include <cmath>

#include "support/doctest_torch.hpp"
#include "mop/diffusion.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

using namespace mop;

TEST_SUITE("diffusion") {
  TEST_CASE("schedule matches the geometric closed form") {
    // eta_t = eta1^((T-t)/(T-1)) evaluated independently.
    const auto s = make_schedule(4, 2.0, 0.04);
    REQUIRE(s.eta.size() == 5);
    CHECK(s.eta[0] == 0.0);
    const double expected[] = {0.04, std::pow(0.04, 2.0 / 3.0), std::pow(0.04, 1.0 / 3.0), 1.0};
    for (int t = 1; t <= 4; ++t) CHECK(s.eta[t] == doctest::Approx(expected[t - 1]).epsilon(1e-14));
    CHECK(s.alpha_at(1) == doctest::Approx(0.04));
  }

  TEST_CASE("T = 1 degenerates to a single jump") {
    const auto s = make_schedule(1, 1.0, 0.3);
    CHECK(s.eta == std::vector<double>{0.0, 1.0});
    CHECK(s.alpha == std::vector<double>{1.0});
  }

  TEST_CASE("invalid schedule parameters are rejected") {
    CHECK_THROWS_AS(make_schedule(0, 1.0, 0.1), ParameterError);
    CHECK_THROWS_AS(make_schedule(4, 0.0, 0.1), ParameterError);
    CHECK_THROWS_AS(make_schedule(4, 1.0, 1.0), ParameterError);
    CHECK_THROWS_AS(make_schedule(4, 1.0, 0.0), ParameterError);
  }

  TEST_CASE("property: random schedules are monotone and telescoping") {
    Rng rng(5);
    for (int k = 0; k < 200; ++k) {
      const auto T = rng.integer(1, 200);
      const auto s = make_schedule(T, rng.uniform(0.01, 5.0), rng.uniform(1e-5, 0.99));
      double sum = 0.0;
      for (int64_t t = 1; t <= T; ++t) {
        REQUIRE(s.eta[t] > s.eta[t - 1]);
        REQUIRE(s.alpha_at(t) > 0.0);
        sum += s.alpha_at(t);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }

  TEST_CASE("forward marginal endpoints") {
    const auto s = make_schedule();
    auto gen = make_generator(1);
    auto x0 = torch::rand({2, 3, 8, 8}, gen), y = torch::rand({2, 3, 8, 8}, gen), n = torch::randn({2, 3, 8, 8}, gen);
    CHECK(torch::equal(forward_marginal(x0, y, 0, n, s), x0));
    auto xT = forward_marginal(x0, y, 4, torch::zeros_like(n), s);
    CHECK((xT - y).abs().max().item<double>() < 1e-6);
    // per-item form agrees with the scalar form
    auto t = torch::tensor({2, 3}, torch::kLong);
    auto batched = forward_marginal(x0, y, t, n, s);
    CHECK(torch::allclose(batched[0], forward_marginal(x0[0], y[0], 2, n[0], s)));
    CHECK(torch::allclose(batched[1], forward_marginal(x0[1], y[1], 3, n[1], s)));
    CHECK_THROWS_AS(forward_marginal(x0, y, 5, n, s), ParameterError);
  }

  TEST_CASE("posterior moments equal Gaussian conditioning") {
    for (auto [T, kappa, eta1] : {std::tuple{4, 2.0, 0.04}, std::tuple{10, 0.7, 0.002}}) {
      const auto s = make_schedule(T, kappa, eta1);
      for (int64_t t = 2; t <= T; ++t) {
        // x_{t-1} ~ N(., k^2 eta_{t-1}), x_t | x_{t-1} ~ N(x_{t-1} + alpha e, k^2 alpha)
        const double vp = kappa * kappa * s.eta[t - 1], vs = kappa * kappa * s.alpha_at(t);
        const double v = 1.0 / (1.0 / vp + 1.0 / vs);
        const auto m = posterior_moments(t, s);
        CHECK(m.variance == doctest::Approx(v).epsilon(1e-12));
        CHECK(m.mean_xt == doctest::Approx(v / vs).epsilon(1e-12));
        // the y coefficient cancels; what remains on x0 comes from both factors
        const double c0 = v * ((1.0 - s.eta[t - 1]) / vp + s.alpha_at(t) / vs);
        CHECK(m.mean_x0 == doctest::Approx(c0).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("posterior at t = 1 returns the x0 estimate unchanged") {
    const auto s = make_schedule();
    auto gen = make_generator(2);
    auto xt = torch::rand({1, 3, 8, 8}, gen), x0 = torch::rand({1, 3, 8, 8}, gen);
    CHECK(torch::equal(posterior_step(xt, x0, xt, 1, torch::randn({1, 3, 8, 8}, gen), s), x0));
  }

  TEST_CASE("sampler is deterministic per seed and varies across seeds") {
    const auto s = make_schedule();
    auto gen = make_generator(3);
    auto cond = torch::rand({1, 3, 16, 16}, gen);
    DenoiseFn f = [&](const torch::Tensor& x, const torch::Tensor&) { return 0.5 * x + 0.5 * cond; };
    auto a = sample(f, cond, s, 11), b = sample(f, cond, s, 11), c = sample(f, cond, s, 12);
    CHECK(torch::equal(a, b));
    CHECK_FALSE(torch::equal(a, c));
    CHECK(a.min().item<double>() >= 0.0);
    CHECK(a.max().item<double>() <= 1.0);
  }

  TEST_CASE("observer sees every reverse step") {
    const auto s = make_schedule(6, 1.0, 0.01);
    auto cond = torch::full({1, 3, 16, 16}, 0.5);
    std::vector<int64_t> steps;
    DenoiseFn f = [&](const torch::Tensor&, const torch::Tensor&) { return cond; };
    sample(f, cond, s, 1, [&](int64_t t, const torch::Tensor&) { steps.push_back(t); });
    CHECK(steps == std::vector<int64_t>{6, 5, 4, 3, 2, 1});
  }

  TEST_CASE("loss with an exact denoiser is zero and with the identity equals MSE(cond, hq)") {
    const auto s = make_schedule();
    auto gen = make_generator(4);
    auto hq = torch::rand({2, 3, 8, 8}, gen), cond = torch::rand({2, 3, 8, 8}, gen);
    auto t = torch::tensor({1, 4}, torch::kLong);
    auto n = torch::randn({2, 3, 8, 8}, gen);
    DenoiseFn exact = [&](const torch::Tensor&, const torch::Tensor&) { return hq; };
    DenoiseFn ident = [&](const torch::Tensor&, const torch::Tensor&) { return cond; };
    CHECK(diffusion_loss(exact, hq, cond, t, n, s).item<double>() == 0.0);
    CHECK(diffusion_loss(ident, hq, cond, t, n, s).item<double>() ==
          doctest::Approx((cond - hq).pow(2).mean().item<double>()).epsilon(1e-6));
  }

  TEST_CASE("warmup then cosine learning rate") {
    PDiffusionTrainConfig c;
    c.steps = 100;
    c.warmup = 10;
    c.lr = 1.0;
    CHECK(diffusion_lr(0, c) == doctest::Approx(0.1));
    CHECK(diffusion_lr(9, c) == doctest::Approx(1.0));
    CHECK(diffusion_lr(10, c) == doctest::Approx(1.0));
    CHECK(diffusion_lr(55, c) == doctest::Approx(0.5));
    CHECK(diffusion_lr(100, c) == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("untrained denoiser returns the condition") {
    DenoiserConfig cfg;
    cfg.widths = {16, 32};
    cfg.prompt_dim = 8;
    cfg.defocus_dim = 4;
    PDiffusion m(cfg);
    auto gen = make_generator(5);
    auto cond = torch::rand({2, 3, 32, 32}, gen);
    auto edges = (torch::rand({2, 1, 32, 32}, gen) > 0.8).to(torch::kFloat32);
    auto f = bind_denoiser(m, cond, torch::randn({2, 4, 8}, gen), edges, torch::randn({2, 4, 1, 1}, gen));
    auto out = f(torch::randn({2, 3, 32, 32}, gen), torch::tensor({1, 3}, torch::kLong));
    CHECK(torch::equal(out, cond));
  }

  TEST_CASE("resumed training reproduces an uninterrupted run") {
    DenoiserConfig net;
    net.widths = {8, 16};
    net.heads = 2;
    net.prompt_dim = 8;
    net.defocus_dim = 4;
    net.edge_channels = 4;
    PDiffusionTrainConfig cfg;
    cfg.net = net;
    cfg.steps = 6;
    cfg.warmup = 2;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    auto gen = make_generator(6);
    std::vector<PDiffusionSample> data;
    for (int i = 0; i < 3; ++i) {
      data.push_back({torch::rand({3, 16, 16}, gen), torch::rand({3, 16, 16}, gen), torch::rand({3, 16, 16}, gen),
                      torch::randn({4, 8}, gen), torch::randn({4, 1, 1}, gen),
                      (torch::rand({1, 16, 16}, gen) > 0.7).to(torch::kFloat32)});
    }
    auto full = train_pdiffusion(data, cfg, 77);
    auto first = train_pdiffusion(data, cfg, 77, nullptr, 3);
    PDiffusionResume r{first.model, first.optimizer_state, first.steps};
    auto second = train_pdiffusion(data, cfg, 77, &r);
    CHECK(second.steps == 6);
    auto pa = full.model->parameters(), pb = second.model->parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
  }
}
