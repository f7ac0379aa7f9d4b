#include "support/doctest_torch.hpp"
#include "mop/errors.hpp"
#include "mop/pformer.hpp"
#include "mop/random.hpp"

using namespace mop;

namespace {

PFormerConfig tiny() {
  PFormerConfig c;
  c.widths = {8, 16};
  c.blocks = {1, 1};
  c.heads = {1, 2};
  c.prompt_dim = 12;
  c.batch_size = 2;
  c.epochs = 2;
  c.lr = 1e-3;
  return c;
}

}  // namespace

TEST_SUITE("pformer") {
  TEST_CASE("untrained network is the identity on the degraded input") {
    PFormer m(tiny());
    auto gen = make_generator(1);
    auto x = torch::rand({2, 3, 32, 32}, gen);
    CHECK(torch::equal(pformer_forward_batch(m, x, torch::randn({2, 12}, gen)), x));
  }

  TEST_CASE("router weights form a distribution per item") {
    torch::nn::Linear router(8 + 12, 3);
    auto gen = make_generator(2);
    auto w = router_weights(router, torch::randn({4, 8, 6, 6}, gen), torch::randn({4, 12}, gen));
    CHECK(w.sizes() == torch::IntArrayRef{4, 3});
    CHECK(torch::allclose(w.sum(1), torch::ones({4})));
    CHECK(w.min().item<double>() > 0.0);
  }

  TEST_CASE("expert mixture with a single unit weight adds that expert's GELU") {
    auto gen = make_generator(3);
    auto e0 = torch::randn({1, 4, 5, 5}, gen);
    std::vector<torch::Tensor> ex{torch::randn({1, 4, 5, 5}, gen), torch::randn({1, 4, 5, 5}, gen)};
    auto out = moe_combine(e0, ex, torch::tensor({{0.0f, 1.0f}}));
    CHECK(torch::allclose(out, e0 + torch::gelu(ex[1]), 1e-5, 1e-6));
    CHECK_THROWS_AS(moe_combine(e0, ex, torch::tensor({{1.0f}})), DimensionError);
  }

  TEST_CASE("config validation") {
    auto c = tiny();
    c.widths = {8, 12};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = tiny();
    c.heads = {3, 2};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = tiny();
    c.blocks = {1};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    CHECK(parse_lr_schedule("cosine") == LrSchedule::kCosine);
    CHECK(to_string(LrSchedule::kStep) == "step");
    CHECK_THROWS_AS(parse_lr_schedule("linear"), ParameterError);
  }

  TEST_CASE("training records per-block utilisation that sums to one") {
    auto gen = make_generator(4);
    std::vector<PFormerSample> data;
    for (int i = 0; i < 4; ++i) {
      auto hq = torch::rand({3, 32, 32}, gen);
      data.push_back({(hq + 0.05 * torch::randn({3, 32, 32}, gen)).clamp(0, 1), hq, torch::randn({12}, gen)});
    }
    auto r = train_pformer(data, tiny(), 5);
    CHECK(r.steps == 4);
    REQUIRE(r.utilization.size() == 2);
    const size_t n_blocks = PFormer(tiny())->all_blocks().size();
    for (const auto& epoch : r.utilization) {
      REQUIRE(epoch.size() == n_blocks);
      for (const auto& row : epoch) {
        double s = 0.0;
        for (double v : row) s += v;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
    auto again = train_pformer(data, tiny(), 5);
    CHECK(again.step_loss == r.step_loss);
  }

  TEST_CASE("callback can stop training early") {
    auto gen = make_generator(6);
    std::vector<PFormerSample> data;
    for (int i = 0; i < 4; ++i) data.push_back({torch::rand({3, 32, 32}, gen), torch::rand({3, 32, 32}, gen), torch::randn({12}, gen)});
    auto r = train_pformer(data, tiny(), 1, [](int64_t step, double, PFormer&) { return step < 2; });
    CHECK(r.steps == 2);
  }

  TEST_CASE("property: router outputs stay on the simplex under feature scaling") {
    torch::nn::Linear router(8 + 12, 3);
    auto gen = make_generator(7);
    auto f = torch::randn({3, 8, 4, 4}, gen);
    auto p = torch::randn({3, 12}, gen);
    for (double s : {1e-3, 0.5, 1.0, 7.0, 100.0}) {
      auto w = router_weights(router, s * f, p);
      CHECK((w >= 0).all().item<bool>());
      CHECK(((w.sum(1) - 1.0).abs() < 1e-6).all().item<bool>());
    }
  }
}
