#include "support/doctest_torch.hpp"
#include "mop/errors.hpp"
#include "mop/prompt.hpp"
#include "mop/random.hpp"

using namespace mop;

namespace {

PromptRestorerConfig small() {
  PromptRestorerConfig c;
  c.blocks = 2;
  c.heads = 2;
  c.dim = 16;
  c.defocus_dim = 8;
  return c;
}

}  // namespace

TEST_SUITE("prompt") {
  TEST_CASE("untrained restorer returns the degraded prompt") {
    PromptRestorer m(small());
    auto gen = make_generator(1);
    auto p_lp = torch::randn({2, 16, 16}, gen);
    auto out = m->forward(p_lp, torch::randn({2, 8, 2, 2}, gen));
    CHECK(torch::equal(out, p_lp));
  }

  TEST_CASE("shape errors") {
    PromptRestorer m(small());
    CHECK_THROWS_AS(m->forward(torch::randn({1, 4, 15}), torch::randn({1, 8, 2, 2})), DimensionError);
    CHECK_THROWS_AS(m->forward(torch::randn({1, 4, 16}), torch::randn({1, 7, 2, 2})), DimensionError);
    auto bad = small();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
  }

  TEST_CASE("defocus tokens: one per spatial cell") {
    PromptRestorer m(small());
    auto t = m->defocus_tokens(torch::randn({3, 8, 2, 4}));
    CHECK(t.sizes() == torch::IntArrayRef{3, 8, 16});
  }

  TEST_CASE("loss and distance formulas") {
    auto a = PathologyPrompt::from_tokens(torch::tensor({{1.0f, 2.0f}, {3.0f, 4.0f}}));
    auto b = PathologyPrompt::from_tokens(torch::tensor({{1.5f, 2.0f}, {1.0f, 4.0f}}));
    auto c = PathologyPrompt::from_tokens(torch::tensor({{1.0f, 2.0f}, {3.0f, 5.0f}}));
    CHECK(prompt_loss(a, b) == doctest::Approx((0.5 + 2.0) / 4));
    auto d = prompt_distance_report(b, c, a);
    CHECK(d.mse_lp == doctest::Approx((0.25 + 4.0) / 4));
    CHECK(d.mse_p == doctest::Approx(1.0 / 4));
    auto e = PathologyPrompt::from_tokens(torch::zeros({3, 2}));
    CHECK_THROWS_AS(prompt_loss(a, e), DimensionError);
  }

  TEST_CASE("training reduces the loss on a fixed triple set") {
    auto gen = make_generator(4);
    std::vector<PromptTriple> data;
    for (int i = 0; i < 8; ++i) {
      auto hp = torch::randn({4, 16}, gen);
      data.push_back({hp + 0.5 * torch::randn({4, 16}, gen), torch::randn({8, 1, 1}, gen), hp});
    }
    auto cfg = small();
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.gamma = 1.0;
    auto r = train_prompt_restorer(data, cfg, 9);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  }

  TEST_CASE("property: prompt loss is symmetric and non-negative") {
    auto gen = make_generator(8);
    for (int k = 0; k < 20; ++k) {
      auto a = PathologyPrompt::from_tokens(torch::randn({4, 16}, gen));
      auto b = PathologyPrompt::from_tokens(torch::randn({4, 16}, gen));
      CHECK(prompt_loss(a, b) == prompt_loss(b, a));
      CHECK(prompt_loss(a, b) > 0.0);
      CHECK(prompt_loss(a, a) == 0.0);
    }
  }
}
