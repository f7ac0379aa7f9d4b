#include <fstream>

#include "support/doctest_torch.hpp"
#include "mop/checkpoint.hpp"
#include "mop/encoders.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"
#include "support/tmpdir.hpp"

using namespace mop;

TEST_SUITE("encoders") {
  TEST_CASE("tiny ViT token count is one per patch") {
    torch::manual_seed(1);
    TinyVit vit(16, 32, 1, 2, 7);
    vit->eval();
    auto t = vit->forward(torch::rand({2, 3, 64, 48}));
    CHECK(t.sizes() == torch::IntArrayRef{2, 12, 32});
    CHECK_THROWS_AS(vit->forward(torch::rand({1, 3, 60, 64})), DimensionError);
    CHECK_THROWS_AS(TinyVit(16, 30, 1, 2, 7), ParameterError);
  }

  TEST_CASE("pooled prompt is the token mean") {
    auto gen = make_generator(1);
    auto tok = torch::randn({6, 8}, gen);
    auto p = PathologyPrompt::from_tokens(tok);
    CHECK(torch::allclose(p.pooled, tok.mean(0)));
    CHECK_THROWS_AS(PathologyPrompt::from_tokens(torch::randn({6})), DimensionError);
  }

  TEST_CASE("registry rejects unknown and duplicate names") {
    auto reg = EncoderRegistry::with_defaults();
    CHECK(reg.contains("tiny-vit"));
    CHECK_THROWS_AS(reg.get("uni"), RegistryError);
    CHECK_THROWS_AS(reg.add({"tiny-vit"}, [] { return std::shared_ptr<Encoder>(); }), RegistryError);
    CHECK_THROWS_AS(reg.get("tiny-vit"), DependencyError);  // no weights configured
    CHECK_FALSE(list_encoders().empty());
  }

  TEST_CASE("token sidecars roundtrip and drive the sidecar encoder") {
    mop::testing::TempDir dir;
    auto gen = make_generator(2);
    auto tok = torch::randn({16, 8}, gen);
    write_token_sidecar(tok, dir / "img7.tok");
    CHECK(torch::equal(read_token_sidecar(dir / "img7.tok"), tok));
    SidecarEncoder enc(dir.path(), EncoderSpec{"offline", 16, 8, true});
    auto out = enc.encode_batch(torch::rand({1, 3, 64, 64}), {"img7"});
    CHECK(torch::equal(out[0], tok));
    CHECK_THROWS_AS(enc.encode_batch(torch::rand({1, 3, 32, 32}), {"img7"}), DimensionError);
    CHECK_THROWS_AS(enc.encode_batch(torch::rand({1, 3, 64, 64}), {"missing"}), IoError);
    CHECK_THROWS_AS(enc.encode_batch(torch::rand({2, 3, 64, 64}), {"img7"}), ValidationError);
    {
      std::ofstream(dir / "bad.tok", std::ios::binary) << "xx";
    }
    CHECK_THROWS_AS(read_token_sidecar(dir / "bad.tok"), FormatError);
  }

  TEST_CASE("stored tiny ViT restores with identical outputs") {
    torch::manual_seed(3);
    TinyVit vit(16, 32, 2, 2, 5);
    Checkpoint ck;
    ck.component = "encoder";
    store_tiny_vit(vit, ck);
    auto back = restore_tiny_vit(ck);
    CHECK(back->depth() == 2);
    CHECK(back->classes() == 5);
    vit->eval();
    back->eval();
    auto x = torch::rand({1, 3, 32, 32});
    CHECK(torch::equal(vit->forward(x), back->forward(x)));
    CHECK(parameter_hash(*vit) == parameter_hash(*back));
  }

  TEST_CASE("property: token count and width follow the spec for any valid size") {
    torch::manual_seed(5);
    TinyVitEncoder enc(TinyVit(16, 32, 1, 2, 7));
    for (auto [h, w] : {std::pair{16, 16}, {32, 64}, {80, 48}}) {
      auto p = enc.encode(ImagePatch(torch::rand({h, w, 3})));
      CHECK(p.tokens.size(0) == (h / 16) * (w / 16));
      CHECK(p.tokens.size(1) == enc.spec().dim);
    }
    CHECK_THROWS_AS(enc.encode(ImagePatch(torch::rand({24, 32, 3}))), DimensionError);
  }
}
