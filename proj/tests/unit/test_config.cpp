#include <fstream>

#include "support/doctest_torch.hpp"
#include "json.hpp"
#include "mop/config.hpp"
#include "mop/errors.hpp"
#include "support/tmpdir.hpp"

using namespace mop;
using nlohmann::json;

TEST_SUITE("config") {
  TEST_CASE("defaults mirror the typed structs") {
    auto c = default_config();
    CHECK(c.pformer.widths == std::vector<int64_t>{48, 96, 192, 384});
    CHECK(c.pformer.blocks == std::vector<int64_t>{2, 3, 3, 4});
    CHECK(c.pdiffusion.T == 4);
    CHECK(c.pdiffusion.kappa == 2.0);
    CHECK(c.pdiffusion.eta1 == 0.04);
    CHECK(c.edges.canny.low == 0.1);
    CHECK(c.edges.canny.high == 0.2);
    CHECK(c.prompt_restorer.blocks == 4);
    CHECK(c.encoder.name == "tiny-vit");
  }

  TEST_CASE("overlay keeps unspecified defaults") {
    auto c = config_from_document(merge_config(json{{"pformer", {{"lr", 0.5}}}, {"run", {{"seed", 9}}}}));
    CHECK(c.pformer.lr == 0.5);
    CHECK(c.pformer.epochs == 300);
    CHECK(c.run.seed == 9);
  }

  TEST_CASE("unknown keys and type changes are rejected") {
    CHECK_THROWS_AS(merge_config(json{{"pformr", json::object()}}), ValidationError);
    CHECK_THROWS_AS(merge_config(json{{"pformer", {{"learning_rate", 1.0}}}}), ValidationError);
    CHECK_THROWS_AS(merge_config(json{{"pformer", {{"epochs", "many"}}}}), ValidationError);
    CHECK_THROWS_AS(merge_config(json{{"data", 3}}), ValidationError);
  }

  TEST_CASE("fingerprint ignores key order and tracks values") {
    auto a = json::parse(R"({"run": {"seed": 1, "threads": 1}, "data": {"tile": 128}})");
    auto b = json::parse(R"({"data": {"tile": 128}, "run": {"threads": 1, "seed": 1}})");
    CHECK(config_fingerprint(merge_config(a)) == config_fingerprint(merge_config(b)));
    auto c = json::parse(R"({"data": {"tile": 64}})");
    CHECK(config_fingerprint(merge_config(a)) != config_fingerprint(merge_config(c)));
    CHECK(config_fingerprint(merge_config(a)).size() == 16);
  }

  TEST_CASE("files may carry comments") {
    mop::testing::TempDir dir;
    std::ofstream(dir / "c.json") << "// desk\n{\n  \"data\": {\"tile\": 64} /* small */\n}\n";
    auto c = load_config(dir / "c.json");
    CHECK(c.data.tile == 64);
    std::ofstream(dir / "bad.json") << "{ \"data\": ";
    CHECK_THROWS_AS(load_config(dir / "bad.json"), ValidationError);
    CHECK_THROWS_AS(load_config(dir / "none.json"), IoError);
  }

  TEST_CASE("validation of section values") {
    CHECK_THROWS_AS(config_from_document(merge_config(json{{"pformer", {{"widths", {48, 96}}}}})), ValidationError);
    CHECK_THROWS_AS(config_from_document(merge_config(json{{"edges", {{"low", 0.5}, {"high", 0.2}}}})),
                    ValidationError);
  }
}
