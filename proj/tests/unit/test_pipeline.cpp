#include <cstdlib>
#include <fstream>

#include "support/doctest_torch.hpp"
#include "json.hpp"
#include "mop/checkpoint.hpp"
#include "mop/config.hpp"
#include "mop/degrade.hpp"
#include "mop/errors.hpp"
#include "mop/pipeline.hpp"
#include "support/tmpdir.hpp"

using namespace mop;
using mop::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// Smallest configuration the whole chain accepts: 64 px fields, 32 px crops and tiles.
PipelineConfig micro_config(double pformer_lr = 2e-3) {
  nlohmann::json doc = {
      {"data", {{"n_stacks", 1}, {"field_size", 64}, {"offsets", {-2, 0, 2}}, {"patch", 32}, {"tile", 32},
                {"tile_stride", 32}}},
      {"defocus", {{"widths", {8, 8, 16, 16}}, {"epochs", 1}, {"batch_size", 4}}},
      {"encoder", {{"pretrain_epochs", 1}}},
      {"prompt_restorer", {{"blocks", 1}, {"epochs", 1}}},
      {"pformer", {{"widths", {8, 16, 32, 64}}, {"blocks", {1, 1, 1, 1}}, {"heads", {1, 1, 2, 2}}, {"epochs", 1},
                   {"lr", pformer_lr}}},
      {"pdiffusion", {{"widths", {16, 32}}, {"heads", 2}, {"steps", 2}, {"warmup", 1}, {"batch_size", 2}}},
      {"metrics", {{"tile", 32}}}};
  return config_from_document(merge_config(doc));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("names parse and print") {
    CHECK(parse_component("pformer") == Component::kPFormer);
    CHECK(to_string(Component::kPDiffusion) == "pdiffusion");
    CHECK(parse_stage("both") == Stage::kBoth);
    CHECK_THROWS_AS(parse_component("unet"), UsageError);
    CHECK_THROWS_AS(parse_stage("medium"), UsageError);
  }

  TEST_CASE("missing upstream artifacts name the command to run") {
    TempDir dir;
    auto ctx = make_context(micro_config(), dir.path(), 1);
    ctx.verbose = false;
    CHECK_THROWS_AS(run_train(ctx, Component::kDefocus), DependencyError);
    run_simulate(ctx);
    CHECK_THROWS_WITH_AS(run_train(ctx, Component::kPFormer), doctest::Contains("mop train --component"),
                         DependencyError);
    CHECK_THROWS_AS(run_train(ctx, Component::kDefocus, TrainOptions{0, {}}), ParameterError);
  }

  TEST_CASE("fine stage without a coarse input is a usage error") {
    TempDir dir;
    auto ctx = make_context(micro_config(), dir.path(), 1);
    ctx.verbose = false;
    RestoreOptions o;
    o.stage = Stage::kFine;
    CHECK_THROWS_AS(run_restore(ctx, dir / "x.png", o), UsageError);
  }

  TEST_CASE("simulation is seeded and labels follow the optics") {
    TempDir a, b;
    auto cfg = micro_config();
    auto ca = make_context(cfg, a.path(), 3), cb = make_context(cfg, b.path(), 3);
    ca.verbose = cb.verbose = false;
    run_simulate(ca);
    run_simulate(cb);
    auto recs = parse_manifest(ca.data_manifest());
    REQUIRE(recs.size() == 1);
    REQUIRE(recs[0].planes.size() == 3);
    for (const auto& [off, p] : recs[0].planes) {
      auto rel = fs::relative(p, a.path());
      CHECK(slurp(p) == slurp(b.path() / rel));
    }
    auto labels = read_label_sidecar(recs[0].labels);
    REQUIRE(labels.size() == 3);
    const auto ramp = tilt_ramp(2.0, cfg.data.tilt, labels[2].cols);
    for (int64_t c = 0; c < labels[2].cols; ++c) {
      CHECK(labels[2].at(0, c).d == doctest::Approx(ramp[c]));
      CHECK(labels[2].at(0, c).c == doctest::Approx(ctf_value(ramp[c], cfg.optics)));
    }
  }

  TEST_CASE("output lock is exclusive") {
    TempDir dir;
    {
      OutputLock lock(dir.path());
      CHECK_THROWS_AS(OutputLock(dir.path()), ValidationError);
    }
    CHECK_NOTHROW(OutputLock(dir.path()));
  }

  TEST_CASE("run record fields") {
    TempDir dir;
    auto ctx = make_context(micro_config(), dir.path(), 42);
    write_run_record(ctx, "simulate", 1.25);
    auto j = nlohmann::json::parse(slurp(dir / "runs/simulate.json"));
    CHECK(j["seed"] == 42);
    CHECK(j["config_fingerprint"] == ctx.config.fingerprint());
    CHECK(j["wall_clock_s"] == 1.25);
    CHECK(j.contains("git_describe"));
  }

  TEST_CASE("end to end with a near-identity coarse network") {
    TempDir dir;
    // A vanishing learning rate keeps the zero-initialised output head at ~0.
    auto ctx = make_context(micro_config(1e-12), dir.path(), 5);
    ctx.verbose = false;
    run_simulate(ctx);
    run_train(ctx, Component::kDefocus);
    run_train(ctx, Component::kPrompt);  // pre-trains the encoder too
    CHECK(fs::exists(ctx.checkpoint(Component::kEncoder)));
    const auto encoder_bytes = slurp(ctx.checkpoint(Component::kEncoder));
    run_train(ctx, Component::kPFormer, TrainOptions{2, {}});
    auto ck = Checkpoint::load(ctx.checkpoint(Component::kPFormer));
    CHECK(ck.metadata.at("epochs") == "2");
    CHECK(ck.config_fingerprint == ctx.config.fingerprint());

    auto recs = parse_manifest(ctx.data_manifest());
    const auto plane = recs[0].planes[0].second;
    RestoreOptions o;
    o.stage = Stage::kCoarse;
    auto outs = run_restore(ctx, plane, o);
    REQUIRE(outs.size() == 1);
    auto in = load_image(plane), out = load_image(outs[0]);
    CHECK((in.pixels() - out.pixels()).abs().max().item<double>() < 1.5 / 255.0);

    run_train(ctx, Component::kPDiffusion);
    CHECK(slurp(ctx.checkpoint(Component::kEncoder)) == encoder_bytes);  // frozen downstream
    o.stage = Stage::kBoth;
    auto both = run_restore(ctx, ctx.data_manifest(), o);
    CHECK(both.size() == 2);  // planes with |offset| in [1, 4]
    CHECK(fs::exists(dir / "restore/manifest.txt"));
    auto report = run_evaluate(ctx, dir / "restore/manifest.txt", dir / "restore/reference.txt");
    CHECK(report.units == 2);
    auto diag = run_diagnostics(ctx);
    CHECK(diag.heatmap_panels == 3);
    for (const auto& row : diag.utilization) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(run_edges(ctx, plane).size() == 2);
    CHECK(run_defocus_heatmap(ctx, plane).size() == 2);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("exit codes") {
    TempDir dir;
    auto run = [&](const std::string& args) {
      const auto cmd = std::string(MOP_CLI_PATH) + " " + args + " -q --out " + (dir / "out").string() + " >/dev/null 2>&1";
      const int rc = std::system(cmd.c_str());
      return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    };
    save_png(ImagePatch(torch::zeros({16, 16, 3})), dir / "x.png");
    CHECK(run("restore --stage fine --input " + (dir / "x.png").string()) == 2);
    CHECK(run("train --component unet") == 2);
    CHECK(run("train --component pformer") == 3);
    CHECK(run("simulate --bogus") == 2);
    CHECK(run("train") == 2);
  }
}
