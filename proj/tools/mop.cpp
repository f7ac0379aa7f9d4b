#include <chrono>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mop/errors.hpp"
#include "mop/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out = "mop-out";
  std::string checkpoints;
  bool allow_mismatch = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON configuration (defaults apply to missing keys)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed; defaults to run.seed from the config");
  app->add_option("--out", c.out, "Output directory (locked for the duration of the run)");
  app->add_option("--checkpoints", c.checkpoints, "Checkpoint directory (default <out>/checkpoints)");
  app->add_flag("--allow-mismatch", c.allow_mismatch, "Accept checkpoints trained under another config");
  app->add_flag("-q,--quiet", c.quiet, "Log to files only");
}

mop::RunContext context(const Common& c) {
  auto cfg = c.config.empty() ? mop::default_config() : mop::load_config(c.config);
  auto ctx = mop::make_context(std::move(cfg), c.out, c.seed);
  if (!c.checkpoints.empty()) ctx.checkpoints = c.checkpoints;
  ctx.allow_mismatch = c.allow_mismatch;
  ctx.verbose = !c.quiet;
  return ctx;
}

/// Locks the output directory, runs `body`, then writes runs/<record>.json.
template <typename Fn>
void run(const Common& c, const std::string& record, Fn body) {
  auto ctx = context(c);
  mop::OutputLock lock(ctx.out);
  const auto t0 = std::chrono::steady_clock::now();
  body(ctx);
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  mop::write_run_record(ctx, record, dt.count());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mop: two-stage prompt-guided restoration of defocused pathology images"};
  app.require_subcommand(1);
  app.set_version_flag("--version", mop::git_describe());

  Common c;

  auto* sim = app.add_subcommand("simulate", "Synthesize focal stacks, labels and a manifest under <out>/data");
  add_common(sim, c);

  auto* train = app.add_subcommand("train", "Train one component");
  add_common(train, c);
  std::string component;
  std::optional<int64_t> epochs;
  std::string train_manifest;
  train->add_option("--component", component, "defocus | prompt | pformer | pdiffusion | encoder")->required();
  train->add_option("--epochs", epochs, "Override the component's epoch count");
  train->add_option("--manifest", train_manifest, "Training manifest (default <out>/data/manifest.txt)");

  auto* restore = app.add_subcommand("restore", "Restore an image or every plane listed in a manifest");
  add_common(restore, c);
  std::string input;
  std::string stage = "both";
  mop::RestoreOptions ropt;
  std::string fine_input;
  restore->add_option("--input,input", input, "PNG image or manifest")->required()->check(CLI::ExistingFile);
  restore->add_option("--stage", stage, "coarse | fine | both");
  restore->add_option("--fine-input", fine_input, "Coarse image (or manifest of them) for --stage fine");
  restore->add_flag("--debug-steps", ropt.debug_steps, "Write every reverse-diffusion step");
  restore->add_flag("--debug-maps", ropt.debug_maps, "Write edge and defocus heatmap PNGs");

  auto* eval = app.add_subcommand("evaluate", "PSNR, SSIM and perceptual proxy of predictions against references");
  add_common(eval, c);
  std::string pred, ref;
  eval->add_option("--pred", pred, "Prediction manifest (e.g. <out>/restore/manifest.txt)")->required();
  eval->add_option("--ref", ref, "Reference manifest")->required();

  auto* diag = app.add_subcommand("diagnose", "Prompt distances, heatmap grid and expert utilization");
  add_common(diag, c);
  std::string diag_manifest;
  diag->add_option("--manifest", diag_manifest, "Stacks to analyse (default <out>/data/manifest.txt)");

  auto* edges = app.add_subcommand("edges", "Canny edge map and defocus confidence of one image");
  add_common(edges, c);
  std::string edges_input;
  edges->add_option("--input,input", edges_input, "PNG image")->required()->check(CLI::ExistingFile);

  auto* heat = app.add_subcommand("defocus-heatmap", "Per-pixel |defocus| map of one image");
  add_common(heat, c);
  std::string heat_input;
  heat->add_option("--input,input", heat_input, "PNG image")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*sim) {
      run(c, "simulate", [](const mop::RunContext& ctx) {
        std::cout << mop::run_simulate(ctx).string() << '\n';
      });
    } else if (*train) {
      const auto comp = mop::parse_component(component);
      run(c, "train-" + component, [&](const mop::RunContext& ctx) {
        std::cout << mop::run_train(ctx, comp, {epochs, train_manifest}).string() << '\n';
      });
    } else if (*restore) {
      ropt.stage = mop::parse_stage(stage);
      ropt.fine_input = fine_input;
      run(c, "restore", [&](const mop::RunContext& ctx) {
        for (const auto& p : mop::run_restore(ctx, input, ropt)) std::cout << p.string() << '\n';
      });
    } else if (*eval) {
      run(c, "evaluate", [&](const mop::RunContext& ctx) {
        const auto r = mop::run_evaluate(ctx, pred, ref);
        std::cout << "psnr " << r.aggregate.psnr << "\nssim " << r.aggregate.ssim << "\nperceptual "
                  << r.aggregate.perceptual << "\nunits " << r.units << '\n';
      });
    } else if (*diag) {
      run(c, "diagnose", [&](const mop::RunContext& ctx) {
        const auto r = mop::run_diagnostics(ctx, diag_manifest);
        std::cout << "fraction_p_closer " << r.fraction_p_closer << "\nheatmap_panels " << r.heatmap_panels << '\n';
      });
    } else if (*edges) {
      run(c, "edges", [&](const mop::RunContext& ctx) {
        for (const auto& p : mop::run_edges(ctx, edges_input)) std::cout << p.string() << '\n';
      });
    } else if (*heat) {
      run(c, "defocus-heatmap", [&](const mop::RunContext& ctx) {
        for (const auto& p : mop::run_defocus_heatmap(ctx, heat_input)) std::cout << p.string() << '\n';
      });
    }
  } catch (const mop::Error& e) {
    std::cerr << "mop: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "mop: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
