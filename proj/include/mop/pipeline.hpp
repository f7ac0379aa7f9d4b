#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mop/config.hpp"
#include "mop/metrics.hpp"

namespace mop {

enum class Component { kEncoder, kDefocus, kPrompt, kPFormer, kPDiffusion };
Component parse_component(const std::string& s);
std::string to_string(Component c);

enum class Stage { kCoarse, kFine, kBoth };
Stage parse_stage(const std::string& s);
std::string to_string(Stage s);

/// Everything one CLI invocation needs. Artifacts live under `out`:
/// data/ (simulated stacks), checkpoints/, prompts/, restore/, diagnostics/, logs/, runs/.
struct RunContext {
  PipelineConfig config;
  std::filesystem::path out;
  std::filesystem::path checkpoints;  // defaults to out/checkpoints
  uint64_t seed = 0;
  bool allow_mismatch = false;
  bool verbose = true;

  std::filesystem::path data_manifest() const { return out / "data" / "manifest.txt"; }
  std::filesystem::path checkpoint(Component c) const;
};

RunContext make_context(PipelineConfig config, std::filesystem::path out, std::optional<uint64_t> seed);

/// Exclusive ownership of an output directory for one run (lock file created with O_EXCL).
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// runs/<name>.json: fingerprint, seed, git describe, wall-clock seconds.
void write_run_record(const RunContext& ctx, const std::string& name, double seconds);
std::string git_describe();

std::filesystem::path run_simulate(const RunContext& ctx);

struct TrainOptions {
  std::optional<int64_t> epochs;  // overrides the component's epochs (or steps for pdiffusion)
  std::filesystem::path manifest;  // defaults to ctx.data_manifest()
};
std::filesystem::path run_train(const RunContext& ctx, Component component, const TrainOptions& options = {});

struct RestoreOptions {
  Stage stage = Stage::kBoth;
  std::filesystem::path fine_input;  // coarse image (or manifest of them) for stage=fine
  bool debug_steps = false;
  bool debug_maps = false;
};
/// Input is one image or a manifest; returns written image paths (a manifest input also yields
/// restore/manifest.txt and restore/reference.txt for `evaluate`).
std::vector<std::filesystem::path> run_restore(const RunContext& ctx, const std::filesystem::path& input,
                                               const RestoreOptions& options);

MetricReport run_evaluate(const RunContext& ctx, const std::filesystem::path& predictions,
                          const std::filesystem::path& references);

struct DiagnosticsReport {
  std::vector<PromptDistance> prompt_distance;
  double fraction_p_closer = 0.0;
  std::vector<std::vector<double>> utilization;  // [block][expert]
  int64_t heatmap_panels = 0;
};
DiagnosticsReport run_diagnostics(const RunContext& ctx, const std::filesystem::path& manifest = {});

std::vector<std::filesystem::path> run_edges(const RunContext& ctx, const std::filesystem::path& input);
std::vector<std::filesystem::path> run_defocus_heatmap(const RunContext& ctx, const std::filesystem::path& input);

}  // namespace mop
