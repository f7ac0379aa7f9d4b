#include "mop/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mop/checkpoint.hpp"
#include "mop/errors.hpp"
#include "mop/random.hpp"

#ifndef MOP_GIT_DESCRIBE
#define MOP_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;

namespace mop {

Component parse_component(const std::string& s) {
  if (s == "encoder") return Component::kEncoder;
  if (s == "defocus") return Component::kDefocus;
  if (s == "prompt") return Component::kPrompt;
  if (s == "pformer") return Component::kPFormer;
  if (s == "pdiffusion") return Component::kPDiffusion;
  throw UsageError("unknown component '" + s + "' (expected defocus, prompt, pformer, pdiffusion or encoder)");
}

std::string to_string(Component c) {
  switch (c) {
    case Component::kEncoder: return "encoder";
    case Component::kDefocus: return "defocus";
    case Component::kPrompt: return "prompt";
    case Component::kPFormer: return "pformer";
    case Component::kPDiffusion: return "pdiffusion";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "coarse") return Stage::kCoarse;
  if (s == "fine") return Stage::kFine;
  if (s == "both") return Stage::kBoth;
  throw UsageError("unknown stage '" + s + "' (expected coarse, fine or both)");
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kCoarse: return "coarse";
    case Stage::kFine: return "fine";
    case Stage::kBoth: return "both";
  }
  return "?";
}

fs::path RunContext::checkpoint(Component c) const { return checkpoints / (to_string(c) + ".ckpt"); }

RunContext make_context(PipelineConfig config, fs::path out, std::optional<uint64_t> seed) {
  RunContext ctx;
  ctx.seed = seed.value_or(config.run.seed);
  if (config.run.threads > 0) torch::set_num_threads(static_cast<int>(config.run.threads));
  ctx.config = std::move(config);
  ctx.out = std::move(out);
  ctx.checkpoints = ctx.out / "checkpoints";
  return ctx;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".mop.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw ValidationError("output directory " + dir.string() + " is in use by another run (remove " +
                          path_.string() + " if stale)");
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string git_describe() { return MOP_GIT_DESCRIBE; }

void write_run_record(const RunContext& ctx, const std::string& name, double seconds) {
  fs::create_directories(ctx.out / "runs");
  nlohmann::json rec{{"command", name},
                     {"config_fingerprint", ctx.config.fingerprint()},
                     {"seed", ctx.seed},
                     {"git_describe", git_describe()},
                     {"wall_clock_s", seconds}};
  std::ofstream os(ctx.out / "runs" / (name + ".json"));
  os << rec.dump(2) << '\n';
}

namespace {

// ---------------------------------------------------------------------------
// Shared helpers

class Log {
 public:
  Log(const RunContext& ctx, const std::string& name) : verbose_(ctx.verbose) {
    fs::create_directories(ctx.out / "logs");
    os_.open(ctx.out / "logs" / (name + ".txt"));
  }
  template <typename... Args>
  void line(const Args&... args) {
    std::ostringstream ss;
    ss << std::setprecision(6);
    (ss << ... << args);
    os_ << ss.str() << '\n';
    os_.flush();
    if (verbose_) std::cout << ss.str() << std::endl;
  }

 private:
  bool verbose_;
  std::ofstream os_;
};

uint64_t id_hash(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string plane_id(const std::string& stack_id, size_t k) { return stack_id + "_p" + std::to_string(k); }

std::vector<SyntheticStack> load_dataset(const fs::path& manifest) {
  if (!fs::exists(manifest)) {
    throw DependencyError("missing simulated data " + manifest.string() + " (run `mop simulate` first)");
  }
  std::vector<SyntheticStack> out;
  for (auto& st : load_manifest(manifest)) {
    SyntheticStack s;
    if (!st.labels_path.empty()) s.labels = read_label_sidecar(st.labels_path);
    s.stack = std::move(st);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError("manifest " + manifest.string() + " lists no stacks");
  return out;
}

std::vector<DefocusSample> all_defocus_samples(const std::vector<SyntheticStack>& data, int64_t patch) {
  std::vector<DefocusSample> out;
  for (const auto& s : data) {
    if (s.labels.size() != s.stack.planes.size()) {
      throw ValidationError("stack " + s.stack.id + " has no defocus labels for every plane");
    }
    auto v = defocus_samples(s, patch);
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  }
  return out;
}

struct PairSet {
  std::vector<std::string> ids;
  torch::Tensor lq;  // N x 3 x P x P
  torch::Tensor hq;
};

PairSet restoration_pairs(const std::vector<SyntheticStack>& data, const DataConfig& cfg) {
  PairSet ps;
  std::vector<torch::Tensor> lq, hq;
  for (const auto& s : data) {
    if (s.stack.fused.empty()) throw ValidationError("stack " + s.stack.id + " has no sharp reference image");
    const auto ref_tiles = tile_image(s.stack.fused, cfg.patch, cfg.patch);
    for (size_t k = 0; k < s.stack.planes.size(); ++k) {
      const auto& plane = s.stack.planes[k];
      const double a = std::abs(plane.offset);
      if (a < cfg.restore_min_abs_offset || a > cfg.restore_max_abs_offset) continue;
      const auto tiles = tile_image(plane.patch, cfg.patch, cfg.patch);
      for (size_t i = 0; i < tiles.size(); ++i) {
        ps.ids.push_back(plane_id(s.stack.id, k) + "@" + std::to_string(tiles[i].first.row0) + "_" +
                         std::to_string(tiles[i].first.col0));
        lq.push_back(tiles[i].second.chw());
        hq.push_back(ref_tiles[i].second.chw());
      }
    }
  }
  if (lq.empty()) throw ValidationError("no focal planes fall inside the restoration offset range");
  ps.lq = torch::stack(lq);
  ps.hq = torch::stack(hq);
  return ps;
}

Checkpoint new_checkpoint(const RunContext& ctx, Component c) {
  Checkpoint ck;
  ck.component = to_string(c);
  ck.config_fingerprint = ctx.config.fingerprint();
  ck.metadata["seed"] = std::to_string(ctx.seed);
  return ck;
}

Checkpoint need(const RunContext& ctx, Component c, const std::string& for_what) {
  const auto path = ctx.checkpoint(c);
  if (!fs::exists(path)) {
    throw DependencyError(for_what + " needs the " + to_string(c) + " checkpoint " + path.string() +
                          " (run `mop train --component " + to_string(c) + "` first)");
  }
  return load_checkpoint(path, to_string(c), ctx.config.fingerprint(), ctx.allow_mismatch);
}

DefocusEstimator load_defocus(const RunContext& ctx, const std::string& for_what) {
  auto ck = need(ctx, Component::kDefocus, for_what);
  DefocusEstimator m(ctx.config.defocus.widths);
  restore_module(*m, ck, "");
  m->eval();
  return m;
}

std::shared_ptr<Encoder> load_encoder(const RunContext& ctx, const std::string& for_what) {
  const auto& e = ctx.config.encoder;
  auto path = ctx.checkpoint(Component::kEncoder);
  if (e.name == "tiny-vit" && !fs::exists(path)) {
    throw DependencyError(for_what + " needs the encoder checkpoint " + path.string() +
                          " (run `mop train --component encoder` or `--component prompt` first)");
  }
  auto reg = EncoderRegistry::with_defaults(path, ctx.config.fingerprint(), ctx.allow_mismatch);
  if (!e.sidecar_dir.empty()) {
    EncoderSpec spec{"sidecar", 16, ctx.config.prompt_restorer.dim, true};
    reg.add(spec, [dir = fs::path(e.sidecar_dir), spec] { return std::make_shared<SidecarEncoder>(dir, spec); });
  }
  return reg.get(e.name);
}

PromptRestorer load_prompt(const RunContext& ctx, const std::string& for_what) {
  auto ck = need(ctx, Component::kPrompt, for_what);
  PromptRestorer m(ctx.config.prompt_restorer);
  restore_module(*m, ck, "");
  m->eval();
  return m;
}

PFormer load_pformer(const RunContext& ctx, const std::string& for_what) {
  auto ck = need(ctx, Component::kPFormer, for_what);
  PFormer m(ctx.config.pformer);
  restore_module(*m, ck, "");
  m->eval();
  return m;
}

PDiffusion load_pdiffusion(const RunContext& ctx, const std::string& for_what) {
  auto ck = need(ctx, Component::kPDiffusion, for_what);
  PDiffusion m(ctx.config.pdiffusion.net);
  restore_module(*m, ck, "");
  m->eval();
  return m;
}

/// Runs `fn` over row chunks of the leading dimension and concatenates.
template <typename Fn>
torch::Tensor chunked(int64_t n, int64_t chunk, Fn fn) {
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < n; s += chunk) parts.push_back(fn(s, std::min(n, s + chunk)));
  return torch::cat(parts);
}

std::vector<std::string> slice_ids(const std::vector<std::string>& ids, int64_t a, int64_t b) {
  return {ids.begin() + a, ids.begin() + b};
}

struct PromptCache {
  std::vector<std::string> ids;
  torch::Tensor p_lp, p_d, p_hp;
};

PromptCache compute_prompts(const PairSet& pairs, DefocusEstimator& defocus, const Encoder& encoder) {
  PromptCache pc;
  pc.ids = pairs.ids;
  const auto n = pairs.lq.size(0);
  std::vector<std::string> hq_ids;
  for (const auto& id : pairs.ids) hq_ids.push_back(id + "#ref");
  pc.p_lp = chunked(n, 32, [&](int64_t a, int64_t b) {
    return encoder.encode_batch(pairs.lq.slice(0, a, b), slice_ids(pairs.ids, a, b));
  });
  pc.p_hp = chunked(n, 32, [&](int64_t a, int64_t b) {
    return encoder.encode_batch(pairs.hq.slice(0, a, b), slice_ids(hq_ids, a, b));
  });
  pc.p_d = chunked(n, 32, [&](int64_t a, int64_t b) { return estimate_batch(defocus, pairs.lq.slice(0, a, b)).features; });
  return pc;
}

fs::path prompt_cache_path(const RunContext& ctx) { return ctx.out / "prompts" / "cache.ckpt"; }

void save_prompt_cache(const RunContext& ctx, const PromptCache& pc) {
  Checkpoint ck;
  ck.component = "prompt-cache";
  ck.config_fingerprint = ctx.config.fingerprint();
  ck.tensors["p_lp"] = pc.p_lp;
  ck.tensors["p_d"] = pc.p_d;
  ck.tensors["p_hp"] = pc.p_hp;
  std::string ids;
  for (const auto& id : pc.ids) ids += id + "\n";
  ck.blobs["ids"] = ids;
  ck.save(prompt_cache_path(ctx));
}

/// Reuses the cached prompts when they belong to this configuration, otherwise recomputes.
PromptCache prompts_for(const RunContext& ctx, const PairSet& pairs, const std::string& for_what) {
  const auto path = prompt_cache_path(ctx);
  if (fs::exists(path)) {
    auto ck = Checkpoint::load(path);
    if (ck.component == "prompt-cache" && ck.config_fingerprint == ctx.config.fingerprint()) {
      PromptCache pc;
      std::istringstream is(ck.blobs["ids"]);
      for (std::string line; std::getline(is, line);) pc.ids.push_back(line);
      if (pc.ids == pairs.ids) {
        pc.p_lp = ck.tensors.at("p_lp");
        pc.p_d = ck.tensors.at("p_d");
        pc.p_hp = ck.tensors.at("p_hp");
        return pc;
      }
    }
  }
  auto defocus = load_defocus(ctx, for_what);
  auto encoder = load_encoder(ctx, for_what);
  return compute_prompts(pairs, defocus, *encoder);
}

torch::Tensor restored_tokens(PromptRestorer& restorer, const PromptCache& pc) {
  torch::NoGradGuard guard;
  restorer->eval();
  return chunked(pc.p_lp.size(0), 64, [&](int64_t a, int64_t b) {
    return restorer->forward(pc.p_lp.slice(0, a, b), pc.p_d.slice(0, a, b));
  });
}

torch::Tensor edge_masks(const torch::Tensor& images, const CannyParams& params) {
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < images.size(0); ++i) {
    out.push_back(canny(ImagePatch::from_chw_clamped(images[i]), params).tensor());
  }
  return torch::stack(out);
}

std::string join_row(const std::vector<double>& v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6);
  for (size_t i = 0; i < v.size(); ++i) ss << (i ? " " : "") << v[i];
  return ss.str();
}

// ---------------------------------------------------------------------------
// Trainers

fs::path train_encoder(const RunContext& ctx, const TrainOptions& opt, Log& log) {
  auto data = load_dataset(opt.manifest);
  auto samples = all_defocus_samples(data, ctx.config.data.patch);
  std::vector<torch::Tensor> images;
  std::vector<double> dist;
  for (const auto& s : samples) {
    images.push_back(s.image);
    dist.push_back(s.label.d);
  }
  auto cfg = ctx.config.encoder.pretrain;
  if (opt.epochs) cfg.epochs = *opt.epochs;
  std::vector<double> losses;
  auto model = pretrain_tiny_vit(images, dist, cfg, derive_seed(ctx.seed, {10}), &losses);
  for (size_t e = 0; e < losses.size(); ++e) log.line("encoder epoch ", e, " loss ", losses[e]);
  auto ck = new_checkpoint(ctx, Component::kEncoder);
  ck.epoch = cfg.epochs;
  ck.metadata["epochs"] = std::to_string(cfg.epochs);
  store_tiny_vit(model, ck);
  ck.save(ctx.checkpoint(Component::kEncoder));
  return ctx.checkpoint(Component::kEncoder);
}

fs::path train_defocus_component(const RunContext& ctx, const TrainOptions& opt, Log& log) {
  auto data = load_dataset(opt.manifest);
  auto samples = all_defocus_samples(data, ctx.config.data.patch);
  auto cfg = ctx.config.defocus;
  if (opt.epochs) cfg.epochs = *opt.epochs;
  auto res = train_defocus(samples, cfg, derive_seed(ctx.seed, {1}),
                           [&](int64_t e, double l) { log.line("defocus epoch ", e, " loss ", l); });
  auto ev = evaluate_defocus(res.model, samples);
  log.line("defocus train-set mae_distance ", ev.mae_distance, " mae_ctf ", ev.mae_ctf);
  auto ck = new_checkpoint(ctx, Component::kDefocus);
  ck.step = res.steps;
  ck.epoch = cfg.epochs;
  ck.metadata["epochs"] = std::to_string(cfg.epochs);
  ck.metadata["samples"] = std::to_string(samples.size());
  store_module(*res.model, ck, "");
  ck.blobs["optimizer"] = res.optimizer_state;
  ck.save(ctx.checkpoint(Component::kDefocus));
  return ctx.checkpoint(Component::kDefocus);
}

fs::path train_prompt_component(const RunContext& ctx, const TrainOptions& opt, Log& log) {
  auto defocus = load_defocus(ctx, "prompt training");
  if (ctx.config.encoder.name == "tiny-vit" && !fs::exists(ctx.checkpoint(Component::kEncoder))) {
    log.line("encoder checkpoint missing; pre-training tiny-vit first");
    train_encoder(ctx, TrainOptions{std::nullopt, opt.manifest}, log);
  }
  auto encoder = load_encoder(ctx, "prompt training");
  auto data = load_dataset(opt.manifest);
  auto pairs = restoration_pairs(data, ctx.config.data);
  auto pc = compute_prompts(pairs, defocus, *encoder);
  save_prompt_cache(ctx, pc);

  std::vector<PromptTriple> triples;
  for (int64_t i = 0; i < pc.p_lp.size(0); ++i) triples.push_back({pc.p_lp[i], pc.p_d[i], pc.p_hp[i]});
  auto cfg = ctx.config.prompt_restorer;
  if (opt.epochs) cfg.epochs = *opt.epochs;
  auto res = train_prompt_restorer(triples, cfg, derive_seed(ctx.seed, {2}),
                                   [&](int64_t e, double l) { log.line("prompt epoch ", e, " loss ", l); });
  auto ck = new_checkpoint(ctx, Component::kPrompt);
  ck.step = res.steps;
  ck.epoch = cfg.epochs;
  ck.metadata["epochs"] = std::to_string(cfg.epochs);
  ck.metadata["samples"] = std::to_string(triples.size());
  store_module(*res.model, ck, "");
  ck.blobs["optimizer"] = res.optimizer_state;
  ck.save(ctx.checkpoint(Component::kPrompt));
  return ctx.checkpoint(Component::kPrompt);
}

fs::path train_pformer_component(const RunContext& ctx, const TrainOptions& opt, Log& log) {
  auto restorer = load_prompt(ctx, "pformer training");
  auto data = load_dataset(opt.manifest);
  auto pairs = restoration_pairs(data, ctx.config.data);
  auto pc = prompts_for(ctx, pairs, "pformer training");
  auto pooled = restored_tokens(restorer, pc).mean(1);
  std::vector<PFormerSample> samples;
  for (int64_t i = 0; i < pairs.lq.size(0); ++i) samples.push_back({pairs.lq[i], pairs.hq[i], pooled[i]});
  auto cfg = ctx.config.pformer;
  if (opt.epochs) cfg.epochs = *opt.epochs;
  auto res = train_pformer(samples, cfg, derive_seed(ctx.seed, {3}));
  for (size_t e = 0; e < res.epoch_loss.size(); ++e) {
    log.line("pformer epoch ", e, " loss ", res.epoch_loss[e]);
    for (size_t b = 0; b < res.utilization[e].size(); ++b) {
      log.line("  utilization block ", b, ": ", join_row(res.utilization[e][b]));
    }
  }
  auto ck = new_checkpoint(ctx, Component::kPFormer);
  ck.step = res.steps;
  ck.epoch = static_cast<int64_t>(res.epoch_loss.size());
  ck.metadata["epochs"] = std::to_string(cfg.epochs);
  ck.metadata["samples"] = std::to_string(samples.size());
  store_module(*res.model, ck, "");
  ck.blobs["optimizer"] = res.optimizer_state;
  ck.save(ctx.checkpoint(Component::kPFormer));
  return ctx.checkpoint(Component::kPFormer);
}

fs::path train_pdiffusion_component(const RunContext& ctx, const TrainOptions& opt, Log& log) {
  auto pformer = load_pformer(ctx, "pdiffusion training");
  auto restorer = load_prompt(ctx, "pdiffusion training");
  auto defocus = load_defocus(ctx, "pdiffusion training");
  auto data = load_dataset(opt.manifest);
  auto pairs = restoration_pairs(data, ctx.config.data);
  auto pc = prompts_for(ctx, pairs, "pdiffusion training");
  auto tokens = restored_tokens(restorer, pc);
  auto pooled = tokens.mean(1);
  auto coarse = chunked(pairs.lq.size(0), 16, [&](int64_t a, int64_t b) {
    return pformer_forward_batch(pformer, pairs.lq.slice(0, a, b), pooled.slice(0, a, b));
  });
  auto edges = edge_masks(pairs.lq, ctx.config.edges.canny);
  std::vector<PDiffusionSample> samples;
  for (int64_t i = 0; i < pairs.lq.size(0); ++i) {
    samples.push_back({coarse[i], pairs.hq[i], pairs.lq[i], tokens[i], pc.p_d[i], edges[i]});
  }
  auto cfg = ctx.config.pdiffusion;
  if (opt.epochs) {
    // Epoch override: passes over the data at the configured batch size, warmup kept at the same ratio.
    const auto n = static_cast<int64_t>(samples.size());
    const auto steps = std::max<int64_t>(2, (*opt.epochs * n + cfg.batch_size - 1) / cfg.batch_size);
    cfg.warmup = cfg.warmup * steps / cfg.steps;
    cfg.steps = steps;
  }
  const auto seed = derive_seed(ctx.seed, {4});
  torch::manual_seed(seed);
  PDiffusionResume resume;
  resume.model = PDiffusion(cfg.net);
  resume.model->confidence()->init_from_ctf_head(defocus, ctx.config.edges.confidence_gain);
  auto res = train_pdiffusion(samples, cfg, seed, &resume, -1, [&](int64_t step, double l) {
    if (step % 50 == 0 || step == cfg.steps) log.line("pdiffusion step ", step, " loss ", l);
    return true;
  });
  auto ck = new_checkpoint(ctx, Component::kPDiffusion);
  ck.step = res.steps;
  ck.metadata["steps"] = std::to_string(cfg.steps);
  ck.metadata["warmup"] = std::to_string(cfg.warmup);
  if (opt.epochs) ck.metadata["epochs"] = std::to_string(*opt.epochs);
  ck.metadata["samples"] = std::to_string(samples.size());
  store_module(*res.model, ck, "");
  ck.blobs["optimizer"] = res.optimizer_state;
  ck.save(ctx.checkpoint(Component::kPDiffusion));
  return ctx.checkpoint(Component::kPDiffusion);
}

// ---------------------------------------------------------------------------
// Restoration

struct Models {
  DefocusEstimator defocus{nullptr};
  std::shared_ptr<Encoder> encoder;
  PromptRestorer restorer{nullptr};
  PFormer pformer{nullptr};
  PDiffusion diffusion{nullptr};
};

struct TileResult {
  torch::Tensor out;      // 3 x h x w
  torch::Tensor heatmap;  // 1 x h x w
};

TileResult restore_tile(const RunContext& ctx, Models& m, const ImagePatch& tile, const torch::Tensor& fine_cond,
                        Stage stage, uint64_t seed, const SampleObserver& observer) {
  torch::NoGradGuard guard;
  auto x = tile.chw().unsqueeze(0);
  auto est = estimate_batch(m.defocus, x);
  auto p_lp = m.encoder->encode_batch(x, {tile.id()});
  auto p_p = m.restorer->forward(p_lp, est.features);
  TileResult r;
  r.heatmap = defocus_heatmap(DefocusPrompt{est.features[0], {tile.height(), tile.width()}}, m.defocus).unsqueeze(0);
  torch::Tensor cond = fine_cond.defined() ? fine_cond.unsqueeze(0) : torch::Tensor{};
  if (stage != Stage::kFine) {
    cond = pformer_forward_batch(m.pformer, x, p_p.mean(1));
    if (stage == Stage::kCoarse) {
      r.out = cond[0];
      return r;
    }
  }
  const auto sched = make_schedule(ctx.config.pdiffusion.T, ctx.config.pdiffusion.kappa, ctx.config.pdiffusion.eta1);
  auto edges = canny(tile, ctx.config.edges.canny).tensor().unsqueeze(0);
  auto f = bind_denoiser(m.diffusion, cond, p_p, edges, est.features, x);
  r.out = sample(f, cond, sched, seed, observer)[0];
  return r;
}

ManifestRecord single_image_record(const std::string& id, const fs::path& image) {
  ManifestRecord rec;
  rec.id = id;
  rec.fused = image;
  rec.planes.emplace_back(0.0, image);
  return rec;
}

std::map<std::string, fs::path> fine_inputs_by_id(const fs::path& fine_input) {
  std::map<std::string, fs::path> out;
  for (const auto& rec : parse_manifest(fine_input)) out[rec.id] = rec.fused;
  return out;
}

}  // namespace

fs::path run_simulate(const RunContext& ctx) {
  const auto& d = ctx.config.data;
  const auto dir = ctx.out / "data";
  fs::create_directories(dir);
  std::vector<ImagePatch> sources;
  for (const auto& s : d.sources) {
    if (!fs::exists(s)) throw IoError("missing source image " + s);
    sources.push_back(load_image(s));
  }
  std::vector<ManifestRecord> records;
  for (int64_t i = 0; i < d.n_stacks; ++i) {
    std::ostringstream id;
    id << "s" << std::setw(3) << std::setfill('0') << i;
    ImagePatch sharp;
    if (sources.empty()) {
      sharp = procedural_texture(d.field_size, d.field_size, derive_seed(ctx.seed, {100, static_cast<uint64_t>(i)}));
    } else {
      const auto& src = sources[static_cast<size_t>(i) % sources.size()];
      if (src.height() < d.field_size || src.width() < d.field_size) {
        throw DimensionError("source image smaller than data.field_size");
      }
      Rng rng(derive_seed(ctx.seed, {101, static_cast<uint64_t>(i)}));
      const auto r0 = rng.integer(0, src.height() - d.field_size);
      const auto c0 = rng.integer(0, src.width() - d.field_size);
      sharp = ImagePatch(
          src.pixels().slice(0, r0, r0 + d.field_size).slice(1, c0, c0 + d.field_size).contiguous().clone());
    }
    sharp.set_id(id.str());
    auto stack = synth_focal_stack(sharp, d.offsets, ctx.config.optics, d.tilt, d.block);
    const auto sdir = dir / id.str();
    ManifestRecord rec;
    rec.id = id.str();
    rec.spacing_um = d.spacing_um;
    rec.fused = sdir / "fused.png";
    save_png(sharp, rec.fused);
    for (size_t k = 0; k < stack.stack.planes.size(); ++k) {
      const auto p = sdir / ("plane_" + std::to_string(k) + ".png");
      save_png(stack.stack.planes[k].patch, p);
      rec.planes.emplace_back(stack.stack.planes[k].offset, p);
    }
    rec.labels = sdir / "labels.txt";
    write_label_sidecar(stack.labels, d.offsets, rec.labels);
    records.push_back(std::move(rec));
  }
  write_manifest(records, ctx.data_manifest());
  return ctx.data_manifest();
}

fs::path run_train(const RunContext& ctx, Component component, const TrainOptions& options) {
  TrainOptions opt = options;
  if (opt.manifest.empty()) opt.manifest = ctx.data_manifest();
  if (opt.epochs && *opt.epochs < 1) throw ParameterError("--epochs must be >= 1");
  Log log(ctx, "train-" + to_string(component));
  switch (component) {
    case Component::kEncoder: return train_encoder(ctx, opt, log);
    case Component::kDefocus: return train_defocus_component(ctx, opt, log);
    case Component::kPrompt: return train_prompt_component(ctx, opt, log);
    case Component::kPFormer: return train_pformer_component(ctx, opt, log);
    case Component::kPDiffusion: return train_pdiffusion_component(ctx, opt, log);
  }
  return {};
}

std::vector<fs::path> run_restore(const RunContext& ctx, const fs::path& input, const RestoreOptions& options) {
  if (options.stage == Stage::kFine && options.fine_input.empty()) {
    throw UsageError("stage=fine needs a coarse image: pass --fine-input (or use --stage both)");
  }
  if (!fs::exists(input)) throw IoError("missing restore input " + input.string());
  const bool is_manifest = input.extension() != ".png";

  // (id, degraded image, reference or empty)
  struct Job {
    std::string id;
    ImagePatch lq;
    fs::path reference;
  };
  std::vector<Job> jobs;
  if (is_manifest) {
    const auto& d = ctx.config.data;
    for (const auto& rec : parse_manifest(input)) {
      for (size_t k = 0; k < rec.planes.size(); ++k) {
        const double a = std::abs(rec.planes[k].first);
        if (a < d.restore_min_abs_offset || a > d.restore_max_abs_offset) continue;
        auto img = load_image(rec.planes[k].second);
        img.set_id(plane_id(rec.id, k));
        jobs.push_back({img.id(), img, rec.fused});
      }
    }
  } else {
    auto img = load_image(input);
    jobs.push_back({img.id(), img, {}});
  }

  std::map<std::string, fs::path> fine_by_id;
  if (options.stage == Stage::kFine) {
    if (is_manifest) {
      fine_by_id = fine_inputs_by_id(options.fine_input);
    } else {
      fine_by_id[jobs.front().id] = options.fine_input;
    }
  }

  Models m;
  const std::string what = "restore --stage " + to_string(options.stage);
  m.defocus = load_defocus(ctx, what);
  m.encoder = load_encoder(ctx, what);
  m.restorer = load_prompt(ctx, what);
  if (options.stage != Stage::kFine) m.pformer = load_pformer(ctx, what);
  if (options.stage != Stage::kCoarse) m.diffusion = load_pdiffusion(ctx, what);

  const auto dir = ctx.out / "restore";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  std::vector<ManifestRecord> out_records, ref_records;
  const auto tile = ctx.config.data.tile;
  const auto stride = ctx.config.data.tile_stride;
  for (const auto& job : jobs) {
    torch::Tensor fine_full;
    if (options.stage == Stage::kFine) {
      auto it = fine_by_id.find(job.id);
      if (it == fine_by_id.end()) throw UsageError("--fine-input has no coarse image for '" + job.id + "'");
      auto fi = load_image(it->second);
      if (fi.height() != job.lq.height() || fi.width() != job.lq.width()) {
        throw DimensionError("--fine-input for '" + job.id + "' differs in size from the degraded input");
      }
      fine_full = fi.chw();
    }
    std::vector<std::pair<TileIndex, torch::Tensor>> outs, heats;
    const auto tiles = tile_image(job.lq, tile, stride);
    for (size_t k = 0; k < tiles.size(); ++k) {
      const auto& [idx, patch] = tiles[k];
      ImagePatch t = patch;
      t.set_id(job.id + "@" + std::to_string(idx.row0) + "_" + std::to_string(idx.col0));
      torch::Tensor cond;
      if (fine_full.defined()) {
        cond = fine_full.slice(1, idx.row0, idx.row0 + tile).slice(2, idx.col0, idx.col0 + tile);
      }
      SampleObserver obs;
      if (options.debug_steps) {
        obs = [&, k](int64_t step, const torch::Tensor& x) {
          save_png(ImagePatch::from_chw_clamped(x[0]),
                   dir / "debug" / (job.id + "_tile" + std::to_string(k) + "_t" + std::to_string(step) + ".png"));
        };
      }
      const auto seed = derive_seed(ctx.seed, {id_hash(job.id), static_cast<uint64_t>(k)});
      auto r = restore_tile(ctx, m, t, cond, options.stage, seed, obs);
      outs.emplace_back(idx, r.out);
      heats.emplace_back(idx, r.heatmap);
    }
    auto full = ImagePatch::from_chw_clamped(stitch_chw(outs, job.lq.height(), job.lq.width()), job.id);
    const auto path = dir / (job.id + "_" + to_string(options.stage) + ".png");
    save_png(full, path);
    written.push_back(path);
    if (options.debug_maps) {
      auto heat = stitch_chw(heats, job.lq.height(), job.lq.width())[0];
      save_png_u8((heat / 8.0).clamp(0, 1).mul(255).round(), dir / "debug" / (job.id + "_heatmap.png"));
      save_png_u8(canny(job.lq, ctx.config.edges.canny).tensor()[0].mul(255), dir / "debug" / (job.id + "_edges.png"));
    }
    out_records.push_back(single_image_record(job.id, path));
    if (!job.reference.empty()) ref_records.push_back(single_image_record(job.id, job.reference));
  }
  if (is_manifest) {
    write_manifest(out_records, dir / "manifest.txt");
    write_manifest(ref_records, dir / "reference.txt");
  }
  return written;
}

MetricReport run_evaluate(const RunContext& ctx, const fs::path& predictions, const fs::path& references) {
  auto preds = parse_manifest(predictions);
  auto refs = parse_manifest(references);
  auto encoder = load_encoder(ctx, "evaluate");
  PerceptualScorer scorer = [encoder](const ImagePatch& a, const ImagePatch& b) {
    return perceptual_proxy(a, b, *encoder);
  };
  auto report = evaluate_dataset(preds, refs, ctx.config.metrics.group_by_slide, scorer, ctx.config.metrics.tile);
  fs::create_directories(ctx.out / "eval");
  write_metric_table(report, ctx.out / "eval" / "metrics.txt");
  write_metric_records(report, ctx.out / "eval" / "metrics.jsonl");
  return report;
}

DiagnosticsReport run_diagnostics(const RunContext& ctx, const fs::path& manifest) {
  const auto mpath = manifest.empty() ? ctx.data_manifest() : manifest;
  DiagnosticsReport rep;
  auto defocus = load_defocus(ctx, "diagnose");
  auto restorer = load_prompt(ctx, "diagnose");
  auto pformer = load_pformer(ctx, "diagnose");
  auto encoder = load_encoder(ctx, "diagnose");
  auto data = load_dataset(mpath);
  auto pairs = restoration_pairs(data, ctx.config.data);
  auto pc = compute_prompts(pairs, defocus, *encoder);
  auto p_p = restored_tokens(restorer, pc);
  const auto dir = ctx.out / "diagnostics";
  fs::create_directories(dir);

  {
    std::ofstream os(dir / "prompt_distance.txt");
    os << std::left << std::setw(28) << "id" << std::right << std::setw(14) << "mse_lp" << std::setw(14) << "mse_p"
       << '\n';
    int64_t closer = 0;
    for (int64_t i = 0; i < p_p.size(0); ++i) {
      auto d = prompt_distance_report(PathologyPrompt::from_tokens(pc.p_lp[i]), PathologyPrompt::from_tokens(p_p[i]),
                                      PathologyPrompt::from_tokens(pc.p_hp[i]));
      rep.prompt_distance.push_back(d);
      closer += d.mse_p < d.mse_lp;
      os << std::left << std::setw(28) << pc.ids[i] << std::right << std::scientific << std::setprecision(4)
         << std::setw(14) << d.mse_lp << std::setw(14) << d.mse_p << '\n';
    }
    rep.fraction_p_closer = static_cast<double>(closer) / static_cast<double>(p_p.size(0));
    os << "# fraction with mse_p < mse_lp: " << std::fixed << std::setprecision(4) << rep.fraction_p_closer << '\n';
  }

  {
    // Heatmap grid over the first stack: one panel per plane, left to right.
    const auto& st = data.front().stack;
    const auto h = st.planes.front().patch.height();
    const auto w = st.planes.front().patch.width();
    const int64_t gap = 4;
    const auto n = static_cast<int64_t>(st.planes.size());
    auto grid = torch::zeros({h, n * w + (n - 1) * gap}, torch::kFloat32);
    std::ofstream os(dir / "heatmap_grid.txt");
    os << "panel offset d_hat mean_abs_map\n";
    for (int64_t k = 0; k < n; ++k) {
      auto [est, prompt] = estimate(defocus, st.planes[k].patch, false);
      auto heat = defocus_heatmap(prompt, defocus);
      grid.slice(1, k * (w + gap), k * (w + gap) + w).copy_((heat / 8.0).clamp(0, 1));
      os << k << ' ' << st.planes[k].offset << ' ' << std::fixed << std::setprecision(4) << est.d_hat << ' '
         << heat.mean().item<double>() << '\n';
    }
    save_png_u8(grid.mul(255).round(), dir / "heatmap_grid.png");
    rep.heatmap_panels = n;
  }

  {
    auto pooled = p_p.mean(1);
    auto blocks = pformer->all_blocks();
    rep.utilization.assign(blocks.size(), std::vector<double>(ctx.config.pformer.n_experts, 0.0));
    const auto n = pairs.lq.size(0);
    for (int64_t a = 0; a < n; a += 16) {
      const auto b = std::min(n, a + 16);
      pformer_forward_batch(pformer, pairs.lq.slice(0, a, b), pooled.slice(0, a, b));
      for (size_t k = 0; k < blocks.size(); ++k) {
        auto s = blocks[k]->ffn()->last_weights().sum(0);
        for (int64_t e = 0; e < s.size(0); ++e) rep.utilization[k][e] += s[e].item<double>();
      }
    }
    std::ofstream os(dir / "utilization.txt");
    os << "# block: mean router weight per expert\n";
    for (size_t k = 0; k < blocks.size(); ++k) {
      for (auto& v : rep.utilization[k]) v /= static_cast<double>(n);
      os << k << ": " << join_row(rep.utilization[k]) << '\n';
    }
  }
  return rep;
}

std::vector<fs::path> run_edges(const RunContext& ctx, const fs::path& input) {
  auto img = load_image(input);
  auto defocus = load_defocus(ctx, "edges");
  const auto dir = ctx.out / "edges";
  fs::create_directories(dir);
  auto edges = canny(img, ctx.config.edges.canny);
  DefocusConfidence conf(ctx.config.defocus.widths.back());
  if (fs::exists(ctx.checkpoint(Component::kPDiffusion))) {
    auto diff = load_pdiffusion(ctx, "edges");
    conf = diff->confidence();
  } else {
    conf->init_from_ctf_head(defocus, ctx.config.edges.confidence_gain);
  }
  auto [est, prompt] = estimate(defocus, img, false);
  torch::NoGradGuard guard;
  auto c = conf->forward(prompt.features.unsqueeze(0), {img.height(), img.width()})[0][0];
  const auto e_path = dir / (img.id() + "_edges.png");
  const auto c_path = dir / (img.id() + "_confidence.png");
  save_png_u8(edges.tensor()[0].mul(255), e_path);
  save_png_u8(c.mul(255).round(), c_path);
  return {e_path, c_path};
}

std::vector<fs::path> run_defocus_heatmap(const RunContext& ctx, const fs::path& input) {
  auto img = load_image(input);
  auto defocus = load_defocus(ctx, "defocus-heatmap");
  auto [est, prompt] = estimate(defocus, img, false);
  auto heat = defocus_heatmap(prompt, defocus);
  const auto dir = ctx.out / "heatmap";
  fs::create_directories(dir);
  const auto png = dir / (img.id() + "_heatmap.png");
  const auto txt = dir / (img.id() + "_heatmap.txt");
  save_png_u8((heat / 8.0).clamp(0, 1).mul(255).round(), png);
  std::ofstream os(txt);
  os << std::fixed << std::setprecision(4) << "d_hat " << est.d_hat << "\nc_hat " << est.c_reported()
     << "\nmap_min " << heat.min().item<double>() << "\nmap_max " << heat.max().item<double>() << '\n';
  return {png, txt};
}

}  // namespace mop
