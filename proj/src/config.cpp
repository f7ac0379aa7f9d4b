#include "mop/config.hpp"

#include <cstdio>
#include <fstream>

#include "mop/errors.hpp"

using nlohmann::json;

namespace mop {

json default_config_document() {
  std::vector<double> offsets;
  for (int k = -6; k <= 6; ++k) offsets.push_back(k);
  const DefocusConfig d;
  const EncoderPretrainConfig ep;
  const PromptRestorerConfig pr;
  const PFormerConfig pf;
  const PDiffusionTrainConfig pd;
  const DataConfig data;
  return json{
      {"data",
       {{"sources", json::array()},
        {"n_stacks", data.n_stacks},
        {"field_size", data.field_size},
        {"offsets", offsets},
        {"tilt", data.tilt},
        {"block", data.block},
        {"spacing_um", data.spacing_um},
        {"patch", data.patch},
        {"tile", data.tile},
        {"tile_stride", data.tile_stride},
        {"restore_min_abs_offset", data.restore_min_abs_offset},
        {"restore_max_abs_offset", data.restore_max_abs_offset}}},
      {"optics", {{"sigma_per_plane", 0.6}, {"f_ref", 0.1}, {"kernel_radius_sigmas", 3.0}}},
      {"defocus",
       {{"widths", d.widths},
        {"targets", to_string(d.targets)},
        {"epochs", d.epochs},
        {"batch_size", d.batch_size},
        {"lr", d.lr},
        {"gamma", d.gamma},
        {"stain_augment", d.stain_augment},
        {"stain_reference_mean", d.stain_reference.mean},
        {"stain_reference_std", d.stain_reference.std}}},
      {"encoder",
       {{"name", "tiny-vit"},
        {"sidecar_dir", ""},
        {"pretrain_epochs", ep.epochs},
        {"pretrain_batch_size", ep.batch_size},
        {"pretrain_lr", ep.lr},
        {"buckets", ep.buckets}}},
      {"prompt_restorer",
       {{"blocks", pr.blocks},
        {"heads", pr.heads},
        {"dim", pr.dim},
        {"epochs", pr.epochs},
        {"batch_size", pr.batch_size},
        {"lr", pr.lr},
        {"gamma", pr.gamma}}},
      {"edges", {{"low", 0.1}, {"high", 0.2}, {"sigma", 1.4}, {"channels", kEdgeChannels}, {"confidence_gain", 4.0}}},
      {"pformer",
       {{"widths", pf.widths},
        {"blocks", pf.blocks},
        {"heads", pf.heads},
        {"n_experts", pf.n_experts},
        {"ffn_expansion", pf.ffn_expansion},
        {"epochs", pf.epochs},
        {"batch_size", pf.batch_size},
        {"lr", pf.lr},
        {"gamma", pf.gamma},
        {"schedule", to_string(pf.schedule)},
        {"max_steps", pf.max_steps}}},
      {"pdiffusion",
       {{"widths", pd.net.widths},
        {"heads", pd.net.heads},
        {"use_raw_lq", pd.net.use_raw_lq},
        {"use_edges", pd.net.use_edges},
        {"T", pd.T},
        {"kappa", pd.kappa},
        {"eta1", pd.eta1},
        {"steps", pd.steps},
        {"warmup", pd.warmup},
        {"batch_size", pd.batch_size},
        {"lr", pd.lr}}},
      {"metrics", {{"group_by_slide", true}, {"tile", 256}}},
      {"run", {{"seed", 0}, {"threads", 1}}},
  };
}

namespace {

bool compatible(const json& def, const json& val) {
  if (def.is_number() && val.is_number()) {
    // Integers stay integers; floats accept either.
    return def.is_number_float() || val.is_number_integer();
  }
  return def.type() == val.type();
}

void overlay(json& target, const json& user, const std::string& path) {
  if (!user.is_object()) throw ValidationError("config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const auto key = path.empty() ? it.key() : path + "." + it.key();
    if (!target.contains(it.key())) throw ValidationError("config: unknown key '" + key + "'");
    auto& slot = target[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else if (!compatible(slot, it.value())) {
      throw ValidationError("config: '" + key + "' expects " + std::string(slot.type_name()) + ", got " +
                            it.value().type_name());
    } else {
      slot = it.value();
    }
  }
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: bad value for '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace

json merge_config(const json& user) {
  auto doc = default_config_document();
  if (!user.is_null()) overlay(doc, user, "");
  return doc;
}

PipelineConfig config_from_document(const json& doc) {
  PipelineConfig c;
  c.document = doc;

  auto& d = c.data;
  d.sources = get<std::vector<std::string>>(doc, "data", "sources");
  d.n_stacks = get<int64_t>(doc, "data", "n_stacks");
  d.field_size = get<int64_t>(doc, "data", "field_size");
  d.offsets = get<std::vector<double>>(doc, "data", "offsets");
  d.tilt = get<double>(doc, "data", "tilt");
  d.block = get<int64_t>(doc, "data", "block");
  d.spacing_um = get<double>(doc, "data", "spacing_um");
  d.patch = get<int64_t>(doc, "data", "patch");
  d.tile = get<int64_t>(doc, "data", "tile");
  d.tile_stride = get<int64_t>(doc, "data", "tile_stride");
  d.restore_min_abs_offset = get<double>(doc, "data", "restore_min_abs_offset");
  d.restore_max_abs_offset = get<double>(doc, "data", "restore_max_abs_offset");
  if (d.n_stacks < 1 || d.field_size < 32 || d.patch < 32 || d.tile < 32 || d.block < 1) {
    throw ValidationError("config: data sizes out of range");
  }
  if (d.patch % 32 != 0 || d.tile % 32 != 0) throw ValidationError("config: data.patch and data.tile must be multiples of 32");
  if (d.offsets.empty()) throw ValidationError("config: data.offsets must not be empty");

  c.optics.sigma_per_plane = get<double>(doc, "optics", "sigma_per_plane");
  c.optics.f_ref = get<double>(doc, "optics", "f_ref");
  c.optics.kernel_radius_sigmas = get<double>(doc, "optics", "kernel_radius_sigmas");
  c.optics.validate();

  auto& df = c.defocus;
  df.widths = get<std::vector<int64_t>>(doc, "defocus", "widths");
  df.targets = parse_defocus_targets(get<std::string>(doc, "defocus", "targets"));
  df.epochs = get<int64_t>(doc, "defocus", "epochs");
  df.batch_size = get<int64_t>(doc, "defocus", "batch_size");
  df.lr = get<double>(doc, "defocus", "lr");
  df.gamma = get<double>(doc, "defocus", "gamma");
  df.stain_augment = get<bool>(doc, "defocus", "stain_augment");
  df.stain_reference.mean = get<std::array<double, 3>>(doc, "defocus", "stain_reference_mean");
  df.stain_reference.std = get<std::array<double, 3>>(doc, "defocus", "stain_reference_std");

  c.encoder.name = get<std::string>(doc, "encoder", "name");
  c.encoder.sidecar_dir = get<std::string>(doc, "encoder", "sidecar_dir");
  c.encoder.pretrain.epochs = get<int64_t>(doc, "encoder", "pretrain_epochs");
  c.encoder.pretrain.batch_size = get<int64_t>(doc, "encoder", "pretrain_batch_size");
  c.encoder.pretrain.lr = get<double>(doc, "encoder", "pretrain_lr");
  c.encoder.pretrain.buckets = get<int64_t>(doc, "encoder", "buckets");

  auto& pr = c.prompt_restorer;
  pr.blocks = get<int64_t>(doc, "prompt_restorer", "blocks");
  pr.heads = get<int64_t>(doc, "prompt_restorer", "heads");
  pr.dim = get<int64_t>(doc, "prompt_restorer", "dim");
  pr.defocus_dim = df.widths.empty() ? 0 : df.widths.back();
  pr.epochs = get<int64_t>(doc, "prompt_restorer", "epochs");
  pr.batch_size = get<int64_t>(doc, "prompt_restorer", "batch_size");
  pr.lr = get<double>(doc, "prompt_restorer", "lr");
  pr.gamma = get<double>(doc, "prompt_restorer", "gamma");
  pr.validate();

  c.edges.canny.low = get<double>(doc, "edges", "low");
  c.edges.canny.high = get<double>(doc, "edges", "high");
  c.edges.canny.sigma = get<double>(doc, "edges", "sigma");
  c.edges.confidence_gain = get<double>(doc, "edges", "confidence_gain");
  const auto edge_channels = get<int64_t>(doc, "edges", "channels");
  if (!(c.edges.canny.low >= 0 && c.edges.canny.low < c.edges.canny.high && c.edges.canny.high <= 1)) {
    throw ValidationError("config: edges thresholds must satisfy 0 <= low < high <= 1");
  }

  auto& pf = c.pformer;
  pf.widths = get<std::vector<int64_t>>(doc, "pformer", "widths");
  pf.blocks = get<std::vector<int64_t>>(doc, "pformer", "blocks");
  pf.heads = get<std::vector<int64_t>>(doc, "pformer", "heads");
  pf.n_experts = get<int64_t>(doc, "pformer", "n_experts");
  pf.prompt_dim = pr.dim;
  pf.ffn_expansion = get<double>(doc, "pformer", "ffn_expansion");
  pf.epochs = get<int64_t>(doc, "pformer", "epochs");
  pf.batch_size = get<int64_t>(doc, "pformer", "batch_size");
  pf.lr = get<double>(doc, "pformer", "lr");
  pf.gamma = get<double>(doc, "pformer", "gamma");
  pf.schedule = parse_lr_schedule(get<std::string>(doc, "pformer", "schedule"));
  pf.max_steps = get<int64_t>(doc, "pformer", "max_steps");
  pf.validate();

  auto& pd = c.pdiffusion;
  pd.net.widths = get<std::vector<int64_t>>(doc, "pdiffusion", "widths");
  pd.net.heads = get<int64_t>(doc, "pdiffusion", "heads");
  pd.net.use_raw_lq = get<bool>(doc, "pdiffusion", "use_raw_lq");
  pd.net.use_edges = get<bool>(doc, "pdiffusion", "use_edges");
  pd.net.prompt_dim = pr.dim;
  pd.net.defocus_dim = pr.defocus_dim;
  pd.net.edge_channels = edge_channels;
  pd.T = get<int64_t>(doc, "pdiffusion", "T");
  pd.kappa = get<double>(doc, "pdiffusion", "kappa");
  pd.eta1 = get<double>(doc, "pdiffusion", "eta1");
  pd.steps = get<int64_t>(doc, "pdiffusion", "steps");
  pd.warmup = get<int64_t>(doc, "pdiffusion", "warmup");
  pd.batch_size = get<int64_t>(doc, "pdiffusion", "batch_size");
  pd.lr = get<double>(doc, "pdiffusion", "lr");
  pd.validate();

  c.metrics.group_by_slide = get<bool>(doc, "metrics", "group_by_slide");
  c.metrics.tile = get<int64_t>(doc, "metrics", "tile");
  c.run.seed = get<uint64_t>(doc, "run", "seed");
  c.run.threads = get<int64_t>(doc, "run", "threads");
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json user;
  try {
    user = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return config_from_document(merge_config(user));
}

PipelineConfig default_config() { return config_from_document(default_config_document()); }

std::string config_fingerprint(const json& doc) {
  const auto s = doc.dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string PipelineConfig::fingerprint() const { return config_fingerprint(document); }

}  // namespace mop
