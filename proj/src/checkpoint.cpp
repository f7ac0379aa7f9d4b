#include "mop/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "mop/errors.hpp"

namespace fs = std::filesystem;

namespace mop {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'P', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<uint32_t>();
    std::string s(n, '\0');
    is_.read(s.data(), n);
    check();
    return s;
  }
  void bytes(void* p, size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    check();
  }

 private:
  void check() {
    if (!is_) throw FormatError("truncated checkpoint " + origin_);
  }
  std::istream& is_;
  std::string origin_;
};

uint8_t dtype_code(torch::Dtype t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw FormatError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::Dtype code_dtype(uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw FormatError("checkpoint: unknown dtype code " + std::to_string(c));
  }
}

void write_tensor(Writer& w, const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  w.pod<uint8_t>(dtype_code(c.scalar_type()));
  w.pod<uint32_t>(static_cast<uint32_t>(c.dim()));
  for (auto d : c.sizes()) w.pod<int64_t>(d);
  w.bytes(c.data_ptr(), c.numel() * c.element_size());
}

torch::Tensor read_tensor(Reader& r) {
  const auto dtype = code_dtype(r.pod<uint8_t>());
  const auto rank = r.pod<uint32_t>();
  if (rank > 8) throw FormatError("checkpoint: tensor rank " + std::to_string(rank) + " out of range");
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) {
    d = r.pod<int64_t>();
    if (d < 0) throw FormatError("checkpoint: negative tensor dimension");
  }
  auto t = torch::empty(dims, dtype);
  r.bytes(t.data_ptr(), t.numel() * t.element_size());
  return t;
}

constexpr char kOptMagic[8] = {'M', 'O', 'P', 'A', 'D', 'A', 'M', '\0'};

}  // namespace

void Checkpoint::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    Writer w(os);
    w.bytes(kMagic, sizeof(kMagic));
    w.pod<uint32_t>(format_version);
    w.str(component);
    w.str(config_fingerprint);
    w.pod<int64_t>(step);
    w.pod<int64_t>(epoch);
    w.pod<uint32_t>(static_cast<uint32_t>(metadata.size()));
    for (const auto& [k, v] : metadata) {
      w.str(k);
      w.str(v);
    }
    w.pod<uint32_t>(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      w.str(name);
      write_tensor(w, t);
    }
    w.pod<uint32_t>(static_cast<uint32_t>(blobs.size()));
    for (const auto& [name, blob] : blobs) {
      w.str(name);
      w.pod<uint64_t>(blob.size());
      w.bytes(blob.data(), blob.size());
    }
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError(path.string() + " is not a mop checkpoint");
  Checkpoint ck;
  ck.format_version = r.pod<uint32_t>();
  if (ck.format_version != kFormatVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(ck.format_version));
  }
  ck.component = r.str();
  ck.config_fingerprint = r.str();
  ck.step = r.pod<int64_t>();
  ck.epoch = r.pod<int64_t>();
  const auto n_meta = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    ck.metadata[k] = r.str();
  }
  const auto n_tensors = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    ck.tensors[name] = read_tensor(r);
  }
  const auto n_blobs = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n_blobs; ++i) {
    auto name = r.str();
    const auto len = r.pod<uint64_t>();
    std::string blob(len, '\0');
    r.bytes(blob.data(), len);
    ck.blobs[name] = std::move(blob);
  }
  return ck;
}

Checkpoint load_checkpoint(const fs::path& path, const std::string& component, const std::string& expected_fingerprint,
                           bool allow_mismatch) {
  if (!fs::exists(path)) throw DependencyError("missing " + component + " checkpoint: " + path.string());
  auto ck = Checkpoint::load(path);
  if (ck.component != component) {
    throw ValidationError(path.string() + " holds component '" + ck.component + "', expected '" + component + "'");
  }
  if (!allow_mismatch && !expected_fingerprint.empty() && ck.config_fingerprint != expected_fingerprint) {
    throw ValidationError(path.string() + ": config fingerprint " + ck.config_fingerprint +
                          " does not match current config " + expected_fingerprint +
                          " (pass --allow-mismatch to override)");
  }
  return ck;
}

void store_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    ckpt.tensors[prefix + p.key()] = p.value().detach().clone();
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    ckpt.tensors[prefix + b.key()] = b.value().detach().clone();
  }
}

void restore_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix) {
  torch::NoGradGuard guard;
  auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
    auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) {
      throw FormatError("checkpoint '" + ckpt.component + "' lacks tensor " + prefix + name);
    }
    if (it->second.sizes() != dst.sizes()) {
      throw DimensionError("checkpoint tensor " + prefix + name + " has shape " + c10::str(it->second.sizes()) +
                           ", module expects " + c10::str(dst.sizes()));
    }
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters(true)) copy_into(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy_into(b.key(), b.value());
}

// libtorch's own optimizer archive embeds a random serialization id, which would make
// otherwise identical checkpoints differ byte-wise; Adam state is written explicitly instead.
std::string serialize_optimizer(torch::optim::Optimizer& optimizer) {
  std::ostringstream os;
  Writer w(os);
  w.bytes(kOptMagic, sizeof(kOptMagic));
  const auto& groups = optimizer.param_groups();
  w.pod<uint32_t>(static_cast<uint32_t>(groups.size()));
  for (const auto& g : groups) {
    const auto* opts = dynamic_cast<const torch::optim::AdamOptions*>(&g.options());
    if (!opts) throw Error("serialize_optimizer: only Adam state is supported");
    w.pod<double>(opts->lr());
    w.pod<uint32_t>(static_cast<uint32_t>(g.params().size()));
    for (const auto& p : g.params()) {
      auto it = optimizer.state().find(p.unsafeGetTensorImpl());
      if (it == optimizer.state().end()) {
        w.pod<uint8_t>(0);
        continue;
      }
      const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
      w.pod<uint8_t>(1);
      w.pod<int64_t>(st.step());
      write_tensor(w, st.exp_avg());
      write_tensor(w, st.exp_avg_sq());
      w.pod<uint8_t>(st.max_exp_avg_sq().defined());
      if (st.max_exp_avg_sq().defined()) write_tensor(w, st.max_exp_avg_sq());
    }
  }
  return os.str();
}

void deserialize_optimizer(torch::optim::Optimizer& optimizer, const std::string& blob) {
  std::istringstream is(blob);
  Reader r(is, "optimizer state");
  char magic[sizeof(kOptMagic)];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kOptMagic, sizeof(kOptMagic)) != 0) throw FormatError("optimizer state: bad magic");
  auto& groups = optimizer.param_groups();
  if (r.pod<uint32_t>() != groups.size()) throw FormatError("optimizer state: parameter group count differs");
  for (auto& g : groups) {
    auto* opts = dynamic_cast<torch::optim::AdamOptions*>(&g.options());
    if (!opts) throw Error("deserialize_optimizer: only Adam state is supported");
    opts->lr(r.pod<double>());
    if (r.pod<uint32_t>() != g.params().size()) throw FormatError("optimizer state: parameter count differs");
    for (auto& p : g.params()) {
      if (!r.pod<uint8_t>()) continue;
      auto st = std::make_unique<torch::optim::AdamParamState>();
      st->step(r.pod<int64_t>());
      auto m = read_tensor(r);
      auto v = read_tensor(r);
      if (m.sizes() != p.sizes() || v.sizes() != p.sizes()) throw FormatError("optimizer state: moment shape differs");
      st->exp_avg(m);
      st->exp_avg_sq(v);
      if (r.pod<uint8_t>()) st->max_exp_avg_sq(read_tensor(r));
      optimizer.state()[p.unsafeGetTensorImpl()] = std::move(st);
    }
  }
}

uint64_t parameter_hash(const torch::nn::Module& module) {
  uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  auto feed_tensor = [&](const std::string& name, const torch::Tensor& t) {
    feed(name.data(), name.size());
    auto c = t.detach().cpu().contiguous();
    feed(c.data_ptr(), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters(true)) feed_tensor(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) feed_tensor(b.key(), b.value());
  return h;
}

}  // namespace mop
