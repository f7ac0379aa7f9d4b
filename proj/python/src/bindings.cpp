#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"
#include "mop/degrade.hpp"
#include "mop/diffusion.hpp"
#include "mop/edges.hpp"
#include "mop/errors.hpp"
#include "mop/metrics.hpp"
#include "mop/pipeline.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

mop::ImagePatch to_patch(const FloatArray& a) {
  if (a.ndim() != 3) throw mop::DimensionError("expected an H x W x 3 float array");
  auto t = torch::from_blob(const_cast<float*>(a.data()), {a.shape(0), a.shape(1), a.shape(2)}, torch::kFloat32);
  return mop::ImagePatch(t.clone());
}

py::array_t<float> to_array(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat32).contiguous();
  py::array_t<float> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<size_t>(c.numel()) * sizeof(float));
  return out;
}

std::vector<std::string> strings(const std::vector<fs::path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(p.string());
  return out;
}

py::dict triple(const mop::MetricTriple& m) {
  py::dict d;
  d["psnr"] = m.psnr;
  d["ssim"] = m.ssim;
  d["perceptual"] = m.perceptual;
  return d;
}

/// One output directory plus configuration; each call locks the directory and leaves a run record.
class Context {
 public:
  Context(const std::string& out, const std::string& config_json, const std::string& config_path,
          std::optional<uint64_t> seed, bool quiet) {
    mop::PipelineConfig cfg;
    if (!config_path.empty()) {
      cfg = mop::load_config(config_path);
    } else if (!config_json.empty()) {
      cfg = mop::config_from_document(mop::merge_config(nlohmann::json::parse(config_json)));
    } else {
      cfg = mop::default_config();
    }
    ctx_ = mop::make_context(std::move(cfg), out, seed);
    ctx_.verbose = !quiet;
  }

  template <typename Fn>
  auto run(const std::string& record, Fn body) {
    py::gil_scoped_release release;
    mop::OutputLock lock(ctx_.out);
    const auto t0 = std::chrono::steady_clock::now();
    auto result = body();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    mop::write_run_record(ctx_, record, dt.count());
    return result;
  }

  mop::RunContext ctx_;
};

}  // namespace

PYBIND11_MODULE(_mop, m) {
  m.doc() = "Two-stage prompt-guided restoration of defocused pathology images";

  static py::exception<mop::Error> base(m, "MopError", PyExc_RuntimeError);
  py::register_exception<mop::ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<mop::IoError>(m, "IoError", base.ptr());
  py::register_exception<mop::DependencyError>(m, "DependencyError", base.ptr());

  m.def("procedural_texture", [](int64_t h, int64_t w, uint64_t seed) {
    return to_array(mop::procedural_texture(h, w, seed).pixels());
  }, py::arg("height"), py::arg("width"), py::arg("seed"));
  m.def("ctf_value", [](double d, double sigma_per_plane, double f_ref) {
    mop::OpticsParams o;
    o.sigma_per_plane = sigma_per_plane;
    o.f_ref = f_ref;
    o.validate();
    return mop::ctf_value(d, o);
  }, py::arg("d"), py::arg("sigma_per_plane") = 0.6, py::arg("f_ref") = 0.1);
  m.def("defocus_blur", [](const FloatArray& image, double d) {
    return to_array(mop::defocus_blur(to_patch(image), d, mop::OpticsParams{}).pixels());
  }, py::arg("image"), py::arg("d"));
  m.def("canny", [](const FloatArray& image, double low, double high, double sigma) {
    auto e = mop::canny(to_patch(image), mop::CannyParams{low, high, sigma});
    py::array_t<uint8_t> out({e.height, e.width});
    std::memcpy(out.mutable_data(), e.mask.data(), e.mask.size());
    return out;
  }, py::arg("image"), py::arg("low") = 0.1, py::arg("high") = 0.2, py::arg("sigma") = 1.4);
  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return mop::psnr(to_patch(a), to_patch(b)); });
  m.def("ssim", [](const FloatArray& a, const FloatArray& b) { return mop::ssim(to_patch(a), to_patch(b)); });
  m.def("make_schedule", [](int64_t T, double kappa, double eta1) {
    auto s = mop::make_schedule(T, kappa, eta1);
    py::dict d;
    d["eta"] = s.eta;
    d["alpha"] = s.alpha;
    d["kappa"] = s.kappa;
    return d;
  }, py::arg("T") = 4, py::arg("kappa") = 2.0, py::arg("eta1") = 0.04);
  m.def("load_image", [](const std::string& path) { return to_array(mop::load_image(path).pixels()); });
  m.def("save_png", [](const FloatArray& image, const std::string& path) { mop::save_png(to_patch(image), path); });
  m.def("default_config_json", [] { return mop::default_config_document().dump(); });
  m.def("git_describe", &mop::git_describe);

  py::class_<Context>(m, "Context")
      .def(py::init<const std::string&, const std::string&, const std::string&, std::optional<uint64_t>, bool>(),
           py::arg("out"), py::arg("config_json") = "", py::arg("config_path") = "", py::arg("seed") = py::none(),
           py::arg("quiet") = true)
      .def_property_readonly("fingerprint", [](const Context& c) { return c.ctx_.config.fingerprint(); })
      .def_property_readonly("seed", [](const Context& c) { return c.ctx_.seed; })
      .def("simulate", [](Context& c) {
        return c.run("simulate", [&] { return mop::run_simulate(c.ctx_).string(); });
      })
      .def("train", [](Context& c, const std::string& component, std::optional<int64_t> epochs) {
        const auto comp = mop::parse_component(component);
        return c.run("train-" + component, [&] { return mop::run_train(c.ctx_, comp, {epochs, {}}).string(); });
      }, py::arg("component"), py::arg("epochs") = py::none())
      .def("restore", [](Context& c, const std::string& input, const std::string& stage, const std::string& fine_input,
                         bool debug_steps, bool debug_maps) {
        mop::RestoreOptions o{mop::parse_stage(stage), fine_input, debug_steps, debug_maps};
        return c.run("restore", [&] { return strings(mop::run_restore(c.ctx_, input, o)); });
      }, py::arg("input"), py::arg("stage") = "both", py::arg("fine_input") = "", py::arg("debug_steps") = false,
         py::arg("debug_maps") = false)
      .def("evaluate", [](Context& c, const std::string& pred, const std::string& ref) {
        auto r = c.run("evaluate", [&] { return mop::run_evaluate(c.ctx_, pred, ref); });
        py::dict d = triple(r.aggregate);
        d["units"] = r.units;
        py::dict slides;
        for (const auto& [id, t] : r.per_slide) slides[py::str(id)] = triple(t);
        d["per_slide"] = slides;
        return d;
      }, py::arg("pred"), py::arg("ref"))
      .def("diagnose", [](Context& c) {
        auto r = c.run("diagnose", [&] { return mop::run_diagnostics(c.ctx_); });
        py::dict d;
        d["fraction_p_closer"] = r.fraction_p_closer;
        d["utilization"] = r.utilization;
        d["heatmap_panels"] = r.heatmap_panels;
        return d;
      })
      .def("edges", [](Context& c, const std::string& input) {
        return c.run("edges", [&] { return strings(mop::run_edges(c.ctx_, input)); });
      })
      .def("defocus_heatmap", [](Context& c, const std::string& input) {
        return c.run("defocus-heatmap", [&] { return strings(mop::run_defocus_heatmap(c.ctx_, input)); });
      });
}
