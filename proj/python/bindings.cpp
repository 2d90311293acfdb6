// Python bindings. Matrices cross the boundary as float64 numpy arrays;
// checkpoints and patches are wrapped as opaque objects.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "json.hpp"
#include "model_tailor/checkpoint.hpp"
#include "model_tailor/error.hpp"
#include "model_tailor/hessian.hpp"
#include "model_tailor/metrics.hpp"
#include "model_tailor/multitask.hpp"
#include "model_tailor/scenario.hpp"
#include "model_tailor/tailor.hpp"
#include "model_tailor/toymodel.hpp"

namespace py = pybind11;
namespace mt = model_tailor;
using mt::linalg::Matrix;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw mt::Error(mt::ErrorCode::Shape, "expected a 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

std::vector<double> to_vector(const Array& a) {
  if (a.ndim() != 1) throw mt::Error(mt::ErrorCode::Shape, "expected a 1-d array");
  return {a.data(), a.data() + a.shape(0)};
}

Array from_matrix(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::memcpy(out.mutable_data(), m.data().data(), m.size() * sizeof(double));
  return out;
}

Array from_tensor(const mt::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  Array out(shape);
  if (!t.data.empty()) std::memcpy(out.mutable_data(), t.data.data(), t.data.size() * sizeof(double));
  return out;
}

py::array_t<std::uint8_t> mask_array(const mt::LayerPatch& p) {
  py::array_t<std::uint8_t> out({p.rows, p.cols});
  std::memcpy(out.mutable_data(), p.mask.data(), p.mask.size());
  return out;
}

mt::LayerPatch patch_from(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask,
                          const Matrix* decorator) {
  if (mask.ndim() != 2) throw mt::Error(mt::ErrorCode::Shape, "mask must be 2-d");
  mt::LayerPatch p;
  p.layer = "layer";
  p.rows = static_cast<std::size_t>(mask.shape(0));
  p.cols = static_cast<std::size_t>(mask.shape(1));
  p.mask.assign(mask.data(), mask.data() + p.rows * p.cols);
  for (auto& v : p.mask) v = v != 0;
  p.decorator = decorator != nullptr ? *decorator : Matrix(p.rows, p.cols);
  return p;
}

py::bytes to_bytes(const std::vector<std::uint8_t>& b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

mt::DType parse_dtype(const std::string& s) {
  if (s == "f64" || s == "float64") return mt::DType::F64;
  if (s == "f32" || s == "float32") return mt::DType::F32;
  throw mt::Error(mt::ErrorCode::InvalidArgument, "dtype must be f32 or f64");
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse, Hessian-compensated fusion of fine-tuned weights into a pre-trained checkpoint";

  // module keeps the reference alive
  static PyObject* error_type = py::exception<mt::Error>(m, "ModelTailorError").ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const mt::Error& e) {
      // args = (code, message)
      py::tuple args = py::make_tuple(std::string(mt::error_code_name(e.code())), std::string(e.what()));
      PyErr_SetObject(error_type, args.ptr());
    }
  });

  // linear algebra ---------------------------------------------------------

  m.def("cholesky", [](const Array& h) { return from_matrix(mt::linalg::cholesky(to_matrix(h))); }, py::arg("h"));
  m.def("sym_inverse", [](const Array& h) { return from_matrix(mt::linalg::sym_inverse(to_matrix(h))); },
        py::arg("h"));
  m.def("obs_downdate", [](const Array& hinv, std::size_t i) {
    return from_matrix(mt::linalg::obs_downdate(to_matrix(hinv), i));
  }, py::arg("hinv"), py::arg("m"));

  m.def("build_hessian", [](const Array& x, double damp_frac) {
    const auto s = mt::build_hessian({"layer", to_matrix(x)}, damp_frac);
    py::dict d;
    d["h"] = from_matrix(s.h);
    d["hinv"] = from_matrix(s.hinv);
    d["damping"] = s.damping;
    return d;
  }, py::arg("x"), py::arg("damp_frac") = mt::kDefaultDampFrac,
        "H = (2/N) X X^T + lambda I for a d x N input matrix; returns h, hinv and damping.");

  // scoring and fusion ----------------------------------------------------

  m.def("retained_budget", &mt::retained_budget, py::arg("rho"), py::arg("n"));
  m.def("salience", [](const Array& s, const Array& p) { return from_matrix(mt::salience(to_matrix(s), to_matrix(p))); },
        py::arg("w_sft"), py::arg("w_pre"));
  m.def("sensitivity", [](const Array& s, const Array& p, const Array& diag) {
    return from_matrix(mt::sensitivity(to_matrix(s), to_matrix(p), to_vector(diag)));
  }, py::arg("w_sft"), py::arg("w_pre"), py::arg("hinv_diag"));
  m.def("fuse_scores", [](const Array& sd, const Array& se, double omega) {
    return from_matrix(mt::fuse_scores(to_matrix(sd), to_matrix(se), omega).s_fused);
  }, py::arg("s_delta"), py::arg("s_eps"), py::arg("omega"));
  m.def("select_mask", [](const Array& fused, double rho) {
    mt::LayerScores s;
    s.s_fused = to_matrix(fused);
    const auto p = mt::select_mask(s, rho);
    return py::make_tuple(mask_array(p), p.threshold);
  }, py::arg("scores"), py::arg("rho"), "Returns (mask, threshold).");
  m.def("decorate",
        [](const Array& w_sft, const Array& w_pre,
           const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask, const Array& h,
           const std::string& mode, std::optional<Array> priority) {
          const Matrix s = to_matrix(w_sft);
          const Matrix p = to_matrix(w_pre);
          std::optional<Matrix> prio;
          if (priority) prio = to_matrix(*priority);
          const auto hs = mt::hessian_from_matrix("layer", to_matrix(h));
          const auto out = mt::decorate(s, p, patch_from(mask, nullptr), hs, mt::parse_mode(mode),
                                        prio ? &*prio : nullptr);
          return from_matrix(out.decorator);
        },
        py::arg("w_sft"), py::arg("w_pre"), py::arg("mask"), py::arg("h"), py::arg("mode") = "obs",
        py::arg("priority") = py::none(), "Decorator C for a layer, given its Hessian H.");
  m.def("fuse_layer",
        [](const Array& w_sft, const Array& w_pre,
           const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& mask, const Array& c) {
          const Matrix dec = to_matrix(c);
          return from_matrix(mt::fuse_layer(to_matrix(w_sft), to_matrix(w_pre), patch_from(mask, &dec)));
        },
        py::arg("w_sft"), py::arg("w_pre"), py::arg("mask"), py::arg("decorator"));

  // containers ------------------------------------------------------------

  py::class_<mt::Checkpoint>(m, "Checkpoint")
      .def(py::init<>())
      .def_static("load", &mt::load_checkpoint, py::arg("path"))
      .def_static("from_bytes", [](const py::bytes& b) { return mt::deserialize(from_bytes(b)); })
      .def("save", [](const mt::Checkpoint& c, const std::filesystem::path& p) { mt::save_checkpoint(c, p); })
      .def("to_bytes", [](const mt::Checkpoint& c) { return to_bytes(mt::serialize(c)); })
      .def("digest", [](const mt::Checkpoint& c) { return mt::digest(c); })
      .def("names", [](const mt::Checkpoint& c) {
        std::vector<std::string> out;
        for (const auto& [k, _] : c.tensors) out.push_back(k);
        return out;
      })
      .def("__contains__", [](const mt::Checkpoint& c, const std::string& k) { return c.contains(k); })
      .def("__len__", [](const mt::Checkpoint& c) { return c.tensors.size(); })
      .def("__getitem__", [](const mt::Checkpoint& c, const std::string& k) { return from_tensor(c.at(k)); })
      .def("dtype", [](const mt::Checkpoint& c, const std::string& k) { return mt::dtype_name(c.at(k).dtype); })
      .def("set", [](mt::Checkpoint& c, const std::string& name, const Array& a, const std::string& dtype) {
        mt::Tensor t;
        t.dtype = parse_dtype(dtype);
        for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape.push_back(static_cast<std::uint64_t>(a.shape(i)));
        t.data.assign(a.data(), a.data() + a.size());
        if (t.dtype == mt::DType::F32) {
          for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
        }
        c.tensors[name] = std::move(t);
      }, py::arg("name"), py::arg("array"), py::arg("dtype") = "f64")
      .def_readwrite("metadata", &mt::Checkpoint::metadata)
      .def("__eq__", [](const mt::Checkpoint& a, const mt::Checkpoint& b) { return mt::bit_equal(a, b); });

  py::class_<mt::TaskPatch>(m, "TaskPatch")
      .def_static("load", &mt::load_task_patch, py::arg("path"))
      .def("save", [](const mt::TaskPatch& p, const std::filesystem::path& path) { mt::save_task_patch(p, path); })
      .def("to_checkpoint", &mt::patch_to_checkpoint)
      .def_readonly("task_id", &mt::TaskPatch::task_id)
      .def_readonly("pre_digest", &mt::TaskPatch::pre_digest)
      .def_property_readonly("config", [](const mt::TaskPatch& p) {
        py::dict d;
        d["rho"] = p.config.rho;
        d["omega"] = p.config.omega;
        d["damp_frac"] = p.config.damp_frac;
        d["mode"] = p.config.mode;
        d["decorated"] = p.config.decorated;
        return d;
      })
      .def_property_readonly("layers", [](const mt::TaskPatch& p) {
        py::dict out;
        for (const auto& [name, l] : p.layers) {
          py::dict d;
          d["shape"] = py::make_tuple(l.rows, l.cols);
          d["indices"] = l.indices;
          d["decorator"] = l.decorator;
          d["finetuned"] = l.finetuned;
          d["threshold"] = l.threshold;
          out[py::str(name)] = d;
        }
        return out;
      })
      .def("__eq__", [](const mt::TaskPatch& a, const mt::TaskPatch& b) { return mt::bit_equal(a, b); });

  // pipeline --------------------------------------------------------------

  m.def("tailor",
        [](const mt::Checkpoint& pre, const mt::Checkpoint& sft, const mt::Checkpoint& calib, double rho,
           double omega, double damp_frac, const std::string& mode, bool decorate, const std::string& task_id,
           std::size_t workers) {
          mt::FusionConfig cfg;
          cfg.rho = rho;
          cfg.omega = omega;
          cfg.damp_frac = damp_frac;
          cfg.mode = mt::parse_mode(mode);
          cfg.decorate = decorate;
          cfg.workers = workers;
          py::gil_scoped_release release;
          auto r = mt::tailor_model(pre, sft, mt::calibration_from_checkpoint(calib), cfg, task_id);
          return std::make_pair(std::move(r.fused), std::move(r.patch));
        },
        py::arg("pre"), py::arg("sft"), py::arg("calib"), py::arg("rho") = 0.1, py::arg("omega") = 0.5,
        py::arg("damp_frac") = mt::kDefaultDampFrac, py::arg("mode") = "obs", py::arg("decorate") = true,
        py::arg("task_id") = "", py::arg("workers") = 1, "Returns (fused checkpoint, task patch).");
  m.def("apply_patch", &mt::apply_patch, py::arg("patch"), py::arg("pre"));
  m.def("stitch",
        [](const std::vector<mt::TaskPatch>& patches, const mt::Checkpoint& pre, const std::string& averaging) {
          return mt::stitch(patches, pre, mt::parse_averaging(averaging));
        },
        py::arg("patches"), py::arg("pre"), py::arg("averaging") = "all");

  // toy model ---------------------------------------------------------------

  m.def("init_mlp", [](const std::vector<std::size_t>& widths, std::uint64_t seed) {
    return mt::toy::init_mlp({widths, seed});
  }, py::arg("widths"), py::arg("seed"));
  m.def("gen_task", [](const std::string& task, std::uint64_t seed, std::size_t n) {
    return mt::toy::dataset_to_checkpoint(mt::toy::gen_task(task, seed, n));
  }, py::arg("task_id"), py::arg("seed"), py::arg("n"), "Dataset as a checkpoint (inputs, targets, split).");
  m.def("train",
        [](const mt::Checkpoint& init, const mt::Checkpoint& data, double lr, std::size_t epochs,
           std::size_t batch, std::uint64_t seed) {
          py::gil_scoped_release release;
          auto r = mt::toy::train(init, mt::toy::dataset_from_checkpoint(data), {lr, epochs, batch, seed});
          return std::make_pair(std::move(r.model), std::move(r.epoch_losses));
        },
        py::arg("init"), py::arg("data"), py::arg("learning_rate") = 0.05, py::arg("epochs") = 100,
        py::arg("batch_size") = 32, py::arg("seed") = 0, "Returns (model, per-epoch training losses).");
  m.def("evaluate", [](const mt::Checkpoint& model, const mt::Checkpoint& data) {
    return mt::toy::evaluate(model, mt::toy::dataset_from_checkpoint(data));
  }, py::arg("model"), py::arg("data"));
  m.def("forward", [](const mt::Checkpoint& model, const Array& x) {
    return from_matrix(mt::toy::forward(model, to_matrix(x)));
  }, py::arg("model"), py::arg("inputs"));
  m.def("capture_activations", [](const mt::Checkpoint& model, const mt::Checkpoint& data, std::size_t n) {
    return mt::calibration_to_checkpoint(mt::toy::capture_activations(model, mt::toy::dataset_from_checkpoint(data), n));
  }, py::arg("model"), py::arg("data"), py::arg("n_calib"));

  // metrics and scenario ----------------------------------------------------

  m.def("avg", [](const std::vector<double>& s) { return mt::metrics::avg(s); }, py::arg("scores"));
  m.def("hscore", [](const std::vector<double>& o, const std::vector<double>& t) { return mt::metrics::hscore(o, t); },
        py::arg("origin_scores"), py::arg("target_scores"));
  m.def("eval_report",
        [](const std::map<std::string, std::map<std::string, double>>& scores, const std::vector<std::string>& origin,
           const std::vector<std::string>& target) {
          std::vector<mt::metrics::EvalReport> reps;
          for (const auto& [model, s] : scores) reps.push_back(mt::metrics::build_report(model, s, origin, target));
          return json_to_py(mt::metrics::comparison_json(reps));
        },
        py::arg("scores"), py::arg("origin"), py::arg("target"),
        "scores maps model name -> task -> score; returns the eval report document.");
  m.def("run_pipeline",
        [](const std::string& config_json, std::size_t workers) {
          const auto cfg = mt::parse_scenario(nlohmann::json::parse(config_json.empty() ? "{}" : config_json));
          std::map<std::string, std::vector<std::uint8_t>> files;
          {
            py::gil_scoped_release release;
            files = mt::run_pipeline(cfg, workers);
          }
          py::dict out;
          for (const auto& [name, b] : files) out[py::str(name)] = to_bytes(b);
          return out;
        },
        py::arg("config_json") = "", py::arg("workers") = 1,
        "Runs train, calibrate, tailor and stitch; returns file name -> bytes.");
}
