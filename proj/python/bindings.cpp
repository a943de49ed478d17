#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "aat/env.hpp"
#include "aat/errors.hpp"
#include "aat/trajectory.hpp"
#include "aat/value.hpp"
#include "aat/verify.hpp"
#include "aat/workspace.hpp"

namespace py = pybind11;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

aat::Config make_config(const std::optional<std::string>& path, const std::map<std::string, std::string>& overrides) {
  aat::Config cfg = path ? aat::Config::from_file(*path) : aat::Config();
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "C++ core: numerics, environments and the stage commands";

  auto base = py::register_exception<aat::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<aat::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<aat::DependencyError>(m, "DependencyError", base.ptr());
  py::register_exception<aat::DataError>(m, "DataError", base.ptr());
  py::register_exception<aat::DomainError>(m, "DomainError", base.ptr());
  py::register_exception<aat::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<aat::CapabilityError>(m, "CapabilityError", base.ptr());

  py::class_<aat::Config>(m, "Config")
      .def(py::init(&make_config), py::arg("path") = py::none(),
           py::arg("overrides") = std::map<std::string, std::string>{})
      .def("set", py::overload_cast<const std::string&, const std::string&>(&aat::Config::set))
      .def("__getitem__", &aat::Config::str)
      .def("__contains__", &aat::Config::has)
      .def("to_text", &aat::Config::to_text)
      .def("to_dict", [](const aat::Config& c) { return c.values(); })
      .def("hash", [](const aat::Config& c) { return aat::workspace::config_hash(c); });

  m.def("weighted_advantage", &aat::value::weighted_advantage, py::arg("advantage"), py::arg("lam"));
  m.def("weighted_advantage",
        [](const Eigen::ArrayXd& a, double lam) {
          return a.unaryExpr([lam](double x) { return aat::value::weighted_advantage(x, lam); }).eval();
        },
        py::arg("advantage"), py::arg("lam"));
  m.def("expectile_loss", py::overload_cast<double, double>(&aat::value::expectile_loss), py::arg("nu"),
        py::arg("sigma"));
  m.def("expectile", &aat::value::expectile, py::arg("samples"), py::arg("sigma"));
  m.def("returns_to_go", &aat::data::returns_to_go_all, py::arg("rewards"));

  m.def("patchify",
        [](const Eigen::RowVectorXd& image, int height, int width, int channels, int patch_side) {
          return aat::data::patchify(image, {height, width, channels}, patch_side).patches;
        },
        py::arg("image"), py::arg("height"), py::arg("width"), py::arg("channels"), py::arg("patch_side"));
  m.def("unpatchify",
        [](const aat::ad::Matrix& patches, int height, int width, int channels, int patch_side) {
          aat::data::PatchGrid g;
          g.patch_side = patch_side;
          g.channels = channels;
          g.height = height;
          g.width = width;
          g.patches = patches;
          return aat::data::unpatchify(g);
        },
        py::arg("patches"), py::arg("height"), py::arg("width"), py::arg("channels"), py::arg("patch_side"));

  py::class_<aat::env::GridPixels>(m, "GridPixels")
      .def(py::init<>())
      .def_property_readonly("num_actions", &aat::env::GridPixels::num_actions)
      .def_property_readonly("horizon", &aat::env::GridPixels::horizon)
      .def("reset", &aat::env::GridPixels::reset, py::arg("seed"))
      .def("step",
           [](aat::env::GridPixels& g, int action) {
             auto r = g.step(action);
             return py::make_tuple(r.observation, r.reward, r.done);
           },
           py::arg("action"))
      .def("oracle_return", [](const aat::env::GridPixels& g, std::uint64_t seed) {
        return g.oracle_return(g.start_cell(seed));
      });

  m.def("run_suite",
        [](const std::string& name, std::uint64_t seed) {
          py::gil_scoped_release release;
          auto results = aat::verify::run_suite(name, seed);
          py::gil_scoped_acquire acquire;
          return to_py(aat::verify::report_to_json(results, seed));
        },
        py::arg("name"), py::arg("seed") = 0);

  namespace ws = aat::workspace;
  auto stage = [&m](const char* name, void (*fn)(const aat::Config&, const std::string&)) {
    m.def(
        name,
        [fn](const aat::Config& cfg, const std::string& root) {
          py::gil_scoped_release release;
          fn(cfg, root);
        },
        py::arg("config"), py::arg("out"));
  };
  stage("collect", &ws::collect);
  stage("train_values", &ws::train_values);
  stage("train_predictor", &ws::train_predictor);
  stage("train_generator", &ws::train_generator);
  m.def(
      "attack",
      [](const aat::Config& cfg, const std::string& root) {
        aat::attack::AttackReport r;
        {
          py::gil_scoped_release release;
          r = ws::attack(cfg, root);
        }
        return to_py(aat::attack::report_to_json(r));
      },
      py::arg("config"), py::arg("out"));
  m.def(
      "ablate",
      [](const aat::Config& cfg, const std::string& root, const std::string& axis,
         const std::vector<std::string>& values) {
        aat::pipeline::AblationTable t;
        {
          py::gil_scoped_release release;
          t = ws::ablate(cfg, root, axis, values);
        }
        return to_py(ws::ablation_to_json(t));
      },
      py::arg("config"), py::arg("out"), py::arg("axis"), py::arg("values") = std::vector<std::string>{});
}
