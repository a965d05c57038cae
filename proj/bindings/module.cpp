#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "decaps/capsnet.hpp"
#include "decaps/cli.hpp"
#include "decaps/data.hpp"
#include "decaps/metrics.hpp"
#include "decaps/training.hpp"

namespace py = pybind11;
using namespace decaps;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
    shape[i] = static_cast<int>(arr.shape(i));
  }
  std::vector<double> values(arr.data(), arr.data() + arr.size());
  return Tensor::from_data(std::move(shape), std::move(values));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_decaps, m) {
  m.doc() = "Capsule-head network with inverted dynamic routing: core operations";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  m.def(
      "squash",
      [](const py::array_t<double>& v) { return array_from_tensor(squash(tensor_from_array(v))); },
      py::arg("v"), "Squash nonlinearity over the last axis");

  m.def(
      "softmax",
      [](const py::array_t<double>& v, int axis) {
        return array_from_tensor(softmax(tensor_from_array(v), axis));
      },
      py::arg("v"), py::arg("axis"));

  m.def(
      "idr_route",
      [](const py::array_t<double>& votes, int n_iter) {
        const Tensor v = tensor_from_array(votes);
        if (v.rank() != 5) throw ShapeError("idr_route: votes must be [I,J,h,w,d]");
        const int I = v.dim(0), J = v.dim(1), h = v.dim(2), w = v.dim(3), d = v.dim(4);
        Tensor flat = reshape(v, {I * J, h, w, d});
        std::vector<std::vector<Tensor>> grid(I);
        for (int i = 0; i < I; ++i) {
          for (int j = 0; j < J; ++j) {
            grid[i].push_back(reshape(narrow0(flat, i * J + j, 1), {h, w, d}));
          }
        }
        RoutingResult r = idr_route(grid, n_iter);
        py::dict out;
        out["poses"] = array_from_tensor(r.parent_poses);
        out["routing"] = array_from_tensor(r.routing_maps);
        out["weighted_votes"] = array_from_tensor(r.weighted_votes);
        out["hams"] = array_from_tensor(r.hams);
        out["scores"] = array_from_tensor(r.class_scores);
        return out;
      },
      py::arg("votes"), py::arg("n_iter") = 3,
      "Inverted dynamic routing over votes [I,J,h,w,d]");

  m.def(
      "margin_loss",
      [](const py::array_t<double>& scores, const std::vector<int>& labels,
         double m_plus, double m_minus, double lambda) {
        return margin_loss(tensor_from_array(scores), labels, m_plus, m_minus, lambda)
            .scalar();
      },
      py::arg("scores"), py::arg("labels"), py::arg("m_plus") = 0.9,
      py::arg("m_minus") = 0.1, py::arg("lambda") = 0.5);

  m.def(
      "normalize_ham",
      [](const py::array_t<double>& ham) {
        return array_from_tensor(normalize_ham(tensor_from_array(ham)));
      },
      py::arg("ham"));

  m.def(
      "crop_bbox",
      [](const py::array_t<double>& norm_ham, double theta_c) {
        CropMask cm = crop_mask_and_bbox(tensor_from_array(norm_ham), theta_c);
        return py::make_tuple(cm.box.r0, cm.box.c0, cm.box.r1, cm.box.c1);
      },
      py::arg("norm_ham"), py::arg("theta_c") = 0.5,
      "Smallest box covering the thresholded map (feature coordinates)");

  m.def(
      "iou",
      [](const std::vector<int>& a, const std::vector<int>& b) {
        if (a.size() != 4 || b.size() != 4) throw ShapeError("iou: boxes are [r0,c0,r1,c1]");
        return iou(Box{a[0], a[1], a[2], a[3]}, Box{b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"));

  m.def("roc_auc", &roc_auc, py::arg("scores"), py::arg("labels"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) { return cli::run(args); },
      py::arg("args"), "Run a decaps CLI command; returns the exit code");

  m.attr("__version__") = "0.1.0";
}
