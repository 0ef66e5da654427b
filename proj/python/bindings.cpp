// Python extension: array-in, array-out wrappers over the C++ library.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "ebmlab/data.hpp"
#include "ebmlab/error.hpp"
#include "ebmlab/eval.hpp"
#include "ebmlab/lab.hpp"
#include "ebmlab/model.hpp"
#include "ebmlab/rng.hpp"

namespace py = pybind11;
using namespace ebmlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Tensor from_array(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor::matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::tuple labeled(const data::LabeledTable& t) {
  return py::make_tuple(to_array(t.features), py::array_t<int>(t.labels.size(), t.labels.data()));
}

Rng data_rng(std::uint64_t seed) { return make_stream(seed, Stream::kData); }

}  // namespace

PYBIND11_MODULE(_ebmlab, m) {
  m.doc() = "Energy-based models for out-of-distribution detection";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "average_precision",
      [](const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
        return eval::average_precision(id_scores, ood_scores);
      },
      py::arg("id_scores"), py::arg("ood_scores"), "AUC-PR with ID scores as positives.");

  m.def(
      "make_two_moons",
      [](std::size_t n, double noise, std::uint64_t seed) {
        Rng rng = data_rng(seed);
        return labeled(data::make_two_moons(n, noise, rng));
      },
      py::arg("n"), py::arg("noise") = 0.1, py::arg("seed") = 0);
  m.def(
      "make_blobs",
      [](std::size_t n, std::size_t dim, std::size_t classes, double spread, std::uint64_t seed) {
        Rng rng = data_rng(seed);
        return labeled(data::make_blobs(n, dim, classes, spread, rng));
      },
      py::arg("n"), py::arg("dim"), py::arg("classes"), py::arg("spread") = 3.0, py::arg("seed") = 0);
  m.def(
      "make_noise",
      [](std::size_t n, std::size_t dim, std::uint64_t seed) {
        Rng rng = data_rng(seed);
        return to_array(data::make_noise(n, dim, rng));
      },
      py::arg("n"), py::arg("dim"), py::arg("seed") = 0);
  m.def(
      "make_constant",
      [](std::size_t n, std::size_t dim, std::uint64_t seed) {
        Rng rng = data_rng(seed);
        return to_array(data::make_constant(n, dim, rng));
      },
      py::arg("n"), py::arg("dim"), py::arg("seed") = 0);
  m.def(
      "make_oodomain", [](const Array& x) { return to_array(data::make_oodomain(from_array(x))); },
      py::arg("standardized"));
  m.def(
      "make_smoothness",
      [](std::size_t n, std::size_t side, std::size_t pool, std::uint64_t seed) {
        Rng rng = data_rng(seed);
        return to_array(data::make_smoothness(n, side, pool, rng));
      },
      py::arg("n"), py::arg("side"), py::arg("pool"), py::arg("seed") = 0);

  m.def(
      "train",
      [](const std::string& config_json) {
        lab::TrainResult r;
        {
          py::gil_scoped_release release;
          r = lab::train(lab::config_from_json(nlohmann::json::parse(config_json)));
        }
        nlohmann::json out = {{"report", eval::to_json(r.report)},
                              {"checkpoint", models::to_json(r.checkpoint)},
                              {"losses", r.losses},
                              {"steps_run", r.steps_run},
                              {"diverged", r.diverged},
                              {"diagnostic", r.diagnostic}};
        return out.dump();
      },
      py::arg("config_json"), "Trains one run from a JSON config; returns a JSON document.");

  m.def(
      "score",
      [](const std::string& checkpoint_json, const Array& features) {
        const auto ckpt = models::checkpoint_from_json(nlohmann::json::parse(checkpoint_json));
        const auto s = eval::score_dataset(ckpt.model(), from_array(features));
        return py::array_t<double>(s.scores.size(), s.scores.data());
      },
      py::arg("checkpoint_json"), py::arg("features"), "log p~ per row (higher = more in-distribution).");
}
