#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "hovertrans/cli.hpp"
#include "hovertrans/data.hpp"
#include "hovertrans/error.hpp"
#include "hovertrans/interpret.hpp"
#include "hovertrans/metrics.hpp"
#include "hovertrans/model.hpp"
#include "hovertrans/synthetic.hpp"
#include "hovertrans/train.hpp"

namespace py = pybind11;
using namespace hovertrans;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const U8Array& a) {
  if (a.ndim() != 2 && !(a.ndim() == 3 && (a.shape(2) == 1 || a.shape(2) == 3))) {
    throw ValidationError("expected an (H, W) or (H, W, 1|3) uint8 array");
  }
  Image img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
            a.ndim() == 2 ? 1 : static_cast<std::size_t>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

py::array to_array(const Image& img) {
  std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width)};
  if (img.channels != 1) shape.push_back(static_cast<py::ssize_t>(img.channels));
  py::array_t<std::uint8_t> out(shape);
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

class PyModel {
 public:
  PyModel(const ModelConfig& config, std::uint64_t seed) : net_(build_model(config, seed)) {}
  explicit PyModel(HoverTransNet net) : net_(std::move(net)) {}

  static PyModel load(const std::string& path) { return PyModel(load_checkpoint(path).model); }
  void save(const std::string& path) { save_checkpoint(path, net_); }
  const ModelConfig& config() const { return net_.config; }
  std::size_t parameter_count() { return net_.parameter_count(); }

  std::vector<double> predict(const std::vector<U8Array>& images) {
    std::vector<ImageRecord> records;
    for (const auto& a : images) {
      ImageRecord r;
      r.image = to_image(a);
      records.push_back(std::move(r));
    }
    py::gil_scoped_release release;
    return predict_malignant(net_, records);
  }

  py::array heatmap_values(const U8Array& image, const std::string& method) {
    const Heatmap h = heatmap(net_, to_grayscale(to_image(image)), parse_method(method));
    py::array_t<double> out({static_cast<py::ssize_t>(h.height), static_cast<py::ssize_t>(h.width)});
    std::copy(h.values.begin(), h.values.end(), out.mutable_data());
    return out;
  }

  // Logits for a float batch (B, side, side, 3) already in model scale.
  py::array logits(py::array_t<double, py::array::c_style | py::array::forcecast> batch) {
    Tensor::Shape shape;
    for (py::ssize_t i = 0; i < batch.ndim(); ++i) shape.push_back(static_cast<std::size_t>(batch.shape(i)));
    Tensor x(shape, std::vector<double>(batch.data(), batch.data() + batch.size()));
    NoGradGuard no_grad;
    const ForwardResult r = forward(net_, Var::constant(std::move(x)), false);
    py::array_t<double> out({static_cast<py::ssize_t>(r.logits.dim(0)), static_cast<py::ssize_t>(r.logits.dim(1))});
    std::copy(r.logits.value().data(), r.logits.value().data() + r.logits.value().size(), out.mutable_data());
    return out;
  }

 private:
  HoverTransNet net_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hybrid CNN-transformer breast ultrasound classifier";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", PyExc_ValueError);
  py::register_exception<IngestionError>(m, "IngestionError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("tiny", &ModelConfig::tiny)
      .def_readwrite("input_side", &ModelConfig::input_side)
      .def_readwrite("patch", &ModelConfig::patch)
      .def_readwrite("strip", &ModelConfig::strip)
      .def_readwrite("stage_channels", &ModelConfig::stage_channels)
      .def_readwrite("stage_depths", &ModelConfig::stage_depths)
      .def_readwrite("stage_heads", &ModelConfig::stage_heads)
      .def_readwrite("positional", &ModelConfig::positional)
      .def_readwrite("final_pool", &ModelConfig::final_pool)
      .def_property(
          "variant", [](const ModelConfig& c) { return variant_name(c.variant); },
          [](ModelConfig& c, const std::string& v) { c.variant = parse_variant(v); })
      .def("validate", &ModelConfig::validate)
      .def("stage_side", &ModelConfig::stage_side);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &PyModel::load)
      .def("save", &PyModel::save)
      .def_property_readonly("config", &PyModel::config)
      .def("parameter_count", &PyModel::parameter_count)
      .def("predict", &PyModel::predict, "Malignant probability per uint8 image")
      .def("heatmap", &PyModel::heatmap_values, py::arg("image"), py::arg("method") = "activation")
      .def("logits", &PyModel::logits);

  m.def("roc_auc", [](const std::vector<double>& s, const std::vector<int>& l) { return roc_auc(s, l); });
  m.def(
      "confusion_metrics",
      [](const std::vector<double>& s, const std::vector<int>& l, double t) {
        const ConfusionMetrics c = confusion_metrics(s, l, t);
        return py::dict(py::arg("tp") = c.tp, py::arg("fp") = c.fp, py::arg("tn") = c.tn, py::arg("fn") = c.fn,
                        py::arg("accuracy") = c.accuracy, py::arg("specificity") = c.specificity,
                        py::arg("precision") = c.precision, py::arg("recall") = c.recall, py::arg("f1") = c.f1);
      },
      py::arg("scores"), py::arg("labels"), py::arg("threshold") = kDefaultThreshold);
  m.def("delong_test", [](const std::vector<double>& a, const std::vector<double>& b, const std::vector<int>& l) {
    const DeLongResult r = delong_test(a, b, l);
    return py::dict(py::arg("auc_a") = r.auc_a, py::arg("auc_b") = r.auc_b, py::arg("z") = r.z,
                    py::arg("p_value") = r.p_value);
  });
  m.def(
      "lr_at",
      [](std::size_t step, std::size_t steps_per_epoch, std::size_t epochs, std::size_t warmup_epochs,
         double base_lr) {
        TrainConfig c;
        c.epochs = epochs;
        c.warmup_epochs = warmup_epochs;
        c.base_lr = base_lr;
        return lr_at(step, steps_per_epoch, c);
      },
      py::arg("step"), py::arg("steps_per_epoch"), py::arg("epochs") = 250, py::arg("warmup_epochs") = 10,
      py::arg("base_lr") = 1e-4);
  m.def(
      "extract_foreground",
      [](const U8Array& image) {
        const ForegroundResult r = extract_foreground(to_image(image));
        return py::make_tuple(to_array(r.image), py::make_tuple(r.box.top, r.box.left, r.box.height, r.box.width),
                              r.confidence, r.fallback);
      },
      "Returns (image, (top, left, height, width), confidence, fallback)");
  m.def("resize_image", [](const U8Array& image, std::size_t side) { return to_array(resize_image(to_image(image), side)); });
  m.def(
      "make_layered_dataset",
      [](std::size_t count, std::size_t side, std::uint64_t seed) {
        SyntheticConfig c;
        c.count = count;
        c.side = side;
        c.seed = seed;
        py::list out;
        for (const auto& r : make_layered_dataset(c)) out.append(py::make_tuple(r.image_id, to_array(r.image), r.label));
        return out;
      },
      py::arg("count") = 64, py::arg("side") = 32, py::arg("seed") = 0, "List of (image_id, image, label)");
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"hovertrans"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      "Runs the command line tool in process; returns (exit_code, stdout, stderr)");
}
