#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "adv2/attacks.hpp"
#include "adv2/defenses.hpp"
#include "adv2/metrics.hpp"

namespace py = pybind11;
using namespace adv2;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor(shape, std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (int d : t.shape()) shape.push_back(d);
    py::array_t<double> a(shape);
    std::copy(t.data(), t.data() + t.size(), a.mutable_data());
    return a;
}

nn::Image to_image(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    return nn::Image{to_tensor(a), {}};
}

py::dict outcome_dict(const attack::AttackOutcome& o) {
    py::dict d;
    d["x"] = to_array(o.x_star.pixels);
    d["success"] = o.success;
    d["predicted"] = o.predicted;
    d["confidence"] = o.confidence;
    d["linf"] = o.linf;
    return d;
}

attack::AttackConfig config_from_kwargs(const py::dict& kw) {
    attack::AttackConfig c;
    if (kw.contains("epsilon")) c.epsilon = kw["epsilon"].cast<double>();
    if (kw.contains("alpha")) c.alpha = kw["alpha"].cast<double>();
    if (kw.contains("lambda_int")) c.lambda_int = kw["lambda_int"].cast<double>();
    if (kw.contains("n_total")) c.n_total = kw["n_total"].cast<int>();
    if (kw.contains("n_warm")) c.n_warm = kw["n_warm"].cast<int>();
    if (kw.contains("label_smoothing")) c.label_smoothing = kw["label_smoothing"].cast<bool>();
    if (kw.contains("seed")) c.seed = kw["seed"].cast<std::uint64_t>();
    if (kw.contains("interpreter"))
        c.interpreter = interp::interpreter_from_string(kw["interpreter"].cast<std::string>());
    return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "dual prediction/interpretation attack laboratory";

    py::class_<nn::Classifier>(m, "Classifier")
        .def("predict_proba",
             [](const nn::Classifier& f, const py::array_t<double>& x) {
                 return to_array(nn::predict_proba(f, to_image(x)));
             })
        .def("predict",
             [](const nn::Classifier& f, const py::array_t<double>& x) {
                 return nn::predict_class(f, to_image(x));
             })
        .def("num_classes", &nn::Classifier::num_classes)
        .def("param_hash", &nn::Classifier::param_hash)
        .def("save", &nn::Classifier::save)
        .def_static("load", &nn::Classifier::load);

    py::class_<interp::RtsMasker>(m, "RtsMasker")
        .def("save", &interp::RtsMasker::save)
        .def_static("load", &interp::RtsMasker::load);

    m.def("make_dataset",
          [](const std::string& kind, int n, std::uint64_t seed, double amplitude) {
              data::SynthConfig cfg;
              cfg.kind = kind;
              cfg.signal_amplitude = amplitude;
              data::Dataset ds = data::make_synthetic(cfg, n, seed);
              py::list images;
              py::list labels;
              for (const auto& im : ds.images) {
                  images.append(to_array(im.pixels));
                  labels.append(im.label.value_or(-1));
              }
              return py::make_tuple(images, labels);
          },
          py::arg("kind") = "gray28", py::arg("n") = 200, py::arg("seed") = 1,
          py::arg("amplitude") = 0.16);

    m.def("train_classifier",
          [](const py::list& images, const py::list& labels, const std::string& arch, int epochs,
             std::uint64_t seed, double lr) {
              std::vector<nn::Image> train;
              for (std::size_t i = 0; i < images.size(); ++i) {
                  nn::Image im = to_image(images[i].cast<py::array_t<double>>());
                  im.label = labels[i].cast<int>();
                  train.push_back(std::move(im));
              }
              nn::TrainConfig cfg;
              cfg.epochs = epochs;
              cfg.seed = seed;
              cfg.lr = lr;
              return nn::train_classifier(train, nn::arch_preset(arch), cfg);
          },
          py::arg("images"), py::arg("labels"), py::arg("arch") = "cnn_gray28",
          py::arg("epochs") = 10, py::arg("seed") = 1, py::arg("lr") = 2e-3);

    m.def("train_rts",
          [](const nn::Classifier& f, const py::list& images, const py::list& labels, int epochs,
             std::uint64_t seed) {
              std::vector<nn::Image> train;
              for (std::size_t i = 0; i < images.size(); ++i) {
                  nn::Image im = to_image(images[i].cast<py::array_t<double>>());
                  im.label = labels[i].cast<int>();
                  train.push_back(std::move(im));
              }
              interp::RtsTrainConfig cfg;
              cfg.epochs = epochs;
              cfg.seed = seed;
              return interp::rts_train_masker(f, train, cfg);
          },
          py::arg("classifier"), py::arg("images"), py::arg("labels"), py::arg("epochs") = 2,
          py::arg("seed") = 1);

    m.def("saliency",
          [](const nn::Classifier& f, const py::array_t<double>& x, const std::string& interpreter,
             int cls, const interp::RtsMasker* masker) {
              nn::Image im = to_image(x);
              int c = cls >= 0 ? cls : nn::predict_class(f, im);
              interp::MaskSolverConfig mc;
              mc.iterations = 60;
              auto map = interp::compute_map(f, im, interp::interpreter_from_string(interpreter), c,
                                             masker, &mc);
              return to_array(map.values);
          },
          py::arg("classifier"), py::arg("x"), py::arg("interpreter") = "grad", py::arg("cls") = -1,
          py::arg("masker") = nullptr);

    m.def("h_smooth", &nn::h_smooth, py::arg("z"), py::arg("tau") = 1e-4);

    m.def("pgd",
          [](const nn::Classifier& f, const py::array_t<double>& x, int target, const py::dict& kw) {
              attack::AttackConfig c = config_from_kwargs(kw);
              return outcome_dict(attack::pgd_attack(f, to_image(x), target, c));
          },
          py::arg("classifier"), py::arg("x"), py::arg("target"), py::arg("config") = py::dict());

    m.def("adv2",
          [](const nn::Classifier& f, const py::array_t<double>& x, int target,
             const py::array_t<double>& target_map, const py::dict& kw,
             const interp::RtsMasker* masker) {
              attack::AttackConfig c = config_from_kwargs(kw);
              nn::Image im = to_image(x);
              Tensor mt = to_tensor(target_map);
              if (c.interpreter == interp::InterpreterId::mask) {
                  attack::MaskAttackConfig mc;
                  mc.base = c;
                  if (kw.contains("n_step")) mc.n_step = kw["n_step"].cast<int>();
                  if (kw.contains("n_reset")) mc.n_reset = kw["n_reset"].cast<int>();
                  mc.solver.iterations = kw.contains("solver_iterations")
                                             ? kw["solver_iterations"].cast<int>()
                                             : 60;
                  return outcome_dict(attack::adv2_mask_attack(f, im, target, mt, mc));
              }
              return outcome_dict(attack::adv2_pgd(f, im, target, mt, c, masker));
          },
          py::arg("classifier"), py::arg("x"), py::arg("target"), py::arg("target_map"),
          py::arg("config") = py::dict(), py::arg("masker") = nullptr);

    m.def("lp_distance",
          [](const py::array_t<double>& a, const py::array_t<double>& b, int p) {
              return metrics::lp_distance(to_tensor(a), to_tensor(b), p);
          },
          py::arg("a"), py::arg("b"), py::arg("p") = 1);

    m.def("iou_score",
          [](const py::array_t<double>& a, const py::array_t<double>& b, double q) {
              return metrics::iou_score(to_tensor(a), to_tensor(b), q);
          },
          py::arg("a"), py::arg("b"), py::arg("q") = 0.2);

    m.def("squeeze",
          [](const py::array_t<double>& x, const std::string& kind, int bits) {
              defense::Squeezer s;
              if (kind == "bit_depth") {
                  s.kind = defense::SqueezerKind::bit_depth;
                  s.bits = bits;
              } else if (kind == "median") {
                  s.kind = defense::SqueezerKind::local_smooth;
              } else if (kind == "nlm") {
                  s.kind = defense::SqueezerKind::nonlocal_smooth;
              } else {
                  throw std::invalid_argument("unknown squeezer kind: " + kind);
              }
              return to_array(defense::squeeze(to_tensor(x), s));
          },
          py::arg("x"), py::arg("kind") = "bit_depth", py::arg("bits") = 2);
}
