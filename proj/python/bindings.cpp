// SPDX-License-Identifier: Apache-2.0
// Python bindings: reefl._core
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "reefl/config.hpp"
#include "reefl/error.hpp"
#include "reefl/experiment.hpp"

namespace py = pybind11;
using namespace reefl;

namespace {

py::dict report_dict(const RoundReport& r) {
  py::dict d;
  d["round"] = r.round;
  d["sampled"] = r.sampled;
  d["evaluated"] = r.evaluated;
  d["exit_accuracy"] = r.exit_accuracy;
  d["mean_accuracy"] = r.mean_accuracy;
  d["client_loss"] = r.client_loss;
  d["train_loss_mean"] = r.train_loss_mean;
  d["bytes_up"] = r.bytes_up;
  d["bytes_down"] = r.bytes_down;
  d["eta"] = r.eta;
  d["lr"] = r.lr;
  return d;
}

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::tuple dataset_arrays(const Dataset& data) {
  if (data.empty()) return py::make_tuple(py::array_t<double>(), py::array_t<int>());
  const Shape& s = data[0].image.shape();
  py::array_t<double> images({static_cast<py::ssize_t>(data.size()), static_cast<py::ssize_t>(s[0]),
                              static_cast<py::ssize_t>(s[1]), static_cast<py::ssize_t>(s[2])});
  py::array_t<int> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(data.size())});
  double* img = images.mutable_data();
  int* lab = labels.mutable_data();
  for (const Example& e : data) {
    img = std::copy(e.image.data().begin(), e.image.data().end(), img);
    *lab++ = e.label;
  }
  return py::make_tuple(images, labels);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ReeFL federated early-exit simulator core";

  static py::exception<Error> reefl_error(m, "ReeflError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = reefl_error;
      py::object inst = err(std::string(e.what()));
      inst.attr("kind") = std::string(to_string(e.kind()));
      PyErr_SetObject(err.ptr(), inst.ptr());
    }
  });

  m.def("config_keys", &config_keys, "Every accepted configuration key.");
  m.def(
      "resolve_config",
      [](const std::string& path, const std::vector<std::string>& overrides) {
        return format_config(parse_config(path, overrides));
      },
      py::arg("path") = "", py::arg("overrides") = std::vector<std::string>{},
      "Validated configuration as key=value text.");
  m.def(
      "run_experiment",
      [](const std::vector<std::string>& overrides, const std::string& path) {
        const ExperimentConfig cfg = parse_config(path, overrides);
        std::vector<RoundReport> reports;
        {
          py::gil_scoped_release release;
          reports = run_experiment(cfg);
        }
        py::list out;
        for (const RoundReport& r : reports) out.append(report_dict(r));
        return out;
      },
      py::arg("overrides") = std::vector<std::string>{}, py::arg("config_path") = "",
      "Runs every round, writes outputs to output_dir and returns the round reports.");

  m.def(
      "synth_dataset",
      [](int classes, int per_class, int channels, int image_size, double noise, std::uint64_t seed) {
        SynthSpec s{classes, per_class, channels, image_size, noise};
        return dataset_arrays(synth_dataset(s, seed));
      },
      py::arg("classes") = 4, py::arg("per_class") = 100, py::arg("channels") = 3, py::arg("image_size") = 16,
      py::arg("noise") = 0.3, py::arg("seed") = 0, "Synthetic class-pattern images as (images[N,C,H,W], labels).");
  m.def(
      "gen_data",
      [](const std::string& path, int classes, int per_class, int channels, int image_size, double noise,
         std::uint64_t seed) {
        SynthSpec s{classes, per_class, channels, image_size, noise};
        save_dataset(path, synth_dataset(s, seed), classes);
      },
      py::arg("path"), py::arg("classes") = 4, py::arg("per_class") = 100, py::arg("channels") = 3,
      py::arg("image_size") = 16, py::arg("noise") = 0.3, py::arg("seed") = 0);
  m.def(
      "load_dataset", [](const std::string& path) { return dataset_arrays(load_dataset(path)); }, py::arg("path"));
  m.def(
      "lda_partition",
      [](const std::vector<int>& labels, int clients, double alpha, std::uint64_t seed) {
        return lda_partition(labels, PartitionSpec{clients, alpha, seed});
      },
      py::arg("labels"), py::arg("clients"), py::arg("alpha"), py::arg("seed") = 0,
      "Label-distribution-skewed split: one index list per client.");

  m.def(
      "inspect_checkpoint",
      [](const std::string& path) {
        const GlobalModel model = load_checkpoint(path);
        const BackboneConfig& c = model.config;
        py::dict cfg;
        cfg["depth"] = c.depth;
        cfg["hidden_dim"] = c.hidden_dim;
        cfg["heads"] = c.heads;
        cfg["image_size"] = c.image_size;
        cfg["patch_size"] = c.patch_size;
        cfg["channels"] = c.channels;
        cfg["num_classes"] = c.num_classes;
        py::dict tensors;
        for (const auto& [name, t] : named_tensors(model.params)) tensors[py::str(name)] = py::tuple(py::cast(t->shape()));
        py::dict out;
        out["config"] = cfg;
        out["exit_blocks"] = model.schedule.exit_blocks;
        out["ree_everywhere"] = model.schedule.ree_everywhere;
        out["tensors"] = tensors;
        out["parameter_count"] = parameter_count(model.params);
        return out;
      },
      py::arg("path"));
  m.def(
      "checkpoint_tensor",
      [](const std::string& path, const std::string& name) {
        const GlobalModel model = load_checkpoint(path);
        for (const auto& [n, t] : named_tensors(model.params)) {
          if (n == name) return to_array(*t);
        }
        throw Error(ErrorKind::kInput, "no tensor named '" + name + "'");
      },
      py::arg("path"), py::arg("name"));
  m.def(
      "attention",
      [](const std::string& checkpoint, const std::string& dataset, const std::vector<std::size_t>& samples,
         bool modulation) {
        return attention_csv(load_checkpoint(checkpoint), load_dataset(dataset), samples, {modulation});
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("samples"), py::arg("modulation") = true,
      "Attention rows sample_id,block,variant,token_index,weight as CSV text.");

  m.def(
      "kd_loss",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& logits, int teacher,
         double tau) {
        Graph g(false);
        std::vector<Var> vars;
        for (const auto& a : logits) vars.push_back(g.constant(to_tensor(a)));
        return kd_loss(vars, teacher, tau).loss.value()[0];
      },
      py::arg("logits"), py::arg("teacher"), py::arg("tau") = 1.0, "Distillation loss over [B,K] exit logits.");
  m.def(
      "select_teacher", [](const std::vector<double>& estimate) { return select_teacher(RunningEstimate{estimate, true}); },
      py::arg("estimate"));
  m.def(
      "cosine_lr",
      [](int round, int total_rounds, double lr0, double lr_min) {
        TrainConfig t;
        t.total_rounds = total_rounds;
        t.lr0 = lr0;
        t.lr_min = lr_min;
        return cosine_lr(round, t);
      },
      py::arg("round"), py::arg("total_rounds"), py::arg("lr0") = 5e-2, py::arg("lr_min") = 1e-3);
  m.def(
      "eta_schedule",
      [](int round, double eta_max, int ramp_rounds) {
        TrainConfig t;
        t.eta_max = eta_max;
        t.ramp_rounds = ramp_rounds;
        return eta_schedule(round, t);
      },
      py::arg("round"), py::arg("eta_max") = 1.0, py::arg("ramp_rounds") = 300);
}
