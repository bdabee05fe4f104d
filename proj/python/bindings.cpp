#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "multiquant/error_analysis.hpp"
#include "multiquant/harness.hpp"
#include "multiquant/parallel.hpp"
#include "multiquant/quantizer.hpp"
#include "multiquant/topology.hpp"
#include "multiquant/trainer.hpp"

namespace py = pybind11;
using namespace mq;

namespace {

std::vector<double> to_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  return std::vector<double>(arr.data(), arr.data() + arr.size());
}

py::array_t<double> to_array(const std::vector<double>& v) {
  // the (count, data) constructor copies; the count-only constructor plus
  // mutable_data() misbehaves under pybind11 3.x
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

QuantizerParams params_from(double l, double u, int bits, const std::string& role,
                            const std::string& round_mode) {
  return make_quantizer(l, u, bits, role == "weight" ? QuantRole::Weight : QuantRole::Activation,
                        round_mode == "floor" ? RoundMode::Floor : RoundMode::Nearest, "py");
}

py::dict selection_to_dict(const SelectionMap& map) {
  py::dict d;
  for (const auto& [bit, sel] : map.selected) {
    py::list ids;
    for (int id : sel) {
      if (id == kHalfBranch)
        ids.append(py::str("H"));
      else
        ids.append(id);
    }
    d[py::int_(bit)] = ids;
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_multiquant, m) {
  m.doc() = "Arbitrary bit-width quantization-aware training lab";

  m.def("set_threads", &set_worker_count, py::arg("n"), "bound the worker count");

  m.def(
      "fake_quantize",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double l,
         double u, int bits, const std::string& role, const std::string& round_mode) {
        auto p = params_from(l, u, bits, role, round_mode);
        return to_array(fake_quantize_values(to_vector(x), p));
      },
      py::arg("x"), py::arg("l"), py::arg("u"), py::arg("bits"), py::arg("role") = "weight",
      py::arg("round_mode") = "nearest",
      "quantize-dequantize round trip with learned-clipping semantics");

  m.def(
      "quantize_codes",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double l,
         double u, int bits, const std::string& role, const std::string& round_mode) {
        auto p = params_from(l, u, bits, role, round_mode);
        return quantize(normalize(to_vector(x), p), p);
      },
      py::arg("x"), py::arg("l"), py::arg("u"), py::arg("bits"), py::arg("role") = "weight",
      py::arg("round_mode") = "nearest", "integer codes of the quantizer grid");

  m.def(
      "init_clip_params",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
         const std::string& role, int bits) {
        auto p = init_clip_params(to_vector(x),
                                  role == "weight" ? QuantRole::Weight : QuantRole::Activation,
                                  bits);
        return py::make_tuple(p.l(), p.u());
      },
      py::arg("x"), py::arg("role"), py::arg("bits"), "calibrated (l, u) for a tensor");

  m.def(
      "msqe_analytic",
      [](int bits, double u, const std::string& variant, const std::string& denominator) {
        ErrorModelConfig cfg;
        cfg.bits = bits;
        cfg.u = u;
        cfg.clipping_variant =
            variant == "as-written" ? ClippingVariant::AsWritten : ClippingVariant::Squared;
        cfg.bin_denominator =
            denominator == "approximate" ? BinDenominator::Approximate : BinDenominator::Exact;
        auto r = msqe_analytic(cfg);
        py::dict d;
        d["clipping_noise"] = r.clipping_noise;
        d["quantization_noise"] = r.quantization_noise;
        d["total"] = r.total_analytic;
        return d;
      },
      py::arg("bits"), py::arg("u"), py::arg("variant") = "squared",
      py::arg("denominator") = "exact", "closed-form MSQE decomposition");

  m.def(
      "msqe_monte_carlo",
      [](int bits, double u, int64_t n_samples, uint64_t seed) {
        ErrorModelConfig cfg;
        cfg.bits = bits;
        cfg.u = u;
        cfg.n_samples = n_samples;
        cfg.seed = seed;
        return msqe_monte_carlo(cfg);
      },
      py::arg("bits"), py::arg("u"), py::arg("n_samples") = 1000000, py::arg("seed") = 1,
      "seeded Monte-Carlo MSQE estimate");

  m.def(
      "accumulated_msqe",
      [](const std::vector<int>& bits, double u) {
        return accumulated_msqe(std::set<int>(bits.begin(), bits.end()), u);
      },
      py::arg("bits"), py::arg("u"), "sum of per-bit analytic totals");

  m.def(
      "build_branch_plan",
      [](const std::vector<int>& bits) {
        auto plan = build_branch_plan(bits);
        py::dict d;
        d["bit_candidates"] = plan.bit_candidates;
        d["n_full_branches"] = plan.n_full_branches;
        d["has_half_branch"] = plan.has_half_branch;
        return d;
      },
      py::arg("bits"), "branch inventory for a candidate set");

  m.def(
      "build_selection_map",
      [](const std::vector<int>& bits, const std::string& strategy) {
        auto plan = build_branch_plan(bits);
        return selection_to_dict(build_selection_map(plan, strategy_from_string(strategy)));
      },
      py::arg("bits"), py::arg("strategy") = "amortized",
      "per-bit branch index sets, 'H' marks the half branch");

  m.def(
      "compute_cost",
      [](const std::vector<int>& bits, const std::string& strategy, int bit,
         int64_t macs_per_body) {
        auto plan = build_branch_plan(bits);
        auto map = build_selection_map(plan, strategy_from_string(strategy));
        auto c = compute_cost(plan, map, bit, macs_per_body);
        py::dict d;
        d["multiquant_units"] = c.multiquant_units;
        d["reference_units"] = c.reference_units;
        d["parity"] = c.parity;
        return d;
      },
      py::arg("bits"), py::arg("strategy"), py::arg("bit"), py::arg("macs_per_body") = 1,
      "MAC-bit cost against the single-model reference");

  m.def(
      "noise_transplant_residual",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& a, int bits_a,
         uint64_t seed) {
        if (w.ndim() != 4 || a.ndim() != 4)
          throw std::invalid_argument("w must be (F,C,KH,KW), a must be (1,C,H,W)");
        Shape ws, as;
        for (int i = 0; i < 4; ++i) ws.push_back(static_cast<int>(w.shape(i)));
        for (int i = 0; i < 4; ++i) as.push_back(static_cast<int>(a.shape(i)));
        auto res = noise_transplant_residual(tensor(ws, to_vector(w)), tensor(as, to_vector(a)),
                                             bits_a, seed);
        py::dict d;
        d["residual"] = res.residual;
        d["support_fraction"] = res.support_fraction;
        d["conclusive"] = res.conclusive;
        return d;
      },
      py::arg("w"), py::arg("a"), py::arg("bits_a"), py::arg("seed") = 1,
      "least-squares residual of moving activation noise onto the weights");

  m.def(
      "make_synthetic",
      [](int classes, int dim, int64_t n, uint64_t seed) {
        auto h = make_synthetic(classes, dim, n, seed);
        py::dict d;
        d["train_images"] = to_array(h.train.images);
        d["train_labels"] = h.train.labels;
        d["test_images"] = to_array(h.test.images);
        d["test_labels"] = h.test.labels;
        d["dim"] = dim;
        return d;
      },
      py::arg("classes"), py::arg("dim"), py::arg("n"), py::arg("seed") = 1,
      "separable Gaussian-blob dataset");

  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        auto cfg = run_config_from_json_text(config_json);
        return run_experiment(cfg);
      },
      py::arg("config_json"), "run a training experiment from a JSON document");

  m.def(
      "train_and_evaluate",
      [](const std::string& config_json) {
        auto cfg = run_config_from_json_text(config_json);
        auto errors = validate_run_config(cfg);
        // the output directory is irrelevant for the in-process path
        errors.erase(std::remove_if(errors.begin(), errors.end(),
                                    [](const std::string& e) {
                                      return e.find("out directory") != std::string::npos;
                                    }),
                     errors.end());
        if (!errors.empty()) throw std::invalid_argument("invalid config: " + errors.front());
        auto data = load_dataset(cfg);
        auto arch =
            arch_from_config(cfg, data.train.height, data.train.width, data.train.classes);
        auto model = build_model(arch, cfg.train);
        auto result = train(*model, data, cfg.train);
        py::dict d;
        py::dict acc;
        for (const auto& [bit, a] : result.final_acc) acc[py::int_(bit)] = a;
        d["accuracy"] = acc;
        d["avg_accuracy"] = result.avg_acc;
        d["steps_run"] = result.steps_run;
        d["aborted"] = result.aborted;
        return d;
      },
      py::arg("config_json"), "train in process and return per-bit accuracies");

  m.def("evaluate_checkpoint",
        [](const std::string& checkpoint, const std::string& images, const std::string& labels,
           int bit) {
          auto ck = load_checkpoint(checkpoint);
          auto split = load_idx_pair(images, labels);
          return evaluate(ck.model(), split, bit);
        },
        py::arg("checkpoint"), py::arg("images"), py::arg("labels"), py::arg("bit"),
        "top-1 accuracy of a saved model at one bit-width");
}

// temporary debug hook
PYBIND11_MODULE(_mqdebug, m2) {}
