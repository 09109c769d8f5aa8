#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fedmer/experiment.hpp"

namespace py = pybind11;
using namespace fedmer;

namespace {

ConfusionMatrix confusion_from(const py::array_t<std::uint64_t>& counts) {
    const auto buf = counts.unchecked<2>();
    if (buf.shape(0) != buf.shape(1)) throw std::invalid_argument("confusion matrix must be square");
    ConfusionMatrix cm(static_cast<std::size_t>(buf.shape(0)));
    for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
        for (py::ssize_t j = 0; j < buf.shape(1); ++j) {
            cm.counts[static_cast<std::size_t>(i) * cm.n + static_cast<std::size_t>(j)] =
                buf(i, j);
        }
    }
    return cm;
}

SquareMat mat_from(const py::array_t<double>& a) {
    const auto buf = a.unchecked<2>();
    if (buf.shape(0) != buf.shape(1)) throw std::invalid_argument("matrix must be square");
    SquareMat m(static_cast<std::size_t>(buf.shape(0)));
    for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
        for (py::ssize_t j = 0; j < buf.shape(1); ++j) {
            m(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = buf(i, j);
        }
    }
    return m;
}

py::array_t<double> mat_to(const SquareMat& m) {
    py::array_t<double> out({m.n, m.n});
    auto buf = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < m.n; ++i) {
        for (std::size_t j = 0; j < m.n; ++j) buf(i, j) = m(i, j);
    }
    return out;
}

ParamSet params_from(const py::dict& d) {
    ParamSet ps;
    for (auto item : d) {
        const std::string name = py::cast<std::string>(item.first);
        auto arr = py::cast<py::array_t<double, py::array::c_style | py::array::forcecast>>(
            item.second);
        Shape shape(arr.ndim());
        for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
            shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arr.shape(i));
        }
        std::vector<double> values(arr.data(), arr.data() + arr.size());
        ps.add(name, Tensor::from(std::move(shape), std::move(values)));
    }
    return ps;
}

py::dict params_to(const ParamSet& ps) {
    py::dict out;
    for (const auto& e : ps.entries()) {
        std::vector<py::ssize_t> shape;
        for (std::size_t d : e.tensor.shape()) shape.push_back(static_cast<py::ssize_t>(d));
        py::array_t<double> arr(shape);
        std::copy(e.tensor.value().begin(), e.tensor.value().end(), arr.mutable_data());
        out[py::str(e.name)] = arr;
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_fedmer, m) {
    m.doc() = "Federated micro-expression recognition core (priors, metrics, aggregation, "
              "synthetic data, experiment runner)";

    m.def("uf1", [](const py::array_t<std::uint64_t>& cm) { return uf1(confusion_from(cm)).value; },
          py::arg("confusion"), "Unweighted mean F1 over classes of an NxN confusion matrix");
    m.def("uar", [](const py::array_t<std::uint64_t>& cm) { return uar(confusion_from(cm)).value; },
          py::arg("confusion"), "Unweighted average recall over classes");

    m.def(
        "beta_at",
        [](const std::string& kind, double start, double end, std::size_t horizon, std::size_t t) {
            BetaSchedule s{BetaSchedule::kind_from_string(kind), start, end, horizon};
            return s.at(t);
        },
        py::arg("kind"), py::arg("start"), py::arg("end"), py::arg("horizon"), py::arg("t"),
        "Prior mixing weight at step t (kind: constant | linear | cosine)");

    m.def(
        "default_adjacency",
        []() {
            const PriorPack pack = load_adjacency(default_prior_config());
            return mat_to(pack.A);
        },
        "The shipped 12x12 AU coordination adjacency");

    m.def(
        "compute_cooccurrence",
        [](const py::array_t<std::uint8_t>& labels, const py::array_t<double>& adjacency) {
            const auto buf = labels.unchecked<2>();
            std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(buf.shape(0)));
            for (py::ssize_t i = 0; i < buf.shape(0); ++i) {
                rows[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(buf.shape(1)));
                for (py::ssize_t j = 0; j < buf.shape(1); ++j) {
                    rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = buf(i, j);
                }
            }
            return mat_to(compute_cooccurrence(rows, mat_from(adjacency)));
        },
        py::arg("au_labels"), py::arg("adjacency"),
        "Row-stochastic co-occurrence prior D on the adjacency support");

    m.def(
        "serialize_params",
        [](const py::dict& params) {
            const auto bytes = serialize(params_from(params));
            return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        },
        py::arg("params"), "Serialize {name: array} to the parameter wire format");
    m.def(
        "deserialize_params",
        [](const py::bytes& blob) {
            const std::string s = blob;
            std::vector<std::uint8_t> bytes(s.begin(), s.end());
            return params_to(deserialize(bytes));
        },
        py::arg("blob"), "Decode the parameter wire format back to {name: array}");

    m.def(
        "aggregate_fedavg",
        [](const std::vector<std::pair<py::dict, std::size_t>>& models) {
            std::vector<ParamSet> sets;
            sets.reserve(models.size());
            for (const auto& [d, n] : models) sets.push_back(params_from(d));
            std::vector<std::pair<const ParamSet*, std::size_t>> refs;
            for (std::size_t i = 0; i < sets.size(); ++i) {
                refs.emplace_back(&sets[i], models[i].second);
            }
            return params_to(aggregate_fedavg(refs));
        },
        py::arg("models"), "Data-size weighted mean of [(params, sample_count), ...]");

    m.def(
        "aggregate_pfedprox",
        [](const std::vector<std::pair<py::dict, std::size_t>>& models, double theta) {
            std::vector<ParamSet> sets;
            sets.reserve(models.size());
            for (const auto& [d, n] : models) sets.push_back(params_from(d));
            std::vector<std::pair<const ParamSet*, std::size_t>> refs;
            for (std::size_t i = 0; i < sets.size(); ++i) {
                refs.emplace_back(&sets[i], models[i].second);
            }
            std::vector<py::dict> out;
            for (const ParamSet& p : aggregate_pfedprox(refs, theta)) out.push_back(params_to(p));
            return out;
        },
        py::arg("models"), py::arg("theta"),
        "Personalized aggregation; returns one parameter dict per client");

    m.def(
        "generate_dataset",
        [](std::size_t class_count, std::size_t subject_count, std::size_t samples_min,
           std::size_t samples_max, double noise_level, double subject_bias_scale,
           std::size_t of_side, std::uint64_t seed) {
            const RoiLayout layout = RoiLayout::default_layout();
            const AuCatalog catalog = default_catalog(layout);
            GeneratorSpec spec;
            spec.class_count = class_count;
            spec.subject_count = subject_count;
            spec.samples_per_subject_min = samples_min;
            spec.samples_per_subject_max = samples_max;
            spec.noise_level = noise_level;
            spec.subject_bias_scale = subject_bias_scale;
            spec.global_of_side = of_side;
            spec.seed = seed;
            const auto samples = generate(spec, layout, catalog);

            const std::size_t n = samples.size();
            const std::size_t patch_len = 3 * 5 * 5;
            py::array_t<double> patches({n, static_cast<std::size_t>(65), static_cast<std::size_t>(3),
                                         static_cast<std::size_t>(5), static_cast<std::size_t>(5)});
            py::array_t<double> flow({n, static_cast<std::size_t>(3), of_side, of_side});
            py::array_t<std::uint8_t> au({n, catalog.au_count()});
            py::array_t<std::int64_t> emotion(n);
            py::array_t<std::int64_t> subject(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy(samples[i].roi_patches.begin(), samples[i].roi_patches.end(),
                          patches.mutable_data() + i * 65 * patch_len);
                std::copy(samples[i].global_of.begin(), samples[i].global_of.end(),
                          flow.mutable_data() + i * 3 * of_side * of_side);
                std::copy(samples[i].au_labels.begin(), samples[i].au_labels.end(),
                          au.mutable_data() + i * catalog.au_count());
                emotion.mutable_data()[i] = samples[i].emotion;
                subject.mutable_data()[i] = samples[i].subject_id;
            }
            py::dict out;
            out["roi_patches"] = patches;
            out["global_of"] = flow;
            out["au_labels"] = au;
            out["emotion"] = emotion;
            out["subject"] = subject;
            return out;
        },
        py::arg("class_count") = 3, py::arg("subject_count") = 10, py::arg("samples_min") = 4,
        py::arg("samples_max") = 6, py::arg("noise_level") = 0.1,
        py::arg("subject_bias_scale") = 0.5, py::arg("of_side") = 16, py::arg("seed") = 0,
        "Synthetic AU-conditioned dataset as numpy arrays");

    m.def(
        "run_experiment",
        [](const std::string& config_path, const std::string& out_dir,
           std::optional<std::string> strategy, std::optional<std::uint64_t> seed) {
            ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
            if (strategy) cfg.federated.strategies = {strategy_from_string(*strategy)};
            if (seed) cfg.seed = *seed;
            cfg.validate();
            const ExperimentResult result = run_experiment_to_dir(cfg, out_dir);
            py::dict out;
            for (const std::string& s : result.strategy_order) {
                out[py::str(s)] = result.mean_final_uf1(s);
            }
            return out;
        },
        py::arg("config_path"), py::arg("out_dir"), py::arg("strategy") = std::nullopt,
        py::arg("seed") = std::nullopt,
        "Run the federated experiment; writes results.csv/summary.json and returns mean final "
        "UF1 per strategy");

    m.def("strategies", []() { return strategy_names(); });
}
