#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "channelforge/colocation.hpp"
#include "channelforge/coloring.hpp"
#include "channelforge/gpu_model.hpp"
#include "channelforge/pcie_cfs.hpp"
#include "channelforge/reveng.hpp"
#include "cli.hpp"

namespace py = pybind11;
using namespace chforge;
using nlohmann::json;

// Structured results cross the boundary as JSON text; the python package
// decodes them.
PYBIND11_MODULE(_core, m) {
  m.doc() = "channelforge native core";

  py::register_exception<CrackError>(m, "CrackError", PyExc_RuntimeError);
  py::register_exception<TuneError>(m, "TuneError", PyExc_RuntimeError);
  py::register_exception<ColoringError>(m, "ColoringError", PyExc_RuntimeError);

  m.def("preset_names", &preset_names);
  m.def("gpu_spec_json", [](const std::string& preset) { return json(make_preset(preset)).dump(); });

  py::class_<GroundTruthMapping>(m, "GroundTruthMapping")
      .def(py::init([](const std::string& preset) { return GroundTruthMapping(make_preset(preset)); }),
           py::arg("preset"))
      .def_property_readonly("num_channels", [](const GroundTruthMapping& g) { return g.spec().num_channels; })
      .def_property_readonly("interleave", [](const GroundTruthMapping& g) { return g.spec().interleave_granularity; })
      .def_property_readonly("vram_size", [](const GroundTruthMapping& g) { return g.spec().vram_size; })
      .def("channel_of", &GroundTruthMapping::channel_of, py::arg("addr"))
      .def("channels_of", [](const GroundTruthMapping& g, const std::vector<PhysAddr>& addrs) {
        std::vector<ChannelId> out;
        out.reserve(addrs.size());
        for (PhysAddr a : addrs) out.push_back(g.channel_of(a));
        return out;
      });

  m.def(
      "reveng_json",
      [](const std::string& preset, const std::string& crack, std::uint64_t seed, std::size_t train_samples,
         std::size_t holdout_samples) {
        RevengOptions opt;
        opt.crack = parse_crack_mode(crack);
        opt.seed = opt.mlp.seed = seed;
        opt.train_samples = train_samples;
        opt.holdout_samples = holdout_samples;
        py::gil_scoped_release unlock;
        MemoryDevice dev{GroundTruthMapping(make_preset(preset))};
        const RevengResult r = run_reveng(dev, opt);
        return json{{"report", r.report()}, {"model", predictor_to_json(r.model)}}.dump();
      },
      py::arg("preset"), py::arg("crack") = "auto", py::arg("seed") = 1, py::arg("train_samples") = 0,
      py::arg("holdout_samples") = 10000);

  m.def("predict_channels", [](const std::string& model_json, const std::vector<PhysAddr>& addrs) {
    const ChannelPredictor model = predictor_from_json(json::parse(model_json));
    std::vector<ChannelId> out;
    out.reserve(addrs.size());
    for (PhysAddr a : addrs) out.push_back(predict_channel(model, a));
    return out;
  });

  m.def(
      "autotune_json",
      [](double eps, std::uint64_t probe_bytes) {
        py::gil_scoped_release unlock;
        const AutotuneResult r = autotune_cfs_period(BusConfig{}, default_probe_workload(probe_bytes), eps);
        return json{{"cfs_period", r.period}, {"throughput", r.throughput}, {"peak_throughput", r.peak_throughput}}
            .dump();
      },
      py::arg("eps") = 0.01, py::arg("probe_bytes") = std::uint64_t{256} << 20);

  m.def(
      "bench_json",
      [](const std::string& policy, double horizon_s, std::uint64_t seed) {
        BusConfig bc;
        bc.policy = parse_policy(policy);
        BenchScenario sc;
        sc.horizon_ns = horizon_s * 1e9;
        sc.seed = seed;
        py::gil_scoped_release unlock;
        const TransferMetrics tm = run_bench(bc, sc);
        json tasks = json::array();
        for (const auto& t : tm.tasks)
          tasks.push_back({{"task_id", t.task},
                           {"direction", to_string(t.dir)},
                           {"requests", t.requests},
                           {"p50_us", t.p50_us},
                           {"p99_us", t.p99_us},
                           {"throughput_bytes_per_s", t.throughput_bytes_per_s}});
        return json{{"policy", to_string(bc.policy)}, {"tasks", tasks}}.dump();
      },
      py::arg("policy"), py::arg("horizon_s") = 1.0, py::arg("seed") = 1);

  m.def("run_scenario_json", [](const std::string& config_json) {
    const ScenarioConfig cfg = scenario_from_json(json::parse(config_json));
    py::gil_scoped_release unlock;
    return run_scenario(cfg).to_json().dump();
  });

  m.def(
      "grid_search_json",
      [](const std::string& preset, double max_increase) {
        const GpuSpec gpu = make_preset(preset);
        GridOptions g;
        g.max_increase = max_increase;
        g.spt_overhead = default_spt_overhead(preset);
        py::gil_scoped_release unlock;
        const TuneResult r = grid_search_tune(gpu, default_pair_corpus(gpu), g);
        return json{{"partition", r.partition}, {"evaluated", r.evaluated}, {"feasible", r.feasible}}.dump();
      },
      py::arg("preset"), py::arg("max_increase") = 0.25);

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::vector<std::string> argv{"channelforge"};
    argv.insert(argv.end(), args.begin(), args.end());
    py::gil_scoped_release unlock;
    return cli::run_cli(argv);
  });
}
