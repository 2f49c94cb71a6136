#include "cli.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "channelforge/colocation.hpp"
#include "channelforge/coloring.hpp"
#include "channelforge/pcie_cfs.hpp"
#include "channelforge/reveng.hpp"
#include "channelforge/util.hpp"
#include "schema_check.hpp"

namespace chforge::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  unsigned jobs = 1;
  std::string format = "csv";
  std::string crack;
  std::string target;
};

void setup_logging() {
  auto logger = spdlog::get("channelforge");
  if (!logger) {
    logger = spdlog::stderr_color_mt("channelforge");
    spdlog::set_default_logger(logger);
  }
  const char* env = std::getenv("CHANNELFORGE_LOG");
  const std::string want = env ? env : "warn";
  auto level = spdlog::level::from_str(want);
  if (level == spdlog::level::off && want != "off") {
    level = spdlog::level::warn;
    spdlog::warn("CHANNELFORGE_LOG='{}' is not a log level; using warn", want);
  }
  spdlog::set_level(level);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void require_valid(const json& doc, const std::string& what) {
  const auto errs = schema_errors(experiment_schema(), doc);
  if (errs.empty()) return;
  std::string msg = what + " failed schema validation:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw UsageError(msg);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw UsageError("write to '" + path.string() + "' failed");
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

GpuSpec gpu_from(const json& cfg) {
  const json& gj = cfg.at("gpu");
  GpuSpec spec = make_preset(gj.value("preset", std::string("custom")));
  from_json(gj, spec);
  spec.validate();
  return spec;
}

std::string preset_of(const json& cfg) { return cfg.at("gpu").value("preset", std::string("custom")); }

std::uint64_t seed_of(const Options& o, const json& cfg) { return o.seed ? *o.seed : cfg.value("seed", std::uint64_t{1}); }

KernelProfile kernel_from(const json& j, const std::string& fallback_id) {
  KernelProfile k;
  k.id = j.value("id", fallback_id);
  if (j.contains("isolated_runtime_ns"))
    k.isolated_runtime = j.at("isolated_runtime_ns").get<double>();
  else if (j.contains("isolated_runtime_ms"))
    k.isolated_runtime = j.at("isolated_runtime_ms").get<double>() * 1e6;
  else
    throw UsageError("kernel '" + k.id + "' needs isolated_runtime_ns or isolated_runtime_ms");
  k.sm_demand = j.at("sm_demand").get<std::uint32_t>();
  k.dram_throughput = j.at("dram_throughput").get<double>();
  return k;
}

BusSpec bus_from(const json& cfg) {
  BusSpec bus;
  if (cfg.contains("pcie")) {
    const auto& p = cfg.at("pcie");
    if (p.contains("setup_ns")) bus.setup_ns = p.at("setup_ns").get<double>();
    if (p.contains("bandwidth_gib_s")) bus.bandwidth_h2d = bus.bandwidth_d2h = p.at("bandwidth_gib_s").get<double>() * 1.073741824;
  }
  return bus;
}

// Runs fn(0..n-1) on up to `jobs` threads; the lowest-index failure is
// rethrown after every worker joined.
template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn fn) {
  std::vector<std::exception_ptr> errs(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errs[i] = std::current_exception();
      }
    }
  };
  const unsigned threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, jobs), n));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

int cmd_reveng(const Options& o, const json& cfg, const fs::path& out) {
  const GpuSpec gpu = gpu_from(cfg);
  const json rj = cfg.value("reveng", json::object());
  RevengOptions opt;
  opt.crack = parse_crack_mode(o.crack.empty() ? rj.value("crack", std::string("auto")) : o.crack);
  opt.train_samples = rj.value("train_samples", std::size_t{0});
  opt.holdout_samples = rj.value("holdout_samples", std::size_t{10000});
  if (rj.contains("mlp_region_mib"))
    opt.mlp_region = static_cast<std::uint64_t>(rj.at("mlp_region_mib").get<double>() * MiB);
  opt.discovery.window_blocks = rj.value("window_blocks", std::uint64_t{4096});
  opt.discovery.probe.votes = rj.value("votes", 3u);
  opt.seed = seed_of(o, cfg);
  opt.mlp.seed = opt.seed;
  if (rj.contains("mlp")) {
    const auto& m = rj.at("mlp");
    if (m.contains("hidden")) opt.mlp.hidden = m.at("hidden").get<std::vector<int>>();
    opt.mlp.epochs = m.value("epochs", opt.mlp.epochs);
    opt.mlp.learning_rate = m.value("learning_rate", opt.mlp.learning_rate);
    opt.mlp.cosine_decay = m.value("cosine_decay", opt.mlp.cosine_decay);
    opt.mlp.batch_size = m.value("batch_size", opt.mlp.batch_size);
    opt.mlp.holdout_fraction = m.value("holdout_fraction", opt.mlp.holdout_fraction);
  }

  MemoryDevice dev{GroundTruthMapping(gpu)};
  const RevengResult res = run_reveng(dev, opt);

  std::ostringstream labels;
  res.labels.write_csv(labels);
  write_file(out / "labels.csv", labels.str());
  write_file(out / "model.json", dump(predictor_to_json(res.model)));
  json report = res.report();
  report["gpu"] = gpu.name;
  report["seed"] = opt.seed;
  write_file(out / "report.json", dump(report));

  std::cout << fmt::format("{}: crack={} model={} accuracy={} ({}/{} held-out) probes={}\n", gpu.name,
                           to_string(res.crack), predictor_kind(res.model), fmt_double(res.holdout_accuracy()),
                           res.holdout_correct, res.holdout_size, res.probe_count);
  return kExitOk;
}

int cmd_simulate(const Options& o, const json& cfg, const fs::path& out) {
  json base = cfg;
  for (const char* k : {"runs", "reveng", "tune", "bench", "inspect", "description"}) base.erase(k);

  std::vector<std::pair<std::string, ScenarioConfig>> runs;
  std::set<std::string> labels;
  auto add = [&](const std::string& label, const json& doc) {
    if (!labels.insert(label).second) throw UsageError("duplicate run label '" + label + "'");
    require_valid(doc, "run '" + label + "'");
    ScenarioConfig sc = scenario_from_json(doc);
    if (o.seed) sc.seed = *o.seed;
    sc.validate();
    runs.emplace_back(label, std::move(sc));
  };
  if (cfg.contains("runs")) {
    for (const auto& r : cfg.at("runs")) {
      json patch = r;
      patch.erase("label");
      json doc = base;
      doc.merge_patch(patch);
      add(r.at("label").get<std::string>(), doc);
    }
  } else {
    add("run", base);
  }

  std::vector<Metrics> results(runs.size());
  parallel_for(runs.size(), o.jobs, [&](std::size_t i) {
    spdlog::info("simulating run '{}'", runs[i].first);
    results[i] = run_scenario(runs[i].second);
  });

  json summary{{"schema_version", 1}, {"runs", json::array()}};
  std::cout << fmt::format("{:<16} {:>12} {:>12} {:>14} {:>8}\n", "run", "ls_p50_ms", "ls_p99_ms", "be_samples/s",
                           "sm_util");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& [label, sc] = runs[i];
    const Metrics& m = results[i];
    if (o.format == "json") {
      write_file(out / (label + ".json"), dump(m.to_json()));
    } else {
      std::ostringstream csv;
      m.write_csv(csv);
      write_file(out / (label + ".csv"), csv.str());
    }
    json entry = m.to_json();
    entry.erase("tasks");
    entry["label"] = label;
    entry["seed"] = sc.seed;
    entry["partition"] = sc.partition;
    entry["config"] = scenario_to_json(sc);
    summary["runs"].push_back(entry);
    std::cout << fmt::format("{:<16} {:>12} {:>12} {:>14} {:>8}\n", label, fmt_double(m.ls_p50_us / 1e3, 4),
                             fmt_double(m.ls_p99_us / 1e3, 4), fmt_double(m.be_throughput, 4),
                             fmt_double(m.sm_utilization, 3));
  }
  write_file(out / "summary.json", dump(summary));
  return kExitOk;
}

int cmd_tune(const Options& o, const json& cfg, const fs::path& out) {
  const GpuSpec gpu = gpu_from(cfg);
  const json tj = cfg.value("tune", json::object());
  const std::string target = o.target.empty() ? tj.value("target", std::string("partition")) : o.target;
  json result{{"target", target}, {"gpu", gpu.name}};

  if (target == "partition") {
    std::vector<KernelPair> corpus;
    if (tj.contains("corpus")) {
      std::size_t i = 0;
      for (const auto& pj : tj.at("corpus")) {
        corpus.push_back({kernel_from(pj.at("ls"), "ls" + std::to_string(i)), kernel_from(pj.at("be"), "be" + std::to_string(i))});
        ++i;
      }
    } else {
      corpus = default_pair_corpus(gpu);
    }
    GridOptions g;
    g.max_increase = tj.value("max_increase", g.max_increase);
    g.sm_step = tj.value("sm_step", g.sm_step);
    if (tj.contains("ch_values")) g.ch_values = tj.at("ch_values").get<std::vector<double>>();
    if (tj.contains("thres_values")) g.thres_values = tj.at("thres_values").get<std::vector<double>>();
    g.spt_overhead = tj.value("spt_overhead", default_spt_overhead(preset_of(cfg)));
    if (cfg.contains("contention")) {
      g.contention.beta = cfg.at("contention").value("beta", g.contention.beta);
      g.contention.service_rate = cfg.at("contention").value("service_rate", g.contention.service_rate);
    }
    const TuneResult r = grid_search_tune(gpu, corpus, g);
    result["partition"] = r.partition;
    result["evaluated"] = r.evaluated;
    result["feasible"] = r.feasible;
    result["max_increase"] = g.max_increase;
    result["corpus_pairs"] = corpus.size();
    std::cout << fmt::format("sm_be={} ch_be={} thres_dram={} ({} of {} grid points feasible)\n", r.partition.sm_be,
                             fmt_double(r.partition.ch_be, 6), fmt_double(r.partition.thres_dram), r.feasible,
                             r.evaluated);
  } else if (target == "pcie") {
    BusConfig bc;
    bc.bus = bus_from(cfg);
    const auto probe = default_probe_workload(tj.value("probe_bytes", std::uint64_t{256} << 20));
    AutotuneResult r;
    try {
      r = autotune_cfs_period(bc, probe, tj.value("eps", 0.01));
    } catch (const std::runtime_error& e) {
      throw DomainError(e.what());
    }
    result["cfs_period"] = r.period;
    result["throughput_bytes_per_ns"] = r.throughput;
    result["peak_throughput_bytes_per_ns"] = r.peak_throughput;
    json ev = json::array();
    for (const auto& [p, thr] : r.evaluated) ev.push_back({{"cfs_period", p}, {"throughput_bytes_per_ns", thr}});
    result["evaluated"] = ev;
    std::cout << fmt::format("cfs_period={} ({} of peak, {} probes)\n", r.period,
                             fmt_double(r.throughput / r.peak_throughput, 6), r.evaluated.size());
  } else {
    throw UsageError("unknown tune target '" + target + "' (expected partition or pcie)");
  }
  write_file(out / "tune.json", dump(result));
  return kExitOk;
}

int cmd_bench(const Options& o, const json& cfg, const fs::path& out) {
  const json bj = cfg.value("bench", json::object());
  BenchScenario sc;
  sc.ls_qps = bj.value("ls_qps", sc.ls_qps);
  sc.ls_size = bj.value("ls_size", sc.ls_size);
  sc.ls_nice = bj.value("ls_nice", sc.ls_nice);
  sc.be_size = bj.value("be_size", sc.be_size);
  sc.be_depth = bj.value("be_depth", sc.be_depth);
  sc.be_nice = bj.value("be_nice", sc.be_nice);
  if (bj.contains("direction")) sc.dir = parse_direction(bj.at("direction").get<std::string>());
  if (bj.contains("horizon_s")) sc.horizon_ns = bj.at("horizon_s").get<double>() * 1e9;
  sc.seed = seed_of(o, cfg);

  std::vector<PciePolicy> policies;
  if (bj.contains("policies"))
    for (const auto& p : bj.at("policies")) policies.push_back(parse_policy(p.get<std::string>()));
  else
    policies = {PciePolicy::Cfs, PciePolicy::FcfsBaymax, PciePolicy::PreemptStreambox};

  BusConfig base;
  base.bus = bus_from(cfg);
  if (cfg.contains("pcie")) base.cfs_period = cfg.at("pcie").value("cfs_period", base.cfs_period);

  std::vector<TransferMetrics> results(policies.size());
  parallel_for(policies.size(), o.jobs, [&](std::size_t i) {
    BusConfig bc = base;
    bc.policy = policies[i];
    results[i] = run_bench(bc, sc);
  });

  json j{{"batch_time_us", batch_time_ns(base.bus, base.cfs_period, sc.dir) / 1e3},
         {"cfs_period", base.cfs_period},
         {"policies", json::array()}};
  std::ostringstream csv;
  csv << "policy,task_id,class,direction,requests,p50_us,p99_us,throughput_bytes_per_s\r\n";
  std::cout << fmt::format("{:<18} {:>12} {:>12} {:>16}\n", "policy", "ls_p50_us", "ls_p99_us", "be_bytes/s");
  for (std::size_t i = 0; i < policies.size(); ++i) {
    const auto& m = results[i];
    json pj{{"policy", to_string(policies[i])}, {"tasks", json::array()}};
    for (const auto& t : m.tasks) {
      const char* cls = t.task == 0 ? "LS" : "BE";
      csv << to_string(policies[i]) << ',' << t.task << ',' << cls << ',' << to_string(t.dir) << ',' << t.requests
          << ',' << fmt_double(t.p50_us) << ',' << fmt_double(t.p99_us) << ',' << fmt_double(t.throughput_bytes_per_s)
          << "\r\n";
      pj["tasks"].push_back({{"task_id", t.task},
                             {"class", cls},
                             {"direction", to_string(t.dir)},
                             {"requests", t.requests},
                             {"p50_us", t.p50_us},
                             {"p99_us", t.p99_us},
                             {"throughput_bytes_per_s", t.throughput_bytes_per_s}});
    }
    j["policies"].push_back(pj);
    const auto& ls = m.task(0, sc.dir);
    const auto& be = m.task(1, sc.dir);
    std::cout << fmt::format("{:<18} {:>12} {:>12} {:>16}\n", to_string(policies[i]), fmt_double(ls.p50_us, 4),
                             fmt_double(ls.p99_us, 4), fmt_double(be.throughput_bytes_per_s, 4));
  }
  if (o.format == "json")
    write_file(out / "bench.json", dump(j));
  else
    write_file(out / "bench.csv", csv.str());
  return kExitOk;
}

int cmd_inspect(const Options& o, const json& cfg, const fs::path& out, const fs::path& config_dir) {
  const GpuSpec gpu = gpu_from(cfg);
  const GroundTruthMapping truth(gpu);
  const json ij = cfg.value("inspect", json::object());
  const std::uint64_t gran = choose_granularity(gpu);

  json gj = gpu;
  gj["address_bits"] = gpu.address_bits();
  gj["num_blocks"] = gpu.num_blocks();
  gj["coloring_granularity"] = gran;
  write_file(out / "gpu.json", dump(gj));
  std::ostringstream perm;
  truth.write_permutation_csv(perm);
  write_file(out / "permutation.csv", perm.str());

  const std::string kind = ij.value("predictor", std::string("truth"));
  ChannelFn predictor;
  if (kind == "truth") {
    predictor = truth_predictor(truth);
  } else if (kind == "faulty") {
    predictor = faulty_predictor(truth, ij.value("fault_rate", 0.01), seed_of(o, cfg));
  } else {
    if (!ij.contains("model_file")) throw UsageError("predictor 'model_file' needs inspect.model_file");
    const auto model = std::make_shared<ChannelPredictor>(predictor_from_json(read_json(config_dir / ij.at("model_file").get<std::string>())));
    predictor = [model](PhysAddr a) { return predict_channel(*model, a); };
  }
  std::uint64_t reserved = static_cast<std::uint64_t>(ij.value("reserved_mib", 64.0) * MiB);
  reserved = std::min(reserved, gpu.vram_size) / gran * gran;
  if (reserved == 0) throw UsageError("reserved space is smaller than one coloring page");
  ReservedSpace space(0, reserved, gran, gpu.interleave_granularity, predictor);
  const ChannelBinding binding = bind_channels(gpu.num_channels, ij.value("ch_be", 1.0 / 3));

  json tensors = ij.value("tensors", json::array({{{"id", "ls.weights"}, {"size_kib", 1024}, {"side", "ls"}},
                                                  {{"id", "be.weights"}, {"size_kib", 1024}, {"side", "be"}}}));
  json spts = json::array();
  std::cout << fmt::format("{:<16} {:>10} {:>8} {:>10}\n", "tensor", "bytes", "pages", "wrong");
  for (const auto& t : tensors) {
    std::vector<ChannelId> channels;
    if (t.contains("channels"))
      channels = t.at("channels").get<std::vector<ChannelId>>();
    else
      channels = t.value("side", std::string("ls")) == "be" ? binding.be_channels : binding.ls_channels;
    for (ChannelId c : channels)
      if (c >= gpu.num_channels) throw UsageError("tensor '" + t.at("id").get<std::string>() + "' names channel " + std::to_string(c));
    const auto size = static_cast<std::uint64_t>(t.at("size_kib").get<double>() * KiB);
    const ShadowPageTable spt = space.alloc_colored(size, channels, t.at("id").get<std::string>());
    const ColoringReport rep = coloring_report(spt, space, truth);
    json sj = spt.to_json();
    sj["wrong_bytes"] = rep.wrong_bytes;
    sj["wrong_fraction"] = rep.wrong_fraction();
    spts.push_back(sj);
    std::cout << fmt::format("{:<16} {:>10} {:>8} {:>10}\n", spt.tensor_id, spt.size, spt.entries.size(),
                             fmt_double(rep.wrong_fraction(), 6));
  }
  write_file(out / "spt.json", dump({{"granularity", gran},
                                      {"reserved_bytes", reserved},
                                      {"predictor", kind},
                                      {"binding", {{"ls_channels", binding.ls_channels}, {"be_channels", binding.be_channels}}},
                                      {"tensors", spts}}));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  setup_logging();
  CLI::App app{"Simulated GPU channel isolation toolkit", "channelforge"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--config", o.config, "Experiment config (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--jobs", o.jobs, "Independent simulations to run at once")->check(CLI::Range(1u, 256u))->capture_default_str();
  app.add_option("--format", o.format, "Tabular result format")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();

  auto* reveng = app.add_subcommand("reveng", "Reverse engineer the channel mapping");
  reveng->add_option("--crack", o.crack, "Cracker: auto, xor, period or mlp")->check(CLI::IsMember({"auto", "xor", "period", "mlp"}));
  auto* simulate = app.add_subcommand("simulate", "Run colocation scenarios");
  auto* tune = app.add_subcommand("tune", "Tune the partition or the CFS period");
  tune->add_option("--target", o.target, "partition or pcie")->check(CLI::IsMember({"partition", "pcie"}));
  auto* bench = app.add_subcommand("bench-pcie", "Compare PCIe scheduling policies");
  auto* inspect = app.add_subcommand("inspect", "Dump the GPU layout and shadow page tables");

  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (seed_opt->count() > 0) o.seed = seed;

  try {
    const fs::path config_path(o.config);
    const json cfg = read_json(config_path);
    require_valid(cfg, "config '" + o.config + "'");
    const fs::path out(o.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw UsageError("cannot create output directory '" + o.out + "': " + ec.message());

    if (reveng->parsed()) return cmd_reveng(o, cfg, out);
    if (simulate->parsed()) return cmd_simulate(o, cfg, out);
    if (tune->parsed()) return cmd_tune(o, cfg, out);
    if (bench->parsed()) return cmd_bench(o, cfg, out);
    if (inspect->parsed()) return cmd_inspect(o, cfg, out, config_path.parent_path());
    return kExitUsage;
  } catch (const CrackError& e) {
    std::cerr << "channelforge: crack failed: " << e.what() << "\n";
    return kExitDomain;
  } catch (const TuneError& e) {
    std::cerr << "channelforge: tuning infeasible: " << e.what() << "\n";
    return kExitDomain;
  } catch (const ColoringError& e) {
    std::cerr << "channelforge: coloring failed: " << e.what() << "\n";
    return kExitDomain;
  } catch (const DomainError& e) {
    std::cerr << "channelforge: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    std::cerr << "channelforge: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace chforge::cli
