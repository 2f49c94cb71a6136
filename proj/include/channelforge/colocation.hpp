#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "channelforge/coloring.hpp"
#include "channelforge/gpu_model.hpp"
#include "channelforge/pcie_cfs.hpp"
#include "channelforge/workload.hpp"

namespace chforge {

class TuneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IsolationToggles {
  bool sm_partitioning = true;
  bool vram_coloring = true;
  // Bus policy used when tasks load weights over PCIe.
  PciePolicy pcie_policy = PciePolicy::Cfs;
};

struct PartitionConfig {
  std::uint32_t sm_be = 30;
  double ch_be = 1.0 / 3;
  double thres_dram = 40;
  std::uint32_t total_sms = 80;
  IsolationToggles isolation;

  void validate() const;
};

void to_json(nlohmann::json& j, const PartitionConfig& p);
void from_json(const nlohmann::json& j, PartitionConfig& p);

// Per-channel loads are fractions of one channel's service rate.
struct ContentionModel {
  double beta = 1.0;
  double service_rate = 1.0;

  void validate() const;
  double mem_slowdown(double peak_channel_load) const;
};

double sm_slowdown(std::uint32_t sm_demand, double granted_sms);

struct KernelPlacement {
  double granted_sms = 0;
  std::vector<ChannelId> channels;
  bool colored = false;
};

// Per-channel load a kernel adds when its traffic is spread over `channels`.
double channel_share(const KernelProfile& k, std::size_t placed_channels, std::uint32_t num_channels);

// `background` holds the other kernels' per-channel load (size num_channels).
double kernel_runtime(const KernelProfile& profile, const KernelPlacement& placement,
                      const std::vector<double>& background, std::uint32_t num_channels,
                      const ContentionModel& model, double spt_overhead);

struct SmRequest {
  std::uint32_t demand = 1;
  TaskClass cls = TaskClass::BE;
  // BE kernel launched while no LS kernel ran; holds the whole GPU pool
  // until it ends.
  bool wide = false;
};

std::vector<double> elastic_sm_assign(const std::vector<SmRequest>& active, const PartitionConfig& partition);

struct ModelProfile {
  std::string name;
  std::string label;
  TaskClass cls = TaskClass::LS;
  double size_mib = 0;
  // Runtime in ms on p40, v100, a2000, a5500.
  double runtime_ms[4] = {0, 0, 0, 0};
  double sm_util = 0;
  double vram_util = 0;

  double runtime_on(const std::string& preset) const;
};

const std::vector<ModelProfile>& model_table();
const ModelProfile& find_model(const std::string& key);

inline constexpr std::uint32_t kKernelsPerModel = 8;

// Splits a model into a kernel sequence whose mean SM and DRAM utilization
// match the table; a quarter of the kernels carry most of the DRAM traffic.
std::vector<KernelProfile> model_kernels(const ModelProfile& model, const GpuSpec& gpu);

struct TaskSpec {
  std::uint32_t id = 0;
  std::string name;
  TaskClass cls = TaskClass::LS;
  std::vector<KernelProfile> kernels;
  std::uint64_t model_size = 0;
  ArrivalParams arrival;
  std::uint32_t instances = 1;
  double nice = 1;
  // Copy the model weights over PCIe before every request.
  bool load_weights = false;

  void validate() const;
};

struct ScenarioConfig {
  GpuSpec gpu;
  std::vector<TaskSpec> tasks;
  PartitionConfig partition;
  ContentionModel contention;
  BusSpec bus;
  std::uint32_t cfs_period = 2048;
  double spt_overhead = 0;
  double duration_ns = 10e9;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TaskMetrics {
  std::uint32_t task = 0;
  std::string name;
  TaskClass cls = TaskClass::LS;
  std::uint64_t completed = 0;
  double p50_us = 0;
  double p99_us = 0;
  // Completed requests (LS) or samples (BE) per second.
  double throughput = 0;
  std::uint64_t kernel_completions = 0;
};

struct Metrics {
  std::vector<TaskMetrics> tasks;
  double ls_p50_us = 0;
  double ls_p99_us = 0;
  double be_throughput = 0;
  double sm_utilization = 0;
  double mean_channel_load = 0;
  // Most channels any colored BE kernel touched.
  std::uint32_t be_colored_channels = 0;
  std::uint64_t events = 0;

  const TaskMetrics& task(std::uint32_t id) const;
  void write_csv(std::ostream& out) const;
  nlohmann::json to_json() const;
};

Metrics run_scenario(const ScenarioConfig& cfg);

void to_json(nlohmann::json& j, const TaskSpec& t);
// Scenario files name the GPU by preset (optionally with overrides), and
// either list tasks explicitly or pick a built-in scenario number.
ScenarioConfig scenario_from_json(const nlohmann::json& j);
nlohmann::json scenario_to_json(const ScenarioConfig& cfg);

// Scenario presets. Scenario one keeps models resident; scenario two loads
// weights over the bus before each request; scenario three (ablation) pits
// the resident LS models against copies of one memory-bound BE model.
std::vector<TaskSpec> scenario1_tasks(const GpuSpec& gpu, ArrivalKind arrival = ArrivalKind::Poisson,
                                      double ls_rate = 10);
std::vector<TaskSpec> scenario2_tasks(const GpuSpec& gpu, double ls_nice, double be_nice = 100, double ls_rate = 5);
// Effective host-to-device rate when weights stream from pageable memory.
inline constexpr double kScenario2BusGiBs = 5.0;
std::vector<TaskSpec> ablation_tasks(const GpuSpec& gpu, const std::string& be_model = "DenseNet161",
                                     std::uint32_t be_instances = 4, double ls_rate = 10);
ScenarioConfig default_scenario(const std::string& preset, int scenario);

struct KernelPair {
  KernelProfile ls;
  KernelProfile be;
};

struct GridOptions {
  std::uint32_t sm_step = 1;
  std::vector<double> ch_values = {1.0 / 6, 2.0 / 6, 3.0 / 6, 4.0 / 6, 5.0 / 6};
  std::vector<double> thres_values = {10, 20, 30, 40, 50, 60, 70, 80, 90};
  // Allowed LS latency increase over running alone.
  double max_increase = 0.25;
  ContentionModel contention;
  double spt_overhead = 0;
};

struct TuneResult {
  PartitionConfig partition;
  std::uint64_t evaluated = 0;
  std::uint64_t feasible = 0;
};

// LS latency under colocation divided by its isolated latency.
double pair_slowdown(const KernelPair& pair, const GpuSpec& gpu, const PartitionConfig& partition,
                     const ContentionModel& model, double spt_overhead);

TuneResult grid_search_tune(const GpuSpec& gpu, const std::vector<KernelPair>& corpus, const GridOptions& opts = {});

// Representative LS x BE kernel pairs; on v100 they tune to (30, 1/3, 40).
std::vector<KernelPair> default_pair_corpus(const GpuSpec& gpu);

}  // namespace chforge
