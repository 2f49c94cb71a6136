#include "channelforge/colocation.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <ostream>
#include <tuple>

#include "channelforge/util.hpp"

namespace chforge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string class_name(TaskClass c) { return c == TaskClass::LS ? "LS" : "BE"; }

TaskClass parse_class(const std::string& s) {
  if (s == "LS" || s == "ls") return TaskClass::LS;
  if (s == "BE" || s == "be") return TaskClass::BE;
  throw std::invalid_argument("unknown task class '" + s + "'");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + (salt + 1) * 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

void PartitionConfig::validate() const {
  if (total_sms < 2) throw std::invalid_argument("partition needs at least 2 SMs");
  if (sm_be == 0 || sm_be >= total_sms)
    throw std::invalid_argument("sm_be=" + std::to_string(sm_be) + " must lie in (0, " + std::to_string(total_sms) + ")");
  if (!(ch_be > 0 && ch_be < 1)) throw std::invalid_argument("ch_be must lie strictly between 0 and 1");
  if (!(thres_dram >= 0 && thres_dram <= 100)) throw std::invalid_argument("thres_dram must lie in [0, 100]");
}

void to_json(nlohmann::json& j, const PartitionConfig& p) {
  j = {{"sm_be", p.sm_be},
       {"ch_be", p.ch_be},
       {"thres_dram", p.thres_dram},
       {"total_sms", p.total_sms},
       {"isolation",
        {{"sm_partitioning", p.isolation.sm_partitioning},
         {"vram_coloring", p.isolation.vram_coloring},
         {"pcie_policy", to_string(p.isolation.pcie_policy)}}}};
}

void from_json(const nlohmann::json& j, PartitionConfig& p) {
  if (j.contains("sm_be")) j.at("sm_be").get_to(p.sm_be);
  if (j.contains("ch_be")) j.at("ch_be").get_to(p.ch_be);
  if (j.contains("thres_dram")) j.at("thres_dram").get_to(p.thres_dram);
  if (j.contains("total_sms")) j.at("total_sms").get_to(p.total_sms);
  if (j.contains("isolation")) {
    const auto& iso = j.at("isolation");
    if (iso.contains("sm_partitioning")) iso.at("sm_partitioning").get_to(p.isolation.sm_partitioning);
    if (iso.contains("vram_coloring")) iso.at("vram_coloring").get_to(p.isolation.vram_coloring);
    if (iso.contains("pcie_policy")) p.isolation.pcie_policy = parse_policy(iso.at("pcie_policy").get<std::string>());
  }
}

void ContentionModel::validate() const {
  if (!(beta >= 0)) throw std::invalid_argument("contention beta must be non-negative");
  if (!(service_rate > 0)) throw std::invalid_argument("channel service rate must be positive");
}

double ContentionModel::mem_slowdown(double peak_channel_load) const {
  return 1.0 + beta * std::max(0.0, peak_channel_load / service_rate - 1.0);
}

double sm_slowdown(std::uint32_t sm_demand, double granted_sms) {
  if (!(granted_sms > 0)) throw std::invalid_argument("kernel granted zero SMs");
  return std::max(1.0, sm_demand / granted_sms);
}

double channel_share(const KernelProfile& k, std::size_t placed_channels, std::uint32_t num_channels) {
  if (placed_channels == 0) throw std::invalid_argument("kernel '" + k.id + "' placed on no channels");
  return k.dram_throughput / 100.0 * num_channels / static_cast<double>(placed_channels);
}

double kernel_runtime(const KernelProfile& profile, const KernelPlacement& placement,
                      const std::vector<double>& background, std::uint32_t num_channels,
                      const ContentionModel& model, double spt_overhead) {
  profile.validate();
  if (background.size() != num_channels)
    throw std::invalid_argument("background load must list every channel");
  const double sm = sm_slowdown(profile.sm_demand, placement.granted_sms);
  double peak = 0;
  if (placement.channels.empty()) throw std::invalid_argument("kernel '" + profile.id + "' placed on no channels");
  const double own = channel_share(profile, placement.channels.size(), num_channels);
  for (ChannelId c : placement.channels) {
    if (c >= num_channels) throw std::invalid_argument("channel id out of range");
    peak = std::max(peak, background[c] + own);
  }
  const double spt = placement.colored ? 1.0 + spt_overhead : 1.0;
  return profile.isolated_runtime * sm * model.mem_slowdown(peak) * spt;
}

std::vector<double> elastic_sm_assign(const std::vector<SmRequest>& active, const PartitionConfig& p) {
  std::vector<double> grant(active.size(), 0.0);
  if (active.empty()) return grant;
  const double total = p.total_sms;
  auto share_capped = [&](double pool, auto pick) {
    double demand = 0;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (pick(active[i])) demand += active[i].demand;
    if (demand == 0) return;
    const double f = std::min(1.0, pool / demand);
    for (std::size_t i = 0; i < active.size(); ++i)
      if (pick(active[i])) grant[i] = active[i].demand * f;
  };
  // BE kernels spread over their whole pool.
  auto share_full = [&](double pool, auto pick) {
    double demand = 0;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (pick(active[i])) demand += active[i].demand;
    if (demand == 0) return;
    for (std::size_t i = 0; i < active.size(); ++i)
      if (pick(active[i])) grant[i] = pool * active[i].demand / demand;
  };
  auto all = [](const SmRequest&) { return true; };
  if (!p.isolation.sm_partitioning) {
    share_capped(total, all);
    return grant;
  }
  const bool any_ls = std::any_of(active.begin(), active.end(), [](const SmRequest& r) { return r.cls == TaskClass::LS; });
  const bool any_wide =
      std::any_of(active.begin(), active.end(), [](const SmRequest& r) { return r.cls == TaskClass::BE && r.wide; });
  if (!any_ls) {
    share_full(any_wide ? total : static_cast<double>(p.sm_be), all);
    return grant;
  }
  if (any_wide) {
    // LS kernels wait for the wide kernel's blocks to drain.
    share_capped(total, all);
    return grant;
  }
  share_capped(total - p.sm_be, [](const SmRequest& r) { return r.cls == TaskClass::LS; });
  share_full(p.sm_be, [](const SmRequest& r) { return r.cls == TaskClass::BE; });
  return grant;
}

double ModelProfile::runtime_on(const std::string& preset) const {
  if (preset == "p40" || preset == "gtx1080") return runtime_ms[0];
  if (preset == "a2000") return runtime_ms[2];
  if (preset == "a5500") return runtime_ms[3];
  return runtime_ms[1];
}

const std::vector<ModelProfile>& model_table() {
  static const std::vector<ModelProfile> table = {
      {"MobileNetV3", "A", TaskClass::LS, 20.9, {3.8, 4.1, 3.8, 3.0}, 11.1, 9.4},
      {"SqueezeNet", "B", TaskClass::LS, 4.7, {2.1, 2.4, 2.2, 1.6}, 22.0, 7.5},
      {"ShuffleNet", "C", TaskClass::LS, 13.3, {3.1, 3.1, 3.4, 2.5}, 17.2, 7.3},
      {"EfficientNet", "D", TaskClass::LS, 17.7, {3.3, 3.9, 3.7, 2.6}, 18.1, 12.1},
      {"ResNet34", "E", TaskClass::LS, 83.1, {4.5, 3.8, 4.4, 2.5}, 40.3, 7.2},
      {"MobileBert", "F", TaskClass::LS, 93.8, {23.0, 22.6, 23.8, 19.5}, 4.9, 3.0},
      {"MobileViT", "G", TaskClass::LS, 21.3, {9.3, 18.7, 9.6, 7.3}, 19.0, 2.5},
      {"EfficientFormer", "H", TaskClass::LS, 109.9, {13.5, 10.9, 11.8, 9.5}, 24.1, 9.9},
      {"ResNet152", "I", TaskClass::BE, 229.3, {55.5, 67.4, 32.5, 53.7}, 75.2, 13.9},
      {"DenseNet161", "J", TaskClass::BE, 109.2, {69.9, 83.0, 35.9, 57.7}, 47.0, 21.7},
      {"Bert", "K", TaskClass::BE, 422.1, {37.7, 43.6, 21.8, 32.4}, 63.5, 13.3},
      {"StableDiffusion", "L", TaskClass::BE, 238.2, {289.2, 193.2, 155.8, 140.4}, 86.6, 10.4},
  };
  return table;
}

const ModelProfile& find_model(const std::string& key) {
  for (const auto& m : model_table())
    if (m.name == key || m.label == key) return m;
  throw std::invalid_argument("unknown model '" + key + "'");
}

std::vector<KernelProfile> model_kernels(const ModelProfile& model, const GpuSpec& gpu) {
  // Two of every eight kernels are the memory-heavy ones.
  static constexpr double dram_mult[kKernelsPerModel] = {0.25, 0.25, 3.25, 0.25, 0.25, 0.25, 3.25, 0.25};
  static constexpr double sm_mult[kKernelsPerModel] = {1.2, 1.2, 0.4, 1.2, 1.2, 1.2, 0.4, 1.2};
  std::vector<KernelProfile> out;
  const double runtime_ns = model.runtime_on(gpu.name) * 1e6 / kKernelsPerModel;
  const auto tensor_bytes = static_cast<std::uint64_t>(model.size_mib * MiB / kKernelsPerModel);
  for (std::uint32_t i = 0; i < kKernelsPerModel; ++i) {
    KernelProfile k;
    k.id = model.label + "." + std::to_string(i);
    k.isolated_runtime = runtime_ns;
    const long sms = std::lround(model.sm_util / 100.0 * gpu.total_sms * sm_mult[i]);
    k.sm_demand = static_cast<std::uint32_t>(std::clamp<long>(sms, 1, gpu.total_sms));
    k.dram_throughput = std::min(100.0, model.vram_util * dram_mult[i]);
    k.tensors.emplace_back(k.id + ".w", tensor_bytes);
    out.push_back(std::move(k));
  }
  return out;
}

void TaskSpec::validate() const {
  if (kernels.empty()) throw std::invalid_argument("task " + std::to_string(id) + " has no kernels");
  if (kernels.size() > 1000) throw std::invalid_argument("task " + std::to_string(id) + " has too many kernels");
  for (const auto& k : kernels) k.validate();
  if (instances == 0) throw std::invalid_argument("task " + std::to_string(id) + " needs at least one instance");
  if (!(nice > 0)) throw std::invalid_argument("task " + std::to_string(id) + " nice must be positive");
  if (cls == TaskClass::LS && arrival.kind == ArrivalKind::ClosedLoop)
    throw std::invalid_argument("LS task " + std::to_string(id) + " needs an open arrival process");
  if (cls == TaskClass::BE && arrival.kind != ArrivalKind::ClosedLoop)
    throw std::invalid_argument("BE task " + std::to_string(id) + " must run closed-loop");
  arrival.validate();
  if (load_weights && model_size == 0)
    throw std::invalid_argument("task " + std::to_string(id) + " loads weights but has no model size");
}

void ScenarioConfig::validate() const {
  gpu.validate();
  if (tasks.empty()) throw std::invalid_argument("scenario has no tasks");
  partition.validate();
  if (partition.total_sms != gpu.total_sms)
    throw std::invalid_argument("partition total_sms does not match the GPU");
  contention.validate();
  bus.validate();
  if (cfs_period == 0) throw std::invalid_argument("cfs_period must be at least 1");
  if (!(spt_overhead >= 0 && spt_overhead <= 0.05)) throw std::invalid_argument("spt_overhead must lie in [0, 0.05]");
  if (!(duration_ns > 0)) throw std::invalid_argument("duration must be positive");
  std::set<std::uint32_t> ids;
  for (const auto& t : tasks) {
    t.validate();
    if (!ids.insert(t.id).second) throw std::invalid_argument("duplicate task id " + std::to_string(t.id));
    for (const auto& k : t.kernels)
      if (k.sm_demand > gpu.total_sms)
        throw std::invalid_argument("kernel '" + k.id + "' demands more SMs than the GPU has");
  }
  bind_channels(gpu.num_channels, partition.ch_be);
}

const TaskMetrics& Metrics::task(std::uint32_t id) const {
  for (const auto& t : tasks)
    if (t.task == id) return t;
  throw std::out_of_range("no metrics for task " + std::to_string(id));
}

void Metrics::write_csv(std::ostream& out) const {
  out << "task_id,name,class,completed,p50_us,p99_us,throughput\r\n";
  for (const auto& t : tasks)
    out << t.task << ',' << csv_field(t.name) << ',' << class_name(t.cls) << ',' << t.completed << ','
        << fmt_double(t.p50_us) << ',' << fmt_double(t.p99_us) << ',' << fmt_double(t.throughput) << "\r\n";
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json tj = nlohmann::json::array();
  for (const auto& t : tasks)
    tj.push_back({{"task_id", t.task},
                  {"name", t.name},
                  {"class", class_name(t.cls)},
                  {"completed", t.completed},
                  {"p50_us", t.p50_us},
                  {"p99_us", t.p99_us},
                  {"throughput", t.throughput},
                  {"kernel_completions", t.kernel_completions}});
  return {{"tasks", tj},
          {"ls_p50_us", ls_p50_us},
          {"ls_p99_us", ls_p99_us},
          {"be_throughput", be_throughput},
          {"sm_utilization", sm_utilization},
          {"mean_channel_load", mean_channel_load},
          {"be_colored_channels", be_colored_channels},
          {"events", events}};
}

namespace {

struct Request {
  std::size_t task;
  double arrival;
  std::uint32_t next_kernel = 0;
  bool in_kernel = false;
  bool done = false;
  std::vector<bool> chunk_ready;
};

struct ActiveKernel {
  std::size_t request;
  std::size_t task;
  const KernelProfile* profile;
  double remaining;
  bool wide;
  bool colored;
  const std::vector<ChannelId>* channels;
  double share;
  double slowdown = 1;
  double grant = 0;
};

class Simulator {
 public:
  explicit Simulator(const ScenarioConfig& cfg)
      : cfg_(cfg), n_(cfg.gpu.num_channels), binding_(bind_channels(cfg.gpu.num_channels, cfg.partition.ch_be)) {
    for (ChannelId c = 0; c < n_; ++c) all_channels_.push_back(c);
    const bool needs_bus = std::any_of(cfg.tasks.begin(), cfg.tasks.end(), [](const TaskSpec& t) { return t.load_weights; });
    if (needs_bus) {
      bus_.emplace(cfg.bus, cfg.partition.isolation.pcie_policy, cfg.cfs_period);
      for (const auto& t : cfg.tasks) bus_->set_task(t.id, t.nice, t.cls);
    }
    free_instances_.resize(cfg.tasks.size());
    waiting_.resize(cfg.tasks.size());
    latencies_.resize(cfg.tasks.size());
    completed_.assign(cfg.tasks.size(), 0);
    kernel_done_.assign(cfg.tasks.size(), 0);
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) free_instances_[i] = cfg.tasks[i].instances;
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
      const auto& t = cfg.tasks[i];
      if (t.cls != TaskClass::LS) continue;
      for (double a : gen_workload(t.arrival, cfg.duration_ns, mix_seed(cfg.seed, t.id))) arrivals_.emplace_back(a, i);
    }
    std::stable_sort(arrivals_.begin(), arrivals_.end());
  }

  Metrics run() {
    for (std::size_t i = 0; i < cfg_.tasks.size(); ++i)
      if (cfg_.tasks[i].cls == TaskClass::BE)
        while (free_instances_[i] > 0) start_request(i, 0.0);
    refresh();

    std::size_t next_arrival = 0;
    const double end = cfg_.duration_ns;
    for (;;) {
      const double t_arr = next_arrival < arrivals_.size() ? arrivals_[next_arrival].first : kInf;
      const double t_bus = bus_ ? bus_->next_event_time() : kInf;
      double t_kernel = kInf;
      std::size_t first = 0;
      for (std::size_t k = 0; k < active_.size(); ++k) {
        const double tk = now_ + active_[k].remaining * active_[k].slowdown;
        if (tk < t_kernel) {
          t_kernel = tk;
          first = k;
        }
      }
      const double t_next = std::min({t_arr, t_bus, t_kernel});
      if (t_next > end) {
        advance(end);
        break;
      }
      advance(t_next);
      ++events_;
      if (t_kernel <= t_bus && t_kernel <= t_arr) {
        finish_kernels(first);
      } else if (t_bus <= t_arr) {
        for (const Completion& c : bus_->advance_until(now_)) {
          const std::size_t r = c.token / 1024 - 1;
          requests_[r].chunk_ready[c.token % 1024] = true;
          try_advance(r);
        }
      } else {
        const std::size_t task = arrivals_[next_arrival++].second;
        waiting_[task].push_back(new_request(task, now_));
        dispatch(task);
      }
      refresh();
    }
    return collect();
  }

 private:
  std::size_t new_request(std::size_t task, double t) {
    Request r;
    r.task = task;
    r.arrival = t;
    r.chunk_ready.assign(cfg_.tasks[task].kernels.size(), !cfg_.tasks[task].load_weights);
    requests_.push_back(std::move(r));
    return requests_.size() - 1;
  }

  void dispatch(std::size_t task) {
    while (free_instances_[task] > 0 && !waiting_[task].empty()) {
      const std::size_t r = waiting_[task].front();
      waiting_[task].pop_front();
      --free_instances_[task];
      begin(r);
    }
  }

  void start_request(std::size_t task, double t) {
    --free_instances_[task];
    begin(new_request(task, t));
  }

  void begin(std::size_t r) {
    const TaskSpec& t = cfg_.tasks[requests_[r].task];
    if (t.load_weights) {
      const std::uint64_t chunks = t.kernels.size();
      for (std::uint64_t i = 0; i < chunks; ++i) {
        const std::uint64_t size = t.model_size / chunks + (i + 1 == chunks ? t.model_size % chunks : 0);
        if (size == 0) {
          requests_[r].chunk_ready[i] = true;
          continue;
        }
        bus_->submit({next_copy_++, t.id, Direction::HtoD, size, now_, (r + 1) * 1024 + i});
      }
    }
    try_advance(r);
  }

  void try_advance(std::size_t r) {
    Request& req = requests_[r];
    if (req.in_kernel || req.done) return;
    const TaskSpec& t = cfg_.tasks[req.task];
    if (req.next_kernel == t.kernels.size()) {
      req.done = true;
      complete(r);
      return;
    }
    if (!req.chunk_ready[req.next_kernel]) return;
    const KernelProfile& k = t.kernels[req.next_kernel];
    const auto& iso = cfg_.partition.isolation;
    ActiveKernel a{r, req.task, &k, k.isolated_runtime, false, false, &all_channels_, 0};
    if (t.cls == TaskClass::BE && iso.sm_partitioning)
      a.wide = std::none_of(active_.begin(), active_.end(),
                            [&](const ActiveKernel& o) { return cfg_.tasks[o.task].cls == TaskClass::LS; });
    if (iso.vram_coloring) {
      // LS tensors always live on the LS side; BE tensors only when the
      // kernel is memory-bound.
      if (t.cls == TaskClass::LS) {
        a.colored = true;
        a.channels = &binding_.ls_channels;
      } else if (classify_memory_bound(k, cfg_.partition.thres_dram)) {
        a.colored = true;
        a.channels = &binding_.be_channels;
        be_colored_channels_ = std::max<std::uint32_t>(be_colored_channels_, binding_.be_channels.size());
      }
    }
    a.share = channel_share(k, a.channels->size(), n_);
    req.in_kernel = true;
    active_.push_back(a);
  }

  void complete(std::size_t r) {
    const Request& req = requests_[r];
    const std::size_t task = req.task;
    latencies_[task].push_back((now_ - req.arrival) / 1e3);
    ++completed_[task];
    ++free_instances_[task];
    if (cfg_.tasks[task].cls == TaskClass::BE)
      start_request(task, now_);
    else
      dispatch(task);
  }

  void finish_kernels(std::size_t first) {
    active_[first].remaining = 0;
    std::vector<std::size_t> done;
    for (std::size_t k = 0; k < active_.size(); ++k)
      if (active_[k].remaining * active_[k].slowdown <= 1e-6) done.push_back(k);
    std::vector<std::size_t> reqs;
    for (auto it = done.rbegin(); it != done.rend(); ++it) {
      const ActiveKernel& a = active_[*it];
      reqs.push_back(a.request);
      ++kernel_done_[a.task];
      active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(*it));
    }
    std::reverse(reqs.begin(), reqs.end());
    for (std::size_t r : reqs) {
      requests_[r].in_kernel = false;
      ++requests_[r].next_kernel;
      try_advance(r);
    }
  }

  void advance(double t) {
    const double dt = t - now_;
    if (dt > 0) {
      double used = 0;
      for (auto& a : active_) {
        a.remaining = std::max(0.0, a.remaining - dt / a.slowdown);
        used += std::min<double>(a.grant, a.profile->sm_demand);
      }
      sm_integral_ += std::min<double>(used, cfg_.gpu.total_sms) / cfg_.gpu.total_sms * dt;
      load_integral_ += mean_load_ * dt;
    }
    now_ = t;
  }

  void refresh() {
    std::vector<SmRequest> sms;
    sms.reserve(active_.size());
    for (const auto& a : active_) sms.push_back({a.profile->sm_demand, cfg_.tasks[a.task].cls, a.wide});
    const auto grants = elastic_sm_assign(sms, cfg_.partition);
    std::vector<double> load(n_, 0.0);
    for (const auto& a : active_)
      for (ChannelId c : *a.channels) load[c] += a.share;
    mean_load_ = 0;
    for (double l : load) mean_load_ += l / n_;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      ActiveKernel& a = active_[k];
      a.grant = grants[k];
      double peak = 0;
      for (ChannelId c : *a.channels) peak = std::max(peak, load[c]);
      a.slowdown = sm_slowdown(a.profile->sm_demand, a.grant) * cfg_.contention.mem_slowdown(peak) *
                   (a.colored ? 1.0 + cfg_.spt_overhead : 1.0);
    }
  }

  Metrics collect() {
    Metrics m;
    const double secs = cfg_.duration_ns / 1e9;
    // LS requests still in flight count with their latency so far.
    for (const auto& req : requests_)
      if (!req.done && cfg_.tasks[req.task].cls == TaskClass::LS)
        latencies_[req.task].push_back((cfg_.duration_ns - req.arrival) / 1e3);
    std::vector<double> ls_all;
    for (std::size_t i = 0; i < cfg_.tasks.size(); ++i) {
      const auto& t = cfg_.tasks[i];
      TaskMetrics tm;
      tm.task = t.id;
      tm.name = t.name;
      tm.cls = t.cls;
      tm.completed = completed_[i];
      tm.p50_us = percentile(latencies_[i], 50);
      tm.p99_us = percentile(latencies_[i], 99);
      tm.throughput = static_cast<double>(completed_[i]) / secs;
      tm.kernel_completions = kernel_done_[i];
      if (t.cls == TaskClass::LS)
        ls_all.insert(ls_all.end(), latencies_[i].begin(), latencies_[i].end());
      else
        m.be_throughput += tm.throughput;
      m.tasks.push_back(tm);
    }
    m.ls_p50_us = percentile(ls_all, 50);
    m.ls_p99_us = percentile(ls_all, 99);
    m.sm_utilization = sm_integral_ / cfg_.duration_ns;
    m.mean_channel_load = load_integral_ / cfg_.duration_ns;
    m.be_colored_channels = be_colored_channels_;
    m.events = events_;
    return m;
  }

  const ScenarioConfig& cfg_;
  std::uint32_t n_;
  ChannelBinding binding_;
  std::vector<ChannelId> all_channels_;
  std::optional<PcieBus> bus_;
  std::vector<std::pair<double, std::size_t>> arrivals_;
  std::vector<Request> requests_;
  std::vector<ActiveKernel> active_;
  std::vector<std::uint32_t> free_instances_;
  std::vector<std::deque<std::size_t>> waiting_;
  std::vector<std::vector<double>> latencies_;
  std::vector<std::uint64_t> completed_;
  std::vector<std::uint64_t> kernel_done_;
  std::uint64_t next_copy_ = 0;
  double now_ = 0;
  double sm_integral_ = 0;
  double load_integral_ = 0;
  double mean_load_ = 0;
  std::uint32_t be_colored_channels_ = 0;
  std::uint64_t events_ = 0;
};

}  // namespace

Metrics run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  Simulator sim(cfg);
  return sim.run();
}

std::vector<TaskSpec> scenario1_tasks(const GpuSpec& gpu, ArrivalKind arrival, double ls_rate) {
  std::vector<TaskSpec> out;
  std::uint32_t id = 0;
  for (const auto& m : model_table()) {
    TaskSpec t;
    t.id = id++;
    t.name = m.name;
    t.cls = m.cls;
    t.kernels = model_kernels(m, gpu);
    t.model_size = static_cast<std::uint64_t>(m.size_mib * MiB);
    if (m.cls == TaskClass::LS) {
      t.arrival.kind = arrival;
      t.arrival.rate = ls_rate;
      t.instances = 4;
    } else {
      t.arrival.kind = ArrivalKind::ClosedLoop;
      t.instances = 1;
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TaskSpec> scenario2_tasks(const GpuSpec& gpu, double ls_nice, double be_nice, double ls_rate) {
  auto out = scenario1_tasks(gpu, ArrivalKind::BurstyTrace, ls_rate);
  for (auto& t : out) {
    t.load_weights = true;
    if (t.cls == TaskClass::LS) {
      t.instances = 2;
      t.arrival.scale = 2;
      t.nice = ls_nice;
    } else {
      t.nice = be_nice;
    }
  }
  return out;
}

std::vector<TaskSpec> ablation_tasks(const GpuSpec& gpu, const std::string& be_model, std::uint32_t be_instances,
                                     double ls_rate) {
  std::vector<TaskSpec> out;
  for (auto& t : scenario1_tasks(gpu, ArrivalKind::Poisson, ls_rate))
    if (t.cls == TaskClass::LS) out.push_back(std::move(t));
  const ModelProfile& m = find_model(be_model);
  if (m.cls != TaskClass::BE) throw std::invalid_argument("ablation co-runner '" + be_model + "' is not a BE model");
  TaskSpec be;
  be.id = static_cast<std::uint32_t>(out.size());
  be.name = m.name;
  be.cls = TaskClass::BE;
  be.kernels = model_kernels(m, gpu);
  be.model_size = static_cast<std::uint64_t>(m.size_mib * MiB);
  be.arrival.kind = ArrivalKind::ClosedLoop;
  be.instances = be_instances;
  out.push_back(std::move(be));
  return out;
}

ScenarioConfig default_scenario(const std::string& preset, int scenario) {
  ScenarioConfig cfg;
  cfg.gpu = make_preset(preset);
  cfg.partition.total_sms = cfg.gpu.total_sms;
  cfg.partition.sm_be = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::lround(cfg.gpu.total_sms * 0.375)));
  cfg.spt_overhead = default_spt_overhead(preset);
  if (scenario == 1)
    cfg.tasks = scenario1_tasks(cfg.gpu);
  else if (scenario == 2) {
    cfg.tasks = scenario2_tasks(cfg.gpu, 10000);
    cfg.bus.bandwidth_h2d = cfg.bus.bandwidth_d2h = kScenario2BusGiBs * 1073741824.0 / 1e9;
  }
  else if (scenario == 3)
    cfg.tasks = ablation_tasks(cfg.gpu);
  else
    throw std::invalid_argument("unknown scenario " + std::to_string(scenario));
  return cfg;
}

void to_json(nlohmann::json& j, const TaskSpec& t) {
  nlohmann::json ks = nlohmann::json::array();
  for (const auto& k : t.kernels)
    ks.push_back({{"id", k.id},
                  {"isolated_runtime_ns", k.isolated_runtime},
                  {"sm_demand", k.sm_demand},
                  {"dram_throughput", k.dram_throughput}});
  j = {{"id", t.id},
       {"name", t.name},
       {"class", class_name(t.cls)},
       {"kernels", ks},
       {"model_size", t.model_size},
       {"arrival", t.arrival},
       {"instances", t.instances},
       {"nice", t.nice},
       {"load_weights", t.load_weights}};
}

namespace {

TaskSpec task_from_json(const nlohmann::json& j, const GpuSpec& gpu, std::uint32_t default_id) {
  TaskSpec t;
  t.id = j.value("id", default_id);
  if (j.contains("model")) {
    const ModelProfile& m = find_model(j.at("model").get<std::string>());
    t.name = m.name;
    t.cls = m.cls;
    t.kernels = model_kernels(m, gpu);
    t.model_size = static_cast<std::uint64_t>(m.size_mib * MiB);
    t.arrival.kind = m.cls == TaskClass::LS ? ArrivalKind::Poisson : ArrivalKind::ClosedLoop;
  }
  if (j.contains("name")) j.at("name").get_to(t.name);
  if (j.contains("class")) t.cls = parse_class(j.at("class").get<std::string>());
  if (j.contains("kernels")) {
    t.kernels.clear();
    for (const auto& kj : j.at("kernels")) {
      KernelProfile k;
      k.id = kj.value("id", t.name + "." + std::to_string(t.kernels.size()));
      if (kj.contains("isolated_runtime_ns"))
        kj.at("isolated_runtime_ns").get_to(k.isolated_runtime);
      else
        k.isolated_runtime = kj.at("isolated_runtime_ms").get<double>() * 1e6;
      kj.at("sm_demand").get_to(k.sm_demand);
      kj.at("dram_throughput").get_to(k.dram_throughput);
      t.kernels.push_back(std::move(k));
    }
  }
  if (j.contains("model_size")) j.at("model_size").get_to(t.model_size);
  if (j.contains("model_size_mib")) t.model_size = static_cast<std::uint64_t>(j.at("model_size_mib").get<double>() * MiB);
  if (j.contains("arrival")) from_json(j.at("arrival"), t.arrival);
  if (j.contains("instances")) j.at("instances").get_to(t.instances);
  if (j.contains("nice")) j.at("nice").get_to(t.nice);
  if (j.contains("load_weights")) j.at("load_weights").get_to(t.load_weights);
  return t;
}

}  // namespace

ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  ScenarioConfig cfg;
  const auto& gj = j.at("gpu");
  const std::string preset = gj.value("preset", std::string("custom"));
  cfg.gpu = make_preset(preset);
  from_json(gj, cfg.gpu);
  cfg.partition.total_sms = cfg.gpu.total_sms;
  cfg.partition.sm_be = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::lround(cfg.gpu.total_sms * 0.375)));
  cfg.spt_overhead = default_spt_overhead(preset);
  const int scenario = j.value("scenario", 0);
  if (scenario == 1) {
    cfg.tasks = scenario1_tasks(cfg.gpu, parse_arrival_kind(j.value("ls_arrival", std::string("poisson"))),
                                j.value("ls_rate", 10.0));
  } else if (scenario == 2) {
    cfg.tasks = scenario2_tasks(cfg.gpu, j.value("ls_nice", 10000.0), j.value("be_nice", 100.0), j.value("ls_rate", 5.0));
    cfg.bus.bandwidth_h2d = cfg.bus.bandwidth_d2h = kScenario2BusGiBs * 1073741824.0 / 1e9;
  } else if (scenario == 3) {
    cfg.tasks = ablation_tasks(cfg.gpu, j.value("be_model", std::string("DenseNet161")), j.value("be_instances", 4u),
                               j.value("ls_rate", 10.0));
  } else if (scenario != 0) {
    throw std::invalid_argument("unknown scenario " + std::to_string(scenario));
  }
  if (j.contains("tasks")) {
    cfg.tasks.clear();
    std::uint32_t id = 0;
    for (const auto& tj : j.at("tasks")) cfg.tasks.push_back(task_from_json(tj, cfg.gpu, id++));
  }
  if (j.contains("partition")) from_json(j.at("partition"), cfg.partition);
  if (j.contains("contention")) {
    const auto& c = j.at("contention");
    if (c.contains("beta")) c.at("beta").get_to(cfg.contention.beta);
    if (c.contains("service_rate")) c.at("service_rate").get_to(cfg.contention.service_rate);
  }
  if (j.contains("pcie")) {
    const auto& p = j.at("pcie");
    if (p.contains("policy")) cfg.partition.isolation.pcie_policy = parse_policy(p.at("policy").get<std::string>());
    if (p.contains("cfs_period")) p.at("cfs_period").get_to(cfg.cfs_period);
    if (p.contains("setup_ns")) p.at("setup_ns").get_to(cfg.bus.setup_ns);
    if (p.contains("bandwidth_gib_s")) {
      const double bw = p.at("bandwidth_gib_s").get<double>() * 1073741824.0 / 1e9;
      cfg.bus.bandwidth_h2d = cfg.bus.bandwidth_d2h = bw;
    }
  }
  if (j.contains("spt_overhead") && !j.at("spt_overhead").is_null()) j.at("spt_overhead").get_to(cfg.spt_overhead);
  if (j.contains("duration_s")) cfg.duration_ns = j.at("duration_s").get<double>() * 1e9;
  if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
  return cfg;
}

nlohmann::json scenario_to_json(const ScenarioConfig& cfg) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : cfg.tasks) tasks.push_back(t);
  return {{"schema_version", 1},
          {"gpu", cfg.gpu},
          {"tasks", tasks},
          {"partition", cfg.partition},
          {"contention", {{"beta", cfg.contention.beta}, {"service_rate", cfg.contention.service_rate}}},
          {"pcie",
           {{"policy", to_string(cfg.partition.isolation.pcie_policy)},
            {"cfs_period", cfg.cfs_period},
            {"setup_ns", cfg.bus.setup_ns},
            {"bandwidth_gib_s", cfg.bus.bandwidth_h2d * 1e9 / 1073741824.0}}},
          {"spt_overhead", cfg.spt_overhead},
          {"duration_s", cfg.duration_ns / 1e9},
          {"seed", cfg.seed}};
}

double pair_slowdown(const KernelPair& pair, const GpuSpec& gpu, const PartitionConfig& p,
                     const ContentionModel& model, double spt_overhead) {
  const std::uint32_t n = gpu.num_channels;
  std::vector<ChannelId> all(n);
  for (ChannelId c = 0; c < n; ++c) all[c] = c;

  KernelPlacement alone{std::min<double>(pair.ls.sm_demand, p.total_sms), all, false};
  const double isolated = kernel_runtime(pair.ls, alone, std::vector<double>(n, 0.0), n, model, 0.0);

  const auto grants = elastic_sm_assign({{pair.ls.sm_demand, TaskClass::LS, false}, {pair.be.sm_demand, TaskClass::BE, false}}, p);
  KernelPlacement ls{grants[0], all, false};
  std::vector<ChannelId> be_channels = all;
  if (p.isolation.vram_coloring) {
    const auto b = bind_channels(n, p.ch_be);
    ls.channels = b.ls_channels;
    ls.colored = true;
    if (classify_memory_bound(pair.be, p.thres_dram)) be_channels = b.be_channels;
  }
  std::vector<double> background(n, 0.0);
  const double be_share = channel_share(pair.be, be_channels.size(), n);
  for (ChannelId c : be_channels) background[c] += be_share;
  return kernel_runtime(pair.ls, ls, background, n, model, spt_overhead) / isolated;
}

TuneResult grid_search_tune(const GpuSpec& gpu, const std::vector<KernelPair>& corpus, const GridOptions& opts) {
  if (corpus.size() < 2) throw std::invalid_argument("grid search needs at least 2 kernel pairs");
  if (opts.sm_step == 0) throw std::invalid_argument("sm_step must be positive");
  if (!(opts.max_increase >= 0)) throw std::invalid_argument("max_increase must be non-negative");
  for (const auto& pr : corpus) {
    pr.ls.validate();
    pr.be.validate();
  }
  const double limit = 1.0 + opts.max_increase;
  TuneResult res;
  bool found = false;
  std::vector<double> best_ratio(corpus.size(), kInf);
  PartitionConfig p;
  p.total_sms = gpu.total_sms;
  for (std::uint32_t sm = opts.sm_step; sm < gpu.total_sms; sm += opts.sm_step) {
    for (double ch : opts.ch_values) {
      try {
        bind_channels(gpu.num_channels, ch);
      } catch (const std::invalid_argument&) {
        continue;
      }
      for (double thres : opts.thres_values) {
        p.sm_be = sm;
        p.ch_be = ch;
        p.thres_dram = thres;
        ++res.evaluated;
        bool ok = true;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
          const double r = pair_slowdown(corpus[i], gpu, p, opts.contention, opts.spt_overhead);
          best_ratio[i] = std::min(best_ratio[i], r);
          if (r > limit + 1e-12) ok = false;
        }
        if (!ok) continue;
        ++res.feasible;
        const auto key = std::make_tuple(sm, ch, thres);
        const auto cur = std::make_tuple(res.partition.sm_be, res.partition.ch_be, res.partition.thres_dram);
        if (!found || key > cur) {
          res.partition = p;
          found = true;
        }
      }
    }
  }
  if (!found) {
    std::size_t worst = 0;
    for (std::size_t i = 1; i < corpus.size(); ++i)
      if (best_ratio[i] > best_ratio[worst]) worst = i;
    throw TuneError("no feasible partition: tightest constraint is pair " + std::to_string(worst) + " (" +
                    corpus[worst].ls.id + " with " + corpus[worst].be.id + "), best LS slowdown " +
                    fmt_double(best_ratio[worst], 4) + " > " + fmt_double(limit, 4));
  }
  return res;
}

std::vector<KernelPair> default_pair_corpus(const GpuSpec& gpu) {
  auto sms = [&](double v100_sms) {
    return static_cast<std::uint32_t>(std::clamp<long>(std::lround(v100_sms * gpu.total_sms / 80.0), 1, gpu.total_sms));
  };
  auto kernel = [&](const std::string& id, double ms, double v100_sms, double dram) {
    KernelProfile k;
    k.id = id;
    k.isolated_runtime = ms * 1e6;
    k.sm_demand = sms(v100_sms);
    k.dram_throughput = dram;
    return k;
  };
  return {
      // Wide compute kernel: bounds how many SMs BE may hold.
      {kernel("E.conv3x3", 0.6, 62, 0), kernel("I.conv1x1", 8.4, 60, 10)},
      // Memory-heavy LS kernel: bounds how few channels LS may keep.
      {kernel("D.expand", 0.5, 20, 70), kernel("J.dense_concat", 10.4, 19, 75)},
      // Moderately memory-bound BE kernel that must still be colored.
      {kernel("D.expand", 0.5, 20, 70), kernel("K.attention", 5.5, 25, 45)},
  };
}

}  // namespace chforge
