#include "channelforge/pcie_cfs.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <queue>
#include <random>
#include <stdexcept>
#include <tuple>

#include "channelforge/util.hpp"
#include "channelforge/workload.hpp"

namespace chforge {

std::string to_string(Direction d) { return d == Direction::HtoD ? "h2d" : "d2h"; }

std::string to_string(PciePolicy p) {
  switch (p) {
    case PciePolicy::Cfs:
      return "cfs";
    case PciePolicy::FcfsBaymax:
      return "fcfs_baymax";
    default:
      return "preempt_streambox";
  }
}

PciePolicy parse_policy(const std::string& text) {
  if (text == "cfs") return PciePolicy::Cfs;
  if (text == "fcfs_baymax" || text == "baymax" || text == "fcfs") return PciePolicy::FcfsBaymax;
  if (text == "preempt_streambox" || text == "streambox" || text == "preempt") return PciePolicy::PreemptStreambox;
  throw std::invalid_argument("unknown pcie policy '" + text + "'");
}

Direction parse_direction(const std::string& text) {
  if (text == "h2d" || text == "HtoD") return Direction::HtoD;
  if (text == "d2h" || text == "DtoH") return Direction::DtoH;
  throw std::invalid_argument("unknown direction '" + text + "'");
}

void BusSpec::validate() const {
  if (!(bandwidth_h2d > 0) || !(bandwidth_d2h > 0)) throw std::invalid_argument("bus bandwidth must be positive");
  if (!(setup_ns >= 0)) throw std::invalid_argument("bus setup cost must be non-negative");
}

std::vector<Packet> packetize(const CopyRequest& req) {
  if (req.size == 0) throw std::invalid_argument("copy request " + std::to_string(req.id) + " has zero size");
  std::vector<Packet> out;
  out.reserve((req.size + kPacketBytes - 1) / kPacketBytes);
  for (std::uint64_t off = 0, seq = 0; off < req.size; off += kPacketBytes, ++seq)
    out.push_back({req.id, req.task, seq, static_cast<std::uint32_t>(std::min<std::uint64_t>(kPacketBytes, req.size - off))});
  return out;
}

CfsScheduler::CfsScheduler(std::uint32_t cfs_period, bool check_lag) : period_(cfs_period), check_lag_(check_lag) {
  if (cfs_period == 0) throw std::invalid_argument("cfs_period must be at least 1");
}

void CfsScheduler::set_nice(std::uint32_t task, double nice) {
  if (!(nice > 0)) throw std::invalid_argument("nice of task " + std::to_string(task) + " must be positive");
  Task& t = tasks_[task];
  if (!t.queue.empty()) throw std::logic_error("cannot change nice of a backlogged task");
  t.nice = nice;
}

double CfsScheduler::nice(std::uint32_t task) const {
  auto it = tasks_.find(task);
  return it == tasks_.end() ? 1.0 : it->second.nice;
}

void CfsScheduler::enqueue(const CopyRequest& req) {
  if (req.size == 0) throw std::invalid_argument("copy request " + std::to_string(req.id) + " has zero size");
  Task& t = tasks_[req.task];
  if (t.queue.empty()) {
    t.vruntime = ready_.empty() ? 0.0 : ready_.begin()->first;
    ready_.insert({t.vruntime, req.task});
  }
  t.queue.push_back({req.id, req.size, 0});
  backlog_bytes_ += req.size;
}

std::vector<Packet> CfsScheduler::schedule_round() {
  std::vector<Packet> out;
  std::uint32_t budget = period_;
  while (budget > 0 && !ready_.empty()) {
    const std::uint32_t id = ready_.begin()->second;
    ready_.erase(ready_.begin());
    Task& t = tasks_[id];
    while (budget > 0) {
      Segment& s = t.queue.front();
      const auto size = static_cast<std::uint32_t>(std::min<std::uint64_t>(kPacketBytes, s.size - s.sent));
      out.push_back({s.request, id, s.sent / kPacketBytes, size});
      s.sent += size;
      backlog_bytes_ -= size;
      --budget;
      t.vruntime += size / t.nice;
      if (s.sent == s.size) t.queue.pop_front();
      if (t.queue.empty()) break;
      if (!ready_.empty()) {
        const auto& [v, other] = *ready_.begin();
        if (t.vruntime > v || (t.vruntime == v && id > other)) break;
      }
    }
    if (!t.queue.empty()) ready_.insert({t.vruntime, id});
    if (check_lag_) check_lag();
  }
  return out;
}

double CfsScheduler::vruntime(std::uint32_t task) const {
  auto it = tasks_.find(task);
  return it == tasks_.end() ? 0.0 : it->second.vruntime;
}

double CfsScheduler::vruntime_spread() const {
  if (ready_.empty()) return 0;
  return ready_.rbegin()->first - ready_.begin()->first;
}

double CfsScheduler::lag_bound() const {
  double min_nice = 1.0;
  bool any = false;
  for (const auto& [id, t] : tasks_) {
    if (!any || t.nice < min_nice) min_nice = t.nice;
    any = true;
  }
  return kPacketBytes / min_nice * period_;
}

void CfsScheduler::check_lag() const {
  const double spread = vruntime_spread();
  if (spread > lag_bound() * (1 + 1e-12))
    throw std::logic_error("vruntime spread " + fmt_double(spread) + " exceeds lag bound " + fmt_double(lag_bound()));
}

PcieBus::PcieBus(BusSpec spec, PciePolicy policy, std::uint32_t cfs_period, bool check_lag)
    : spec_(spec), policy_(policy), period_(cfs_period) {
  spec_.validate();
  if (cfs_period == 0) throw std::invalid_argument("cfs_period must be at least 1");
  if (policy_ == PciePolicy::Cfs)
    for (auto& d : dirs_) d.cfs.emplace(cfs_period, check_lag);
}

void PcieBus::set_task(std::uint32_t task, double nice, TaskClass cls) {
  if (!(nice > 0)) throw std::invalid_argument("nice of task " + std::to_string(task) + " must be positive");
  nices_[task] = nice;
  classes_[task] = cls;
  if (policy_ == PciePolicy::Cfs)
    for (auto& d : dirs_) d.cfs->set_nice(task, nice);
}

TaskClass PcieBus::class_of(std::uint32_t task) const {
  auto it = classes_.find(task);
  return it == classes_.end() ? TaskClass::BE : it->second;
}

void PcieBus::submit(const CopyRequest& req) {
  if (req.size == 0) throw std::invalid_argument("copy request " + std::to_string(req.id) + " has zero size");
  if (!pending_.emplace(req.id, Pending{req, 0}).second)
    throw std::invalid_argument("duplicate copy request id " + std::to_string(req.id));
  const auto d = req.dir;
  DirState& st = dirs_[static_cast<int>(d)];
  switch (policy_) {
    case PciePolicy::Cfs:
      st.cfs->enqueue(req);
      break;
    case PciePolicy::FcfsBaymax:
      st.fifo.push_back(req.id);
      break;
    case PciePolicy::PreemptStreambox:
      (class_of(req.task) == TaskClass::LS ? st.ls_fifo : st.be_fifo).push_back(req.id);
      break;
  }
  if (!st.busy)
    start_batch(d, std::max(req.arrival, st.end));
  else if (policy_ == PciePolicy::PreemptStreambox && class_of(req.task) == TaskClass::LS)
    preempt(d, req.arrival);
}

void PcieBus::start_batch(Direction d, double t) {
  DirState& st = dirs_[static_cast<int>(d)];
  st.runs.clear();
  auto add_run = [&](std::uint64_t request, std::uint32_t task, std::uint64_t bytes) {
    if (!st.runs.empty() && st.runs.back().request == request) {
      st.runs.back().bytes += bytes;
      return;
    }
    st.runs.push_back({request, task, bytes, 0, 0});
  };

  if (policy_ == PciePolicy::Cfs) {
    // One copy per request per round, in order of first pick.
    std::map<std::uint64_t, std::size_t> slot;
    for (const Packet& p : st.cfs->schedule_round()) {
      auto [it, fresh] = slot.emplace(p.request, st.runs.size());
      if (fresh)
        st.runs.push_back({p.request, p.task, p.size, 0, 0});
      else
        st.runs[it->second].bytes += p.size;
    }
    max_spread_ = std::max(max_spread_, st.cfs->vruntime_spread());
  } else if (policy_ == PciePolicy::FcfsBaymax) {
    if (!st.fifo.empty()) {
      const Pending& p = pending_.at(st.fifo.front());
      add_run(p.req.id, p.req.task, p.req.size - p.sent);
    }
  } else {
    std::uint64_t budget = period_;
    for (auto* q : {&st.ls_fifo, &st.be_fifo}) {
      for (std::uint64_t id : *q) {
        if (budget == 0) break;
        const Pending& p = pending_.at(id);
        const std::uint64_t left = p.req.size - p.sent;
        const std::uint64_t packets = std::min((left + kPacketBytes - 1) / kPacketBytes, budget);
        add_run(id, p.req.task, std::min(left, packets * kPacketBytes));
        budget -= packets;
      }
    }
  }

  if (st.runs.empty()) {
    st.busy = false;
    return;
  }
  const double bw = spec_.bandwidth(d);
  double cur = t;
  for (Run& r : st.runs) {
    cur += spec_.setup_ns;
    r.begin = cur;
    cur += static_cast<double>(r.bytes) / bw;
    r.end = cur;
  }
  st.busy = true;
  st.start = t;
  st.end = cur;
}

void PcieBus::preempt(Direction d, double t) {
  DirState& st = dirs_[static_cast<int>(d)];
  t = std::max(t, st.start);
  const double bw = spec_.bandwidth(d);
  for (std::size_t i = 0; i < st.runs.size(); ++i) {
    Run& r = st.runs[i];
    if (r.end <= t || class_of(r.task) == TaskClass::LS) continue;
    double cut;
    std::size_t keep;
    if (t <= r.begin - spec_.setup_ns) {
      keep = i;
      cut = i == 0 ? st.start : st.runs[i - 1].end;
    } else if (t < r.begin) {
      // Abandon the setup in progress.
      keep = i;
      cut = t;
    } else {
      const auto packets = static_cast<std::uint64_t>(std::ceil((t - r.begin) * bw / kPacketBytes - 1e-9));
      const std::uint64_t done = std::min(r.bytes, packets * kPacketBytes);
      if (done == 0) {
        keep = i;
        cut = t;
      } else {
        r.bytes = done;
        r.end = r.begin + static_cast<double>(done) / bw;
        keep = i + 1;
        cut = r.end;
      }
    }
    st.runs.resize(keep);
    st.end = cut;
    return;
  }
}

void PcieBus::finish_batch(Direction d, std::vector<Completion>& out) {
  DirState& st = dirs_[static_cast<int>(d)];
  for (const Run& r : st.runs) {
    auto it = pending_.find(r.request);
    Pending& p = it->second;
    p.sent += r.bytes;
    delivered_[{r.task, static_cast<int>(d)}] += r.bytes;
    if (p.sent < p.req.size) continue;
    out.push_back({p.req.id, p.req.task, d, p.req.size, p.req.arrival, r.end, p.req.token});
    for (auto* q : {&st.fifo, &st.ls_fifo, &st.be_fifo}) {
      auto pos = std::find(q->begin(), q->end(), r.request);
      if (pos != q->end()) q->erase(pos);
    }
    pending_.erase(it);
  }
  st.busy_total += st.end - st.start;
  st.busy = false;
  st.runs.clear();
  ++batches_;
  start_batch(d, st.end);
}

double PcieBus::next_event_time() const {
  double t = std::numeric_limits<double>::infinity();
  for (const auto& st : dirs_)
    if (st.busy) t = std::min(t, st.end);
  return t;
}

std::vector<Completion> PcieBus::advance_until(double t) {
  std::vector<Completion> out;
  for (;;) {
    int best = -1;
    for (int i = 0; i < 2; ++i)
      if (dirs_[i].busy && dirs_[i].end <= t && (best < 0 || dirs_[i].end < dirs_[best].end)) best = i;
    if (best < 0) break;
    finish_batch(static_cast<Direction>(best), out);
  }
  std::stable_sort(out.begin(), out.end(), [](const Completion& a, const Completion& b) { return a.finish < b.finish; });
  return out;
}

std::uint64_t PcieBus::delivered_bytes(std::uint32_t task, Direction d) const {
  auto it = delivered_.find({task, static_cast<int>(d)});
  return it == delivered_.end() ? 0 : it->second;
}

const TransferTaskMetrics& TransferMetrics::task(std::uint32_t id, Direction dir) const {
  for (const auto& t : tasks)
    if (t.task == id && t.dir == dir) return t;
  throw std::out_of_range("no metrics for task " + std::to_string(id) + " direction " + to_string(dir));
}

void TransferMetrics::write_csv(std::ostream& out) const {
  out << "task_id,direction,requests,p50_us,p99_us,throughput_bytes_per_s\r\n";
  for (const auto& t : tasks)
    out << t.task << ',' << to_string(t.dir) << ',' << t.requests << ',' << fmt_double(t.p50_us) << ','
        << fmt_double(t.p99_us) << ',' << fmt_double(t.throughput_bytes_per_s) << "\r\n";
}

namespace {

PcieBus make_bus(const BusConfig& cfg, std::uint32_t period) {
  PcieBus bus(cfg.bus, cfg.policy, period, cfg.check_lag);
  for (const auto& t : cfg.tasks) bus.set_task(t.task, t.nice, t.cls);
  return bus;
}

}  // namespace

TransferMetrics run_policy(const BusConfig& cfg, const std::vector<CopyRequest>& workload, double horizon_ns,
                           const std::vector<ClosedLoopSource>& closed) {
  for (std::size_t i = 1; i < workload.size(); ++i)
    if (workload[i].arrival < workload[i - 1].arrival)
      throw std::invalid_argument("workload is not sorted by arrival time (index " + std::to_string(i) + ")");
  if (!(horizon_ns > 0)) throw std::invalid_argument("horizon must be positive");

  PcieBus bus = make_bus(cfg, cfg.cfs_period);
  std::uint64_t next_id = 0;
  for (const auto& r : workload) next_id = std::max(next_id, r.id + 1);

  // Closed-loop reissues, ordered by time then by insertion.
  using Reissue = std::tuple<double, std::uint64_t, std::size_t>;
  std::priority_queue<Reissue, std::vector<Reissue>, std::greater<>> reissue;
  std::uint64_t reissue_seq = 0;
  for (std::size_t s = 0; s < closed.size(); ++s) {
    if (closed[s].size == 0 || closed[s].depth == 0)
      throw std::invalid_argument("closed-loop source needs positive size and depth");
    for (std::uint32_t k = 0; k < closed[s].depth; ++k) reissue.emplace(closed[s].start, reissue_seq++, s);
  }

  std::map<std::pair<std::uint32_t, int>, std::vector<double>> latencies;
  std::set<std::pair<std::uint32_t, int>> seen;
  for (const auto& r : workload) seen.insert({r.task, static_cast<int>(r.dir)});
  for (const auto& s : closed) seen.insert({s.task, static_cast<int>(s.dir)});

  std::size_t idx = 0;
  for (;;) {
    const double t_open = idx < workload.size() ? workload[idx].arrival : std::numeric_limits<double>::infinity();
    const double t_closed = reissue.empty() ? std::numeric_limits<double>::infinity() : std::get<0>(reissue.top());
    const double t_arr = std::min(t_open, t_closed);
    const double t_bus = bus.next_event_time();
    if (std::min(t_arr, t_bus) > horizon_ns) break;
    if (t_bus <= t_arr) {
      for (const Completion& c : bus.advance_until(t_bus)) {
        latencies[{c.task, static_cast<int>(c.dir)}].push_back((c.finish - c.arrival) / 1e3);
        if (c.token > 0) reissue.emplace(c.finish, reissue_seq++, static_cast<std::size_t>(c.token - 1));
      }
    } else if (t_open <= t_closed) {
      CopyRequest r = workload[idx++];
      r.token = 0;
      bus.submit(r);
    } else {
      const auto [t, seq, s] = reissue.top();
      reissue.pop();
      const ClosedLoopSource& src = closed[s];
      bus.submit({next_id++, src.task, src.dir, src.size, t, s + 1});
    }
  }

  TransferMetrics m;
  m.horizon_ns = horizon_ns;
  for (const auto& [task, dir] : seen) {
    TransferTaskMetrics t;
    t.task = task;
    t.dir = static_cast<Direction>(dir);
    auto& lat = latencies[{task, dir}];
    t.requests = lat.size();
    if (!lat.empty()) {
      t.p50_us = percentile(lat, 50);
      t.p99_us = percentile(lat, 99);
    }
    m.tasks.push_back(t);
  }
  for (auto& t : m.tasks) {
    t.bytes = bus.delivered_bytes(t.task, t.dir);
    t.throughput_bytes_per_s = static_cast<double>(t.bytes) / (horizon_ns / 1e9);
    m.total_bytes += t.bytes;
  }
  return m;
}

double probe_throughput(const BusConfig& cfg, const std::vector<CopyRequest>& probe, std::uint32_t period) {
  if (probe.empty()) throw std::invalid_argument("probe workload is empty");
  PcieBus bus = make_bus(cfg, period);
  std::uint64_t bytes = 0;
  double first = probe.front().arrival;
  for (const auto& r : probe) {
    first = std::min(first, r.arrival);
    bytes += r.size;
  }
  std::vector<CopyRequest> sorted = probe;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.arrival < b.arrival; });
  double last = first;
  std::size_t idx = 0;
  while (idx < sorted.size() || bus.next_event_time() < std::numeric_limits<double>::infinity()) {
    const double t_arr = idx < sorted.size() ? sorted[idx].arrival : std::numeric_limits<double>::infinity();
    const double t_bus = bus.next_event_time();
    if (t_bus <= t_arr) {
      for (const auto& c : bus.advance_until(t_bus)) last = std::max(last, c.finish);
    } else {
      bus.submit(sorted[idx++]);
    }
  }
  return static_cast<double>(bytes) / (last - first);
}

AutotuneResult autotune_cfs_period(const BusConfig& cfg, const std::vector<CopyRequest>& probe, double eps) {
  if (!(eps > 0 && eps < 1)) throw std::invalid_argument("autotune eps must lie in (0, 1)");
  BusConfig c = cfg;
  c.policy = PciePolicy::Cfs;
  AutotuneResult res;
  auto eval = [&](unsigned e) {
    const std::uint32_t p = 1u << e;
    for (const auto& [q, thr] : res.evaluated)
      if (q == p) return thr;
    const double thr = probe_throughput(c, probe, p);
    res.evaluated.emplace_back(p, thr);
    return thr;
  };
  res.peak_throughput = eval(16);
  double bw = 0;
  for (const auto& r : probe) bw = std::max(bw, cfg.bus.bandwidth(r.dir));
  if (res.peak_throughput < 0.99 * bw)
    throw std::runtime_error("probe underutilizes bus: peak " + fmt_double(res.peak_throughput) + " B/ns of " +
                             fmt_double(bw) + " B/ns");
  unsigned lo = 0, hi = 16;
  while (lo < hi) {
    const unsigned mid = (lo + hi) / 2;
    if (eval(mid) >= (1 - eps) * res.peak_throughput)
      hi = mid;
    else
      lo = mid + 1;
  }
  res.period = 1u << lo;
  res.throughput = eval(lo);
  return res;
}

std::vector<CopyRequest> default_probe_workload(std::uint64_t bytes) {
  if (bytes == 0) throw std::invalid_argument("probe size must be positive");
  return {CopyRequest{0, 0, Direction::HtoD, bytes, 0.0, 0}};
}

TransferMetrics run_bench(const BusConfig& base, const BenchScenario& sc) {
  BusConfig cfg = base;
  cfg.tasks = {{0, sc.ls_nice, TaskClass::LS}, {1, sc.be_nice, TaskClass::BE}};
  ArrivalParams ap;
  ap.kind = ArrivalKind::Poisson;
  ap.rate = sc.ls_qps;
  std::vector<CopyRequest> ls;
  std::uint64_t id = 0;
  for (double t : gen_workload(ap, sc.horizon_ns, sc.seed)) ls.push_back({id++, 0, sc.dir, sc.ls_size, t, 0});
  ClosedLoopSource be{1, sc.dir, sc.be_size, sc.be_depth, 0.0};
  return run_policy(cfg, ls, sc.horizon_ns, {be});
}

double batch_time_ns(const BusSpec& bus, std::uint32_t cfs_period, Direction d) {
  return bus.setup_ns + static_cast<double>(cfs_period) * kPacketBytes / bus.bandwidth(d);
}

}  // namespace chforge
