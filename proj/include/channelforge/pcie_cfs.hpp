#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace chforge {

inline constexpr std::uint32_t kPacketBytes = 1024;

enum class Direction { HtoD = 0, DtoH = 1 };
enum class PciePolicy { Cfs, FcfsBaymax, PreemptStreambox };
enum class TaskClass { LS, BE };

std::string to_string(Direction d);
std::string to_string(PciePolicy p);
PciePolicy parse_policy(const std::string& text);
Direction parse_direction(const std::string& text);

// Bandwidths in bytes per nanosecond, times in nanoseconds.
struct BusSpec {
  // 12 GiB/s per direction.
  double bandwidth_h2d = 12.0 * 1073741824.0 / 1e9;
  double bandwidth_d2h = 12.0 * 1073741824.0 / 1e9;
  // Paid once per copy: each request's share of a batch is one copy.
  double setup_ns = 1500.0;

  void validate() const;
  double bandwidth(Direction d) const { return d == Direction::HtoD ? bandwidth_h2d : bandwidth_d2h; }
};

struct CopyRequest {
  std::uint64_t id = 0;
  std::uint32_t task = 0;
  Direction dir = Direction::HtoD;
  std::uint64_t size = 0;
  double arrival = 0;
  // Opaque value handed back on completion.
  std::uint64_t token = 0;
};

struct Packet {
  std::uint64_t request = 0;
  std::uint32_t task = 0;
  std::uint64_t seq = 0;
  std::uint32_t size = 0;
};

std::vector<Packet> packetize(const CopyRequest& req);

// Min-vruntime packet scheduler for one bus direction.
class CfsScheduler {
 public:
  explicit CfsScheduler(std::uint32_t cfs_period, bool check_lag = false);

  void set_nice(std::uint32_t task, double nice);
  double nice(std::uint32_t task) const;

  void enqueue(const CopyRequest& req);
  // Up to cfs_period packets, one min-vruntime pick at a time.
  std::vector<Packet> schedule_round();

  bool backlogged() const { return !ready_.empty(); }
  std::uint64_t backlog_bytes() const { return backlog_bytes_; }
  double vruntime(std::uint32_t task) const;
  double vruntime_spread() const;
  double lag_bound() const;
  std::uint32_t cfs_period() const { return period_; }

 private:
  struct Segment {
    std::uint64_t request;
    std::uint64_t size;
    std::uint64_t sent;
  };
  struct Task {
    double nice = 1.0;
    double vruntime = 0;
    std::deque<Segment> queue;
  };

  void check_lag() const;

  std::uint32_t period_;
  bool check_lag_;
  std::map<std::uint32_t, Task> tasks_;
  std::set<std::pair<double, std::uint32_t>> ready_;
  std::uint64_t backlog_bytes_ = 0;
};

struct Completion {
  std::uint64_t request = 0;
  std::uint32_t task = 0;
  Direction dir = Direction::HtoD;
  std::uint64_t size = 0;
  double arrival = 0;
  double finish = 0;
  std::uint64_t token = 0;
};

// Full-duplex bus: each direction runs its own policy instance and serves one
// batch of packets at a time.
class PcieBus {
 public:
  PcieBus(BusSpec spec, PciePolicy policy, std::uint32_t cfs_period, bool check_lag = false);

  void set_task(std::uint32_t task, double nice, TaskClass cls);

  // A request arriving before the batch in flight started simply queues.
  void submit(const CopyRequest& req);
  // Finish time of the earliest batch in flight, +inf when idle.
  double next_event_time() const;
  // Completes every batch ending at or before t and starts follow-up batches.
  std::vector<Completion> advance_until(double t);

  const BusSpec& spec() const { return spec_; }
  PciePolicy policy() const { return policy_; }
  std::uint64_t delivered_bytes(std::uint32_t task, Direction d) const;
  double busy_time(Direction d) const { return dirs_[static_cast<int>(d)].busy_total; }
  std::uint64_t batches() const { return batches_; }
  double max_vruntime_spread() const { return max_spread_; }

 private:
  struct Run {
    std::uint64_t request;
    std::uint32_t task;
    std::uint64_t bytes;
    double begin;  // after setup
    double end;
  };
  struct Pending {
    CopyRequest req;
    std::uint64_t sent = 0;
  };
  struct DirState {
    std::optional<CfsScheduler> cfs;
    // FIFO (FCFS) or per-class FIFOs (strict priority).
    std::deque<std::uint64_t> fifo;
    std::deque<std::uint64_t> ls_fifo;
    std::deque<std::uint64_t> be_fifo;
    bool busy = false;
    double start = 0;
    double end = 0;
    std::vector<Run> runs;
    double busy_total = 0;
  };

  void start_batch(Direction d, double t);
  void finish_batch(Direction d, std::vector<Completion>& out);
  void preempt(Direction d, double t);
  TaskClass class_of(std::uint32_t task) const;

  BusSpec spec_;
  PciePolicy policy_;
  std::uint32_t period_;
  DirState dirs_[2];
  std::map<std::uint64_t, Pending> pending_;
  std::map<std::uint32_t, TaskClass> classes_;
  std::map<std::uint32_t, double> nices_;
  std::map<std::pair<std::uint32_t, int>, std::uint64_t> delivered_;
  std::uint64_t batches_ = 0;
  double max_spread_ = 0;
};

struct TransferTaskMetrics {
  std::uint32_t task = 0;
  Direction dir = Direction::HtoD;
  std::uint64_t requests = 0;
  double p50_us = 0;
  double p99_us = 0;
  double throughput_bytes_per_s = 0;
  std::uint64_t bytes = 0;
};

struct TransferMetrics {
  std::vector<TransferTaskMetrics> tasks;
  std::uint64_t total_bytes = 0;
  double horizon_ns = 0;

  const TransferTaskMetrics& task(std::uint32_t id, Direction dir = Direction::HtoD) const;
  void write_csv(std::ostream& out) const;
};

struct TaskSetting {
  std::uint32_t task = 0;
  double nice = 1.0;
  TaskClass cls = TaskClass::BE;
};

// A source that keeps `depth` requests of `size` bytes outstanding.
struct ClosedLoopSource {
  std::uint32_t task = 0;
  Direction dir = Direction::HtoD;
  std::uint64_t size = 0;
  std::uint32_t depth = 1;
  double start = 0;
};

struct BusConfig {
  BusSpec bus;
  PciePolicy policy = PciePolicy::Cfs;
  std::uint32_t cfs_period = 2048;
  bool check_lag = false;
  std::vector<TaskSetting> tasks;
};

TransferMetrics run_policy(const BusConfig& cfg, const std::vector<CopyRequest>& workload, double horizon_ns,
                           const std::vector<ClosedLoopSource>& closed = {});

// Bytes per nanosecond moved by `probe` under cfs_period = period.
double probe_throughput(const BusConfig& cfg, const std::vector<CopyRequest>& probe, std::uint32_t period);

struct AutotuneResult {
  std::uint32_t period = 1;
  double peak_throughput = 0;
  double throughput = 0;
  std::vector<std::pair<std::uint32_t, double>> evaluated;
};

// Smallest power-of-two period in [1, 2^16] reaching (1 - eps) of the peak.
AutotuneResult autotune_cfs_period(const BusConfig& cfg, const std::vector<CopyRequest>& probe, double eps = 0.01);

// A single request large enough to keep the bus busy.
std::vector<CopyRequest> default_probe_workload(std::uint64_t bytes = 256ull << 20);

struct BenchScenario {
  double ls_qps = 100;
  std::uint64_t ls_size = 4096;
  double ls_nice = 10000;
  std::uint64_t be_size = 40ull << 20;
  std::uint32_t be_depth = 8;
  double be_nice = 1;
  Direction dir = Direction::HtoD;
  double horizon_ns = 1e9;
  std::uint64_t seed = 1;
};

// LS Poisson arrivals (task 0) against a closed-loop BE stream (task 1).
TransferMetrics run_bench(const BusConfig& base, const BenchScenario& sc);

// Wall time one full batch of cfs_period packets occupies a direction.
double batch_time_ns(const BusSpec& bus, std::uint32_t cfs_period, Direction d = Direction::HtoD);

}  // namespace chforge
