#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "channelforge/pcie_cfs.hpp"

using namespace chforge;

namespace {

CopyRequest req(std::uint64_t id, std::uint32_t task, std::uint64_t size, double arrival = 0) {
  return {id, task, Direction::HtoD, size, arrival, 0};
}

// One request alone on the bus: every round is a single run.
double single_request_throughput(const BusSpec& bus, std::uint64_t bytes, std::uint32_t period) {
  const std::uint64_t round_bytes = std::uint64_t{period} * kPacketBytes;
  const double rounds = std::ceil(static_cast<double>(bytes) / static_cast<double>(round_bytes));
  return static_cast<double>(bytes) / (rounds * bus.setup_ns + static_cast<double>(bytes) / bus.bandwidth_h2d);
}

}  // namespace

TEST_CASE("packetize") {
  auto p = packetize(req(1, 0, 4096));
  REQUIRE(p.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p[i].size == 1024);
    CHECK(p[i].seq == i);
  }
  p = packetize(req(2, 0, 1500));
  REQUIRE(p.size() == 2);
  CHECK(p[0].size == 1024);
  CHECK(p[1].size == 476);
  CHECK_THROWS_AS(packetize(req(3, 0, 0)), std::invalid_argument);
}

TEST_CASE("joining task starts at the minimum vruntime") {
  CfsScheduler t(1);
  // One packet adds 1 to task 0 and 9 to task 1.
  t.set_nice(0, 1024);
  t.set_nice(1, 1024.0 / 9);
  t.enqueue(req(0, 0, 64 * 1024));
  t.enqueue(req(1, 1, 64 * 1024));
  for (int i = 0; i < 6; ++i) t.schedule_round();
  CHECK(t.vruntime(0) == doctest::Approx(5.0));
  CHECK(t.vruntime(1) == doctest::Approx(9.0));
  t.enqueue(req(2, 2, 1024));
  CHECK(t.vruntime(2) == doctest::Approx(5.0));

  CfsScheduler idle(4);
  idle.enqueue(req(0, 3, 1024));
  CHECK(idle.vruntime(3) == 0.0);
}

TEST_CASE("equal nice alternates packets") {
  CfsScheduler s(8);
  s.enqueue(req(0, 0, 8 * 1024));
  s.enqueue(req(1, 1, 8 * 1024));
  const auto round = s.schedule_round();
  REQUIRE(round.size() == 8);
  for (std::size_t i = 0; i < round.size(); ++i) CHECK(round[i].task == i % 2);
}

TEST_CASE("bandwidth share follows nice") {
  CfsScheduler s(64, true);
  s.set_nice(0, 1);
  s.set_nice(1, 3);
  s.enqueue(req(0, 0, 64ull << 20));
  s.enqueue(req(1, 1, 64ull << 20));
  std::map<std::uint32_t, std::uint64_t> bytes;
  for (int r = 0; r < 200; ++r)
    for (const auto& p : s.schedule_round()) bytes[p.task] += p.size;
  const double share = static_cast<double>(bytes[1]) / static_cast<double>(bytes[0] + bytes[1]);
  CHECK(share == doctest::Approx(0.75).epsilon(0.01));
  CHECK(s.vruntime_spread() <= s.lag_bound());
}

TEST_CASE("lag stays bounded under random arrivals") {
  BusConfig cfg;
  cfg.cfs_period = 16;
  cfg.check_lag = true;
  cfg.tasks = {{0, 1, TaskClass::BE}, {1, 2, TaskClass::BE}, {2, 7, TaskClass::LS}};
  std::vector<CopyRequest> w;
  std::uint64_t id = 0;
  double t = 0;
  for (int i = 0; i < 400; ++i) {
    t += 2000.0 * static_cast<double>(i % 7);
    w.push_back({id++, static_cast<std::uint32_t>(i % 3), Direction::HtoD, 1000 + 3777ull * (i % 11), t, 0});
  }
  CHECK_NOTHROW(run_policy(cfg, w, 1e9));
}

TEST_CASE("single task approaches line rate") {
  BusConfig cfg;
  const double thr = probe_throughput(cfg, default_probe_workload(), 2048);
  CHECK(thr == doctest::Approx(single_request_throughput(cfg.bus, 256ull << 20, 2048)));
  CHECK(thr >= 0.99 * cfg.bus.bandwidth_h2d);
}

TEST_CASE("autotune") {
  BusConfig cfg;
  const auto probe = default_probe_workload();

  SUBCASE("default bus") {
    const auto res = autotune_cfs_period(cfg, probe);
    // Exhaustive oracle over every candidate exponent.
    const double peak = single_request_throughput(cfg.bus, 256ull << 20, 1u << 16);
    std::uint32_t expect = 0;
    for (unsigned e = 0; e <= 16 && expect == 0; ++e)
      if (single_request_throughput(cfg.bus, 256ull << 20, 1u << e) >= 0.99 * peak) expect = 1u << e;
    CHECK(res.period == expect);
    CHECK(res.period == 2048);
    CHECK(res.evaluated.size() <= 6);
  }
  SUBCASE("zero setup") {
    cfg.bus.setup_ns = 0;
    CHECK(autotune_cfs_period(cfg, probe).period == 1);
  }
  SUBCASE("doubling setup never shrinks the period") {
    std::uint32_t prev = 0;
    for (double setup : {100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0}) {
      cfg.bus.setup_ns = setup;
      const auto p = autotune_cfs_period(cfg, probe).period;
      CHECK(p >= prev);
      prev = p;
    }
  }
  SUBCASE("tiny probe fails") {
    CHECK_THROWS_WITH_AS(autotune_cfs_period(cfg, default_probe_workload(4096)), doctest::Contains("underutilizes"),
                         std::runtime_error);
  }
}

TEST_CASE("batch time") {
  BusSpec bus;
  CHECK(batch_time_ns(bus, 2048) == doctest::Approx(1500 + 2048.0 * 1024 / bus.bandwidth_h2d));
}

TEST_CASE("fcfs serves whole requests") {
  BusConfig cfg;
  cfg.policy = PciePolicy::FcfsBaymax;
  std::vector<CopyRequest> w{req(0, 1, 8ull << 20, 0), req(1, 0, 4096, 10)};
  const auto m = run_policy(cfg, w, 1e8);
  const double big = 1500 + static_cast<double>(8ull << 20) / cfg.bus.bandwidth_h2d;
  const double small = 1500 + 4096 / cfg.bus.bandwidth_h2d;
  CHECK(m.task(0).p50_us == doctest::Approx((big + small - 10) / 1e3));
}

TEST_CASE("preemptive baseline truncates best-effort batches") {
  BusConfig cfg;
  cfg.policy = PciePolicy::PreemptStreambox;
  cfg.cfs_period = 4096;
  cfg.tasks = {{0, 1, TaskClass::LS}, {1, 1, TaskClass::BE}};
  std::vector<CopyRequest> w{req(0, 1, 8ull << 20, 0), req(1, 0, 4096, 50000)};
  const auto m = run_policy(cfg, w, 1e8);
  const double bw = cfg.bus.bandwidth_h2d;
  const double sent = std::ceil((50000 - 1500) * bw / 1024) * 1024;
  const double cut = 1500 + sent / bw;
  CHECK(m.task(0).p50_us == doctest::Approx((cut + 1500 + 4096 / bw - 50000) / 1e3));
  CHECK(m.task(1).bytes == 8ull << 20);
}

TEST_CASE("unsorted workload is rejected") {
  BusConfig cfg;
  std::vector<CopyRequest> w{req(0, 0, 4096, 10), req(1, 0, 4096, 5)};
  CHECK_THROWS_AS(run_policy(cfg, w, 1e6), std::invalid_argument);
}

TEST_CASE("full duplex directions are independent") {
  BusConfig cfg;
  std::vector<CopyRequest> w{{0, 0, Direction::HtoD, 1 << 20, 0, 0}, {1, 1, Direction::DtoH, 1 << 20, 0, 0}};
  const auto m = run_policy(cfg, w, 1e8);
  CHECK(m.task(0, Direction::HtoD).p50_us == doctest::Approx(m.task(1, Direction::DtoH).p50_us));
}

TEST_CASE("bench policy ordering") {
  BenchScenario sc;
  std::map<PciePolicy, TransferMetrics> res;
  for (auto p : {PciePolicy::Cfs, PciePolicy::FcfsBaymax, PciePolicy::PreemptStreambox}) {
    BusConfig cfg;
    cfg.policy = p;
    res[p] = run_bench(cfg, sc);
  }
  const auto& cfs = res[PciePolicy::Cfs];
  const auto& fcfs = res[PciePolicy::FcfsBaymax];
  const auto& sb = res[PciePolicy::PreemptStreambox];
  MESSAGE("ls p99 us cfs=" << cfs.task(0).p99_us << " fcfs=" << fcfs.task(0).p99_us << " sb=" << sb.task(0).p99_us);
  MESSAGE("be thr cfs=" << cfs.task(1).throughput_bytes_per_s << " fcfs=" << fcfs.task(1).throughput_bytes_per_s
                        << " sb=" << sb.task(1).throughput_bytes_per_s);
  CHECK(cfs.task(0).requests > 50);
  CHECK(fcfs.task(0).p99_us >= 10 * cfs.task(0).p99_us);
  CHECK(cfs.task(1).throughput_bytes_per_s >= 0.95 * fcfs.task(1).throughput_bytes_per_s);

  std::ostringstream csv;
  cfs.write_csv(csv);
  CHECK(csv.str().rfind("task_id,direction,requests,p50_us,p99_us,throughput_bytes_per_s\r\n", 0) == 0);
}
