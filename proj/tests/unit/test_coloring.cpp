#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "channelforge/coloring.hpp"

using namespace chforge;

TEST_CASE("coloring granularity per part") {
  CHECK(choose_granularity(make_preset("p40")) == 4096);
  CHECK(choose_granularity(make_preset("v100")) == 4096);
  CHECK(choose_granularity(make_preset("a2000")) == 2048);
  CHECK(choose_granularity(make_preset("a5500")) == 2048);
  CHECK(choose_granularity(make_preset("gtx1080")) == 4096);
  CHECK(choose_granularity(make_identity_spec(4)) == 1024);
  // Without the published cap the V100 layout would allow 8 KiB.
  GpuSpec v100 = make_preset("v100");
  v100.coloring_granularity_cap = 0;
  CHECK(choose_granularity(v100) == 8192);
}

TEST_CASE("memory-bound classification is strict") {
  KernelProfile k;
  k.dram_throughput = 21.7;
  CHECK_FALSE(classify_memory_bound(k, 40));
  k.dram_throughput = 40;
  CHECK_FALSE(classify_memory_bound(k, 40));
  k.dram_throughput = 41;
  CHECK(classify_memory_bound(k, 40));
}

TEST_CASE("channel binding") {
  auto b = bind_channels(12, 1.0 / 3);
  CHECK(b.be_channels.size() == 4);
  CHECK(b.ls_channels.size() == 8);
  CHECK(b.be_channels.front() == 0);
  b = bind_channels(6, 1.0 / 3);
  CHECK(b.be_channels.size() == 2);
  CHECK(b.ls_channels.size() == 4);
  CHECK_THROWS_AS(bind_channels(2, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(bind_channels(12, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(bind_channels(12, 1.0), std::invalid_argument);
}

TEST_CASE("colored allocation examples") {
  GroundTruthMapping truth(make_preset("a2000"));
  ReservedSpace space(0, 8 * MiB, 2048, 1024, truth_predictor(truth));
  const std::vector<ChannelId> bound{2, 3};

  const auto spt = space.alloc_colored(8 * KiB, bound, "w");
  REQUIRE(spt.entries.size() == 4);
  for (std::uint64_t off : spt.entries)
    for (std::uint64_t b = 0; b < 2048; b += 1024) {
      const ChannelId ch = truth.channel_of(off + b);
      CHECK((ch == 2 || ch == 3));
    }
  CHECK(coloring_report(spt, space, truth).wrong_bytes == 0);

  CHECK(space.alloc_colored(0, bound).entries.empty());

  ReservedSpace open(0, 1 * MiB, 2048, 1024, truth_predictor(truth));
  const auto all = open.alloc_colored(10 * 2048, {0, 1, 2, 3, 4, 5});
  for (std::size_t i = 0; i < all.entries.size(); ++i) CHECK(all.entries[i] == i * 2048);
}

TEST_CASE("translate") {
  GroundTruthMapping truth(make_preset("p40"));
  ReservedSpace space(0, 16 * MiB, 4096, 1024, truth_predictor(truth));
  const std::vector<ChannelId> bound{4, 5, 6, 7};
  const auto spt = space.alloc_colored(100 * KiB + 123, bound);
  CHECK(spt.translate(0) == spt.entries[0]);
  CHECK(spt.translate(4096) == spt.entries[1]);
  CHECK_THROWS_AS(spt.translate(spt.size), std::out_of_range);

  std::set<std::uint64_t> seen;
  for (std::uint64_t off = 0; off < spt.size; ++off) {
    const auto phys = spt.translate(off);
    seen.insert(phys);
    if (off % 97 == 0) {
      const ChannelId ch = truth.channel_of(space.base() + phys);
      CHECK((ch >= 4 && ch <= 7));
    }
  }
  CHECK(seen.size() == spt.size);
}

TEST_CASE("allocator bookkeeping") {
  GroundTruthMapping truth(make_preset("a5500"));
  ReservedSpace space(0, 4 * MiB, 2048, 1024, truth_predictor(truth));
  const std::uint64_t total = space.free_pages();
  std::mt19937_64 rng(3);
  std::vector<ShadowPageTable> live;
  std::map<std::uint64_t, std::uint64_t> owner;
  for (int op = 0; op < 5000; ++op) {
    if (!live.empty() && rng() % 3 == 0) {
      const std::size_t i = rng() % live.size();
      for (auto off : live[i].entries) owner.erase(off);
      space.free(live[i]);
      live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
      continue;
    }
    std::vector<ChannelId> bound;
    for (ChannelId c = 0; c < 12; ++c)
      if (rng() % 2) bound.push_back(c);
    if (bound.empty()) bound.push_back(0);
    try {
      auto spt = space.alloc_colored(rng() % (64 * KiB), bound);
      for (auto off : spt.entries) REQUIRE(owner.emplace(off, spt.owner).second);
      live.push_back(std::move(spt));
    } catch (const ColoringError& e) {
      CHECK(e.shortfall > 0);
    }
  }
  std::uint64_t held = 0;
  for (const auto& s : live) held += s.entries.size();
  CHECK(space.free_pages() + held == total);
  REQUIRE(!live.empty());
  space.free(live.front());
  CHECK_THROWS_AS(space.free(live.front()), std::logic_error);
}

TEST_CASE("allocation failures") {
  GroundTruthMapping truth(make_preset("a2000"));
  ReservedSpace bare(0, 1 * MiB, 2048, 1024, nullptr);
  CHECK_THROWS_WITH_AS(bare.alloc_colored(4096, {0}), doctest::Contains("predictor"), ColoringError);
  ReservedSpace small(0, 64 * KiB, 2048, 1024, truth_predictor(truth));
  try {
    small.alloc_colored(64 * KiB, {0});
    FAIL("expected a shortfall");
  } catch (const ColoringError& e) {
    CHECK(e.shortfall > 0);
  }
  CHECK_THROWS_AS(ReservedSpace(1024, 64 * KiB, 2048, 1024, nullptr), std::invalid_argument);
}

TEST_CASE("mispredicting predictor only costs wrongly colored bytes") {
  GroundTruthMapping truth(make_preset("a2000"));
  const double eps = 0.01;
  ReservedSpace space(0, 64 * MiB, 2048, 1024, faulty_predictor(truth, eps, 42));
  std::uint64_t bytes = 0, wrong = 0;
  for (int i = 0; i < 200; ++i) {
    // a2000 pages span a channel pair, so bind whole pairs.
    const auto pair = static_cast<ChannelId>(2 * (i % 3));
    const auto spt = space.alloc_colored(96 * KiB, {pair, pair + 1});
    const auto rep = coloring_report(spt, space, truth);
    bytes += rep.bytes;
    wrong += rep.wrong_bytes;
  }
  const double frac = static_cast<double>(wrong) / static_cast<double>(bytes);
  CHECK(frac <= eps + 0.005);
}

TEST_CASE("spt overhead model") {
  CHECK(default_spt_overhead("p40") == doctest::Approx(0.0099));
  CHECK(default_spt_overhead("v100") == doctest::Approx(0.0050));
  CHECK(default_spt_overhead("a2000") == doctest::Approx(0.0063));
  CHECK(default_spt_overhead("a5500") == doctest::Approx(0.0082));
  CHECK(spt_overhead_model(1000.0, 0.0) == 0.0);
  CHECK(spt_overhead_model(1000.0, 0.0099) == doctest::Approx(9.9));
  CHECK_THROWS_AS(spt_overhead_model(1.0, 0.06), std::invalid_argument);
}
