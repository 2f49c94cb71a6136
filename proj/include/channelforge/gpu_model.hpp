#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace chforge {

using PhysAddr = std::uint64_t;
using ChannelId = std::uint32_t;

inline constexpr std::uint64_t KiB = 1024;
inline constexpr std::uint64_t MiB = 1024 * KiB;
inline constexpr std::uint64_t GiB = 1024 * MiB;

// Thrown for malformed specs, out-of-range addresses and other contract
// violations on the simulated hardware.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MappingKind { LinearXor, PermutationTable };

enum class AccessKind { Read, Write };

// Latencies are in abstract time units. The classifier boundary must sit
// strictly between a hit and a miss.
struct LatencyModel {
  std::uint32_t l2_hit = 200;
  std::uint32_t l2_miss = 400;
  std::uint32_t bank_conflict_penalty = 100;
  std::uint32_t miss_threshold = 300;
  // Logical clock ticks during which an earlier DRAM access to the same bank
  // still counts as pending.
  std::uint32_t conflict_window = 1;

  void validate() const;
};

struct GpuSpec {
  std::string name = "custom";
  std::uint64_t vram_size = 64 * MiB;
  std::uint32_t num_channels = 4;
  std::uint64_t interleave_granularity = 1 * KiB;
  MappingKind mapping_kind = MappingKind::PermutationTable;
  // PermutationTable: bytes covered by one full sequence of permutations.
  std::uint64_t permutation_period = 4 * KiB;
  // Number of distinct permutations tiled into one period.
  std::uint32_t num_permutations = 1;
  // Channels that share an L2 controller group. Every aligned run of
  // channel_group_size blocks stays inside one group.
  std::uint32_t channel_group_size = 1;
  std::uint64_t mapping_seed = 0;
  std::uint32_t num_banks_per_channel = 16;
  std::uint32_t l2_sets_per_channel = 16;
  std::uint32_t l2_ways = 16;
  std::uint32_t l2_line = 128;
  LatencyModel latency;
  // Published coloring granularity for the part, 0 when none is known.
  std::uint64_t coloring_granularity_cap = 0;
  std::uint32_t total_sms = 80;

  void validate() const;
  std::uint32_t address_bits() const;
  std::uint64_t num_blocks() const { return vram_size / interleave_granularity; }
};

// Presets: gtx1080, v100, p40, a2000, a5500, custom.
GpuSpec make_preset(const std::string& name);
std::vector<std::string> preset_names();

// An identity layout with `channels` channels and a single permutation.
GpuSpec make_identity_spec(std::uint32_t channels, std::uint64_t vram_size = 64 * MiB);

void to_json(nlohmann::json& j, const GpuSpec& spec);
void from_json(const nlohmann::json& j, GpuSpec& spec);
std::string to_string(MappingKind kind);

// The secret address -> channel/bank/set mapping of the simulated part. This
// is the oracle the reverse-engineering code is scored against.
class GroundTruthMapping {
 public:
  explicit GroundTruthMapping(GpuSpec spec);

  const GpuSpec& spec() const { return spec_; }

  ChannelId channel_of(PhysAddr addr) const;
  std::uint32_t bank_of(PhysAddr addr) const;
  std::uint32_t l2_set_of(PhysAddr addr) const;
  // Row index of the address inside its channel.
  std::uint64_t channel_row(PhysAddr addr) const;

  // PermutationTable only: block index within a period -> channel.
  const std::vector<ChannelId>& period_table() const { return table_; }
  // LinearXor only: one address mask per channel-id bit.
  const std::vector<std::uint64_t>& xor_masks() const { return masks_; }

  void write_permutation_csv(std::ostream& out) const;

 private:
  ChannelId channel_unchecked(PhysAddr addr) const;
  void check_range(PhysAddr addr) const;

  GpuSpec spec_;
  std::vector<ChannelId> table_;
  std::vector<std::uint64_t> masks_;
  std::uint32_t block_shift_ = 10;
  std::uint32_t line_shift_ = 7;
};

// Stateful L2 + DRAM bank timing model. Single owner; not thread safe.
class MemoryDevice {
 public:
  explicit MemoryDevice(GroundTruthMapping truth);

  const GpuSpec& spec() const { return truth_.spec(); }
  const GroundTruthMapping& truth() const { return truth_; }

  std::uint32_t timed_access(PhysAddr addr, AccessKind kind = AccessKind::Read);
  void flush();

  std::uint64_t clock() const { return clock_; }
  std::uint64_t probe_count() const { return probes_; }
  // Lines resident in one (channel, set); for invariant checks.
  std::uint32_t set_occupancy(ChannelId channel, std::uint32_t set) const;
  bool is_cached(PhysAddr addr) const;

 private:
  struct Way {
    std::uint64_t tag = 0;
    std::uint64_t last_use = 0;
  };
  struct Set {
    std::uint64_t epoch = 0;
    std::uint32_t used = 0;
  };
  struct Bank {
    std::uint64_t epoch = 0;
    std::vector<std::uint64_t> recent;
  };

  Set& live_set(std::size_t index);
  Bank& live_bank(std::size_t index);

  GroundTruthMapping truth_;
  std::vector<Way> ways_;
  std::vector<Set> sets_;
  std::vector<Bank> banks_;
  std::uint64_t epoch_ = 1;
  std::uint64_t clock_ = 0;
  std::uint64_t probes_ = 0;
};

}  // namespace chforge
