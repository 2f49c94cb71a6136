#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "channelforge/gpu_model.hpp"

namespace chforge {

class ColoringError : public std::runtime_error {
 public:
  ColoringError(const std::string& msg, std::uint64_t shortfall_pages = 0)
      : std::runtime_error(msg), shortfall(shortfall_pages) {}
  std::uint64_t shortfall;
};

// Channel oracle used for coloring: the ground truth, a cracked model or a
// deliberately faulty stand-in.
using ChannelFn = std::function<ChannelId(PhysAddr)>;

ChannelFn truth_predictor(const GroundTruthMapping& truth);
// Ground truth with a fraction `rate` of interleave blocks relabeled to a
// wrong channel; the choice is a fixed function of (block, seed).
ChannelFn faulty_predictor(const GroundTruthMapping& truth, double rate, std::uint64_t seed);

struct KernelProfile {
  std::string id;
  // Runtime with the whole GPU to itself, in nanoseconds.
  double isolated_runtime = 0;
  std::uint32_t sm_demand = 1;
  // Percent of peak DRAM throughput.
  double dram_throughput = 0;
  std::vector<std::pair<std::string, std::uint64_t>> tensors;

  void validate() const;
};

// Largest block (interleave x 2^j, at most 2 MiB) whose interleave blocks all
// fall in one channel group, capped by the part's published value.
std::uint64_t choose_granularity(const GpuSpec& spec);

bool classify_memory_bound(const KernelProfile& profile, double thres_dram);

struct ChannelBinding {
  std::vector<ChannelId> ls_channels;
  std::vector<ChannelId> be_channels;
  double ch_be = 0;
};

ChannelBinding bind_channels(std::uint32_t num_channels, double ch_be);

using ChannelMask = std::uint64_t;
ChannelMask mask_of(const std::vector<ChannelId>& channels);

struct ShadowPageTable {
  std::string tensor_id;
  std::uint64_t granularity = 0;
  std::uint64_t size = 0;
  // Page offsets inside the reserved space, one per logical page.
  std::vector<std::uint64_t> entries;
  std::vector<ChannelId> channels;
  std::uint64_t owner = 0;

  std::uint64_t translate(std::uint64_t logical_offset) const;
  nlohmann::json to_json() const;
};

class ReservedSpace {
 public:
  ReservedSpace(PhysAddr base, std::uint64_t size, std::uint64_t granularity, std::uint64_t interleave,
                ChannelFn predictor);

  // Installs (or replaces) the predictor and recolors every page. Only
  // allowed while nothing is allocated.
  void set_predictor(ChannelFn predictor);

  ShadowPageTable alloc_colored(std::uint64_t tensor_size, const std::vector<ChannelId>& channels,
                                const std::string& tensor_id = "");
  void free(const ShadowPageTable& spt);

  PhysAddr base() const { return base_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t granularity() const { return gran_; }
  std::uint64_t num_pages() const { return page_mask_.size(); }
  std::uint64_t free_pages() const { return free_count_; }
  // Channels the predictor assigns to the page's interleave blocks.
  ChannelMask page_mask(std::uint64_t page) const { return page_mask_.at(page); }
  bool page_allocated(std::uint64_t page) const { return owner_.at(page) != 0; }

 private:
  PhysAddr base_;
  std::uint64_t size_;
  std::uint64_t gran_;
  std::uint64_t interleave_;
  ChannelFn predictor_;
  std::vector<ChannelMask> page_mask_;
  std::vector<std::uint64_t> owner_;
  std::map<ChannelMask, std::set<std::uint64_t>> free_by_mask_;
  std::uint64_t free_count_ = 0;
  std::uint64_t next_owner_ = 1;
};

struct ColoringReport {
  std::uint64_t bytes = 0;
  std::uint64_t wrong_bytes = 0;
  double wrong_fraction() const { return bytes ? static_cast<double>(wrong_bytes) / static_cast<double>(bytes) : 0.0; }
};

// Checks every interleave block of every page against the ground truth.
ColoringReport coloring_report(const ShadowPageTable& spt, const ReservedSpace& space, const GroundTruthMapping& truth);

// Published shadow-page-table overheads; parts without a figure borrow the
// closest architecture's value.
double default_spt_overhead(const std::string& preset);

// Extra time a colored kernel spends walking its shadow page table.
double spt_overhead_model(double base_time, double overhead_fraction);

}  // namespace chforge
