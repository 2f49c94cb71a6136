#include "channelforge/coloring.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <queue>

#include "channelforge/util.hpp"

namespace chforge {

ChannelFn truth_predictor(const GroundTruthMapping& truth) {
  return [&truth](PhysAddr a) { return truth.channel_of(a); };
}

ChannelFn faulty_predictor(const GroundTruthMapping& truth, double rate, std::uint64_t seed) {
  if (!(rate >= 0 && rate <= 1)) throw std::invalid_argument("misprediction rate must be in [0, 1]");
  const std::uint64_t shift = std::countr_zero(truth.spec().interleave_granularity);
  const std::uint32_t n = truth.spec().num_channels;
  return [&truth, rate, seed, shift, n](PhysAddr a) {
    const ChannelId real = truth.channel_of(a);
    if (n < 2) return real;
    // splitmix64 of the block index gives an addressable coin flip.
    std::uint64_t z = (a >> shift) + seed * 0x9e3779b97f4a7c15ull + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    const double coin = static_cast<double>(z >> 11) * 0x1.0p-53;
    if (coin >= rate) return real;
    return static_cast<ChannelId>((real + 1 + (z % (n - 1))) % n);
  };
}

void KernelProfile::validate() const {
  if (!(dram_throughput >= 0 && dram_throughput <= 100))
    throw std::invalid_argument("kernel '" + id + "': dram_throughput must be within [0, 100]");
  if (sm_demand < 1) throw std::invalid_argument("kernel '" + id + "': sm_demand must be >= 1");
  if (!(isolated_runtime > 0)) throw std::invalid_argument("kernel '" + id + "': isolated_runtime must be positive");
}

std::uint64_t choose_granularity(const GpuSpec& spec) {
  spec.validate();
  GroundTruthMapping truth(spec);
  const std::uint64_t g0 = spec.interleave_granularity;
  const std::uint64_t max_g = std::min<std::uint64_t>(2 * MiB, spec.vram_size);
  // One period holds every distinct pattern; XOR layouts are checked over a
  // prefix that spans every channel bit.
  std::uint64_t scan = spec.mapping_kind == MappingKind::PermutationTable
                           ? spec.permutation_period
                           : std::min<std::uint64_t>(spec.vram_size, 64 * MiB);
  std::uint64_t g = g0;
  while (2 * g <= max_g) {
    const std::uint64_t cand = 2 * g;
    // A candidate block larger than the period is checked across periods.
    const std::uint64_t span = std::max(scan, cand);
    if (span > spec.vram_size) break;
    bool ok = true;
    for (PhysAddr start = 0; ok && start < span; start += cand) {
      const ChannelId group = truth.channel_of(start) / spec.channel_group_size;
      for (PhysAddr a = start + g0; a < start + cand; a += g0) {
        if (truth.channel_of(a) / spec.channel_group_size != group) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) break;
    g = cand;
  }
  if (spec.coloring_granularity_cap != 0) g = std::min(g, spec.coloring_granularity_cap);
  return g;
}

bool classify_memory_bound(const KernelProfile& profile, double thres_dram) {
  return profile.dram_throughput > thres_dram;
}

ChannelBinding bind_channels(std::uint32_t num_channels, double ch_be) {
  if (!(ch_be > 0 && ch_be < 1)) throw std::invalid_argument("ch_be must lie strictly between 0 and 1");
  const auto be = static_cast<std::uint32_t>(std::lround(ch_be * num_channels));
  if (be == 0 || be >= num_channels)
    throw std::invalid_argument("ch_be=" + fmt_double(ch_be, 4) + " leaves the " + (be == 0 ? "BE" : "LS") +
                                " side without channels out of " + std::to_string(num_channels));
  ChannelBinding b;
  b.ch_be = ch_be;
  for (ChannelId c = 0; c < num_channels; ++c) (c < be ? b.be_channels : b.ls_channels).push_back(c);
  return b;
}

ChannelMask mask_of(const std::vector<ChannelId>& channels) {
  ChannelMask m = 0;
  for (ChannelId c : channels) {
    if (c >= 64) throw std::invalid_argument("channel id " + std::to_string(c) + " exceeds the 64-channel limit");
    m |= ChannelMask{1} << c;
  }
  return m;
}

std::uint64_t ShadowPageTable::translate(std::uint64_t logical_offset) const {
  if (logical_offset >= size)
    throw std::out_of_range("offset " + std::to_string(logical_offset) + " outside tensor of " + std::to_string(size) +
                            " bytes");
  return entries[logical_offset / granularity] + logical_offset % granularity;
}

nlohmann::json ShadowPageTable::to_json() const {
  return {{"tensor_id", tensor_id},
          {"granularity", granularity},
          {"size", size},
          {"entries", entries},
          {"channels", channels}};
}

ReservedSpace::ReservedSpace(PhysAddr base, std::uint64_t size, std::uint64_t granularity, std::uint64_t interleave,
                             ChannelFn predictor)
    : base_(base), size_(size), gran_(granularity), interleave_(interleave) {
  if (granularity == 0 || interleave == 0 || granularity % interleave != 0)
    throw std::invalid_argument("coloring granularity must be a positive multiple of the interleave");
  if (base % granularity != 0 || size % granularity != 0)
    throw std::invalid_argument("reserved space base and size must be aligned to the coloring granularity");
  page_mask_.assign(size / granularity, 0);
  owner_.assign(size / granularity, 0);
  if (predictor) set_predictor(std::move(predictor));
}

void ReservedSpace::set_predictor(ChannelFn predictor) {
  if (std::any_of(owner_.begin(), owner_.end(), [](std::uint64_t o) { return o != 0; }))
    throw std::logic_error("cannot recolor a reserved space with live allocations");
  predictor_ = std::move(predictor);
  free_by_mask_.clear();
  free_count_ = 0;
  if (!predictor_) return;
  for (std::uint64_t p = 0; p < page_mask_.size(); ++p) {
    ChannelMask m = 0;
    for (std::uint64_t off = 0; off < gran_; off += interleave_) {
      const ChannelId ch = predictor_(base_ + p * gran_ + off);
      if (ch >= 64) throw std::invalid_argument("predictor returned channel id >= 64");
      m |= ChannelMask{1} << ch;
    }
    page_mask_[p] = m;
    free_by_mask_[m].insert(p);
    ++free_count_;
  }
}

ShadowPageTable ReservedSpace::alloc_colored(std::uint64_t tensor_size, const std::vector<ChannelId>& channels,
                                             const std::string& tensor_id) {
  if (!predictor_) throw ColoringError("reserved space has no channel predictor");
  const ChannelMask want = mask_of(channels);
  if (want == 0) throw std::invalid_argument("alloc_colored needs at least one bound channel");
  const std::uint64_t pages = (tensor_size + gran_ - 1) / gran_;

  ShadowPageTable spt;
  spt.tensor_id = tensor_id;
  spt.granularity = gran_;
  spt.size = tensor_size;
  spt.channels = channels;
  std::sort(spt.channels.begin(), spt.channels.end());
  spt.channels.erase(std::unique(spt.channels.begin(), spt.channels.end()), spt.channels.end());
  if (pages == 0) return spt;

  // Merge the eligible color classes lowest offset first.
  using Cursor = std::pair<std::set<std::uint64_t>::const_iterator, std::set<std::uint64_t>::const_iterator>;
  std::vector<Cursor> cursors;
  std::uint64_t available = 0;
  for (const auto& [mask, free] : free_by_mask_) {
    if ((mask & ~want) != 0 || free.empty()) continue;
    cursors.emplace_back(free.begin(), free.end());
    available += free.size();
  }
  if (available < pages)
    throw ColoringError("not enough colored pages: need " + std::to_string(pages) + ", have " +
                            std::to_string(available) + " (shortfall " + std::to_string(pages - available) + ")",
                        pages - available);
  auto cmp = [](const Cursor& a, const Cursor& b) { return *a.first > *b.first; };
  std::priority_queue<Cursor, std::vector<Cursor>, decltype(cmp)> heap(cmp, std::move(cursors));
  spt.entries.reserve(pages);
  while (spt.entries.size() < pages) {
    Cursor c = heap.top();
    heap.pop();
    spt.entries.push_back(*c.first * gran_);
    if (++c.first != c.second) heap.push(c);
  }
  spt.owner = next_owner_++;
  for (std::uint64_t off : spt.entries) {
    const std::uint64_t p = off / gran_;
    free_by_mask_[page_mask_[p]].erase(p);
    owner_[p] = spt.owner;
  }
  free_count_ -= pages;
  return spt;
}

void ReservedSpace::free(const ShadowPageTable& spt) {
  for (std::uint64_t off : spt.entries) {
    const std::uint64_t p = off / gran_;
    if (p >= owner_.size() || owner_[p] != spt.owner || spt.owner == 0)
      throw std::logic_error("page at offset " + std::to_string(off) + " is not owned by this shadow page table");
  }
  for (std::uint64_t off : spt.entries) {
    const std::uint64_t p = off / gran_;
    owner_[p] = 0;
    free_by_mask_[page_mask_[p]].insert(p);
  }
  free_count_ += spt.entries.size();
}

ColoringReport coloring_report(const ShadowPageTable& spt, const ReservedSpace& space, const GroundTruthMapping& truth) {
  const ChannelMask bound = mask_of(spt.channels);
  const std::uint64_t g0 = truth.spec().interleave_granularity;
  ColoringReport rep;
  for (std::size_t i = 0; i < spt.entries.size(); ++i) {
    const std::uint64_t page_bytes = std::min(spt.granularity, spt.size - i * spt.granularity);
    for (std::uint64_t off = 0; off < page_bytes; off += g0) {
      const std::uint64_t bytes = std::min(g0, page_bytes - off);
      rep.bytes += bytes;
      const ChannelId ch = truth.channel_of(space.base() + spt.entries[i] + off);
      if (((bound >> ch) & 1) == 0) rep.wrong_bytes += bytes;
    }
  }
  return rep;
}

double default_spt_overhead(const std::string& preset) {
  if (preset == "p40" || preset == "gtx1080") return 0.0099;
  if (preset == "v100") return 0.0050;
  if (preset == "a2000") return 0.0063;
  if (preset == "a5500") return 0.0082;
  return 0.0;
}

double spt_overhead_model(double base_time, double overhead_fraction) {
  if (!(overhead_fraction >= 0 && overhead_fraction <= 0.05))
    throw std::invalid_argument("spt overhead fraction must be within [0, 0.05]");
  return base_time * overhead_fraction;
}

}  // namespace chforge
