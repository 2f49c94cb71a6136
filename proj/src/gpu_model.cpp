#include "channelforge/gpu_model.hpp"

#include <algorithm>
#include <bit>
#include <ostream>
#include <random>
#include <set>

#include "channelforge/util.hpp"

namespace chforge {

namespace {

bool is_pow2(std::uint64_t v) { return v != 0 && std::has_single_bit(v); }

std::uint64_t factorial_capped(std::uint64_t n, std::uint64_t cap) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 2; i <= n; ++i) {
    r *= i;
    if (r > cap) return cap + 1;
  }
  return r;
}

// Distinct permutations available when each aligned group-sized run must stay
// inside one channel group: groups! * (group_size!)^groups.
std::uint64_t group_permutation_count(std::uint32_t channels, std::uint32_t group, std::uint64_t cap) {
  const std::uint32_t groups = channels / group;
  std::uint64_t count = factorial_capped(groups, cap);
  const std::uint64_t inner = factorial_capped(group, cap);
  for (std::uint32_t g = 0; g < groups && count <= cap; ++g) {
    count *= inner;
    if (count > cap || inner > cap) return cap + 1;
  }
  return count;
}

std::vector<ChannelId> random_group_permutation(std::uint32_t channels, std::uint32_t group,
                                                std::mt19937_64& rng) {
  const std::uint32_t groups = channels / group;
  std::vector<std::uint32_t> order(groups);
  for (std::uint32_t g = 0; g < groups; ++g) order[g] = g;
  shuffle_in_place(std::span(order), rng);
  std::vector<ChannelId> perm;
  perm.reserve(channels);
  for (std::uint32_t g : order) {
    std::vector<ChannelId> members(group);
    for (std::uint32_t i = 0; i < group; ++i) members[i] = g * group + i;
    shuffle_in_place(std::span(members), rng);
    perm.insert(perm.end(), members.begin(), members.end());
  }
  return perm;
}

}  // namespace

void LatencyModel::validate() const {
  if (l2_hit == 0 || l2_miss == 0 || bank_conflict_penalty == 0 || miss_threshold == 0)
    throw ModelError("latency model: all latencies must be positive");
  if (!(l2_hit < miss_threshold && miss_threshold < l2_miss))
    throw ModelError("latency model: require l2_hit < miss_threshold < l2_miss");
  if (conflict_window == 0) throw ModelError("latency model: conflict_window must be >= 1");
}

std::uint32_t GpuSpec::address_bits() const {
  return static_cast<std::uint32_t>(std::bit_width(vram_size - 1));
}

void GpuSpec::validate() const {
  if (num_channels == 0 || num_banks_per_channel == 0 || l2_sets_per_channel == 0 || l2_ways == 0 ||
      l2_line == 0 || num_permutations == 0 || channel_group_size == 0 || total_sms == 0)
    throw ModelError("gpu spec '" + name + "': all counts must be >= 1");
  if (num_channels > 64) throw ModelError("gpu spec '" + name + "': at most 64 channels supported");
  if (!is_pow2(l2_line)) throw ModelError("gpu spec '" + name + "': l2_line must be a power of two");
  if (!is_pow2(interleave_granularity) || interleave_granularity < l2_line)
    throw ModelError("gpu spec '" + name + "': interleave_granularity must be a power of two >= l2_line");
  if (num_channels % channel_group_size != 0)
    throw ModelError("gpu spec '" + name + "': channel_group_size must divide num_channels");
  if (vram_size == 0 || vram_size % interleave_granularity != 0)
    throw ModelError("gpu spec '" + name + "': vram_size must be a positive multiple of the interleave");
  if (coloring_granularity_cap != 0 &&
      (!is_pow2(coloring_granularity_cap) || coloring_granularity_cap < interleave_granularity))
    throw ModelError("gpu spec '" + name + "': coloring_granularity_cap must be a power of two >= interleave");
  if (mapping_kind == MappingKind::LinearXor) {
    if (!is_pow2(vram_size)) throw ModelError("gpu spec '" + name + "': LinearXor needs a power-of-two vram_size");
    if (!is_pow2(num_channels))
      throw ModelError("gpu spec '" + name + "': LinearXor needs a power-of-two channel count");
    if (!is_pow2(channel_group_size))
      throw ModelError("gpu spec '" + name + "': LinearXor needs a power-of-two channel group");
    if (static_cast<std::uint64_t>(num_channels) * interleave_granularity > vram_size)
      throw ModelError("gpu spec '" + name + "': vram too small for the channel count");
  } else {
    const std::uint64_t expected = static_cast<std::uint64_t>(num_permutations) * num_channels * interleave_granularity;
    if (permutation_period != expected)
      throw ModelError("gpu spec '" + name + "': permutation_period must equal permutations x channels x interleave");
    if (vram_size % permutation_period != 0)
      throw ModelError("gpu spec '" + name + "': vram_size must be a multiple of permutation_period");
    if (group_permutation_count(num_channels, channel_group_size, num_permutations) < num_permutations)
      throw ModelError("gpu spec '" + name + "': not enough distinct permutations for the channel grouping");
  }
  latency.validate();
}

namespace {

GpuSpec permutation_preset(std::string name, std::uint64_t nominal_vram, std::uint32_t channels,
                           std::uint32_t permutations, std::uint32_t group, std::uint64_t cap,
                           std::uint32_t sms, std::uint64_t seed) {
  GpuSpec s;
  s.name = std::move(name);
  s.num_channels = channels;
  s.mapping_kind = MappingKind::PermutationTable;
  s.num_permutations = permutations;
  s.channel_group_size = group;
  s.permutation_period = static_cast<std::uint64_t>(permutations) * channels * s.interleave_granularity;
  s.vram_size = nominal_vram / s.permutation_period * s.permutation_period;
  s.coloring_granularity_cap = cap;
  s.total_sms = sms;
  s.mapping_seed = seed;
  return s;
}

GpuSpec xor_preset(std::string name, std::uint64_t vram, std::uint32_t channels, std::uint32_t group,
                   std::uint64_t cap, std::uint32_t sms, std::uint64_t seed) {
  GpuSpec s;
  s.name = std::move(name);
  s.vram_size = vram;
  s.num_channels = channels;
  s.mapping_kind = MappingKind::LinearXor;
  s.num_permutations = 1;
  s.permutation_period = 0;
  s.channel_group_size = group;
  s.coloring_granularity_cap = cap;
  s.total_sms = sms;
  s.mapping_seed = seed;
  return s;
}

}  // namespace

std::vector<std::string> preset_names() { return {"gtx1080", "v100", "p40", "a2000", "a5500", "custom"}; }

GpuSpec make_preset(const std::string& name) {
  if (name == "gtx1080") return xor_preset("gtx1080", 8 * GiB, 8, 4, 0, 20, 0x1080);
  if (name == "v100") return xor_preset("v100", 16 * GiB, 32, 8, 4 * KiB, 80, 0x100);
  if (name == "p40") return permutation_preset("p40", 24 * GiB, 12, 24, 4, 4 * KiB, 30, 0x40);
  if (name == "a2000") return permutation_preset("a2000", 12 * GiB, 6, 12, 2, 2 * KiB, 28, 0x2000);
  if (name == "a5500") return permutation_preset("a5500", 24 * GiB, 12, 24, 2, 2 * KiB, 80, 0x5500);
  if (name == "custom") return make_identity_spec(4);
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ModelError("unknown GPU preset '" + name + "' (known: " + known + ")");
}

GpuSpec make_identity_spec(std::uint32_t channels, std::uint64_t vram_size) {
  GpuSpec s;
  s.name = "custom";
  s.num_channels = channels;
  s.mapping_kind = MappingKind::PermutationTable;
  s.num_permutations = 1;
  s.channel_group_size = 1;
  s.permutation_period = static_cast<std::uint64_t>(channels) * s.interleave_granularity;
  s.vram_size = vram_size / s.permutation_period * s.permutation_period;
  return s;
}

std::string to_string(MappingKind kind) {
  return kind == MappingKind::LinearXor ? "linear_xor" : "permutation_table";
}

void to_json(nlohmann::json& j, const GpuSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"vram_size", s.vram_size},
                     {"num_channels", s.num_channels},
                     {"interleave_granularity", s.interleave_granularity},
                     {"mapping_kind", to_string(s.mapping_kind)},
                     {"permutation_period", s.permutation_period},
                     {"num_permutations", s.num_permutations},
                     {"channel_group_size", s.channel_group_size},
                     {"mapping_seed", s.mapping_seed},
                     {"num_banks_per_channel", s.num_banks_per_channel},
                     {"l2_sets_per_channel", s.l2_sets_per_channel},
                     {"l2_ways", s.l2_ways},
                     {"l2_line", s.l2_line},
                     {"coloring_granularity_cap", s.coloring_granularity_cap},
                     {"total_sms", s.total_sms},
                     {"latency",
                      {{"l2_hit", s.latency.l2_hit},
                       {"l2_miss", s.latency.l2_miss},
                       {"bank_conflict_penalty", s.latency.bank_conflict_penalty},
                       {"miss_threshold", s.latency.miss_threshold},
                       {"conflict_window", s.latency.conflict_window}}}};
}

// Reads the fields that are present; absent fields keep their current value so
// a preset can be loaded first and then overridden.
void from_json(const nlohmann::json& j, GpuSpec& s) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("name", s.name);
  get("vram_size", s.vram_size);
  get("num_channels", s.num_channels);
  get("interleave_granularity", s.interleave_granularity);
  if (j.contains("mapping_kind")) {
    const auto kind = j.at("mapping_kind").get<std::string>();
    if (kind == "linear_xor")
      s.mapping_kind = MappingKind::LinearXor;
    else if (kind == "permutation_table")
      s.mapping_kind = MappingKind::PermutationTable;
    else
      throw ModelError("unknown mapping_kind '" + kind + "'");
  }
  get("permutation_period", s.permutation_period);
  get("num_permutations", s.num_permutations);
  get("channel_group_size", s.channel_group_size);
  get("mapping_seed", s.mapping_seed);
  get("num_banks_per_channel", s.num_banks_per_channel);
  get("l2_sets_per_channel", s.l2_sets_per_channel);
  get("l2_ways", s.l2_ways);
  get("l2_line", s.l2_line);
  get("coloring_granularity_cap", s.coloring_granularity_cap);
  get("total_sms", s.total_sms);
  if (j.contains("latency")) {
    const auto& l = j.at("latency");
    auto lget = [&](const char* key, std::uint32_t& field) {
      if (l.contains(key)) l.at(key).get_to(field);
    };
    lget("l2_hit", s.latency.l2_hit);
    lget("l2_miss", s.latency.l2_miss);
    lget("bank_conflict_penalty", s.latency.bank_conflict_penalty);
    lget("miss_threshold", s.latency.miss_threshold);
    lget("conflict_window", s.latency.conflict_window);
  }
}

GroundTruthMapping::GroundTruthMapping(GpuSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  block_shift_ = static_cast<std::uint32_t>(std::countr_zero(spec_.interleave_granularity));
  line_shift_ = static_cast<std::uint32_t>(std::countr_zero(std::uint64_t{spec_.l2_line}));
  std::mt19937_64 rng(spec_.mapping_seed);

  if (spec_.mapping_kind == MappingKind::PermutationTable) {
    const std::uint32_t n = spec_.num_channels;
    std::vector<std::vector<ChannelId>> perms;
    std::set<std::vector<ChannelId>> seen;
    std::vector<ChannelId> identity(n);
    for (std::uint32_t c = 0; c < n; ++c) identity[c] = c;
    perms.push_back(identity);
    seen.insert(identity);
    while (perms.size() < spec_.num_permutations) {
      auto p = random_group_permutation(n, spec_.channel_group_size, rng);
      if (seen.insert(p).second) perms.push_back(std::move(p));
    }
    table_.reserve(static_cast<std::size_t>(n) * perms.size());
    for (const auto& p : perms) table_.insert(table_.end(), p.begin(), p.end());
  } else {
    const auto channel_bits = static_cast<std::uint32_t>(std::countr_zero(spec_.num_channels));
    const std::uint32_t extra_lo = block_shift_ + channel_bits;
    const std::uint32_t top = spec_.address_bits();
    std::uint64_t extra_range = 0;
    for (std::uint32_t b = extra_lo; b < top; ++b) extra_range |= std::uint64_t{1} << b;
    masks_.resize(channel_bits);
    for (std::uint32_t i = 0; i < channel_bits; ++i) {
      const std::uint64_t extras = rng() & rng() & extra_range;
      masks_[i] = (std::uint64_t{1} << (block_shift_ + i)) | extras;
    }
  }
}

void GroundTruthMapping::check_range(PhysAddr addr) const {
  if (addr >= spec_.vram_size)
    throw ModelError("address " + hex_addr(addr) + " outside VRAM of " + std::to_string(spec_.vram_size) + " bytes");
}

ChannelId GroundTruthMapping::channel_unchecked(PhysAddr addr) const {
  if (spec_.mapping_kind == MappingKind::PermutationTable) {
    const std::uint64_t block = addr >> block_shift_;
    return table_[block % table_.size()];
  }
  ChannelId ch = 0;
  for (std::size_t i = 0; i < masks_.size(); ++i)
    ch |= static_cast<ChannelId>(std::popcount(addr & masks_[i]) & 1) << i;
  return ch;
}

ChannelId GroundTruthMapping::channel_of(PhysAddr addr) const {
  check_range(addr);
  return channel_unchecked(addr);
}

std::uint64_t GroundTruthMapping::channel_row(PhysAddr addr) const {
  check_range(addr);
  return (addr >> block_shift_) / spec_.num_channels;
}

std::uint32_t GroundTruthMapping::bank_of(PhysAddr addr) const {
  return static_cast<std::uint32_t>(channel_row(addr) % spec_.num_banks_per_channel);
}

std::uint32_t GroundTruthMapping::l2_set_of(PhysAddr addr) const {
  const std::uint64_t row = channel_row(addr);
  const std::uint64_t lines_per_block = spec_.interleave_granularity >> line_shift_;
  const std::uint64_t line_in_block = (addr & (spec_.interleave_granularity - 1)) >> line_shift_;
  const std::uint64_t local = (row / spec_.num_banks_per_channel) * lines_per_block + line_in_block;
  return static_cast<std::uint32_t>(local % spec_.l2_sets_per_channel);
}

void GroundTruthMapping::write_permutation_csv(std::ostream& out) const {
  out << "block_index,channel_id\r\n";
  std::uint64_t blocks = table_.size();
  if (spec_.mapping_kind == MappingKind::LinearXor)
    blocks = std::min<std::uint64_t>(spec_.num_blocks(), 64ull * spec_.num_channels);
  for (std::uint64_t b = 0; b < blocks; ++b)
    out << b << ',' << channel_unchecked(b << block_shift_) << "\r\n";
}

MemoryDevice::MemoryDevice(GroundTruthMapping truth) : truth_(std::move(truth)) {
  const auto& s = truth_.spec();
  const std::size_t total_sets = static_cast<std::size_t>(s.num_channels) * s.l2_sets_per_channel;
  sets_.resize(total_sets);
  ways_.resize(total_sets * s.l2_ways);
  banks_.resize(static_cast<std::size_t>(s.num_channels) * s.num_banks_per_channel);
}

MemoryDevice::Set& MemoryDevice::live_set(std::size_t index) {
  Set& set = sets_[index];
  if (set.epoch != epoch_) {
    set.epoch = epoch_;
    set.used = 0;
  }
  return set;
}

MemoryDevice::Bank& MemoryDevice::live_bank(std::size_t index) {
  Bank& bank = banks_[index];
  if (bank.epoch != epoch_) {
    bank.epoch = epoch_;
    bank.recent.clear();
  }
  return bank;
}

std::uint32_t MemoryDevice::timed_access(PhysAddr addr, AccessKind /*kind*/) {
  const auto& s = truth_.spec();
  const ChannelId ch = truth_.channel_of(addr);
  const std::uint32_t set_idx = truth_.l2_set_of(addr);
  const std::uint64_t tag = addr / s.l2_line;
  const std::size_t flat = static_cast<std::size_t>(ch) * s.l2_sets_per_channel + set_idx;
  Set& set = live_set(flat);
  Way* ways = &ways_[flat * s.l2_ways];
  ++probes_;

  for (std::uint32_t w = 0; w < set.used; ++w) {
    if (ways[w].tag == tag) {
      ways[w].last_use = clock_++;
      return s.latency.l2_hit;
    }
  }

  // Miss: fill an empty way or evict the least recently used one.
  std::uint32_t victim = set.used;
  if (set.used < s.l2_ways) {
    ++set.used;
  } else {
    victim = 0;
    for (std::uint32_t w = 1; w < s.l2_ways; ++w)
      if (ways[w].last_use < ways[victim].last_use) victim = w;
  }
  ways[victim] = Way{tag, clock_};

  Bank& bank = live_bank(static_cast<std::size_t>(ch) * s.num_banks_per_channel + truth_.bank_of(addr));
  const std::uint64_t window = s.latency.conflict_window;
  std::erase_if(bank.recent, [&](std::uint64_t t) { return clock_ - t > window; });
  const auto pending = static_cast<std::uint32_t>(bank.recent.size());
  bank.recent.push_back(clock_);
  ++clock_;
  return s.latency.l2_miss + s.latency.bank_conflict_penalty * pending;
}

void MemoryDevice::flush() { ++epoch_; }

std::uint32_t MemoryDevice::set_occupancy(ChannelId channel, std::uint32_t set) const {
  const auto& s = truth_.spec();
  const Set& st = sets_.at(static_cast<std::size_t>(channel) * s.l2_sets_per_channel + set);
  return st.epoch == epoch_ ? st.used : 0;
}

bool MemoryDevice::is_cached(PhysAddr addr) const {
  const auto& s = truth_.spec();
  const std::size_t flat = static_cast<std::size_t>(truth_.channel_of(addr)) * s.l2_sets_per_channel +
                           truth_.l2_set_of(addr);
  const Set& set = sets_[flat];
  if (set.epoch != epoch_) return false;
  const std::uint64_t tag = addr / s.l2_line;
  for (std::uint32_t w = 0; w < set.used; ++w)
    if (ways_[flat * s.l2_ways + w].tag == tag) return true;
  return false;
}

}  // namespace chforge
