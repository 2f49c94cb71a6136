#include "channelforge/reveng.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>

#include <spdlog/spdlog.h>

namespace chforge {

namespace {

template <typename Probe>
bool majority(std::uint32_t votes, Probe&& probe) {
  std::uint32_t yes = 0;
  for (std::uint32_t v = 0; v < votes; ++v)
    if (probe()) ++yes;
  return 2 * yes > votes;
}

void require_aligned(const GpuSpec& spec, PhysAddr a) {
  if (a % spec.interleave_granularity != 0)
    throw std::invalid_argument("pool address " + hex_addr(a) + " is not interleave-aligned");
}

// Shrinks an evicting set to a minimal one of exactly l2_ways lines by
// dropping chunks that are not needed for the eviction.
std::vector<PhysAddr> reduce_eviction_set(MemoryDevice& dev, PhysAddr target, std::vector<PhysAddr> lines,
                                          const ProbeOptions& opt) {
  const std::size_t ways = dev.spec().l2_ways;
  while (lines.size() > ways) {
    const std::size_t parts = ways + 1;
    const std::size_t before = lines.size();
    std::vector<std::vector<PhysAddr>> chunks(parts);
    for (std::size_t i = 0; i < lines.size(); ++i) chunks[i * parts / lines.size()].push_back(lines[i]);
    for (const auto& chunk : chunks) {
      if (chunk.empty() || lines.size() - chunk.size() < ways) continue;
      std::vector<PhysAddr> trial;
      trial.reserve(lines.size());
      std::unordered_set<PhysAddr> drop(chunk.begin(), chunk.end());
      for (auto a : lines)
        if (!drop.count(a)) trial.push_back(a);
      if (evicts(dev, target, trial, opt)) lines = std::move(trial);
    }
    if (lines.size() == before) throw CrackError("eviction set did not shrink for " + hex_addr(target));
  }
  return lines;
}

}  // namespace

std::vector<PhysAddr> make_candidate_pool(const GpuSpec& spec, PhysAddr base, std::uint64_t count) {
  require_aligned(spec, base);
  const std::uint64_t g = spec.interleave_granularity;
  const std::uint64_t avail = base < spec.vram_size ? (spec.vram_size - base) / g : 0;
  count = std::min(count, avail);
  std::vector<PhysAddr> pool(count);
  for (std::uint64_t i = 0; i < count; ++i) pool[i] = base + i * g;
  return pool;
}

std::vector<PhysAddr> find_dram_bank_conflicts(MemoryDevice& dev, PhysAddr seed, const std::vector<PhysAddr>& pool,
                                               const ProbeOptions& opt) {
  const auto& lat = dev.spec().latency;
  const std::uint32_t bar = lat.l2_miss + lat.bank_conflict_penalty / 2;
  std::vector<PhysAddr> out;
  for (PhysAddr cand : pool) {
    require_aligned(dev.spec(), cand);
    if (cand == seed) continue;
    const bool conflict = majority(opt.votes, [&] {
      dev.flush();
      dev.timed_access(seed);
      return dev.timed_access(cand) > bar;
    });
    if (conflict) out.push_back(cand);
  }
  return out;
}

bool evicts(MemoryDevice& dev, PhysAddr target, const std::vector<PhysAddr>& lines, const ProbeOptions& opt) {
  const std::uint32_t thr = dev.spec().latency.miss_threshold;
  return majority(opt.votes, [&] {
    dev.flush();
    dev.timed_access(target);
    for (PhysAddr a : lines)
      if (a != target) dev.timed_access(a);
    return dev.timed_access(target) > thr;
  });
}

CacheConflictResult find_cacheline_conflicts(MemoryDevice& dev, const std::vector<PhysAddr>& dram_conflicts,
                                             const std::vector<PhysAddr>& pool, const ProbeOptions& opt) {
  if (dram_conflicts.empty()) throw std::invalid_argument("need bank-conflict seeds first");
  const std::size_t ways = dev.spec().l2_ways;
  const std::unordered_set<PhysAddr> seeds(dram_conflicts.begin(), dram_conflicts.end());
  std::vector<PhysAddr> cands;
  std::unordered_set<PhysAddr> seen;
  for (PhysAddr a : pool)
    if (!seeds.count(a) && seen.insert(a).second) cands.push_back(a);

  CacheConflictResult result;
  std::unordered_set<PhysAddr> covered;
  std::set<PhysAddr> found;
  for (PhysAddr target : dram_conflicts) {
    if (covered.count(target)) continue;
    covered.insert(target);
    if (cands.size() < ways) continue;

    std::size_t len = std::min(2 * ways, cands.size());
    bool hit = false;
    while (true) {
      std::vector<PhysAddr> prefix(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(len));
      if (evicts(dev, target, prefix, opt)) {
        hit = true;
        break;
      }
      if (len == cands.size()) break;
      len = std::min(2 * len, cands.size());
    }
    if (!hit) continue;

    const auto minimal = reduce_eviction_set(
        dev, target, std::vector<PhysAddr>(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(len)), opt);
    // Swapping one member of the minimal set for a candidate keeps the
    // eviction only when the candidate shares the set.
    std::vector<PhysAddr> probe(minimal.begin() + 1, minimal.end());
    const std::unordered_set<PhysAddr> in_minimal(minimal.begin(), minimal.end());
    auto congruent = [&](PhysAddr c) {
      probe.push_back(c);
      const bool yes = evicts(dev, target, probe, opt);
      probe.pop_back();
      return yes;
    };

    std::vector<PhysAddr> cls{target};
    for (PhysAddr d : dram_conflicts) {
      if (covered.count(d)) continue;
      if (congruent(d)) {
        covered.insert(d);
        cls.push_back(d);
      }
    }
    for (PhysAddr c : cands) {
      if (in_minimal.count(c) || congruent(c)) {
        cls.push_back(c);
        found.insert(c);
      }
    }
    result.classes.push_back(std::move(cls));
  }
  // Keep pool order in the output.
  for (PhysAddr c : cands)
    if (found.count(c)) result.conflicts.push_back(c);
  return result;
}

namespace {

std::vector<ChannelId> claiming_channels(MemoryDevice& dev, const ProbeSets& probes, PhysAddr a,
                                         const ProbeOptions& opt) {
  std::vector<ChannelId> hits;
  for (ChannelId ch = 0; ch < probes.per_channel.size(); ++ch)
    if (evicts(dev, a, probes.per_channel[ch], opt)) hits.push_back(ch);
  return hits;
}

CrackError ambiguous(PhysAddr a, std::size_t hits) {
  return CrackError("ambiguous probe at " + hex_addr(a) + ": " + std::to_string(hits) +
                    " channels exceeded the miss threshold");
}

}  // namespace

ChannelId mark_channel(MemoryDevice& dev, const ProbeSets& probes, PhysAddr addr, const ProbeOptions& opt) {
  const PhysAddr a = addr & ~(dev.spec().interleave_granularity - 1);
  const auto hits = claiming_channels(dev, probes, a, opt);
  if (hits.size() != 1) throw ambiguous(a, hits.size());
  return hits.front();
}

void ChannelLabeling::write_csv(std::ostream& out) const {
  out << "addr_hex,channel_id\r\n";
  for (const auto& [a, c] : samples) out << hex_addr(a) << ',' << c << "\r\n";
}

ChannelLabeling ChannelLabeling::read_csv(std::istream& in) {
  ChannelLabeling labels;
  std::string line;
  bool header = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line != "addr_hex,channel_id") throw std::invalid_argument("labels csv: unexpected header '" + line + "'");
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("labels csv: line " + std::to_string(lineno) + " has no comma");
    const PhysAddr a = parse_hex_addr(line.substr(0, comma));
    const auto ch = static_cast<ChannelId>(std::stoul(line.substr(comma + 1)));
    labels.samples.emplace_back(a, ch);
  }
  return labels;
}

DiscoveryResult discover_channels(MemoryDevice& dev, const DiscoveryOptions& opt) {
  const auto& spec = dev.spec();
  const std::uint64_t start_probes = dev.probe_count();
  const auto pool = make_candidate_pool(spec, opt.window_base, opt.window_blocks);
  if (pool.empty()) throw std::invalid_argument("discovery window is empty");
  DiscoveryResult res;
  res.window_labels.region = {opt.window_base, pool.size() * spec.interleave_granularity};

  for (PhysAddr a : pool) {
    const auto hits = claiming_channels(dev, res.probes, a, opt.probe);
    if (hits.size() > 1) throw ambiguous(a, hits.size());
    ChannelId label = hits.empty() ? 0 : hits.front();
    if (hits.empty()) {
      if (res.probes.size() == spec.num_channels)
        throw CrackError("block " + hex_addr(a) + " matched no probe set although all channels are known");
      auto dram = find_dram_bank_conflicts(dev, a, pool, opt.probe);
      std::vector<PhysAddr> seeds{a};
      seeds.insert(seeds.end(), dram.begin(), dram.end());
      auto cache = find_cacheline_conflicts(dev, seeds, pool, opt.probe);
      std::vector<PhysAddr> lines;
      for (auto& cls : cache.classes) {
        if (cls.size() < spec.l2_ways + 1)
          throw CrackError("incomplete eviction set near " + hex_addr(a) + " (" + std::to_string(cls.size()) +
                           " lines); widen the discovery window");
        lines.insert(lines.end(), cls.begin(), cls.begin() + spec.l2_ways + 1);
      }
      if (lines.empty()) throw CrackError("no cache conflicts found for " + hex_addr(a));
      label = static_cast<ChannelId>(res.probes.size());
      res.probes.per_channel.push_back(std::move(lines));
      res.conflicts.seeds.push_back(a);
      res.conflicts.dram_conflicts.push_back(std::move(dram));
      res.conflicts.cache_conflicts.push_back(std::move(cache.conflicts));
      spdlog::debug("channel {} opened at {}", label, hex_addr(a));
      if (mark_channel(dev, res.probes, a, opt.probe) != label)
        throw CrackError("fresh probe set for channel " + std::to_string(label) + " does not claim its seed");
    }
    res.window_labels.samples.emplace_back(a, label);
  }
  if (res.probes.size() != spec.num_channels)
    throw CrackError("discovery window reached " + std::to_string(res.probes.size()) + " of " +
                     std::to_string(spec.num_channels) + " channels");
  res.probe_count = dev.probe_count() - start_probes;
  return res;
}

ChannelLabeling sample_labels(MemoryDevice& dev, const ProbeSets& probes, Region region, std::size_t count,
                              std::uint64_t seed, const ProbeOptions& opt) {
  const std::uint64_t g = dev.spec().interleave_granularity;
  if (region.base % g != 0) throw std::invalid_argument("sample region base must be aligned");
  if (region.base + region.size > dev.spec().vram_size) throw std::invalid_argument("sample region exceeds VRAM");
  const std::uint64_t blocks = region.size / g;
  if (count > blocks) throw std::invalid_argument("sample count exceeds the blocks in the region");
  std::mt19937_64 rng(seed);
  std::unordered_set<std::uint64_t> taken;
  ChannelLabeling labels;
  labels.region = region;
  labels.samples.reserve(count);
  while (labels.samples.size() < count) {
    const std::uint64_t b = uniform_below(rng, blocks);
    if (!taken.insert(b).second) continue;
    const PhysAddr a = region.base + b * g;
    labels.samples.emplace_back(a, mark_channel(dev, probes, a, opt));
  }
  return labels;
}

ChannelId XorHash::predict(PhysAddr addr) const {
  ChannelId ch = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) ch |= static_cast<ChannelId>(std::popcount(addr & masks[i]) & 1) << i;
  return ch;
}

XorHash crack_xor(const ChannelLabeling& labels, std::uint32_t addr_bits, std::uint32_t num_channels) {
  if (addr_bits == 0 || addr_bits > 64) throw std::invalid_argument("addr_bits must be in [1, 64]");
  if (labels.samples.empty()) throw std::invalid_argument("crack_xor needs samples");
  ChannelId max_label = 0;
  for (const auto& s : labels.samples) max_label = std::max(max_label, s.second);
  const auto out_bits = static_cast<std::uint32_t>(std::bit_width(std::max<ChannelId>(max_label, num_channels - 1)));
  const std::uint64_t col_mask = addr_bits == 64 ? ~0ull : (1ull << addr_bits) - 1;

  // pivot[b]: reduced row whose highest set bit is b, with its right-hand side.
  std::vector<std::uint64_t> row(64, 0);
  std::vector<std::uint32_t> rhs(64, 0);
  std::vector<bool> has(64, false);
  for (const auto& [addr, ch] : labels.samples) {
    std::uint64_t r = addr & col_mask;
    std::uint32_t v = ch;
    while (r != 0) {
      const int top = 63 - std::countl_zero(r);
      if (!has[top]) {
        row[top] = r;
        rhs[top] = v;
        has[top] = true;
        break;
      }
      r ^= row[top];
      v ^= rhs[top];
    }
    if (r == 0 && v != 0)
      throw CrackError("mapping not XOR-linear: label of " + hex_addr(addr) + " contradicts earlier samples");
  }
  if ((num_channels & (num_channels - 1)) != 0)
    throw CrackError("mapping not XOR-linear: " + std::to_string(num_channels) +
                     " channels cannot be addressed by XOR output bits");

  // Back substitution with free variables fixed to zero.
  std::vector<std::uint32_t> x(64, 0);
  for (int b = 0; b < 64; ++b) {
    if (!has[b]) continue;
    std::uint32_t v = rhs[b];
    std::uint64_t rest = row[b] & ~(1ull << b);
    while (rest != 0) {
      const int low = std::countr_zero(rest);
      v ^= x[low];
      rest &= rest - 1;
    }
    x[b] = v;
  }
  XorHash h;
  h.masks.assign(out_bits, 0);
  for (int b = 0; b < 64; ++b)
    for (std::uint32_t j = 0; j < out_bits; ++j)
      if ((x[b] >> j) & 1) h.masks[j] |= 1ull << b;
  return h;
}

ChannelId PeriodTable::predict(PhysAddr addr) const { return table[(addr % period) / granularity]; }

PeriodTable learn_period_table(const ChannelLabeling& labels, const GpuSpec& geometry, std::uint32_t cap_multiple) {
  if (labels.samples.empty()) throw std::invalid_argument("learn_period_table needs samples");
  const std::uint64_t g = geometry.interleave_granularity;
  const std::uint64_t step = g * geometry.num_channels;
  constexpr ChannelId unset = std::numeric_limits<ChannelId>::max();
  bool consistent_but_sparse = false;
  for (std::uint32_t k = 1; k <= cap_multiple; ++k) {
    const std::uint64_t period = step * k;
    std::vector<ChannelId> table(period / g, unset);
    bool ok = true;
    for (const auto& [a, ch] : labels.samples) {
      auto& slot = table[(a % period) / g];
      if (slot == unset) {
        slot = ch;
      } else if (slot != ch) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    if (std::find(table.begin(), table.end(), unset) != table.end()) {
      consistent_but_sparse = true;
      continue;
    }
    return PeriodTable{period, g, std::move(table)};
  }
  throw CrackError(std::string("aperiodic within cap of ") + std::to_string(step * cap_multiple) + " bytes" +
                   (consistent_but_sparse ? " (some consistent periods lacked full sample coverage)" : ""));
}

ConsistencyReport period_consistency(const ChannelLabeling& labels, std::uint64_t period, std::uint64_t granularity) {
  if (period == 0 || granularity == 0 || period % granularity != 0)
    throw std::invalid_argument("period must be a positive multiple of the granularity");
  std::map<std::uint64_t, std::map<ChannelId, std::size_t>> votes;
  for (const auto& [a, ch] : labels.samples) ++votes[(a % period) / granularity][ch];
  std::map<std::uint64_t, ChannelId> winner;
  for (const auto& [slot, counts] : votes) {
    winner[slot] = std::max_element(counts.begin(), counts.end(), [](const auto& x, const auto& y) {
                     return x.second < y.second;
                   })->first;
  }
  ConsistencyReport rep;
  rep.checked = labels.samples.size();
  for (const auto& s : labels.samples)
    if (winner[(s.first % period) / granularity] != s.second) rep.mismatches.push_back(s);
  return rep;
}

namespace {

MlpNet<float>::Mat encode_blocks(const std::vector<PhysAddr>& addrs, std::uint32_t shift, int bits) {
  MlpNet<float>::Mat x(bits, static_cast<Eigen::Index>(addrs.size()));
  for (std::size_t j = 0; j < addrs.size(); ++j) {
    const std::uint64_t block = addrs[j] >> shift;
    for (int b = 0; b < bits; ++b) x(b, static_cast<Eigen::Index>(j)) = static_cast<float>((block >> b) & 1) * 2.0f - 1.0f;
  }
  return x;
}

double accuracy_of(const MlpNet<float>& net, const MlpNet<float>::Mat& x, const std::vector<int>& y) {
  if (y.empty()) return 0.0;
  const auto pred = net.predict(x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += pred[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(y.size());
}

}  // namespace

ChannelId MlpApproximator::predict(PhysAddr addr) const {
  const auto x = encode_blocks({addr}, shift_, net_.sizes().front());
  return static_cast<ChannelId>(net_.predict(x).front());
}

MlpTrainResult train_mlp(const ChannelLabeling& labels, const GpuSpec& geometry, const MlpConfig& cfg) {
  const std::uint32_t n = geometry.num_channels;
  const std::size_t total = labels.samples.size();
  if (total < static_cast<std::size_t>(n) * 100)
    throw std::invalid_argument("train_mlp needs at least " + std::to_string(n * 100) + " samples, got " +
                                std::to_string(total));
  std::vector<std::size_t> counts(n, 0);
  for (const auto& s : labels.samples) {
    if (s.second >= n) throw std::invalid_argument("label " + std::to_string(s.second) + " out of range");
    ++counts[s.second];
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo == 0 || *hi > 4 * *lo) throw std::invalid_argument("labels are not balanced within a factor of 4");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0))
    throw std::invalid_argument("epochs, batch_size and learning_rate must be positive");
  if (!(cfg.holdout_fraction >= 0 && cfg.holdout_fraction < 1))
    throw std::invalid_argument("holdout_fraction must be in [0, 1)");

  const auto shift = static_cast<std::uint32_t>(std::countr_zero(geometry.interleave_granularity));
  const int bits = static_cast<int>(geometry.address_bits() - shift);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(std::span(order), rng);
  const auto holdout = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(total)));
  const std::size_t train_n = total - holdout;

  std::vector<PhysAddr> train_addr, hold_addr;
  std::vector<int> train_y, hold_y;
  for (std::size_t i = 0; i < total; ++i) {
    const auto& s = labels.samples[order[i]];
    if (i < train_n) {
      train_addr.push_back(s.first);
      train_y.push_back(static_cast<int>(s.second));
    } else {
      hold_addr.push_back(s.first);
      hold_y.push_back(static_cast<int>(s.second));
    }
  }
  const auto x_train = encode_blocks(train_addr, shift, bits);
  const auto x_hold = encode_blocks(hold_addr, shift, bits);

  std::vector<int> sizes{bits};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(static_cast<int>(n));
  MlpNet<float> net(sizes, rng);
  AdamOptimizer<float> adam(net, cfg.learning_rate);

  std::vector<std::size_t> idx(train_n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<MlpNet<float>::Mat> dw;
  std::vector<MlpNet<float>::Vec> db;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(std::span(idx), rng);
    if (cfg.cosine_decay)
      adam.set_learning_rate(cfg.learning_rate * 0.5 * (1 + std::cos(3.141592653589793 * epoch / cfg.epochs)));
    double epoch_loss = 0;
    for (std::size_t start = 0; start < train_n; start += batch) {
      const std::size_t m = std::min(batch, train_n - start);
      MlpNet<float>::Mat xb(bits, static_cast<Eigen::Index>(m));
      std::vector<int> yb(m);
      for (std::size_t j = 0; j < m; ++j) {
        xb.col(static_cast<Eigen::Index>(j)) = x_train.col(static_cast<Eigen::Index>(idx[start + j]));
        yb[j] = train_y[idx[start + j]];
      }
      const float loss = net.loss_and_grad(xb, yb, dw, db);
      if (!std::isfinite(loss)) throw CrackError("training diverged at epoch " + std::to_string(epoch));
      epoch_loss += loss * static_cast<double>(m);
      adam.step(net, dw, db);
    }
    spdlog::debug("mlp epoch {} loss {:.5f}", epoch, epoch_loss / static_cast<double>(train_n));
  }

  MlpTrainResult res;
  res.train_accuracy = accuracy_of(net, x_train, train_y);
  res.holdout_accuracy = accuracy_of(net, x_hold, hold_y);
  res.holdout_size = holdout;
  res.model = MlpApproximator(std::move(net), shift);
  return res;
}

ChannelId predict_channel(const ChannelPredictor& model, PhysAddr addr) {
  return std::visit([addr](const auto& m) { return m.predict(addr); }, model);
}

std::string predictor_kind(const ChannelPredictor& model) {
  switch (model.index()) {
    case 0:
      return "xor_hash";
    case 1:
      return "period_table";
    default:
      return "mlp";
  }
}

nlohmann::json predictor_to_json(const ChannelPredictor& model) {
  nlohmann::json j{{"format_version", 1}, {"kind", predictor_kind(model)}};
  if (const auto* x = std::get_if<XorHash>(&model)) {
    j["masks"] = x->masks;
  } else if (const auto* p = std::get_if<PeriodTable>(&model)) {
    j["period"] = p->period;
    j["granularity"] = p->granularity;
    j["table"] = p->table;
  } else {
    const auto& m = std::get<MlpApproximator>(model);
    j["input_shift"] = m.input_shift();
    j["sizes"] = m.net().sizes();
    auto layers = nlohmann::json::array();
    for (std::size_t l = 0; l < m.net().num_layers(); ++l) {
      const auto& w = m.net().weights()[l];
      const auto& b = m.net().biases()[l];
      std::vector<float> wf;
      wf.reserve(static_cast<std::size_t>(w.size()));
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) wf.push_back(w(r, c));
      layers.push_back({{"weights", wf}, {"bias", std::vector<float>(b.data(), b.data() + b.size())}});
    }
    j["layers"] = layers;
  }
  return j;
}

ChannelPredictor predictor_from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != 1) throw std::invalid_argument("unsupported model format_version");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "xor_hash") return XorHash{j.at("masks").get<std::vector<std::uint64_t>>()};
  if (kind == "period_table") {
    PeriodTable p{j.at("period").get<std::uint64_t>(), j.at("granularity").get<std::uint64_t>(),
                  j.at("table").get<std::vector<ChannelId>>()};
    if (p.granularity == 0 || p.period != p.table.size() * p.granularity)
      throw std::invalid_argument("period_table: period does not match table length");
    return p;
  }
  if (kind == "mlp") {
    const auto sizes = j.at("sizes").get<std::vector<int>>();
    std::mt19937_64 rng(0);
    MlpNet<float> net(sizes, rng);
    const auto& layers = j.at("layers");
    if (layers.size() != net.num_layers()) throw std::invalid_argument("mlp: layer count mismatch");
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const auto wf = layers[l].at("weights").get<std::vector<float>>();
      const auto bf = layers[l].at("bias").get<std::vector<float>>();
      auto& w = net.weights()[l];
      auto& b = net.biases()[l];
      if (wf.size() != static_cast<std::size_t>(w.size()) || bf.size() != static_cast<std::size_t>(b.size()))
        throw std::invalid_argument("mlp: parameter shape mismatch in layer " + std::to_string(l));
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = wf[k++];
      for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = bf[static_cast<std::size_t>(r)];
    }
    return MlpApproximator(std::move(net), j.at("input_shift").get<std::uint32_t>());
  }
  throw std::invalid_argument("unknown model kind '" + kind + "'");
}

double holdout_accuracy(const ChannelPredictor& model, const GroundTruthMapping& truth, Region region,
                        std::size_t count, std::uint64_t seed) {
  if (count == 0) return 0.0;
  const std::uint64_t g = truth.spec().interleave_granularity;
  const std::uint64_t blocks = region.size / g;
  if (blocks == 0) throw std::invalid_argument("holdout region is empty");
  std::mt19937_64 rng(seed);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const PhysAddr a = region.base + uniform_below(rng, blocks) * g;
    ok += predict_channel(model, a) == truth.channel_of(a);
  }
  return static_cast<double>(ok) / static_cast<double>(count);
}

}  // namespace chforge

namespace chforge {

std::string to_string(CrackMode m) {
  switch (m) {
    case CrackMode::Auto:
      return "auto";
    case CrackMode::Xor:
      return "xor";
    case CrackMode::Period:
      return "period";
    default:
      return "mlp";
  }
}

CrackMode parse_crack_mode(const std::string& text) {
  if (text == "auto") return CrackMode::Auto;
  if (text == "xor") return CrackMode::Xor;
  if (text == "period") return CrackMode::Period;
  if (text == "mlp") return CrackMode::Mlp;
  throw std::invalid_argument("unknown crack mode '" + text + "' (expected auto, xor, period or mlp)");
}

nlohmann::json RevengResult::report() const {
  nlohmann::json j{{"crack", to_string(crack)},
                   {"model_kind", predictor_kind(model)},
                   {"channels", channels},
                   {"training_labels", labels.samples.size()},
                   {"holdout_region", {{"base", hex_addr(holdout_region.base)}, {"size", holdout_region.size}}},
                   {"holdout_size", holdout_size},
                   {"holdout_correct", holdout_correct},
                   {"holdout_accuracy", holdout_accuracy()},
                   {"probe_count", probe_count}};
  if (mlp_validation) j["mlp_validation_accuracy"] = *mlp_validation;
  return j;
}

RevengResult run_reveng(MemoryDevice& dev, const RevengOptions& opt) {
  const auto& spec = dev.spec();
  const std::uint64_t start_probes = dev.probe_count();
  const bool mlp = opt.crack == CrackMode::Mlp;
  const std::size_t train_n = opt.train_samples ? opt.train_samples : (mlp ? 15000 : 2000);
  const Region region = mlp ? Region{0, std::min(opt.mlp_region, spec.vram_size)} : Region{0, spec.vram_size};
  if (region.size < spec.interleave_granularity) throw std::invalid_argument("reveng region is empty");

  auto disc = discover_channels(dev, opt.discovery);
  spdlog::info("discovered {} channels with {} probes", disc.probes.size(), disc.probe_count);
  const auto sampled = sample_labels(dev, disc.probes, region, train_n, opt.seed, opt.discovery.probe);

  RevengResult res;
  res.crack = opt.crack;
  res.channels = static_cast<std::uint32_t>(disc.probes.size());
  res.holdout_region = region;
  res.labels = disc.window_labels;
  res.labels.region = region;
  res.labels.samples.insert(res.labels.samples.end(), sampled.samples.begin(), sampled.samples.end());

  switch (opt.crack) {
    case CrackMode::Xor:
      res.model = crack_xor(res.labels, spec.address_bits(), spec.num_channels);
      break;
    case CrackMode::Period:
      res.model = learn_period_table(res.labels, spec);
      break;
    case CrackMode::Mlp: {
      res.labels = sampled;
      auto trained = train_mlp(sampled, spec, opt.mlp);
      res.mlp_validation = trained.holdout_accuracy;
      res.model = std::move(trained.model);
      break;
    }
    case CrackMode::Auto:
      try {
        res.model = crack_xor(res.labels, spec.address_bits(), spec.num_channels);
        res.crack = CrackMode::Xor;
      } catch (const CrackError& e) {
        spdlog::info("xor solver failed ({}); falling back to the period table", e.what());
        res.model = learn_period_table(res.labels, spec);
        res.crack = CrackMode::Period;
      }
      break;
  }

  std::unordered_set<PhysAddr> seen;
  for (const auto& s : res.labels.samples) seen.insert(s.first);
  const std::uint64_t g = spec.interleave_granularity;
  const std::uint64_t blocks = region.size / g;
  const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(opt.holdout_samples, blocks - std::min<std::uint64_t>(blocks, seen.size())));
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ull);
  while (res.holdout_size < want) {
    const PhysAddr a = region.base + uniform_below(rng, blocks) * g;
    if (!seen.insert(a).second) continue;
    ++res.holdout_size;
    res.holdout_correct += predict_channel(res.model, a) == dev.truth().channel_of(a);
  }
  res.probe_count = dev.probe_count() - start_probes;
  return res;
}

}  // namespace chforge
