#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "channelforge/gpu_model.hpp"
#include "channelforge/mlp.hpp"

namespace chforge {

// Domain failure of a cracker (nonlinear mapping, no period, divergence).
class CrackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Probe primitive: flush, read `first`, then `second` back to back. Each
// probe is repeated `votes` times and the majority wins.
struct ProbeOptions {
  std::uint32_t votes = 3;
};

// Aligned candidate addresses: `count` consecutive blocks starting at base.
std::vector<PhysAddr> make_candidate_pool(const GpuSpec& spec, PhysAddr base, std::uint64_t count = 4096);

std::vector<PhysAddr> find_dram_bank_conflicts(MemoryDevice& dev, PhysAddr seed, const std::vector<PhysAddr>& pool,
                                               const ProbeOptions& opt = {});

// True when reading `lines` after `target` evicts `target` from L2.
bool evicts(MemoryDevice& dev, PhysAddr target, const std::vector<PhysAddr>& lines, const ProbeOptions& opt = {});

struct CacheConflictResult {
  // Pool members that share an L2 set with some member of dram_conflicts.
  std::vector<PhysAddr> conflicts;
  // One class per L2 set reached: members of dram_conflicts and of the pool
  // that evict each other.
  std::vector<std::vector<PhysAddr>> classes;
};

CacheConflictResult find_cacheline_conflicts(MemoryDevice& dev, const std::vector<PhysAddr>& dram_conflicts,
                                             const std::vector<PhysAddr>& pool, const ProbeOptions& opt = {});

struct ConflictSets {
  std::vector<PhysAddr> seeds;
  std::vector<std::vector<PhysAddr>> dram_conflicts;
  std::vector<std::vector<PhysAddr>> cache_conflicts;
};

// One eviction set per channel, indexed by channel id.
struct ProbeSets {
  std::vector<std::vector<PhysAddr>> per_channel;
  std::size_t size() const { return per_channel.size(); }
};

ChannelId mark_channel(MemoryDevice& dev, const ProbeSets& probes, PhysAddr addr, const ProbeOptions& opt = {});

struct Region {
  PhysAddr base = 0;
  std::uint64_t size = 0;
};

struct ChannelLabeling {
  std::vector<std::pair<PhysAddr, ChannelId>> samples;
  Region region;

  void write_csv(std::ostream& out) const;
  static ChannelLabeling read_csv(std::istream& in);
};

struct DiscoveryResult {
  ProbeSets probes;
  ConflictSets conflicts;
  ChannelLabeling window_labels;
  std::uint64_t probe_count = 0;
};

struct DiscoveryOptions {
  PhysAddr window_base = 0;
  std::uint64_t window_blocks = 4096;
  ProbeOptions probe;
};

// Walks the window in address order; a block no known probe set claims opens
// a new channel, labeled in discovery order.
DiscoveryResult discover_channels(MemoryDevice& dev, const DiscoveryOptions& opt = {});

// Labels `count` distinct uniformly drawn aligned addresses of `region`.
ChannelLabeling sample_labels(MemoryDevice& dev, const ProbeSets& probes, Region region, std::size_t count,
                              std::uint64_t seed, const ProbeOptions& opt = {});

struct XorHash {
  std::vector<std::uint64_t> masks;
  ChannelId predict(PhysAddr addr) const;
};

XorHash crack_xor(const ChannelLabeling& labels, std::uint32_t addr_bits, std::uint32_t num_channels);

struct PeriodTable {
  std::uint64_t period = 0;
  std::uint64_t granularity = 1024;
  std::vector<ChannelId> table;
  ChannelId predict(PhysAddr addr) const;
};

PeriodTable learn_period_table(const ChannelLabeling& labels, const GpuSpec& geometry, std::uint32_t cap_multiple = 64);

struct ConsistencyReport {
  std::size_t checked = 0;
  std::vector<std::pair<PhysAddr, ChannelId>> mismatches;
};

// Samples whose label disagrees with the majority label of their slot under
// `period`.
ConsistencyReport period_consistency(const ChannelLabeling& labels, std::uint64_t period, std::uint64_t granularity);

struct MlpConfig {
  std::vector<int> hidden = std::vector<int>(7, 64);
  int epochs = 100;
  double learning_rate = 3e-3;
  // Anneal the step size to zero over the run.
  bool cosine_decay = true;
  int batch_size = 64;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1;
};

class MlpApproximator {
 public:
  MlpApproximator() = default;
  MlpApproximator(MlpNet<float> net, std::uint32_t input_shift) : net_(std::move(net)), shift_(input_shift) {}

  ChannelId predict(PhysAddr addr) const;
  const MlpNet<float>& net() const { return net_; }
  std::uint32_t input_shift() const { return shift_; }

 private:
  MlpNet<float> net_;
  std::uint32_t shift_ = 10;
};

struct MlpTrainResult {
  MlpApproximator model;
  double holdout_accuracy = 0;
  double train_accuracy = 0;
  std::size_t holdout_size = 0;
};

MlpTrainResult train_mlp(const ChannelLabeling& labels, const GpuSpec& geometry, const MlpConfig& cfg);

using ChannelPredictor = std::variant<XorHash, PeriodTable, MlpApproximator>;

ChannelId predict_channel(const ChannelPredictor& model, PhysAddr addr);
std::string predictor_kind(const ChannelPredictor& model);

nlohmann::json predictor_to_json(const ChannelPredictor& model);
ChannelPredictor predictor_from_json(const nlohmann::json& j);

// Fraction of `count` random aligned addresses in `region` the predictor
// labels like the ground truth.
double holdout_accuracy(const ChannelPredictor& model, const GroundTruthMapping& truth, Region region,
                        std::size_t count, std::uint64_t seed);

enum class CrackMode { Auto, Xor, Period, Mlp };

std::string to_string(CrackMode m);
CrackMode parse_crack_mode(const std::string& text);

struct RevengOptions {
  // Auto tries the XOR solver and falls back to the period table.
  CrackMode crack = CrackMode::Auto;
  // 0 picks 2000 for the solvers and 15000 for the MLP.
  std::size_t train_samples = 0;
  std::size_t holdout_samples = 10000;
  // The MLP samples (and is scored) inside [0, mlp_region).
  std::uint64_t mlp_region = 64 * MiB;
  std::uint64_t seed = 1;
  DiscoveryOptions discovery;
  MlpConfig mlp;
};

struct RevengResult {
  CrackMode crack = CrackMode::Auto;
  ChannelPredictor model;
  // Discovery window labels followed by the sampled training labels.
  ChannelLabeling labels;
  Region holdout_region;
  std::size_t holdout_size = 0;
  std::size_t holdout_correct = 0;
  std::uint64_t probe_count = 0;
  std::uint32_t channels = 0;
  // Internal validation split of the MLP, when one was trained.
  std::optional<double> mlp_validation;

  double holdout_accuracy() const {
    return holdout_size ? static_cast<double>(holdout_correct) / static_cast<double>(holdout_size) : 0.0;
  }
  nlohmann::json report() const;
};

// Discover channels, label training addresses by probing, crack, then score
// addresses never used in training against the ground truth.
RevengResult run_reveng(MemoryDevice& dev, const RevengOptions& opt = {});

}  // namespace chforge
