#include "channelforge/workload.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "channelforge/util.hpp"

namespace chforge {

namespace {

double exp_sample(std::mt19937_64& rng, double mean) { return -std::log(1.0 - unit_uniform(rng)) * mean; }

}  // namespace

std::string to_string(ArrivalKind k) {
  switch (k) {
    case ArrivalKind::Poisson:
      return "poisson";
    case ArrivalKind::BurstyTrace:
      return "bursty_trace";
    default:
      return "closed_loop";
  }
}

ArrivalKind parse_arrival_kind(const std::string& text) {
  if (text == "poisson") return ArrivalKind::Poisson;
  if (text == "bursty_trace" || text == "bursty") return ArrivalKind::BurstyTrace;
  if (text == "closed_loop") return ArrivalKind::ClosedLoop;
  throw std::invalid_argument("unknown arrival kind '" + text + "'");
}

void ArrivalParams::validate() const {
  if (kind == ArrivalKind::ClosedLoop) return;
  if (!(rate > 0)) throw std::invalid_argument("arrival rate must be positive");
  if (!(scale > 0)) throw std::invalid_argument("arrival scale must be positive");
  if (kind == ArrivalKind::BurstyTrace && (!(burst_factor >= 1) || !(mean_dwell_s > 0)))
    throw std::invalid_argument("bursty arrivals need burst_factor >= 1 and mean_dwell_s > 0");
}

void to_json(nlohmann::json& j, const ArrivalParams& p) {
  j = {{"kind", to_string(p.kind)},
       {"rate", p.rate},
       {"burst_factor", p.burst_factor},
       {"mean_dwell_s", p.mean_dwell_s},
       {"scale", p.scale}};
}

void from_json(const nlohmann::json& j, ArrivalParams& p) {
  if (j.contains("kind")) p.kind = parse_arrival_kind(j.at("kind").get<std::string>());
  if (j.contains("rate")) j.at("rate").get_to(p.rate);
  if (j.contains("burst_factor")) j.at("burst_factor").get_to(p.burst_factor);
  if (j.contains("mean_dwell_s")) j.at("mean_dwell_s").get_to(p.mean_dwell_s);
  if (j.contains("scale")) j.at("scale").get_to(p.scale);
}

std::vector<double> gen_workload(const ArrivalParams& params, double horizon_ns, std::uint64_t seed) {
  params.validate();
  std::vector<double> out;
  if (params.kind == ArrivalKind::ClosedLoop) return out;
  std::mt19937_64 rng(seed);
  const double unscaled_horizon = horizon_ns / params.scale;

  if (params.kind == ArrivalKind::Poisson) {
    const double mean = 1e9 / params.rate;
    for (double t = exp_sample(rng, mean); t < unscaled_horizon; t += exp_sample(rng, mean)) out.push_back(t * params.scale);
    return out;
  }

  // Two-state Markov-modulated Poisson process with equal mean dwell times,
  // so the long-run rate equals params.rate.
  const double calm = 2 * params.rate / (1 + params.burst_factor);
  const double rates[2] = {calm, calm * params.burst_factor};
  const double dwell = params.mean_dwell_s * 1e9;
  int state = 0;
  double t = 0;
  double state_end = exp_sample(rng, dwell);
  while (t < unscaled_horizon) {
    const double gap = exp_sample(rng, 1e9 / rates[state]);
    if (t + gap >= state_end) {
      // Memoryless: restart the clock in the next state.
      t = state_end;
      state ^= 1;
      state_end = t + exp_sample(rng, dwell);
      continue;
    }
    t += gap;
    if (t < unscaled_horizon) out.push_back(t * params.scale);
  }
  return out;
}

}  // namespace chforge
