#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace chforge {

enum class ArrivalKind { Poisson, BurstyTrace, ClosedLoop };

std::string to_string(ArrivalKind k);
ArrivalKind parse_arrival_kind(const std::string& text);

struct ArrivalParams {
  ArrivalKind kind = ArrivalKind::Poisson;
  // Mean requests per second before scaling.
  double rate = 25;
  // Bursty: arrival-rate ratio between the burst and calm states.
  double burst_factor = 6;
  // Bursty: mean dwell time of each modulating state, seconds.
  double mean_dwell_s = 0.2;
  // Multiplies every inter-arrival interval.
  double scale = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ArrivalParams& p);
void from_json(const nlohmann::json& j, ArrivalParams& p);

// Arrival times in nanoseconds within [0, horizon_ns). Closed-loop sources
// have no arrival stream and yield an empty vector.
std::vector<double> gen_workload(const ArrivalParams& params, double horizon_ns, std::uint64_t seed);

}  // namespace chforge
