#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace chforge {

std::string hex_addr(std::uint64_t addr);
std::uint64_t parse_hex_addr(const std::string& text);

// Fisher-Yates driven directly by the engine output, so a seed produces the
// same order regardless of the standard library's distribution code.
template <typename T>
void shuffle_in_place(std::span<T> items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

// Uniform double in [0, 1) from 53 engine bits.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Uniform integer in [0, n).
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

// Nearest-rank percentile (q in [0, 100]); empty input yields 0.
double percentile(std::vector<double> values, double q);

// RFC 4180 field quoting.
std::string csv_field(const std::string& text);

// Fixed-format number rendering used by every emitted artifact.
std::string fmt_double(double v, int digits = 6);

}  // namespace chforge
