// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace mixcomp {

struct ExpertStats;

/// One layer's bit-assignment instance over bit options {1, 2, 3}.
struct AllocationProblem {
  std::vector<double> c;                 // significance per expert
  std::vector<std::array<double, 3>> eps;  // eps[i][b - 1]
  int target_sum = 0;
  double gamma = 2.0;
  bool floors = true;  // at least one 3-bit and one 2-bit expert

  std::size_t n() const { return c.size(); }
  /// Throws ArgumentError on malformed input (sizes, negative values).
  void validate() const;
};

struct AllocationResult {
  std::vector<int> bits;
  double objective = 0.0;
  bool operator==(const AllocationResult&) const = default;
};

/// Empty when the budget and floors admit a solution, otherwise the reason.
std::string infeasibility_reason(std::size_t n, int target_sum, bool floors);

/// Exact minimiser of Σ c_i · eps[i][b_i]^gamma; ties go to the
/// lexicographically smallest bit vector. Throws InfeasibleError.
AllocationResult solve_ip(const AllocationProblem& p);

/// Plain enumeration of all 3^n vectors (n ≤ 10) with the same objective
/// and tie-break.
AllocationResult brute_force_oracle(const AllocationProblem& p);

double allocation_objective(const AllocationProblem& p, const std::vector<int>& bits);

enum class Strategy { pmq, hessian, frequency, weight, random, fnorm };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

struct AllocatorOptions {
  double k = 2.5;  // mean expert bit-width
  double alpha = 1.0;
  double beta = 2.0;
  double gamma = 2.0;
  Strategy strategy = Strategy::pmq;
  bool floors = true;
  std::uint64_t seed = 0;  // random strategy only
};

struct BitAllocation {
  std::string config_digest;
  std::string strategy;
  double k = 0.0;
  double alpha = 1.0;
  double beta = 2.0;
  double gamma = 2.0;
  bool floors = true;
  std::vector<std::vector<int>> bits;  // [layer][expert]
  std::vector<double> objective;       // per layer

  bool operator==(const BitAllocation&) const = default;
};

/// Integral per-layer target n·k; throws ArgumentError naming the two
/// nearest feasible k values otherwise.
int bit_budget(std::size_t n, double k);

/// Solves every layer independently under the chosen strategy.
BitAllocation allocate_model(const ExpertStats& stats, const AllocatorOptions& opts);

/// Uniform sample over the vectors meeting the budget (and floors).
std::vector<int> random_allocation(std::size_t n, int target_sum, bool floors, std::uint64_t seed);

nlohmann::json allocation_to_json(const BitAllocation& a);
BitAllocation allocation_from_json(const nlohmann::json& j);
void save_allocation(const std::string& path, const BitAllocation& a);
BitAllocation load_allocation(const std::string& path);

}  // namespace mixcomp
