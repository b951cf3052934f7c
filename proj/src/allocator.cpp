// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/numerics.hpp"
#include "mixcomp/profiler.hpp"

namespace mixcomp {

void AllocationProblem::validate() const {
  require(n() >= 1, "allocation problem: need at least one expert");
  require(eps.size() == n(), "allocation problem: eps rows must match the expert count");
  require(std::isfinite(gamma) && gamma > 0.0, "allocation problem: gamma must be positive");
  for (std::size_t i = 0; i < n(); ++i) {
    require(std::isfinite(c[i]) && c[i] >= 0.0, "allocation problem: significance must be finite and >= 0");
    for (double e : eps[i]) require(std::isfinite(e) && e >= 0.0, "allocation problem: eps must be finite and >= 0");
  }
}

std::string infeasibility_reason(std::size_t n, int target_sum, bool floors) {
  const long long N = static_cast<long long>(n);
  const long long T = target_sum;
  std::ostringstream ss;
  if (T < N) {
    ss << "budget sum(bits) = " << T << " is below " << N << " (every expert at 1 bit)";
  } else if (T > 3 * N) {
    ss << "budget sum(bits) = " << T << " exceeds " << 3 * N << " (every expert at 3 bits)";
  } else if (floors && N < 2) {
    ss << "floor constraints (>=1 three-bit and >=1 two-bit expert) need at least 2 experts, have " << N;
  } else if (floors && T < N + 3) {
    ss << "floor constraints (>=1 three-bit and >=1 two-bit expert) need sum(bits) >= " << N + 3 << ", budget is "
       << T;
  } else if (floors && T > 3 * N - 1) {
    ss << "floor constraints (>=1 three-bit and >=1 two-bit expert) need sum(bits) <= " << 3 * N - 1
       << ", budget is " << T;
  }
  return ss.str();
}

namespace {

std::vector<std::array<double, 3>> cost_table(const AllocationProblem& p) {
  std::vector<std::array<double, 3>> cost(p.n());
  for (std::size_t i = 0; i < p.n(); ++i) {
    for (int b = 0; b < 3; ++b) cost[i][b] = p.c[i] * (p.gamma == 1.0 ? p.eps[i][b] : std::pow(p.eps[i][b], p.gamma));
  }
  return cost;
}

double sum_costs(const std::vector<std::array<double, 3>>& cost, const std::vector<int>& bits) {
  double acc = 0.0;
  for (std::size_t i = 0; i < bits.size(); ++i) acc += cost[i][bits[i] - 1];
  return acc;
}

void check_feasible(const AllocationProblem& p) {
  p.validate();
  const std::string why = infeasibility_reason(p.n(), p.target_sum, p.floors);
  if (!why.empty()) throw InfeasibleError("infeasible allocation: " + why);
}

// Depth-first search in lexicographic order. Only strictly better objectives
// replace the incumbent, so the first optimum found (the lexicographically
// smallest) survives.
class Search {
 public:
  Search(const AllocationProblem& p, bool bound)
      : p_(p), cost_(cost_table(p)), use_bound_(bound), n_(p.n()), bits_(p.n(), 0), suffix_min_(p.n() + 1, 0.0) {
    for (std::size_t i = n_; i-- > 0;) {
      suffix_min_[i] = suffix_min_[i + 1] + std::min({cost_[i][0], cost_[i][1], cost_[i][2]});
    }
  }

  AllocationResult run() {
    visit(0, p_.target_sum, 0, 0, 0.0);
    if (best_bits_.empty()) throw InfeasibleError("infeasible allocation: no vector meets the constraints");
    return {best_bits_, sum_costs(cost_, best_bits_)};
  }

 private:
  bool can_finish(std::size_t remaining, long long sum_left, int n3, int n2) const {
    const long long r = static_cast<long long>(remaining);
    const long long need3 = p_.floors && n3 == 0 ? 1 : 0;
    const long long need2 = p_.floors && n2 == 0 ? 1 : 0;
    if (need3 + need2 > r) return false;
    return sum_left >= r + 2 * need3 + need2 && sum_left <= 3 * r - need2;
  }

  void visit(std::size_t i, long long sum_left, int n3, int n2, double partial) {
    if (i == n_) {
      const double obj = sum_costs(cost_, bits_);
      if (best_bits_.empty() || obj < best_) {
        best_ = obj;
        best_bits_ = bits_;
      }
      return;
    }
    if (use_bound_ && !best_bits_.empty()) {
      const double bound = partial + suffix_min_[i];
      if (bound > best_ + 1e-12 * (std::fabs(best_) + 1.0)) return;
    }
    for (int b = 1; b <= 3; ++b) {
      const int m3 = n3 + (b == 3);
      const int m2 = n2 + (b == 2);
      if (!can_finish(n_ - i - 1, sum_left - b, m3, m2)) continue;
      bits_[i] = b;
      visit(i + 1, sum_left - b, m3, m2, partial + cost_[i][b - 1]);
    }
  }

  const AllocationProblem& p_;
  std::vector<std::array<double, 3>> cost_;
  bool use_bound_;
  std::size_t n_;
  std::vector<int> bits_;
  std::vector<double> suffix_min_;
  std::vector<int> best_bits_;
  double best_ = std::numeric_limits<double>::infinity();
};

}  // namespace

double allocation_objective(const AllocationProblem& p, const std::vector<int>& bits) {
  p.validate();
  require(bits.size() == p.n(), "allocation_objective: bit vector length mismatch");
  for (int b : bits) require(b >= 1 && b <= 3, "allocation_objective: bits must be 1, 2 or 3");
  return sum_costs(cost_table(p), bits);
}

AllocationResult solve_ip(const AllocationProblem& p) {
  check_feasible(p);
  return Search(p, p.n() > 12).run();
}

AllocationResult brute_force_oracle(const AllocationProblem& p) {
  if (p.n() > 10) throw ArgumentError("brute_force_oracle: n = " + std::to_string(p.n()) + " exceeds 10");
  check_feasible(p);
  const auto cost = cost_table(p);
  const std::size_t n = p.n();
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= 3;
  std::vector<int> bits(n, 1);
  std::vector<int> best_bits;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t code = 0; code < total; ++code) {
    // Digit 0 is the most significant, so codes ascend lexicographically.
    std::size_t rest = code;
    for (std::size_t i = n; i-- > 0;) {
      bits[i] = static_cast<int>(rest % 3) + 1;
      rest /= 3;
    }
    int sum = 0;
    int n2 = 0;
    int n3 = 0;
    for (int b : bits) {
      sum += b;
      n2 += b == 2;
      n3 += b == 3;
    }
    if (sum != p.target_sum) continue;
    if (p.floors && (n2 == 0 || n3 == 0)) continue;
    const double obj = sum_costs(cost, bits);
    if (best_bits.empty() || obj < best) {
      best = obj;
      best_bits = bits;
    }
  }
  if (best_bits.empty()) throw InfeasibleError("infeasible allocation: no vector meets the constraints");
  return {best_bits, best};
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::pmq: return "pmq";
    case Strategy::hessian: return "hessian";
    case Strategy::frequency: return "frequency";
    case Strategy::weight: return "weight";
    case Strategy::random: return "random";
    case Strategy::fnorm: return "fnorm";
  }
  return "pmq";
}

Strategy parse_strategy(const std::string& s) {
  for (Strategy v : {Strategy::pmq, Strategy::hessian, Strategy::frequency, Strategy::weight, Strategy::random,
                     Strategy::fnorm}) {
    if (to_string(v) == s) return v;
  }
  throw ArgumentError("unknown strategy '" + s + "' (expected pmq|hessian|frequency|weight|random|fnorm)");
}

int bit_budget(std::size_t n, double k) {
  require(n >= 1, "bit budget: no experts");
  require(std::isfinite(k), "bit budget: k must be finite");
  const double t = static_cast<double>(n) * k;
  const double r = std::round(t);
  if (std::fabs(t - r) > 1e-9) {
    const double lo = std::floor(t) / static_cast<double>(n);
    const double hi = std::ceil(t) / static_cast<double>(n);
    std::ostringstream ss;
    ss << "k = " << k << " gives a non-integral bit budget n*k = " << t << " for n = " << n
       << " experts; nearest feasible k values: " << lo << ", " << hi;
    throw ArgumentError(ss.str());
  }
  return static_cast<int>(r);
}

std::vector<int> random_allocation(std::size_t n, int target_sum, bool floors, std::uint64_t seed) {
  const std::string why = infeasibility_reason(n, target_sum, floors);
  if (!why.empty()) throw InfeasibleError("infeasible allocation: " + why);
  // Pick a composition (n1, n2, n3) with probability proportional to the
  // number of distinct vectors it produces, then shuffle.
  struct Comp {
    int n1, n2, n3;
    double log_weight;
  };
  std::vector<Comp> comps;
  const int N = static_cast<int>(n);
  for (int n3 = 0; n3 <= N; ++n3) {
    const int n2 = target_sum - N - 2 * n3;  // from n1 + 2 n2 + 3 n3 = T and n1 + n2 + n3 = N
    const int n1 = N - n2 - n3;
    if (n2 < 0 || n1 < 0) continue;
    if (floors && (n2 == 0 || n3 == 0)) continue;
    comps.push_back({n1, n2, n3, std::lgamma(N + 1.0) - std::lgamma(n1 + 1.0) - std::lgamma(n2 + 1.0) -
                                     std::lgamma(n3 + 1.0)});
  }
  double top = -std::numeric_limits<double>::infinity();
  for (const auto& c : comps) top = std::max(top, c.log_weight);
  std::vector<double> weights;
  for (const auto& c : comps) weights.push_back(std::exp(c.log_weight - top));
  SeededRng rng(seed);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const Comp& c = comps[pick(rng.engine())];
  std::vector<int> bits;
  bits.insert(bits.end(), static_cast<std::size_t>(c.n1), 1);
  bits.insert(bits.end(), static_cast<std::size_t>(c.n2), 2);
  bits.insert(bits.end(), static_cast<std::size_t>(c.n3), 3);
  for (std::size_t i = bits.size(); i > 1; --i) std::swap(bits[i - 1], bits[rng.uniform_index(i)]);
  return bits;
}

BitAllocation allocate_model(const ExpertStats& stats, const AllocatorOptions& opts) {
  const std::size_t L = stats.n_layers();
  const std::size_t n = stats.n_experts();
  require(L >= 1 && n >= 1, "allocate_model: stats are empty");
  require(stats.eps.size() == L, "allocate_model: stats carry no eps table");
  if (opts.strategy == Strategy::hessian) {
    require(stats.hessian_proxy.size() == L, "allocate_model: hessian strategy needs hessian_proxy in the stats");
  }
  const int target = bit_budget(n, opts.k);

  BitAllocation out;
  out.config_digest = stats.config_digest;
  out.strategy = to_string(opts.strategy);
  out.k = opts.k;
  out.alpha = opts.alpha;
  out.beta = opts.beta;
  out.gamma = opts.gamma;
  out.floors = opts.floors;
  for (std::size_t l = 0; l < L; ++l) {
    AllocationProblem p;
    p.target_sum = target;
    p.gamma = opts.gamma;
    p.floors = opts.floors;
    p.c.resize(n);
    p.eps.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double phi = stats.phi[l][i];
      const double w = stats.w[l][i];
      const double pmq_c = std::pow(phi, opts.alpha) * std::pow(w, opts.beta);
      for (int b = 0; b < 3; ++b) p.eps[i][b] = stats.eps[l][i][b];
      switch (opts.strategy) {
        case Strategy::pmq:
        case Strategy::random: p.c[i] = pmq_c; break;
        case Strategy::frequency: p.c[i] = phi; break;
        case Strategy::weight: p.c[i] = w; break;
        case Strategy::fnorm: p.c[i] = 1.0; break;
        case Strategy::hessian:
          p.c[i] = 1.0;
          for (int b = 0; b < 3; ++b) p.eps[i][b] = stats.hessian_proxy[l][i][b];
          break;
      }
    }
    if (opts.strategy == Strategy::hessian) p.gamma = 1.0;
    AllocationResult r;
    if (opts.strategy == Strategy::random) {
      r.bits = random_allocation(n, target, opts.floors, opts.seed + l);
      r.objective = allocation_objective(p, r.bits);
    } else {
      r = solve_ip(p);
    }
    out.bits.push_back(std::move(r.bits));
    out.objective.push_back(r.objective);
  }
  return out;
}

nlohmann::json allocation_to_json(const BitAllocation& a) {
  nlohmann::json obj = nlohmann::json::array();
  for (double o : a.objective) obj.push_back(round9(o));
  return {{"config_digest", a.config_digest}, {"strategy", a.strategy}, {"k", a.k},
          {"alpha", a.alpha},                 {"beta", a.beta},         {"gamma", a.gamma},
          {"floors", a.floors},               {"bits", a.bits},         {"objective", obj}};
}

BitAllocation allocation_from_json(const nlohmann::json& j) {
  BitAllocation a;
  try {
    a.config_digest = j.value("config_digest", std::string());
    a.strategy = j.at("strategy").get<std::string>();
    a.k = j.at("k").get<double>();
    a.alpha = j.value("alpha", 1.0);
    a.beta = j.value("beta", 2.0);
    a.gamma = j.value("gamma", 2.0);
    a.floors = j.value("floors", true);
    a.bits = j.at("bits").get<std::vector<std::vector<int>>>();
    a.objective = j.value("objective", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("allocation file: ") + e.what());
  }
  for (const auto& layer : a.bits) {
    for (int b : layer) {
      if (b < 1 || b > 3) throw FormatError("allocation file: bit-widths must be 1, 2 or 3");
    }
  }
  return a;
}

void save_allocation(const std::string& path, const BitAllocation& a) {
  write_text_file(path, allocation_to_json(a).dump(2) + "\n");
}

BitAllocation load_allocation(const std::string& path) {
  try {
    return allocation_from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace mixcomp
