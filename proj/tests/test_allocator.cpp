// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "mixcomp/allocator.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/numerics.hpp"
#include "mixcomp/profiler.hpp"

using namespace mixcomp;

namespace {

// Independent enumeration in lexicographic order; only strict improvements
// replace the incumbent, so the first optimum found is the lex-smallest.
struct Enumerated {
  bool feasible = false;
  std::vector<int> bits;
  double objective = 0.0;
};

Enumerated enumerate(const AllocationProblem& p) {
  const std::size_t n = p.n();
  std::vector<int> v(n, 1);
  Enumerated best;
  while (true) {
    int sum = 0, threes = 0, twos = 0;
    for (int b : v) {
      sum += b;
      threes += b == 3;
      twos += b == 2;
    }
    if (sum == p.target_sum && (!p.floors || (threes > 0 && twos > 0))) {
      double obj = 0.0;
      for (std::size_t i = 0; i < n; ++i) obj += p.c[i] * std::pow(p.eps[i][v[i] - 1], p.gamma);
      if (!best.feasible || obj < best.objective) best = {true, v, obj};
    }
    std::size_t i = n;
    while (i > 0 && v[i - 1] == 3) v[--i] = 1;
    if (i == 0) break;
    ++v[i - 1];
  }
  return best;
}

AllocationProblem random_problem(std::size_t n, int target, bool floors, SeededRng& rng) {
  AllocationProblem p;
  p.target_sum = target;
  p.floors = floors;
  p.gamma = 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    p.c.push_back(rng.uniform());
    // Typical shape: error falls with bits, but not always strictly.
    const double e3 = rng.uniform();
    p.eps.push_back({e3 + 2 * rng.uniform(), e3 + rng.uniform(), e3});
  }
  return p;
}

ExpertStats synthetic_stats(std::size_t layers, std::size_t n, std::uint64_t seed) {
  SeededRng rng(seed);
  ExpertStats s;
  s.config_digest = "abc";
  s.top_k = 2;
  s.n_tokens = 100;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<float> phi(n), w(n);
    double sp = 0, sw = 0;
    for (std::size_t i = 0; i < n; ++i) {
      phi[i] = static_cast<float>(rng.uniform() + 0.1);
      w[i] = static_cast<float>(rng.uniform() + 0.1);
      sp += phi[i];
      sw += w[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      phi[i] = static_cast<float>(phi[i] * 2 / sp);
      w[i] = static_cast<float>(w[i] / sw);
    }
    s.phi.push_back(phi);
    s.w.push_back(w);
    std::vector<std::array<float, 3>> eps, hp;
    for (std::size_t i = 0; i < n; ++i) {
      const float e3 = static_cast<float>(rng.uniform());
      eps.push_back({e3 * 4, e3 * 2, e3});
      hp.push_back({static_cast<float>(rng.uniform() * 3), static_cast<float>(rng.uniform()), 0.01f});
    }
    s.eps.push_back(eps);
    s.hessian_proxy.push_back(hp);
    s.ratio_median.push_back(0.5f);
  }
  return s;
}

}  // namespace

TEST(SolveIp, WorkedExample) {
  AllocationProblem p;
  p.c = {4, 2, 1};
  p.eps.assign(3, {0.9, 0.3, 0.1});
  p.target_sum = 6;
  p.gamma = 1.0;
  const auto r = solve_ip(p);
  EXPECT_EQ(r.bits, (std::vector<int>{3, 2, 1}));
  EXPECT_NEAR(r.objective, 1.9, 1e-12);
  EXPECT_EQ(brute_force_oracle(p), r);
}

TEST(SolveIp, TwoExpertsTargetFourIsInfeasibleWithFloors) {
  AllocationProblem p;
  p.c = {1, 1};
  p.eps.assign(2, {0.9, 0.3, 0.1});
  p.target_sum = 4;
  EXPECT_THROW(solve_ip(p), InfeasibleError);
  EXPECT_THROW(brute_force_oracle(p), InfeasibleError);
  EXPECT_FALSE(infeasibility_reason(2, 4, true).empty());
  p.floors = false;
  EXPECT_EQ(solve_ip(p).bits.size(), 2u);
}

TEST(SolveIp, SymmetricInstanceReturnsSortedVector) {
  AllocationProblem p;
  p.c.assign(8, 1.0);
  p.eps.assign(8, {0.9, 0.3, 0.1});
  p.target_sum = 20;
  const auto r = solve_ip(p);
  auto sorted = r.bits;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(r.bits, sorted);
  EXPECT_EQ(r.bits, enumerate(p).bits);
}

TEST(SolveIp, SingleFeasibleVectorIsAllOnes) {
  AllocationProblem p;
  p.c = {1, 2, 3};
  p.eps.assign(3, {0.5, 0.2, 0.1});
  p.target_sum = 3;
  p.floors = false;
  EXPECT_EQ(solve_ip(p).bits, (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(brute_force_oracle(p).bits, (std::vector<int>{1, 1, 1}));
}

TEST(SolveIp, MatchesEnumerationOnRandomInstances) {
  SeededRng rng(77);
  int checked = 0;
  for (std::size_t n = 3; n <= 8; ++n) {
    for (bool floors : {true, false}) {
      for (int t = static_cast<int>(n); t <= static_cast<int>(3 * n); ++t) {
        const AllocationProblem p = random_problem(n, t, floors, rng);
        const Enumerated e = enumerate(p);
        if (!e.feasible) {
          EXPECT_THROW(solve_ip(p), InfeasibleError) << n << " " << t;
          EXPECT_FALSE(infeasibility_reason(n, t, floors).empty());
          continue;
        }
        const auto r = solve_ip(p);
        EXPECT_EQ(r.bits, e.bits) << n << " " << t << " " << floors;
        EXPECT_EQ(r.objective, e.objective);
        ++checked;
      }
    }
  }
  // floors off: 2n + 1 targets each; floors on: 2n − 3.
  EXPECT_EQ(checked, 120);
}

TEST(SolveIp, BranchAndBoundAboveTwelveExperts) {
  SeededRng rng(78);
  for (int t : {20, 26, 33}) {
    const AllocationProblem p = random_problem(13, t, true, rng);
    const Enumerated e = enumerate(p);
    const auto r = solve_ip(p);
    EXPECT_EQ(r.bits, e.bits) << t;
    EXPECT_EQ(r.objective, e.objective);
  }
}

TEST(SolveIp, RearrangementProperty) {
  SeededRng rng(79);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + trial % 6;
    AllocationProblem p;
    const double e3 = rng.uniform();
    const double e2 = e3 + 0.01 + rng.uniform();
    const double e1 = e2 + 0.01 + rng.uniform();
    p.eps.assign(n, {e1, e2, e3});
    for (std::size_t i = 0; i < n; ++i) p.c.push_back(rng.uniform());
    p.target_sum = static_cast<int>(n + 3 + rng.uniform_index(2 * n - 3));
    const auto r = solve_ip(p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (p.c[i] > p.c[j]) EXPECT_GE(r.bits[i], r.bits[j]) << trial;
  }
}

TEST(SolveIp, ScalingSignificanceKeepsAssignment) {
  SeededRng rng(80);
  for (int trial = 0; trial < 20; ++trial) {
    AllocationProblem p = random_problem(6, 12, true, rng);
    const auto a = solve_ip(p);
    for (double& c : p.c) c *= 7.5;
    EXPECT_EQ(solve_ip(p).bits, a.bits);
  }
}

TEST(SolveIp, ValidatesInput) {
  AllocationProblem p;
  p.c = {1, -1};
  p.eps.assign(2, {0.1, 0.1, 0.1});
  p.target_sum = 4;
  p.floors = false;
  EXPECT_THROW(solve_ip(p), ArgumentError);
  p.c = {1};
  EXPECT_THROW(solve_ip(p), ArgumentError);
  AllocationProblem big;
  big.c.assign(11, 1.0);
  big.eps.assign(11, {0.3, 0.2, 0.1});
  big.target_sum = 22;
  EXPECT_THROW(brute_force_oracle(big), ArgumentError);
}

TEST(BitBudget, IntegralAndSuggestions) {
  EXPECT_EQ(bit_budget(8, 2.5), 20);
  EXPECT_EQ(bit_budget(8, 2.0), 16);
  try {
    bit_budget(8, 1.3);
    FAIL();
  } catch (const ArgumentError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1.25"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1.375"), std::string::npos) << msg;
  }
}

TEST(RandomAllocation, DeterministicAndUniform) {
  EXPECT_EQ(random_allocation(8, 20, true, 3), random_allocation(8, 20, true, 3));
  std::map<std::vector<int>, int> counts;
  const int draws = 12000;
  for (int s = 0; s < draws; ++s) {
    const auto v = random_allocation(4, 8, true, s);
    int sum = 0;
    for (int b : v) sum += b;
    ASSERT_EQ(sum, 8);
    ++counts[v];
  }
  // Feasible vectors for n = 4, sum 8 with a 3 and a 2: permutations of
  // {3,2,2,1} (12) and {3,3,1,1} has no 2, so 12 in total.
  ASSERT_EQ(counts.size(), 12u);
  const double expect = draws / 12.0;
  for (const auto& [v, c] : counts) EXPECT_NEAR(c, expect, 5 * std::sqrt(expect));
  EXPECT_THROW(random_allocation(2, 4, true, 0), InfeasibleError);
}

TEST(AllocateModel, BudgetFloorsAndStrategies) {
  const ExpertStats s = synthetic_stats(3, 8, 5);
  for (Strategy st : {Strategy::pmq, Strategy::hessian, Strategy::frequency, Strategy::weight, Strategy::random,
                      Strategy::fnorm}) {
    AllocatorOptions o;
    o.strategy = st;
    const BitAllocation a = allocate_model(s, o);
    EXPECT_EQ(a.strategy, to_string(st));
    ASSERT_EQ(a.bits.size(), 3u);
    for (const auto& row : a.bits) {
      int sum = 0;
      for (int b : row) sum += b;
      EXPECT_EQ(sum, 20);
      EXPECT_NE(std::count(row.begin(), row.end(), 3), 0);
      EXPECT_NE(std::count(row.begin(), row.end(), 2), 0);
    }
  }
}

TEST(AllocateModel, StrategiesUseTheirSignificance) {
  const ExpertStats s = synthetic_stats(2, 6, 6);
  for (Strategy st : {Strategy::pmq, Strategy::frequency, Strategy::weight, Strategy::fnorm, Strategy::hessian}) {
    AllocatorOptions o;
    o.strategy = st;
    o.k = 2.0;
    const BitAllocation a = allocate_model(s, o);
    for (std::size_t l = 0; l < 2; ++l) {
      AllocationProblem p;
      p.target_sum = 12;
      p.gamma = st == Strategy::hessian ? 1.0 : 2.0;
      for (std::size_t i = 0; i < 6; ++i) {
        const double phi = s.phi[l][i], w = s.w[l][i];
        double c = 1.0;
        if (st == Strategy::pmq) c = phi * w * w;
        if (st == Strategy::frequency) c = phi;
        if (st == Strategy::weight) c = w;
        p.c.push_back(c);
        const auto& e = st == Strategy::hessian ? s.hessian_proxy[l][i] : s.eps[l][i];
        p.eps.push_back({e[0], e[1], e[2]});
      }
      EXPECT_EQ(a.bits[l], enumerate(p).bits) << to_string(st) << " layer " << l;
    }
  }
}

TEST(AllocateModel, RejectsNonIntegralBudget) {
  AllocatorOptions o;
  o.k = 1.3;
  EXPECT_THROW(allocate_model(synthetic_stats(1, 8, 1), o), ArgumentError);
}

TEST(AllocationFile, RoundTrip) {
  AllocatorOptions o;
  o.strategy = Strategy::random;
  o.seed = 9;
  const BitAllocation a = allocate_model(synthetic_stats(2, 8, 2), o);
  const std::string path = (std::filesystem::temp_directory_path() / "mixcomp_alloc.json").string();
  save_allocation(path, a);
  const BitAllocation b = load_allocation(path);
  EXPECT_EQ(b.bits, a.bits);
  EXPECT_EQ(b.strategy, "random");
  EXPECT_EQ(b.config_digest, a.config_digest);
  std::filesystem::remove(path);
}
