// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/model.hpp"
#include "mixcomp/profiler.hpp"

namespace mixcomp {

std::string to_string(PruneMode mode) {
  switch (mode) {
    case PruneMode::off: return "off";
    case PruneMode::weight_only: return "weight_only";
    case PruneMode::protected_tokens: return "protected";
    case PruneMode::full_drop: return "full_drop";
  }
  return "off";
}

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "off") return PruneMode::off;
  if (s == "weight_only") return PruneMode::weight_only;
  if (s == "protected") return PruneMode::protected_tokens;
  if (s == "full_drop") return PruneMode::full_drop;
  throw ArgumentError("unknown pruning mode '" + s + "' (expected off|weight_only|protected|full_drop)");
}

void PruningPolicy::validate(std::size_t n_layers) const {
  require(protect_ratio >= 0.0 && protect_ratio <= 1.0, "policy: protect ratio must lie in [0, 1]");
  require(full_drop_ratio >= 0.0 && full_drop_ratio <= 1.0, "policy: full_drop_ratio must lie in [0, 1]");
  if (mode == PruneMode::off) return;
  require(mu.size() == n_layers, "policy: expected " + std::to_string(n_layers) + " mu values, got " +
                                     std::to_string(mu.size()));
  for (float m : mu) require(m >= 0.0f && m <= 1.0f, "policy: mu values must lie in [0, 1]");
}

std::vector<float> token_importance(const Matrix& hidden, const Matrix& attn) {
  const std::size_t L = hidden.rows();
  if (attn.rows() != L || attn.cols() != L) throw ShapeError("token_importance: attention map must be L x L");
  std::vector<float> importance(L);
  for (std::size_t j = 0; j < L; ++j) {
    double l1 = 0.0;
    for (float v : hidden.row(j)) l1 += std::fabs(static_cast<double>(v));
    double received = 0.0;
    for (std::size_t i = j; i < L; ++i) received += attn(i, j);
    importance[j] = static_cast<float>(l1 * received / static_cast<double>(L - j));
  }
  return importance;
}

PruneDecision decide(std::span<const float> weights, float mu) {
  if (weights.size() < 2) return PruneDecision::keep_both;
  return weights[1] / weights[0] < mu ? PruneDecision::drop_second : PruneDecision::keep_both;
}

std::vector<std::size_t> select_protected(std::span<const float> importance, double ratio) {
  const std::size_t L = importance.size();
  const auto count = std::min<std::size_t>(L, static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(L) - 1e-9)));
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

LayerPruneResult apply_layer(const PruningPolicy& policy, std::size_t layer, const Matrix& hidden,
                             const Matrix& attn, std::span<const Routing> routings,
                             const std::vector<std::size_t>* fixed_protected) {
  const std::size_t L = routings.size();
  LayerPruneResult res;
  res.actions.assign(L, TokenAction::keep_all);
  if (policy.mode == PruneMode::off) return res;
  if (layer >= policy.mu.size()) throw ArgumentError("apply_layer: no mu for layer " + std::to_string(layer));
  const float mu = policy.mu[layer];

  std::vector<char> is_protected(L, 0);
  if (policy.mode != PruneMode::weight_only) {
    res.trace.importance = token_importance(hidden, attn);
    res.trace.protected_tokens =
        fixed_protected ? *fixed_protected : select_protected(res.trace.importance, policy.protect_ratio);
    for (std::size_t t : res.trace.protected_tokens) is_protected[t] = 1;
  }

  if (policy.mode == PruneMode::full_drop) {
    // Lowest-importance unprotected tokens lose every expert.
    std::vector<std::size_t> order;
    for (std::size_t t = 0; t < L; ++t)
      if (!is_protected[t]) order.push_back(t);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return res.trace.importance[a] < res.trace.importance[b];
    });
    const auto count = std::min<std::size_t>(
        order.size(), static_cast<std::size_t>(std::ceil(policy.full_drop_ratio * static_cast<double>(L) - 1e-9)));
    for (std::size_t i = 0; i < count; ++i) res.actions[order[i]] = TokenAction::drop_all;
    res.trace.dropped.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(res.trace.dropped.begin(), res.trace.dropped.end());
  }

  for (std::size_t t = 0; t < L; ++t) {
    if (is_protected[t] || res.actions[t] == TokenAction::drop_all) continue;
    if (decide(routings[t].weights, mu) == PruneDecision::drop_second) {
      res.actions[t] = TokenAction::drop_second;
      res.trace.pruned.push_back(t);
    }
  }
  return res;
}

std::vector<float> calibrate_mu(const std::vector<std::vector<float>>& ratio_samples) {
  std::vector<float> mu;
  mu.reserve(ratio_samples.size());
  for (std::size_t l = 0; l < ratio_samples.size(); ++l) {
    if (ratio_samples[l].empty()) {
      throw ArgumentError("calibrate_mu: layer " + std::to_string(l) + " has no routing-ratio samples");
    }
    mu.push_back(static_cast<float>(median(std::span<const float>(ratio_samples[l]))));
  }
  if (mu.empty()) throw ArgumentError("calibrate_mu: no layers");
  return mu;
}

std::vector<float> calibrate_mu(const ExpertStats& stats) {
  // Stats files written without samples still carry the medians.
  bool have_samples = !stats.ratio_samples.empty();
  for (const auto& s : stats.ratio_samples) have_samples = have_samples && !s.empty();
  if (have_samples) return calibrate_mu(stats.ratio_samples);
  if (!stats.ratio_median.empty() && stats.ratio_median.size() == stats.phi.size()) return stats.ratio_median;
  throw ArgumentError("calibrate_mu: stats carry no routing-ratio samples");
}

nlohmann::json policy_to_json(const PruningPolicy& policy, const std::string& digest) {
  nlohmann::json mu = nlohmann::json::array();
  for (float m : policy.mu) mu.push_back(round9(m));
  return {{"config_digest", digest},
          {"mode", to_string(policy.mode)},
          {"p", policy.protect_ratio},
          {"mu", mu},
          {"full_drop_ratio", policy.full_drop_ratio},
          {"protect_scope", policy.scope == ProtectScope::once ? "once" : "per_layer"}};
}

PruningPolicy policy_from_json(const nlohmann::json& j, std::string* digest) {
  PruningPolicy p;
  try {
    p.mode = parse_prune_mode(j.at("mode").get<std::string>());
    p.protect_ratio = j.at("p").get<double>();
    p.mu = j.at("mu").get<std::vector<float>>();
    p.full_drop_ratio = j.value("full_drop_ratio", 0.02);
    p.scope = j.value("protect_scope", std::string("per_layer")) == "once" ? ProtectScope::once : ProtectScope::per_layer;
    if (digest) *digest = j.value("config_digest", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("policy file: ") + e.what());
  }
  return p;
}

void save_policy(const std::string& path, const PruningPolicy& policy, const std::string& digest) {
  write_text_file(path, policy_to_json(policy, digest).dump(2) + "\n");
}

PruningPolicy load_policy(const std::string& path, std::string* digest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return policy_from_json(j, digest);
}

nlohmann::json prune_trace_to_json(const PruneTrace& trace) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : trace.layers) {
    layers.push_back({{"pruned", l.pruned}, {"protected", l.protected_tokens}, {"dropped", l.dropped}});
  }
  return {{"model_digest", trace.model_digest},
          {"seq_len", trace.seq_len},
          {"invocations_dense", trace.invocations_dense},
          {"invocations_actual", trace.invocations_actual},
          {"layers", layers}};
}

}  // namespace mixcomp
