// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixcomp/numerics.hpp"

namespace mixcomp {

struct ExpertStats;

enum class PruneMode { off, weight_only, protected_tokens, full_drop };

std::string to_string(PruneMode mode);
PruneMode parse_prune_mode(const std::string& s);

/// Where token protection is evaluated: every layer from that layer's own
/// attention map, or once at the first layer and reused downstream.
enum class ProtectScope { per_layer, once };

struct PruningPolicy {
  PruneMode mode = PruneMode::off;
  std::vector<float> mu;         // per-layer ratio threshold
  double protect_ratio = 0.02;
  double full_drop_ratio = 0.02;
  ProtectScope scope = ProtectScope::per_layer;

  /// Throws ArgumentError when a field is out of range.
  void validate(std::size_t n_layers) const;
};

struct Routing;

enum class TokenAction { keep_all, drop_second, drop_all };

enum class PruneDecision { keep_both, drop_second };

struct LayerPruneTrace {
  std::vector<std::size_t> pruned;          // dropped their second expert
  std::vector<std::size_t> protected_tokens;
  std::vector<std::size_t> dropped;         // all experts masked (full-drop mode)
  std::vector<float> importance;
};

struct PruneTrace {
  std::string model_digest;
  std::size_t seq_len = 0;
  std::vector<LayerPruneTrace> layers;
  std::size_t invocations_dense = 0;
  std::size_t invocations_actual = 0;
};

struct LayerPruneResult {
  std::vector<TokenAction> actions;
  LayerPruneTrace trace;
};

/// Token importance: l1 norm of the token's hidden row times the mean
/// attention it receives from itself and every later query. `attn` is
/// query-by-key, causal and row-stochastic.
std::vector<float> token_importance(const Matrix& hidden, const Matrix& attn);

/// Ratio test on a descending top-2 weight pair: drop the second expert iff
/// w1 / w0 < mu (strict).
PruneDecision decide(std::span<const float> weights, float mu);

/// Per-token actions for one layer. `routings` are the layer's renormalised
/// top-2 routings; `attn` must come from the same layer. When
/// `fixed_protected` is given it replaces the importance-based selection.
LayerPruneResult apply_layer(const PruningPolicy& policy, std::size_t layer, const Matrix& hidden,
                             const Matrix& attn, std::span<const Routing> routings,
                             const std::vector<std::size_t>* fixed_protected = nullptr);

/// Top ceil(p·L) positions by importance, ties to the lower position.
std::vector<std::size_t> select_protected(std::span<const float> importance, double ratio);

/// Per-layer medians of the calibration routing ratios.
std::vector<float> calibrate_mu(const ExpertStats& stats);
std::vector<float> calibrate_mu(const std::vector<std::vector<float>>& ratio_samples);

nlohmann::json policy_to_json(const PruningPolicy& policy, const std::string& digest);
PruningPolicy policy_from_json(const nlohmann::json& j, std::string* digest = nullptr);
void save_policy(const std::string& path, const PruningPolicy& policy, const std::string& digest);
PruningPolicy load_policy(const std::string& path, std::string* digest = nullptr);

nlohmann::json prune_trace_to_json(const PruneTrace& trace);

}  // namespace mixcomp
