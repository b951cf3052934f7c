// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixcomp/numerics.hpp"
#include "mixcomp/pruner.hpp"

namespace mixcomp {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;
using Corpus = std::vector<Sequence>;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden = 16;
  std::size_t n_heads = 2;
  std::size_t head_dim = 8;
  std::size_t intermediate = 32;
  std::size_t n_experts = 4;
  std::size_t top_k = 2;
  std::size_t vocab = 64;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

/// One SwiGLU expert; matrices are stored (in × out) so that y = x · W.
struct ExpertWeights {
  Matrix w_gate;  // H × intermediate
  Matrix w_up;    // H × intermediate
  Matrix w_down;  // intermediate × H
};

struct LayerWeights {
  Matrix attn_norm;  // 1 × H gain
  Matrix wq, wk, wv, wo;
  Matrix ffn_norm;   // 1 × H gain
  Matrix gate;       // H × E
  std::vector<ExpertWeights> experts;
};

struct MoEModel {
  ModelConfig config;
  Matrix embeddings;  // vocab × H
  std::vector<LayerWeights> layers;
  Matrix final_norm;  // 1 × H gain
  Matrix head;        // H × vocab
  /// Identity of the source weights; derived models (dequantized
  /// containers) keep the digest of the model they were derived from.
  std::string digest;
};

enum class TensorRole { embedding, norm, attention, gating, expert, head };

struct TensorRef {
  std::string name;
  TensorRole role;
  std::size_t layer = 0;
  std::size_t expert = 0;
  Matrix* matrix = nullptr;
};

struct ConstTensorRef {
  std::string name;
  TensorRole role;
  std::size_t layer = 0;
  std::size_t expert = 0;
  const Matrix* matrix = nullptr;
};

/// Every weight tensor of the model in canonical order.
std::vector<TensorRef> model_tensors(MoEModel& model);
std::vector<ConstTensorRef> model_tensors(const MoEModel& model);

/// FNV-1a digest over the config and all weight bytes, as 16 hex digits.
std::string compute_digest(const MoEModel& model);

/// Correctly shaped model with zero weights and unit norm gains.
MoEModel zero_model(const ModelConfig& config);

/// Gaussian weights with per-matrix standard deviation 1/sqrt(fan_in);
/// norm gains are ones.
MoEModel gen_synthetic(const ModelConfig& config, SeededRng& rng);

struct Routing {
  std::vector<std::size_t> experts;  // descending routing weight
  std::vector<float> weights;        // softmax over the selected logits only
  float ratio = 0.0f;                // weights[1] / weights[0], 0 when top_k = 1
};

/// Top-k selection followed by a softmax over just the selected logits.
Routing route(std::span<const float> gate_logits, std::size_t top_k);

/// silu(x·w_gate) ⊙ (x·w_up), then · w_down.
std::vector<float> expert_forward(const ExpertWeights& e, std::span<const float> x);
Matrix expert_forward_rows(const ExpertWeights& e, const Matrix& x, Matrix* activations = nullptr);

/// Hooks for calibration passes (Hessian accumulation and friends).
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  virtual void on_attention_input(std::size_t /*layer*/, const Matrix& /*normed*/) {}
  virtual void on_attention_context(std::size_t /*layer*/, const Matrix& /*context*/) {}
  virtual void on_moe_input(std::size_t /*layer*/, const Matrix& /*normed*/) {}
  /// Rows routed to `expert` and the matching intermediate activations.
  virtual void on_expert_io(std::size_t /*layer*/, std::size_t /*expert*/, const Matrix& /*inputs*/,
                            const Matrix& /*activations*/) {}
  virtual void on_head_input(const Matrix& /*normed*/) {}
};

struct ExpertOverride {
  std::size_t layer = 0;
  std::size_t expert = 0;
  const ExpertWeights* weights = nullptr;
};

struct ForwardOptions {
  /// nullptr or mode=off runs the dense path.
  const PruningPolicy* policy = nullptr;
  /// -1 averages attention maps over heads; otherwise that head's map is used.
  int attention_head = -1;
  ForwardObserver* observer = nullptr;
  std::optional<ExpertOverride> expert_override;
  bool capture_layer_inputs = false;
  bool compute_logits = true;
};

struct LayerTrace {
  std::vector<Routing> routing;  // per token
  Matrix attention;              // L × L, query by key
};

struct ForwardTrace {
  std::string model_digest;
  std::vector<LayerTrace> layers;
  std::vector<Matrix> layer_inputs;       // residual entering each layer, when captured
  Matrix final_hidden;                    // residual stream after the last layer
  Matrix logits;                          // L × vocab
  std::vector<std::vector<std::size_t>> activation_counts;  // [layer][expert], after pruning
  PruneTrace prune;
};

/// Full-sequence causal forward pass. Throws ArgumentError on out-of-vocab ids
/// or an empty sequence.
ForwardTrace forward(const MoEModel& model, std::span<const TokenId> tokens,
                     const ForwardOptions& options = {});

/// Runs layers [first, last) on a residual stream, returning the new residual.
/// Used for perturbation studies that reuse cached layer inputs.
Matrix forward_layers(const MoEModel& model, Matrix residual, std::size_t first, std::size_t last,
                      const ForwardOptions& options = {});

/// "MCKP" checkpoint container.
void save_checkpoint(const std::string& path, const MoEModel& model);
MoEModel load_checkpoint(const std::string& path);

}  // namespace mixcomp
