// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixcomp/model.hpp"
#include "mixcomp/quantized_model.hpp"

namespace mixcomp {

// ---- corpora --------------------------------------------------------------

/// Text: one sequence per line, space-separated ids. Binary: repeated
/// [u32 length][length × u32 id], little-endian.
Corpus parse_corpus_text(const std::string& text);
std::string format_corpus_text(const Corpus& corpus);
Corpus read_corpus(const std::string& path);  // ".bin" selects the binary format
void write_corpus(const std::string& path, const Corpus& corpus);
std::vector<std::uint8_t> encode_corpus_binary(const Corpus& corpus);
Corpus decode_corpus_binary(const std::vector<std::uint8_t>& bytes);

/// Uniform random ids.
Corpus random_corpus(std::size_t n_seqs, std::size_t seq_len, std::size_t vocab, SeededRng& rng);

/// Sequences sampled autoregressively from the model's own next-token
/// distribution (first token uniform).
Corpus sample_corpus(const MoEModel& model, std::size_t n_seqs, std::size_t seq_len, SeededRng& rng,
                     double temperature = 1.0);

// ---- evaluation -----------------------------------------------------------

struct LayerPruneStats {
  std::size_t tokens = 0;
  std::size_t pruned = 0;
  std::size_t protected_tokens = 0;
  std::size_t dropped = 0;
  /// pruned / (tokens − protected − dropped)
  double pruned_fraction_unprotected() const;
};

/// Expert activity of one evaluation run.
struct RunActivity {
  std::string model_digest;
  std::size_t tokens = 0;
  std::size_t invocations_dense = 0;
  std::size_t invocations_actual = 0;
  std::vector<std::vector<std::size_t>> counts;  // [layer][expert]
  std::vector<LayerPruneStats> layers;
};

struct EvalResult {
  double perplexity = 0.0;
  double nll_sum = 0.0;
  std::size_t positions = 0;
  RunActivity activity;
};

/// Teacher-forced natural-log perplexity with optional pruning.
EvalResult evaluate(const MoEModel& model, const Corpus& corpus, const PruningPolicy* policy = nullptr,
                    std::size_t threads = 1);
double perplexity(const MoEModel& model, const Corpus& corpus, const PruningPolicy* policy = nullptr,
                  std::size_t threads = 1);
double perplexity(const QuantizedModel& qm, const Corpus& corpus, const PruningPolicy* policy = nullptr,
                  std::size_t threads = 1);

// ---- accounting -----------------------------------------------------------

struct SizeAccounting {
  std::uint64_t total_bits = 0;
  std::uint64_t element_count = 0;
  std::uint64_t expert_bits = 0;
  std::uint64_t expert_elements = 0;
  std::uint64_t expert_payload_bits = 0;  // packed codes only, no metadata
  double total_bytes() const { return static_cast<double>(total_bits) / 8.0; }
  double avg_bits_overall() const;
  double avg_bits_experts() const;
  double avg_payload_bits_experts() const;
};

/// Packed payload bits plus 16 bits per scale, zero and binary scale, plus
/// 16 bits per element of unquantized tensors, recomputed from the container.
SizeAccounting size_accounting(const QuantizedModel& qm);

/// Closed-form accounting of a config under a bit map.
struct ShapeBitMap {
  std::vector<std::vector<int>> expert_bits;  // [layer][expert]; empty = all at `default_expert_bits`
  int default_expert_bits = 16;
  int attention_bits = 16;
  int gating_bits = 16;
  int embedding_bits = 16;
  int head_bits = 16;
  int norm_bits = 16;
  std::size_t group_size = 0;  // 0 ignores scale/zero overhead
};
SizeAccounting size_accounting(const ModelConfig& config, const ShapeBitMap& bits);

struct ActivationAccounting {
  double mean_activated_bytes_per_token = 0.0;
  double invocation_reduction = 0.0;
};

/// Per token: the bytes of invoked experts plus every always-active tensor
/// (one embedding row). Throws ArgumentError when the run and container
/// disagree on identity.
ActivationAccounting activation_accounting(const RunActivity& run, const QuantizedModel& qm);

struct FlopsEstimate {
  double importance_flops = 0.0;
  double expert_flops_saved = 0.0;
  double ratio() const { return importance_flops > 0.0 ? expert_flops_saved / importance_flops : 0.0; }
};

/// Importance cost n² + n + m·n + n·log₂ n and expert saving
/// frac·n·(2·m·m₁ + 2·m₁² + 2·m₁·m), with n = L, m = hidden, m₁ = intermediate.
FlopsEstimate flops_estimate(std::size_t hidden, std::size_t intermediate, std::size_t L,
                             double pruned_fraction = 0.15);
FlopsEstimate flops_estimate(const ModelConfig& config, std::size_t L, double pruned_fraction = 0.15);

// ---- reports --------------------------------------------------------------

struct LayerReport {
  std::size_t layer = 0;
  std::size_t tokens = 0;
  std::size_t pruned = 0;
  std::size_t protected_tokens = 0;
  std::size_t dropped = 0;
  bool operator==(const LayerReport&) const = default;
};

struct RunReport {
  std::string config_digest;
  std::string strategy;
  std::string policy_mode;
  double avg_bits_experts = 0.0;
  double avg_bits_overall = 0.0;
  double total_bytes = 0.0;
  double mean_activated_bytes_per_token = 0.0;
  double invocation_reduction = 0.0;
  double perplexity = 0.0;
  std::vector<LayerReport> layers;
  double wall_clock_s = 0.0;
  std::vector<std::string> notes;
  bool operator==(const RunReport&) const = default;
};

struct BitsRow {
  std::string strategy;
  double k = 0.0;
  double avg_bits_experts = 0.0;
  double perplexity = 0.0;
};

struct ProtectionRow {
  double p = 0.0;
  double invocation_reduction = 0.0;
  double perplexity = 0.0;
};

nlohmann::json report_to_json(const RunReport& r);
RunReport report_from_json(const nlohmann::json& j);
RunReport load_report(const std::string& path);

/// Writes report.json plus ppl_vs_bits.csv / reduction_vs_protection.csv when
/// the row sets are non-empty. Throws IoError on failure.
void emit_report(const std::string& dir, const RunReport& report, const std::vector<BitsRow>& bits_rows = {},
                 const std::vector<ProtectionRow>& protection_rows = {});

/// Re-evaluates the model once per protect ratio, other policy fields fixed.
std::vector<ProtectionRow> protection_sweep(const MoEModel& model, const Corpus& corpus, PruningPolicy policy,
                                            const std::vector<double>& ratios, std::size_t threads = 1);

RunReport build_report(const QuantizedModel& qm, const EvalResult& eval, const PruningPolicy& policy);

}  // namespace mixcomp
