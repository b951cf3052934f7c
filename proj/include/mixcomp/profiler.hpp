// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixcomp/model.hpp"

namespace mixcomp {

/// Calibration statistics per layer and expert. Bit index b in eps and
/// hessian_proxy maps to b + 1 bits.
struct ExpertStats {
  std::string config_digest;
  std::size_t n_tokens = 0;
  std::size_t top_k = 0;
  std::vector<std::vector<float>> phi;  // activation frequency
  std::vector<std::vector<float>> w;    // mean routing weight
  std::vector<std::vector<std::array<float, 3>>> eps;
  std::vector<std::vector<std::array<float, 3>>> hessian_proxy;  // Σ diag(H)·ΔW² under RTN
  std::vector<std::vector<float>> ratio_samples;                 // w1/w0 per token, may be empty
  std::vector<float> ratio_median;

  std::size_t n_layers() const { return phi.size(); }
  std::size_t n_experts() const { return phi.empty() ? 0 : phi.front().size(); }
  bool operator==(const ExpertStats&) const = default;
};

enum class EpsTarget {
  final_hidden,  // residual stream after the last layer
  layer_output,  // residual after the perturbed layer only
};

struct ProfileOptions {
  EpsTarget target = EpsTarget::final_hidden;
  std::size_t group_size = 64;
  std::size_t threads = 1;
  bool keep_ratio_samples = true;
  bool hessian_proxy = true;
};

/// φ, w and routing ratios from a dense pass. Throws ArgumentError on an
/// empty calibration set.
ExpertStats collect_routing_stats(const MoEModel& model, const Corpus& calib, const ProfileOptions& opts = {});

/// Output perturbation from quantizing one expert to `bits` (RTN, or
/// binarization for 1 bit; 16 is an exact passthrough), as the mean over
/// sequences of the Frobenius distance.
double quantization_error_eps(const MoEModel& model, const Corpus& calib, std::size_t layer, std::size_t expert,
                              int bits, const ProfileOptions& opts = {});

/// Routing statistics plus eps and the Hessian proxy for bits 1..3.
ExpertStats collect_all(const MoEModel& model, const Corpus& calib, const ProfileOptions& opts = {});

/// quantize → dequantize image of every matrix in the expert, RTN grouping
/// along input features.
ExpertWeights fake_quantize_expert(const ExpertWeights& e, int bits, std::size_t group_size);

nlohmann::json stats_to_json(const ExpertStats& s);
ExpertStats stats_from_json(const nlohmann::json& j);
void save_stats(const std::string& path, const ExpertStats& s);
ExpertStats load_stats(const std::string& path);

}  // namespace mixcomp
