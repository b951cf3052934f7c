// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mixcomp/allocator.hpp"
#include "mixcomp/model.hpp"
#include "mixcomp/quantizer.hpp"

namespace mixcomp {

struct QuantizedEntry {
  std::string name;
  TensorRole role = TensorRole::expert;
  std::size_t layer = 0;
  std::size_t expert = 0;
  bool transposed = false;  // stored as the transpose of the model matrix
  QuantizedTensor tensor;
  bool operator==(const QuantizedEntry&) const = default;
};

struct QuantizedModel {
  ModelConfig config;
  std::string config_digest;  // digest of the full-precision source
  std::string strategy;
  std::vector<QuantizedEntry> tensors;  // canonical model order
  std::vector<std::string> warnings;
  bool operator==(const QuantizedModel&) const = default;
};

struct QuantizeOptions {
  QuantSpec spec;              // group size, mode, damping, block size for every tensor
  int non_expert_bits = 4;     // attention, gating and head; 16 keeps them exact
  int embedding_bits = 16;
  std::size_t threads = 1;
};

/// Quantizes experts to their allocated widths (16 = keep exact), attention,
/// gating and head to `non_expert_bits`, embeddings to `embedding_bits`;
/// norm gains stay 16-bit. GPTQ Hessians come from one
/// full-precision pass over `calib` (may be empty in RTN mode).
QuantizedModel quantize_model(const MoEModel& model, const BitAllocation& alloc, const Corpus& calib,
                              const QuantizeOptions& opts);

/// Same container with every tensor kept exact (bits = 16).
QuantizedModel passthrough_model(const MoEModel& model);

/// Dequantized weights as a regular model; the digest stays that of the source.
MoEModel to_model(const QuantizedModel& qm);

/// Bit-width recorded per expert, [layer][expert].
std::vector<std::vector<int>> expert_bits(const QuantizedModel& qm);

void save_quantized(const std::string& path, const QuantizedModel& qm);
QuantizedModel load_quantized(const std::string& path);

}  // namespace mixcomp
