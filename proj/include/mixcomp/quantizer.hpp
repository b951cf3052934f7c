// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixcomp/numerics.hpp"

namespace mixcomp {

// Weight layout for every routine in this header: rows are output channels,
// columns are input features. Scale groups run along a row; GPTQ Hessians are
// cols × cols. Model matrices are stored (in × out) and must be transposed
// before quantization.

enum class QuantMode { rtn, gptq };

std::string to_string(QuantMode mode);
QuantMode parse_quant_mode(const std::string& s);

struct QuantSpec {
  int bits = 4;                 // 1, 2, 3, 4 or 16 (passthrough)
  std::size_t group_size = 64;  // columns per scale group; the last group may be short
  QuantMode mode = QuantMode::gptq;
  std::size_t block_size = 128;
  double damp = 0.01;           // fraction of mean(diag H) added to the diagonal

  void validate() const;
};

struct QuantizedTensor {
  int bits = 16;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 0;
  std::vector<std::uint8_t> packed;  // codes LSB-first; raw float32 bytes when bits = 16
  std::vector<float> scales;         // rows × groups_per_row, 2..4 bit only
  std::vector<float> zeros;          // idem
  float binary_scale = 0.0f;         // 1-bit only

  std::size_t groups_per_row() const;
  std::size_t element_count() const { return rows * cols; }
  /// Throws FormatError when buffer sizes disagree with the header fields.
  void validate() const;
  bool operator==(const QuantizedTensor&) const = default;
};

/// Packs values < 2^bits least-significant-bits first; 3-bit values fill
/// 3 bytes per 8 values. Throws ArgumentError on out-of-range input.
std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> values, int bits);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, int bits, std::size_t count);

/// Group-wise asymmetric round-to-nearest for 2/3/4 bits.
QuantizedTensor rtn_quantize(const Matrix& w, const QuantSpec& spec);

/// GPTQ: column-sequential quantization with inverse-Hessian error feedback.
/// `h` is the cols × cols input Gram matrix (2 X Xᵀ / n). Supports 1..4 bits
/// (1 bit uses the sign quantizer with a per-matrix scale) and 16 (passthrough).
/// Throws NumericalError naming `label` when damped H is not positive definite.
QuantizedTensor gptq_quantize(const Matrix& w, const std::vector<double>& h, const QuantSpec& spec,
                              const std::string& label = "");
QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& h, const QuantSpec& spec,
                              const std::string& label = "");

/// sign(W) with sign(0) = +1, stored as (sign + 1) / 2 bits; scale = mean |W|.
QuantizedTensor binarize(const Matrix& w);

/// Exact copy of w, used for 16-bit tensors.
QuantizedTensor passthrough(const Matrix& w);

/// Dispatches on spec.bits and spec.mode; `h` may be null for RTN.
QuantizedTensor quantize(const Matrix& w, const QuantSpec& spec, const std::vector<double>* h = nullptr,
                         const std::string& label = "");

Matrix dequantize(const QuantizedTensor& qt);

/// y_i = s · (Σ_{B̃_ij = 1} x_j − Σ_{B̃_ij = 0} x_j) for a 1-bit tensor.
std::vector<float> binary_matmul(std::span<const float> x, const QuantizedTensor& qt);

/// ‖W X − Wq X‖_F with X of shape cols × n.
double proxy_loss(const Matrix& w, const Matrix& wq, const Matrix& x);

/// Running 2 X Xᵀ / n over input rows.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t dim = 0) : dim_(dim), sum_(dim * dim, 0.0) {}
  void add_rows(const Matrix& rows);
  std::size_t dim() const { return dim_; }
  std::size_t samples() const { return samples_; }
  std::vector<double> hessian() const;
  std::vector<double> diagonal() const;

 private:
  std::size_t dim_;
  std::vector<double> sum_;
  std::size_t samples_ = 0;
};

}  // namespace mixcomp
