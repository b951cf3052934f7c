// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mixcomp/error.hpp"

namespace mixcomp {

std::string to_string(QuantMode mode) { return mode == QuantMode::rtn ? "rtn" : "gptq"; }

QuantMode parse_quant_mode(const std::string& s) {
  if (s == "rtn") return QuantMode::rtn;
  if (s == "gptq") return QuantMode::gptq;
  throw ArgumentError("unknown quantization mode '" + s + "' (expected rtn|gptq)");
}

void QuantSpec::validate() const {
  require(bits == 1 || bits == 2 || bits == 3 || bits == 4 || bits == 16,
          "quant spec: bits must be one of 1, 2, 3, 4, 16");
  require(group_size >= 1, "quant spec: group_size must be >= 1");
  require(block_size >= 1, "quant spec: block_size must be >= 1");
  require(damp >= 0.0, "quant spec: damp must be >= 0");
}

std::size_t QuantizedTensor::groups_per_row() const {
  if (bits == 1 || bits == 16 || group_size == 0) return 0;
  return (cols + group_size - 1) / group_size;
}

void QuantizedTensor::validate() const {
  if (bits == 16) {
    if (packed.size() != element_count() * sizeof(float)) throw FormatError("passthrough tensor: payload size mismatch");
    return;
  }
  if (bits < 1 || bits > 4) throw FormatError("quantized tensor: unsupported bit-width " + std::to_string(bits));
  const std::size_t expect = (element_count() * static_cast<std::size_t>(bits) + 7) / 8;
  if (packed.size() != expect) throw FormatError("quantized tensor: packed length mismatch");
  if (bits == 1) {
    if (!scales.empty() || !zeros.empty()) throw FormatError("1-bit tensor carries group metadata");
    return;
  }
  if (group_size == 0) throw FormatError("quantized tensor: zero group size");
  const std::size_t g = rows * groups_per_row();
  if (scales.size() != g || zeros.size() != g) throw FormatError("quantized tensor: scale/zero count mismatch");
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> values, int bits) {
  if (bits < 1 || bits > 4) throw ArgumentError("pack_bits: bits must be 1..4");
  const unsigned limit = 1u << bits;
  std::vector<std::uint8_t> out((values.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (std::uint8_t v : values) {
    if (v >= limit) {
      throw ArgumentError("pack_bits: value " + std::to_string(v) + " does not fit in " + std::to_string(bits) + " bits");
    }
    for (int b = 0; b < bits; ++b, ++bitpos) {
      if ((v >> b) & 1u) out[bitpos / 8] |= static_cast<std::uint8_t>(1u << (bitpos % 8));
    }
  }
  return out;
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
  if (bits < 1 || bits > 4) throw ArgumentError("unpack_bits: bits must be 1..4");
  if (bytes.size() * 8 < count * static_cast<std::size_t>(bits)) throw FormatError("unpack_bits: buffer too short");
  std::vector<std::uint8_t> out(count, 0);
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint8_t v = 0;
    for (int b = 0; b < bits; ++b, ++bitpos) {
      if ((bytes[bitpos / 8] >> (bitpos % 8)) & 1u) v |= static_cast<std::uint8_t>(1u << b);
    }
    out[i] = v;
  }
  return out;
}

namespace {

struct GroupParams {
  float scale;
  float zero;
};

GroupParams raw_params(double lo, double hi, int bits) {
  if (hi == lo) return {1.0f, static_cast<float>(-lo)};
  const double qmax = static_cast<double>((1 << bits) - 1);
  const float scale = static_cast<float>((hi - lo) / qmax);
  if (!(scale > 0.0f) || !std::isfinite(scale)) return {1.0f, static_cast<float>(-lo)};
  return {scale, static_cast<float>(-lo / scale)};
}

// Parameters are refined until the dequantized endpoints map back onto
// themselves, so re-quantizing a dequantized group reproduces them exactly.
GroupParams find_params(std::span<const float> values, int bits) {
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  GroupParams p = raw_params(*lo_it, *hi_it, bits);
  if (*lo_it == *hi_it) return p;
  const double qmax = static_cast<double>((1 << bits) - 1);
  for (int iter = 0; iter < 16; ++iter) {
    const float lo = static_cast<float>((0.0 - p.zero) * p.scale);
    const float hi = static_cast<float>((qmax - p.zero) * p.scale);
    const GroupParams next = raw_params(lo, hi, bits);
    if (next.scale == p.scale && next.zero == p.zero) break;
    p = next;
  }
  return p;
}

inline std::uint8_t quantize_value(double w, const GroupParams& p, int bits) {
  const double qmax = static_cast<double>((1 << bits) - 1);
  const double q = std::nearbyint(w / p.scale + p.zero);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, qmax));
}

inline float dequantize_value(std::uint8_t q, const GroupParams& p) {
  return static_cast<float>((static_cast<double>(q) - p.zero) * p.scale);
}

void check_rtn_bits(int bits) {
  if (bits < 2 || bits > 4) throw ArgumentError("rtn_quantize: bits must be 2, 3 or 4");
}

}  // namespace

QuantizedTensor rtn_quantize(const Matrix& w, const QuantSpec& spec) {
  spec.validate();
  check_rtn_bits(spec.bits);
  QuantizedTensor qt;
  qt.bits = spec.bits;
  qt.rows = w.rows();
  qt.cols = w.cols();
  qt.group_size = spec.group_size;
  const std::size_t gpr = qt.groups_per_row();
  qt.scales.resize(qt.rows * gpr);
  qt.zeros.resize(qt.rows * gpr);
  std::vector<std::uint8_t> codes(w.size());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    for (std::size_t g = 0; g < gpr; ++g) {
      const std::size_t c0 = g * spec.group_size;
      const std::size_t c1 = std::min(w.cols(), c0 + spec.group_size);
      const GroupParams p = find_params(row.subspan(c0, c1 - c0), spec.bits);
      qt.scales[r * gpr + g] = p.scale;
      qt.zeros[r * gpr + g] = p.zero;
      for (std::size_t c = c0; c < c1; ++c) codes[r * w.cols() + c] = quantize_value(row[c], p, spec.bits);
    }
  }
  qt.packed = pack_bits(codes, spec.bits);
  return qt;
}

QuantizedTensor binarize(const Matrix& w) {
  QuantizedTensor qt;
  qt.bits = 1;
  qt.rows = w.rows();
  qt.cols = w.cols();
  double l1 = 0.0;
  std::vector<std::uint8_t> codes(w.size());
  auto d = w.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    l1 += std::fabs(static_cast<double>(d[i]));
    codes[i] = d[i] >= 0.0f ? 1 : 0;
  }
  qt.binary_scale = d.empty() ? 0.0f : static_cast<float>(l1 / static_cast<double>(d.size()));
  qt.packed = pack_bits(codes, 1);
  return qt;
}

QuantizedTensor passthrough(const Matrix& w) {
  QuantizedTensor qt;
  qt.bits = 16;
  qt.rows = w.rows();
  qt.cols = w.cols();
  qt.packed.resize(w.size() * sizeof(float));
  if (!w.empty()) std::memcpy(qt.packed.data(), w.data().data(), qt.packed.size());
  return qt;
}

QuantizedTensor gptq_quantize(const Matrix& w, const std::vector<double>& h_in, const QuantSpec& spec,
                              const std::string& label) {
  spec.validate();
  if (spec.bits == 16) return passthrough(w);
  const std::size_t rows = w.rows();
  const std::size_t n = w.cols();
  if (h_in.size() != n * n) throw ShapeError("gptq_quantize: Hessian must be cols x cols");
  const std::string who = label.empty() ? std::string("tensor") : label;

  std::vector<double> h = h_in;
  double diag_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (h[i * n + i] == 0.0) h[i * n + i] = 1.0;  // input never seen
    diag_mean += h[i * n + i];
  }
  diag_mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) h[i * n + i] += spec.damp * diag_mean;

  if (!cholesky_lower(h, n)) {
    throw NumericalError("GPTQ: damped Hessian is not positive definite for " + who);
  }
  std::vector<double> hinv = cholesky_inverse(h, n);
  if (!cholesky_lower(hinv, n)) {
    throw NumericalError("GPTQ: inverse Hessian factorization failed for " + who);
  }
  // Upper factor U = Lᵀ of H⁻¹; row i holds the feedback coefficients of column i.
  auto U = [&](std::size_t i, std::size_t j) { return hinv[j * n + i]; };

  std::vector<double> W(rows * n);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) W[r * n + c] = w(r, c);

  QuantizedTensor qt;
  qt.bits = spec.bits;
  qt.rows = rows;
  qt.cols = n;
  std::vector<std::uint8_t> codes(rows * n);
  float bscale = 0.0f;
  std::size_t gpr = 0;
  if (spec.bits == 1) {
    double l1 = 0.0;
    for (float v : w.data()) l1 += std::fabs(static_cast<double>(v));
    bscale = w.empty() ? 0.0f : static_cast<float>(l1 / static_cast<double>(w.size()));
    qt.binary_scale = bscale;
  } else {
    qt.group_size = spec.group_size;
    gpr = qt.groups_per_row();
    qt.scales.resize(rows * gpr);
    qt.zeros.resize(rows * gpr);
  }
  std::vector<GroupParams> params(rows);
  std::vector<double> err(rows * spec.block_size);
  std::vector<float> group_vals;

  for (std::size_t i1 = 0; i1 < n; i1 += spec.block_size) {
    const std::size_t i2 = std::min(n, i1 + spec.block_size);
    for (std::size_t i = i1; i < i2; ++i) {
      if (spec.bits > 1 && i % spec.group_size == 0) {
        // Group parameters from the current (error-compensated) weights; columns
        // past this block still owe the block's pending feedback.
        const std::size_t c1 = std::min(n, i + spec.group_size);
        for (std::size_t r = 0; r < rows; ++r) {
          group_vals.assign(c1 - i, 0.0f);
          for (std::size_t c = i; c < c1; ++c) {
            double v = W[r * n + c];
            if (c >= i2) {
              for (std::size_t p = i1; p < i; ++p) v -= err[r * spec.block_size + (p - i1)] * U(p, c);
            }
            group_vals[c - i] = static_cast<float>(v);
          }
          params[r] = find_params(group_vals, spec.bits);
          qt.scales[r * gpr + i / spec.group_size] = params[r].scale;
          qt.zeros[r * gpr + i / spec.group_size] = params[r].zero;
        }
      }
      const double d = U(i, i);
      for (std::size_t r = 0; r < rows; ++r) {
        const double wv = W[r * n + i];
        float deq;
        if (spec.bits == 1) {
          const bool pos = static_cast<float>(wv) >= 0.0f;
          codes[r * n + i] = pos ? 1 : 0;
          deq = pos ? bscale : -bscale;
        } else {
          const std::uint8_t q = quantize_value(static_cast<float>(wv), params[r], spec.bits);
          codes[r * n + i] = q;
          deq = dequantize_value(q, params[r]);
        }
        const double e = (wv - deq) / d;
        err[r * spec.block_size + (i - i1)] = e;
        for (std::size_t j = i + 1; j < i2; ++j) W[r * n + j] -= e * U(i, j);
      }
    }
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = i2; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = i1; p < i2; ++p) acc += err[r * spec.block_size + (p - i1)] * U(p, j);
        W[r * n + j] -= acc;
      }
    }
  }
  qt.packed = pack_bits(codes, spec.bits);
  return qt;
}

QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& h, const QuantSpec& spec, const std::string& label) {
  if (h.rows() != h.cols()) throw ShapeError("gptq_quantize: Hessian must be square");
  return gptq_quantize(w, std::vector<double>(h.data().begin(), h.data().end()), spec, label);
}

QuantizedTensor quantize(const Matrix& w, const QuantSpec& spec, const std::vector<double>* h,
                         const std::string& label) {
  spec.validate();
  if (spec.bits == 16) return passthrough(w);
  if (spec.mode == QuantMode::gptq && h != nullptr) return gptq_quantize(w, *h, spec, label);
  if (spec.bits == 1) return binarize(w);
  return rtn_quantize(w, spec);
}

Matrix dequantize(const QuantizedTensor& qt) {
  qt.validate();
  Matrix out(qt.rows, qt.cols);
  if (qt.bits == 16) {
    if (!qt.packed.empty()) std::memcpy(out.data().data(), qt.packed.data(), qt.packed.size());
    return out;
  }
  const auto codes = unpack_bits(qt.packed, qt.bits, qt.element_count());
  auto od = out.data();
  if (qt.bits == 1) {
    for (std::size_t i = 0; i < codes.size(); ++i) od[i] = codes[i] ? qt.binary_scale : -qt.binary_scale;
    return out;
  }
  const std::size_t gpr = qt.groups_per_row();
  for (std::size_t r = 0; r < qt.rows; ++r) {
    for (std::size_t c = 0; c < qt.cols; ++c) {
      const std::size_t g = r * gpr + c / qt.group_size;
      od[r * qt.cols + c] = dequantize_value(codes[r * qt.cols + c], {qt.scales[g], qt.zeros[g]});
    }
  }
  return out;
}

std::vector<float> binary_matmul(std::span<const float> x, const QuantizedTensor& qt) {
  if (qt.bits != 1) throw ArgumentError("binary_matmul: tensor is not 1-bit");
  qt.validate();
  if (x.size() != qt.cols) {
    throw ShapeError("binary_matmul: input length " + std::to_string(x.size()) + " != " + std::to_string(qt.cols));
  }
  std::vector<float> y(qt.rows);
  const auto codes = unpack_bits(qt.packed, 1, qt.element_count());
  for (std::size_t i = 0; i < qt.rows; ++i) {
    double plus = 0.0;
    double minus = 0.0;
    for (std::size_t j = 0; j < qt.cols; ++j) {
      if (codes[i * qt.cols + j]) plus += x[j];
      else minus += x[j];
    }
    y[i] = static_cast<float>(qt.binary_scale * (plus - minus));
  }
  return y;
}

double proxy_loss(const Matrix& w, const Matrix& wq, const Matrix& x) {
  return frobenius_distance(matmul(w, x), matmul(wq, x));
}

void HessianAccumulator::add_rows(const Matrix& rows) {
  if (rows.cols() != dim_) throw ShapeError("HessianAccumulator: row width mismatch");
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto x = rows.row(r);
    for (std::size_t i = 0; i < dim_; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      double* out = sum_.data() + i * dim_;
      for (std::size_t j = 0; j < dim_; ++j) out[j] += xi * x[j];
    }
  }
  samples_ += rows.rows();
}

std::vector<double> HessianAccumulator::hessian() const {
  std::vector<double> h(sum_.size(), 0.0);
  if (samples_ == 0) return h;
  const double f = 2.0 / static_cast<double>(samples_);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = f * sum_[i];
  return h;
}

std::vector<double> HessianAccumulator::diagonal() const {
  std::vector<double> d(dim_, 0.0);
  if (samples_ == 0) return d;
  const double f = 2.0 / static_cast<double>(samples_);
  for (std::size_t i = 0; i < dim_; ++i) d[i] = f * sum_[i * dim_ + i];
  return d;
}

}  // namespace mixcomp
