// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mixcomp/error.hpp"
#include "mixcomp/harness.hpp"
#include "mixcomp/quantized_model.hpp"
#include "mixcomp/quantizer.hpp"
#include "test_support.hpp"

using namespace mixcomp;
using mixcomp::fixtures::random_matrix;
using mixcomp::fixtures::tiny_config;
using mixcomp::fixtures::tiny_model;
using mixcomp::fixtures::uniform_corpus;

namespace {

QuantSpec rtn_spec(int bits, std::size_t group = 64) {
  QuantSpec s;
  s.bits = bits;
  s.group_size = group;
  s.mode = QuantMode::rtn;
  return s;
}

QuantSpec gptq_spec(int bits, std::size_t group = 64) {
  QuantSpec s = rtn_spec(bits, group);
  s.mode = QuantMode::gptq;
  return s;
}

// 2 X Xᵀ / n, X given as n samples × dim.
std::vector<double> gram(const Matrix& samples) {
  const std::size_t d = samples.cols();
  std::vector<double> h(d * d, 0.0);
  for (std::size_t s = 0; s < samples.rows(); ++s)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) h[i * d + j] += 2.0 * samples(s, i) * samples(s, j);
  for (double& v : h) v /= static_cast<double>(samples.rows());
  return h;
}

double proxy(const Matrix& w, const Matrix& wq, const Matrix& samples) {
  return proxy_loss(w, wq, samples.transposed());
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mixcomp_quant_" + name)).string();
}

}  // namespace

TEST(Pack, KnownBytes) {
  const std::vector<std::uint8_t> two = {3, 0, 2, 1};
  EXPECT_EQ(pack_bits(two, 2), std::vector<std::uint8_t>{0x63});
  const std::vector<std::uint8_t> one = {1, 0, 0, 0, 0, 0, 0, 1};
  EXPECT_EQ(pack_bits(one, 1), std::vector<std::uint8_t>{0x81});
  const std::vector<std::uint8_t> three(8, 7);
  EXPECT_EQ(pack_bits(three, 3), (std::vector<std::uint8_t>{0xff, 0xff, 0xff}));
}

TEST(Pack, RoundTripAllWidthsAndLengths) {
  SeededRng rng(5);
  for (int bits = 1; bits <= 4; ++bits) {
    for (std::size_t len = 0; len < 70; ++len) {
      std::vector<std::uint8_t> v(len);
      for (auto& x : v) x = static_cast<std::uint8_t>(rng.uniform_index(1u << bits));
      const auto bytes = pack_bits(v, bits);
      EXPECT_EQ(bytes.size(), (len * bits + 7) / 8);
      EXPECT_EQ(unpack_bits(bytes, bits, len), v);
    }
  }
}

TEST(Pack, RejectsOutOfRange) {
  const std::vector<std::uint8_t> v = {4};
  EXPECT_THROW(pack_bits(v, 2), ArgumentError);
  EXPECT_THROW(pack_bits(v, 5), ArgumentError);
  EXPECT_THROW(unpack_bits(std::vector<std::uint8_t>{0}, 2, 5), FormatError);
}

TEST(Rtn, ConstantMatrixIsExact) {
  const Matrix w(4, 10, -0.37f);
  const auto qt = rtn_quantize(w, rtn_spec(3, 4));
  EXPECT_EQ(dequantize(qt), w);
  for (float s : qt.scales) EXPECT_EQ(s, 1.0f);
}

TEST(Rtn, TwoBitGridIsExact) {
  const Matrix w = Matrix::from_rows({{0.0f, 1.0f / 3.0f, 2.0f / 3.0f, 1.0f}, {1.0f, 0.0f, 2.0f / 3.0f, 1.0f / 3.0f}});
  const Matrix back = dequantize(rtn_quantize(w, rtn_spec(2, 4)));
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(back.data()[i], w.data()[i], 1e-4f);
}

TEST(Rtn, ThreeBitErrorWithinHalfStep) {
  SeededRng rng(11);
  const Matrix w = random_matrix(64, 64, rng);
  const auto qt = rtn_quantize(w, rtn_spec(3, 16));
  const Matrix back = dequantize(qt);
  const std::size_t gpr = qt.groups_per_row();
  for (std::size_t r = 0; r < 64; ++r) {
    for (std::size_t c = 0; c < 64; ++c) {
      const double step = qt.scales[r * gpr + c / 16];
      EXPECT_LE(std::abs(w(r, c) - back(r, c)), step / 2 * (1 + 1e-5) + 1e-7) << r << "," << c;
    }
  }
}

TEST(Rtn, DequantStaysInsideGroupGrid) {
  SeededRng rng(12);
  const Matrix w = random_matrix(8, 40, rng);
  for (int bits = 2; bits <= 4; ++bits) {
    const auto qt = rtn_quantize(w, rtn_spec(bits, 16));
    const Matrix back = dequantize(qt);
    const std::size_t gpr = qt.groups_per_row();
    EXPECT_EQ(gpr, 3u);
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t c = 0; c < 40; ++c) {
        const double s = qt.scales[r * gpr + c / 16];
        const double z = qt.zeros[r * gpr + c / 16];
        const double lo = -z * s;
        const double hi = ((1 << bits) - 1 - z) * s;
        EXPECT_GE(back(r, c), lo - 1e-5);
        EXPECT_LE(back(r, c), hi + 1e-5);
      }
    }
  }
}

TEST(Rtn, RequantizingTheGridIsIdempotent) {
  SeededRng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int bits = 2 + trial % 3;
    const Matrix w = random_matrix(16, 48, rng, 0.01 + rng.uniform());
    const auto qt = rtn_quantize(w, rtn_spec(bits, 16));
    const auto again = rtn_quantize(dequantize(qt), rtn_spec(bits, 16));
    EXPECT_EQ(again, qt) << trial;
  }
}

TEST(Rtn, RejectsOtherWidths) {
  const Matrix w(2, 2, 1.0f);
  EXPECT_THROW(rtn_quantize(w, rtn_spec(1)), ArgumentError);
  QuantSpec bad = rtn_spec(5);
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(Gptq, DiagonalHessianEqualsRtnBitwise) {
  SeededRng rng(21);
  for (int bits = 2; bits <= 4; ++bits) {
    const Matrix w = random_matrix(24, 40, rng);
    std::vector<double> h(40 * 40, 0.0);
    for (std::size_t i = 0; i < 40; ++i) h[i * 40 + i] = 0.5 + rng.uniform();
    QuantSpec s = gptq_spec(bits, 16);
    s.block_size = 7;
    EXPECT_EQ(gptq_quantize(w, h, s), rtn_quantize(w, rtn_spec(bits, 16))) << bits;
  }
}

TEST(Gptq, SixteenBitsIsPassthrough) {
  SeededRng rng(22);
  const Matrix w = random_matrix(5, 6, rng);
  std::vector<double> h(36, 0.0);
  const auto qt = gptq_quantize(w, h, gptq_spec(16));
  EXPECT_EQ(qt.bits, 16);
  EXPECT_EQ(dequantize(qt), w);
}

TEST(Gptq, BeatsRtnOnProxyLoss) {
  for (int bits : {2, 3}) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      SeededRng rng(1000 + seed);
      const Matrix w = random_matrix(32, 32, rng);
      Matrix x = random_matrix(256, 32, rng);
      // Correlated inputs make error feedback matter.
      for (std::size_t s = 0; s < x.rows(); ++s)
        for (std::size_t j = 1; j < 32; ++j) x(s, j) += 0.7f * x(s, j - 1);
      const auto h = gram(x);
      const Matrix g = dequantize(gptq_quantize(w, h, gptq_spec(bits, 16)));
      const Matrix r = dequantize(rtn_quantize(w, rtn_spec(bits, 16)));
      if (proxy(w, g, x) <= proxy(w, r, x)) ++wins;
    }
    EXPECT_GE(wins, 95) << bits << " bits";
  }
}

TEST(Gptq, IndefiniteHessianIsNumericalError) {
  const Matrix w(2, 2, 1.0f);
  const std::vector<double> h = {1.0, 3.0, 3.0, 1.0};
  QuantSpec s = gptq_spec(2, 2);
  s.damp = 0.0;
  try {
    gptq_quantize(w, h, s, "layers.0.experts.1.w_up");
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.experts.1.w_up"), std::string::npos);
  }
}

TEST(Gptq, DeadColumnsFallBackToIdentity) {
  SeededRng rng(23);
  const Matrix w = random_matrix(4, 8, rng);
  const std::vector<double> h(64, 0.0);
  EXPECT_EQ(gptq_quantize(w, h, gptq_spec(3, 8)), rtn_quantize(w, rtn_spec(3, 8)));
}

TEST(Binarize, WorkedExample) {
  const Matrix w = Matrix::from_rows({{0.5f, -0.3f}, {-0.2f, 0.4f}});
  const auto qt = binarize(w);
  EXPECT_EQ(qt.bits, 1);
  EXPECT_EQ(unpack_bits(qt.packed, 1, 4), (std::vector<std::uint8_t>{1, 0, 0, 1}));
  EXPECT_NEAR(qt.binary_scale, 0.35f, 1e-7f);
  const Matrix d = dequantize(qt);
  EXPECT_EQ(d, Matrix::from_rows({{qt.binary_scale, -qt.binary_scale}, {-qt.binary_scale, qt.binary_scale}}));
  // Model layout: x·W with W stored (in × out); the quantizer sees Wᵀ.
  const std::vector<float> x = {1.0f, 2.0f};
  const auto y = binary_matmul(x, binarize(w.transposed()));
  ASSERT_EQ(y.size(), 2u);
  EXPECT_NEAR(y[0], -0.35f, 1e-6f);
  EXPECT_NEAR(y[1], 0.35f, 1e-6f);
}

TEST(Binarize, ZeroAndPositiveMatrices) {
  const auto z = binarize(Matrix(3, 3, 0.0f));
  EXPECT_EQ(z.binary_scale, 0.0f);
  for (auto b : unpack_bits(z.packed, 1, 9)) EXPECT_EQ(b, 1);
  const std::vector<float> x = {1.0f, -2.0f, 3.0f};
  for (float v : binary_matmul(x, z)) EXPECT_EQ(v, 0.0f);

  const Matrix p = Matrix::from_rows({{0.1f, 0.2f}, {0.3f, 0.4f}});
  const auto qp = binarize(p);
  for (auto b : unpack_bits(qp.packed, 1, 4)) EXPECT_EQ(b, 1);
  EXPECT_NEAR(qp.binary_scale, 0.25f, 1e-7f);
}

TEST(Binarize, MatmulMatchesDenseSignOracle) {
  SeededRng rng(31);
  const Matrix w = random_matrix(64, 64, rng);
  const auto qt = binarize(w);
  double s = 0.0;
  for (float v : w.data()) s += std::abs(v);
  s /= static_cast<double>(w.size());
  std::vector<float> x(64);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  const auto y = binary_matmul(x, qt);
  for (std::size_t r = 0; r < 64; ++r) {
    double ref = 0.0;
    for (std::size_t c = 0; c < 64; ++c) ref += x[c] * (w(r, c) >= 0.0f ? s : -s);
    EXPECT_NEAR(y[r], ref, 1e-5 * std::max(1.0, std::abs(ref)));
  }
  EXPECT_THROW(binary_matmul(std::vector<float>(3), qt), ShapeError);
}

TEST(Quantize, LossShrinksWithBits) {
  std::vector<double> mean(5, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SeededRng rng(500 + seed);
    const Matrix w = random_matrix(32, 32, rng);
    const Matrix x = random_matrix(128, 32, rng);
    const auto h = gram(x);
    for (int bits = 1; bits <= 4; ++bits) {
      mean[bits] += proxy(w, dequantize(quantize(w, gptq_spec(bits, 16), &h)), x) / 20.0;
    }
  }
  EXPECT_GE(mean[1], mean[2]);
  EXPECT_GE(mean[2], mean[3]);
  EXPECT_GE(mean[3], mean[4]);
}

TEST(Container, ValidateCatchesCorruption) {
  SeededRng rng(41);
  auto qt = rtn_quantize(random_matrix(4, 8, rng), rtn_spec(2, 4));
  EXPECT_NO_THROW(qt.validate());
  qt.packed.pop_back();
  EXPECT_THROW(dequantize(qt), FormatError);
}

TEST(QuantizeModel, AllSixteenBitsMatchesDense) {
  const MoEModel m = tiny_model(3);
  BitAllocation a;
  a.config_digest = m.digest;
  a.bits.assign(m.config.n_layers, std::vector<int>(m.config.n_experts, 16));
  QuantizeOptions o;
  o.non_expert_bits = 16;
  const auto qm = quantize_model(m, a, uniform_corpus(2, 16, m.config.vocab, 1), o);
  const MoEModel back = to_model(qm);
  const Corpus c = uniform_corpus(2, 12, m.config.vocab, 2);
  for (const auto& s : c) EXPECT_EQ(forward(back, s).logits, forward(m, s).logits);
}

TEST(QuantizeModel, ExpertAverageMatchesBudget) {
  const MoEModel m = tiny_model(4);
  BitAllocation a;
  a.config_digest = m.digest;
  a.bits = {{3, 2, 1, 2}, {3, 3, 1, 1}};  // k = 2 per layer
  QuantizeOptions o;
  o.spec.group_size = 16;
  const auto qm = quantize_model(m, a, uniform_corpus(4, 32, m.config.vocab, 1), o);
  const auto acc = size_accounting(qm);
  EXPECT_DOUBLE_EQ(acc.avg_payload_bits_experts(), 2.0);
  // Oracle: per matrix, packed codes plus 16-bit scale and zero per group
  // (2..4 bit) or one 16-bit scale (1 bit).
  const std::uint64_t H = m.config.hidden, I = m.config.intermediate;
  std::uint64_t bits = 0, elems = 0;
  for (const auto& row : a.bits) {
    for (int b : row) {
      for (auto [out, in] : {std::pair{I, H}, std::pair{I, H}, std::pair{H, I}}) {
        elems += out * in;
        bits += out * in * b;
        bits += b == 1 ? 16 : out * ((in + 15) / 16) * 32;
      }
    }
  }
  EXPECT_EQ(acc.expert_elements, elems);
  EXPECT_EQ(acc.expert_bits, bits);
  EXPECT_EQ(expert_bits(qm), a.bits);
  for (const auto& e : qm.tensors) {
    if (e.role == TensorRole::embedding || e.role == TensorRole::norm) {
      EXPECT_EQ(e.tensor.bits, 16) << e.name;
    } else if (e.role != TensorRole::expert) {
      EXPECT_EQ(e.tensor.bits, 4) << e.name;
    }
  }
}

TEST(QuantizeModel, SaveLoadIsBitExact) {
  const MoEModel m = tiny_model(5);
  BitAllocation a;
  a.config_digest = m.digest;
  a.bits = {{3, 2, 2, 1}, {1, 3, 2, 2}};
  QuantizeOptions o;
  o.spec.group_size = 8;
  const auto qm = quantize_model(m, a, uniform_corpus(3, 16, m.config.vocab, 7), o);
  const std::string p = temp_path("roundtrip.mcqz");
  save_quantized(p, qm);
  EXPECT_EQ(load_quantized(p), qm);
  std::filesystem::remove(p);
}

TEST(QuantizeModel, UnroutedExpertWarns) {
  const MoEModel m = tiny_model(6);
  BitAllocation a;
  a.config_digest = m.digest;
  a.bits.assign(2, std::vector<int>(4, 2));
  // One short sequence cannot reach every expert.
  const auto qm = quantize_model(m, a, Corpus{Sequence{1}}, QuantizeOptions{});
  EXPECT_FALSE(qm.warnings.empty());
  EXPECT_NE(qm.warnings.front().find("no calibration tokens"), std::string::npos);
}

TEST(QuantizeModel, RejectsMismatchedAllocation) {
  const MoEModel m = tiny_model(7);
  BitAllocation a;
  a.bits.assign(2, std::vector<int>(3, 2));
  EXPECT_THROW(quantize_model(m, a, Corpus{}, QuantizeOptions{}), ArgumentError);
}
