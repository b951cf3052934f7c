// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace mixcomp {

/// Dense row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  /// Builds a matrix from nested initializer rows; all rows must have equal length.
  static Matrix from_rows(const std::vector<std::vector<float>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Deterministic pseudo-random source. Identical seeds give identical streams
/// within one build; no cross-platform bit-exactness is promised.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  double uniform();                      // [0, 1)
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t uniform_index(std::size_t n);  // [0, n)
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// a × b with 64-bit accumulation. Throws ShapeError on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

/// Softmax of a single vector, accumulated in double.
std::vector<float> softmax(std::span<const float> xs);

/// Median; even length averages the two middle elements. Throws on empty input.
double median(std::span<const double> xs);
double median(std::span<const float> xs);

/// Indices of the k largest values in descending value order; ties go to the
/// lower index. Routing determinism depends on this rule.
std::vector<std::size_t> topk_indices(std::span<const float> xs, std::size_t k);

/// Root-mean-square normalisation of every row, scaled by `gain` (length = cols).
Matrix rms_norm(const Matrix& x, std::span<const float> gain, float eps = 1e-6f);

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

double frobenius_norm(const Matrix& m);
double frobenius_distance(const Matrix& a, const Matrix& b);

/// In-place lower Cholesky factor of a symmetric n×n matrix stored row-major.
/// Returns false when the matrix is not positive definite.
bool cholesky_lower(std::vector<double>& a, std::size_t n);

/// Inverse of an SPD matrix from its lower Cholesky factor.
std::vector<double> cholesky_inverse(const std::vector<double>& lower, std::size_t n);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots; merge order is the caller's responsibility.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Round-to-nearest-even through IEEE binary16 and back.
float round_to_half(float x);

/// 64-bit FNV-1a, used for artifact digests.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace mixcomp
