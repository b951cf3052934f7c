// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/numerics.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>

#include "mixcomp/error.hpp"

namespace mixcomp {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::from_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Matrix(rows.size(), cols, std::move(data));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double SeededRng::uniform() {
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

double SeededRng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t SeededRng::uniform_index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const std::size_t n = b.cols();
  Matrix out(a.rows(), n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const float* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

std::vector<float> softmax(std::span<const float> xs) {
  std::vector<float> out(xs.size());
  if (xs.empty()) return out;
  const float mx = *std::max_element(xs.begin(), xs.end());
  double sum = 0.0;
  std::vector<double> e(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    e[i] = std::exp(static_cast<double>(xs[i]) - mx);
    sum += e[i];
  }
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<float>(e[i] / sum);
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto s = softmax(m.row(r));
    std::copy(s.begin(), s.end(), out.row(r).begin());
  }
  return out;
}

namespace {
template <typename T>
double median_impl(std::span<const T> xs) {
  if (xs.empty()) throw ArgumentError("median of an empty list");
  std::vector<double> v(xs.begin(), xs.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace

double median(std::span<const double> xs) { return median_impl(xs); }
double median(std::span<const float> xs) { return median_impl(xs); }

std::vector<std::size_t> topk_indices(std::span<const float> xs, std::size_t k) {
  if (k > xs.size()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " exceeds length " + std::to_string(xs.size()));
  }
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (xs[a] != xs[b]) return xs[a] > xs[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

Matrix rms_norm(const Matrix& x, std::span<const float> gain, float eps) {
  if (gain.size() != x.cols()) throw ShapeError("rms_norm: gain length mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ss = 0.0;
    for (float v : in) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(in.size()) + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = static_cast<float>(in[c] * inv * gain[c]);
  }
  return out;
}

double frobenius_norm(const Matrix& m) {
  double ss = 0.0;
  for (float v : m.data()) ss += static_cast<double>(v) * v;
  return std::sqrt(ss);
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("frobenius_distance: shape mismatch");
  double ss = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = static_cast<double>(da[i]) - db[i];
    ss += d * d;
  }
  return std::sqrt(ss);
}

bool cholesky_lower(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0.0;
  }
  return true;
}

std::vector<double> cholesky_inverse(const std::vector<double>& lower, std::size_t n) {
  // Invert L, then A^-1 = L^-T L^-1.
  std::vector<double> linv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    linv[i * n + i] = 1.0 / lower[i * n + i];
    for (std::size_t j = 0; j < i; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += lower[i * n + k] * linv[k * n + j];
      linv[i * n + j] = -s / lower[i * n + i];
    }
  }
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv[k * n + i] * linv[k * n + j];
      inv[i * n + j] = s;
      inv[j * n + i] = s;
    }
  }
  return inv;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  pool.clear();
  if (first_error) std::rethrow_exception(first_error);
}

float round_to_half(float x) {
  if (!std::isfinite(x)) return x;
  std::uint32_t bits;
  std::memcpy(&bits, &x, sizeof(bits));
  const std::uint32_t sign = bits & 0x80000000u;
  const float ax = std::fabs(x);
  float r;
  if (ax >= 65520.0f) {
    r = std::numeric_limits<float>::infinity();
  } else if (ax < 6.103515625e-05f) {
    // Subnormal half range: fixed spacing 2^-24.
    const double q = std::nearbyint(static_cast<double>(ax) * 16777216.0);
    r = static_cast<float>(q / 16777216.0);
  } else {
    // Keep 10 explicit mantissa bits, round to nearest even.
    std::uint32_t ab = bits & 0x7fffffffu;
    const std::uint32_t lsb = (ab >> 13) & 1u;
    ab += 0x0fffu + lsb;
    ab &= ~0x1fffu;
    std::memcpy(&r, &ab, sizeof(r));
  }
  std::uint32_t rb;
  std::memcpy(&rb, &r, sizeof(rb));
  rb |= sign;
  std::memcpy(&r, &rb, sizeof(r));
  return r;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace mixcomp
