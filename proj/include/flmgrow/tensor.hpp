#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "flmgrow/error.hpp"

namespace flmgrow {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

// Dense row-major tensor. Rank-1 tensors behave as a single row in row-wise ops.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty() && shape_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Row view: last extent is the row length, everything before it folds into rows.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  // Bitwise equality (distinguishes -0.0 from +0.0 and compares NaN payloads).
  bool bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
  }

  template <Real U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError(std::string(what) + " must be rank 2, got " + shape_string(s));
}

}  // namespace detail

// C = A·B. Every output element is accumulated from +0 in ascending order of the
// contraction index; the i-k-j loop nest keeps that order while vectorizing over j.
// The two transposed variants below follow the same rule, so all three agree
// bitwise with a scalar triple loop.
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul lhs");
  detail::require_matrix(b.shape(), "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_matrix(a.shape(), "transpose operand");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

// A·Bᵀ
template <Real T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul(a, transpose(b));
}

// Aᵀ·B, contraction over rows of A and B in ascending row order.
template <Real T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a.shape(), "matmul_tn lhs");
  detail::require_matrix(b.shape(), "matmul_tn rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != m) throw DimensionError("matmul_tn row counts differ");
  Tensor<T> c({k, n});
  for (std::size_t r = 0; r < m; ++r) {
    const T* arow = a.data() + r * k;
    const T* __restrict brow = b.data() + r * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T av = arow[i];
      T* __restrict crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// Numerically stable softmax of one row, written into out (may alias x).
template <Real T>
void softmax_row(std::span<const T> x, std::span<T> out) {
  if (x.empty()) return;
  const T mx = *std::max_element(x.begin(), x.end());
  T sum{0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) out[i] /= sum;
}

template <Real T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows needs rank >= 1");
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) softmax_row<T>(x.row(r), y.row(r));
  return y;
}

// ---- raw tensor serialization -------------------------------------------------
// Layout: u64 rank, rank × u64 extents, then row-major values. Everything little-endian.

namespace detail {

template <class U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    U out{};
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  }
}

template <class U>
void write_raw(std::ostream& os, U v) {
  const U le = to_little(v);
  os.write(reinterpret_cast<const char*>(&le), sizeof(U));
}

template <class U>
U read_raw(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError("truncated tensor stream");
  return to_little(v);
}

template <Real T>
using BitsOf = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;

}  // namespace detail

template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  detail::write_raw<std::uint64_t>(os, t.rank());
  for (std::size_t e : t.shape()) detail::write_raw<std::uint64_t>(os, e);
  for (T v : t.values()) detail::write_raw(os, std::bit_cast<detail::BitsOf<T>>(v));
  if (!os) throw IoError("failed writing tensor");
}

template <Real T>
Tensor<T> read_tensor(std::istream& is) {
  const auto rank = detail::read_raw<std::uint64_t>(is);
  if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_raw<std::uint64_t>(is);
  std::vector<T> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<T>(detail::read_raw<detail::BitsOf<T>>(is));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace flmgrow
