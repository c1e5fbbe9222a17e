#pragma once

// Dense row-major matrices and the handful of BLAS-like kernels the
// networks need. Storage order is row-major everywhere: element (r, c) lives
// at data()[r * cols() + c]. Sequence activations are laid out D x T, one
// column per frame.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fsmn/errors.hpp"

namespace fsmn {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<T> column(std::size_t c) const {
    std::vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }
  void set_column(std::size_t c, std::span<const T> v) {
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline std::atomic<unsigned>& thread_count() {
  static std::atomic<unsigned> n{1};
  return n;
}

// Runs fn(begin, end) over disjoint row ranges. Every output row is computed
// by exactly one call with a fixed summation order, so results do not depend
// on the thread count.
template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  const unsigned threads = thread_count().load();
  if (threads <= 1 || rows < 2 || rows * work_per_row < (1u << 16)) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t n = std::min<std::size_t>(threads, rows);
  std::vector<std::thread> pool;
  pool.reserve(n - 1);
  const std::size_t chunk = (rows + n - 1) / n;
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t b = k * chunk;
    const std::size_t e = std::min(rows, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(rows, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Worker threads used by the matrix kernels. 1 (the default) is fully
/// sequential.
inline void set_num_threads(unsigned n) { detail::thread_count() = std::max(1u, n); }
inline unsigned num_threads() { return detail::thread_count().load(); }

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

/// C = A * B.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<T> c(m, n);
  constexpr std::size_t kColBlock = 512;
  constexpr std::size_t kInnerBlock = 128;
  detail::parallel_rows(m, k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t je = std::min(n, jb + kColBlock);
      for (std::size_t pb = 0; pb < k; pb += kInnerBlock) {
        const std::size_t pe = std::min(k, pb + kInnerBlock);
        for (std::size_t i = r0; i < r1; ++i) {
          T* crow = c.data() + i * n;
          const T* arow = a.data() + i * k;
          for (std::size_t p = pb; p < pe; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b.data() + p * n;
            for (std::size_t j = jb; j < je; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  });
  return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  constexpr std::size_t kBlock = 32;
  for (std::size_t ib = 0; ib < a.rows(); ib += kBlock) {
    for (std::size_t jb = 0; jb < a.cols(); jb += kBlock) {
      const std::size_t ie = std::min(a.rows(), ib + kBlock);
      const std::size_t je = std::min(a.cols(), jb + kBlock);
      for (std::size_t i = ib; i < ie; ++i)
        for (std::size_t j = jb; j < je; ++j) t(j, i) = a(i, j);
    }
  }
  return t;
}

/// C = A^T * B.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_string() + " by " +
                     b.shape_string());
  }
  return matmul(transpose(a), b);
}

/// C = A * B^T.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape_string() + " by transpose of " +
                     b.shape_string());
  }
  return matmul(a, transpose(b));
}

/// a += alpha * b
template <typename T>
void axpy(Matrix<T>& a, T alpha, const Matrix<T>& b) {
  require_same_shape(a, b, "axpy");
  T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += alpha * pb[i];
}

template <typename T>
Matrix<T> operator+(Matrix<T> a, const Matrix<T>& b) {
  axpy(a, T(1), b);
  return a;
}

template <typename T>
Matrix<T> operator-(Matrix<T> a, const Matrix<T>& b) {
  axpy(a, T(-1), b);
  return a;
}

template <typename T>
Matrix<T> operator*(T s, Matrix<T> a) {
  for (auto& v : a.values()) v *= s;
  return a;
}

/// Element-wise product.
template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a, b, "hadamard");
  Matrix<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
  return c;
}

/// Adds column vector `bias` (rows x 1) to every column of `m`.
template <typename T>
void add_column_broadcast(Matrix<T>& m, const Matrix<T>& bias) {
  if (bias.rows() != m.rows() || bias.cols() != 1) {
    throw ShapeError("bias " + bias.shape_string() + " does not broadcast over " +
                     m.shape_string());
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const T b = bias(r, 0);
    for (auto& v : m.row(r)) v += b;
  }
}

/// Row sums as a rows x 1 column.
template <typename T>
Matrix<T> row_sums(const Matrix<T>& m) {
  Matrix<T> s(m.rows(), 1);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    T acc = 0;
    for (T v : m.row(r)) acc += v;
    s(r, 0) = acc;
  }
  return s;
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data(), m.data() + m.size(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs(const Matrix<T>& m) {
  T best = 0;
  for (T v : m.values()) best = std::max(best, std::abs(v));
  return best;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T best = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
  return best;
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<To>(m.data()[i]);
  return out;
}

/// Columns [begin, end) as a new matrix.
template <typename T>
Matrix<T> slice_columns(const Matrix<T>& m, std::size_t begin, std::size_t end) {
  Matrix<T> out(m.rows(), end - begin);
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy(m.data() + r * m.cols() + begin, m.data() + r * m.cols() + end,
              out.data() + r * out.cols());
  return out;
}

/// Horizontal concatenation; all parts must share the row count.
template <typename T>
Matrix<T> concat_columns(std::span<const Matrix<T>> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_columns: row mismatch");
    cols += p.cols();
  }
  Matrix<T> out(parts.front().rows(), cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < p.rows(); ++r)
      std::copy(p.row(r).begin(), p.row(r).end(), out.data() + r * cols + offset);
    offset += p.cols();
  }
  return out;
}

}  // namespace fsmn
