#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsmn/errors.hpp"
#include "fsmn/matrix.hpp"

namespace fsmn {

template <typename T>
using Vector = std::vector<T>;

enum class Activation { Linear, Relu, Sigmoid, Tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "linear") return Activation::Linear;
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "tanh") return Activation::Tanh;
  throw InputError("unknown activation '" + std::string(s) + "'");
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::Linear: return x;
    case Activation::Relu: return x > T(0) ? x : T(0);
    case Activation::Sigmoid: return sigmoid(x);
    case Activation::Tanh: return std::tanh(x);
  }
  return x;
}

/// f'(x) expressed through the pre-activation x and output y = f(x).
/// ReLU uses the one-sided subgradient 0 at x = 0.
template <typename T>
T activate_derivative(Activation a, T x, T y) {
  switch (a) {
    case Activation::Linear: return T(1);
    case Activation::Relu: return x > T(0) ? T(1) : T(0);
    case Activation::Sigmoid: return y * (T(1) - y);
    case Activation::Tanh: return T(1) - y * y;
  }
  return T(1);
}

template <typename T>
Matrix<T> activate(Activation a, const Matrix<T>& z) {
  Matrix<T> y(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) y.data()[i] = activate(a, z.data()[i]);
  return y;
}

/// Error signal through the activation: e_in = e_out * f'(z).
template <typename T>
Matrix<T> activate_backward(Activation a, const Matrix<T>& z, const Matrix<T>& y,
                            const Matrix<T>& e_out) {
  require_same_shape(z, e_out, "activate_backward");
  Matrix<T> e(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i)
    e.data()[i] = e_out.data()[i] * activate_derivative(a, z.data()[i], y.data()[i]);
  return e;
}

template <typename T>
Vector<T> relu(std::span<const T> x) {
  Vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Vector<T> relu_backward(std::span<const T> x, std::span<const T> e_out) {
  if (x.size() != e_out.size()) throw ShapeError("relu_backward: length mismatch");
  Vector<T> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) e[i] = x[i] > T(0) ? e_out[i] : T(0);
  return e;
}

template <typename T>
struct LossAndGrad {
  T loss;
  Matrix<T> grad;
};

/// Softmax over each column of `logits`, numerically stabilized by
/// subtracting the column maximum.
template <typename T>
Matrix<T> softmax_columns(const Matrix<T>& logits) {
  const std::size_t v = logits.rows(), n = logits.cols();
  Matrix<T> p(v, n);
  std::vector<T> mx(n, -std::numeric_limits<T>::infinity());
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t t = 0; t < n; ++t) mx[t] = std::max(mx[t], logits(r, t));
  std::vector<T> sum(n, T(0));
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t t = 0; t < n; ++t) {
      const T e = std::exp(logits(r, t) - mx[t]);
      p(r, t) = e;
      sum[t] += e;
    }
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t t = 0; t < n; ++t) p(r, t) /= sum[t];
  return p;
}

/// -log softmax(logits[:, t])[targets[t]] for every column, accumulated in
/// double precision.
template <typename T>
std::vector<double> column_nll(const Matrix<T>& logits, std::span<const std::uint32_t> targets) {
  const std::size_t v = logits.rows(), n = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " columns");
  }
  for (auto t : targets)
    if (t >= v) throw InputError("cross entropy: target " + std::to_string(t) + " >= " +
                                 std::to_string(v) + " classes");
  // log-sum-exp as max + log1p(sum of the non-maximal terms) keeps
  // confident predictions accurate to full relative precision.
  std::vector<double> mx(n, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t t = 0; t < n; ++t)
      if (double(logits(r, t)) > mx[t]) {
        mx[t] = double(logits(r, t));
        arg[t] = r;
      }
  std::vector<double> rest(n, 0.0);
  for (std::size_t r = 0; r < v; ++r)
    for (std::size_t t = 0; t < n; ++t)
      if (r != arg[t]) rest[t] += std::exp(double(logits(r, t)) - mx[t]);
  std::vector<double> nll(n);
  for (std::size_t t = 0; t < n; ++t)
    nll[t] = std::log1p(rest[t]) + (mx[t] - double(logits(targets[t], t)));
  return nll;
}

/// Mean over columns of the cross entropy, and its gradient (softmax - onehot) / T.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Matrix<T>& logits,
                                     std::span<const std::uint32_t> targets) {
  const auto nll = column_nll(logits, targets);
  const std::size_t n = logits.cols();
  double total = 0;
  for (double x : nll) total += x;
  Matrix<T> grad = softmax_columns(logits);
  const T inv = n == 0 ? T(0) : T(1) / T(n);
  for (std::size_t t = 0; t < n; ++t) grad(targets[t], t) -= T(1);
  for (auto& g : grad.values()) g *= inv;
  return {n == 0 ? T(0) : T(total / double(n)), std::move(grad)};
}

}  // namespace fsmn
