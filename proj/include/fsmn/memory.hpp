#pragma once

// Memory blocks: tapped-delay encoders that summarize a window of hidden
// activations around each frame into one vector.
//
// Scalar and vector blocks compute
//   h~_t = sum_{i=0..N1} a_i (.) h_{t-i} + sum_{j=1..N2} c_j (.) h_{t+j}
// where (.) is a plain product for scalar taps and an element-wise product
// for vector taps. Attention blocks produce their taps per frame,
//   a_t = V f(U h_t + m),
//   h~_t = sum_{i=0..N1-1} a_{t,i} h_{t-i} + sum_{j=1..N2} a_{t,N1-1+j} h_{t+j},
// so their lookback window covers offsets 0..N1-1 and there are N1+N2 taps.
//
// Out-of-range frames contribute zero. When several sequences are packed
// along the time axis, "out of range" means outside the frame's own sequence.

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsmn/activation.hpp"
#include "fsmn/errors.hpp"
#include "fsmn/matrix.hpp"
#include "fsmn/random.hpp"

namespace fsmn {

enum class MemoryKind { Scalar, Vector, Attention };

inline std::string_view to_string(MemoryKind k) {
  switch (k) {
    case MemoryKind::Scalar: return "scalar";
    case MemoryKind::Vector: return "vector";
    case MemoryKind::Attention: return "attention";
  }
  return "?";
}

inline MemoryKind parse_memory_kind(std::string_view s) {
  if (s == "scalar" || s == "S") return MemoryKind::Scalar;
  if (s == "vector" || s == "V") return MemoryKind::Vector;
  if (s == "attention" || s == "A") return MemoryKind::Attention;
  throw InputError("unknown memory kind '" + std::string(s) + "'");
}

struct MemoryConfig {
  MemoryKind kind = MemoryKind::Vector;
  std::size_t lookback = 0;   // N1
  std::size_t lookahead = 0;  // N2
  std::size_t hidden_dim = 0;
  std::size_t attention_dim = 0;
  Activation attention_activation = Activation::Relu;

  /// Number of attention taps, N1 + N2.
  std::size_t attention_taps() const { return lookback + lookahead; }

  /// Frames before / after t that can reach h~_t.
  std::size_t past_span() const {
    if (kind == MemoryKind::Attention) return lookback == 0 ? 0 : lookback - 1;
    return lookback;
  }
  std::size_t future_span() const { return lookahead; }

  void validate() const {
    if (hidden_dim == 0) throw InputError("memory block needs hidden_dim > 0");
    if (kind == MemoryKind::Attention) {
      if (attention_taps() == 0) throw InputError("attention memory needs N1 + N2 >= 1");
      if (attention_dim == 0) throw InputError("attention memory needs attention_dim > 0");
    }
  }

  friend bool operator==(const MemoryConfig&, const MemoryConfig&) = default;
};

/// Learnable coefficients of one memory block. Every tensor is a Matrix so
/// parameters and gradients share one container type.
///   Scalar:    lookback (N1+1)x1, lookahead N2x1
///   Vector:    lookback (N1+1)xD, lookahead N2xD  (row i holds tap a_i, row j-1 holds c_j)
///   Attention: U att x D, V (N1+N2) x att, m att x 1
template <typename T>
struct MemoryParams {
  Matrix<T> lookback;
  Matrix<T> lookahead;
  Matrix<T> U;
  Matrix<T> V;
  Matrix<T> m;

  static MemoryParams zeros(const MemoryConfig& cfg) {
    MemoryParams p;
    const std::size_t width = cfg.kind == MemoryKind::Scalar ? 1 : cfg.hidden_dim;
    switch (cfg.kind) {
      case MemoryKind::Scalar:
      case MemoryKind::Vector:
        p.lookback = Matrix<T>(cfg.lookback + 1, width);
        p.lookahead = Matrix<T>(cfg.lookahead, width);
        break;
      case MemoryKind::Attention:
        p.U = Matrix<T>(cfg.attention_dim, cfg.hidden_dim);
        p.V = Matrix<T>(cfg.attention_taps(), cfg.attention_dim);
        p.m = Matrix<T>(cfg.attention_dim, 1);
        break;
    }
    return p;
  }

  /// a_0 = 1 and all other taps 0: the block passes h_t through unchanged.
  static MemoryParams identity(const MemoryConfig& cfg) {
    auto p = zeros(cfg);
    if (cfg.kind != MemoryKind::Attention) p.lookback.row(0)[0] = T(1);
    if (cfg.kind == MemoryKind::Vector)
      for (auto& v : p.lookback.row(0)) v = T(1);
    return p;
  }

  void check(const MemoryConfig& cfg) const {
    const auto ref = zeros(cfg);
    auto expect = [](const Matrix<T>& have, const Matrix<T>& want, const char* name) {
      if (!have.same_shape(want))
        throw ShapeError(std::string("memory parameter ") + name + " is " + have.shape_string() +
                         ", expected " + want.shape_string());
    };
    expect(lookback, ref.lookback, "lookback");
    expect(lookahead, ref.lookahead, "lookahead");
    expect(U, ref.U, "U");
    expect(V, ref.V, "V");
    expect(m, ref.m, "m");
  }

  /// Visits (name, tensor) for every tensor the kind uses.
  template <typename Fn>
  void for_each(const MemoryConfig& cfg, Fn&& fn) {
    if (cfg.kind == MemoryKind::Attention) {
      fn("U", U);
      fn("V", V);
      fn("m", m);
    } else {
      fn("lookback", lookback);
      if (cfg.lookahead > 0) fn("lookahead", lookahead);
    }
  }
  template <typename Fn>
  void for_each(const MemoryConfig& cfg, Fn&& fn) const {
    const_cast<MemoryParams*>(this)->for_each(
        cfg, [&fn](const char* name, Matrix<T>& t) { fn(name, std::as_const(t)); });
  }
};

/// Identity taps, optionally perturbed by uniform(-perturb, perturb).
/// Attention parameters use a Glorot-uniform range and m = 0.
template <typename T>
MemoryParams<T> init_memory(const MemoryConfig& cfg, Rng& rng, double perturb = 0.0) {
  auto p = MemoryParams<T>::identity(cfg);
  if (cfg.kind == MemoryKind::Attention) {
    const double ru = std::sqrt(6.0 / double(cfg.hidden_dim + cfg.attention_dim));
    const double rv = std::sqrt(6.0 / double(cfg.attention_dim + cfg.attention_taps()));
    fill_uniform(p.U, rng, -ru, ru);
    fill_uniform(p.V, rng, -rv, rv);
    return p;
  }
  if (perturb > 0) {
    for (auto* t : {&p.lookback, &p.lookahead})
      for (auto& v : t->values()) v += static_cast<T>(rng.uniform(-perturb, perturb));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Sequence layout

/// Start offsets of packed sequences. An empty `lengths` means one sequence
/// spanning all `total` frames.
inline std::vector<std::size_t> sequence_offsets(std::span<const std::size_t> lengths,
                                                 std::size_t total) {
  if (lengths.empty()) return {0, total};
  std::vector<std::size_t> offsets{0};
  for (auto len : lengths) {
    if (len == 0) throw InputError("packed sequence of length 0");
    offsets.push_back(offsets.back() + len);
  }
  if (offsets.back() != total)
    throw ShapeError("sequence lengths sum to " + std::to_string(offsets.back()) +
                     " but the matrix has " + std::to_string(total) + " frames");
  return offsets;
}

namespace detail {

template <typename T>
void check_hidden(const Matrix<T>& h, const MemoryConfig& cfg, const char* what) {
  if (h.rows() != cfg.hidden_dim)
    throw ShapeError(std::string(what) + ": activations have " + std::to_string(h.rows()) +
                     " rows, memory block expects " + std::to_string(cfg.hidden_dim));
}

// Tap value for dimension d; scalar taps are shared across dimensions.
template <typename T>
T tap(const Matrix<T>& taps, std::size_t i, std::size_t d) {
  return taps.cols() == 1 ? taps(i, 0) : taps(i, d);
}

// Signed frame offset of attention tap k.
inline std::ptrdiff_t attention_offset(const MemoryConfig& cfg, std::size_t k) {
  return k < cfg.lookback ? -std::ptrdiff_t(k) : std::ptrdiff_t(k - cfg.lookback + 1);
}

// out[:, t] += coef * src[:, t + delta] for every t in [begin, end) whose
// neighbour stays inside the same range. Per-dimension coefficients when
// coef has D entries, a shared one when it has a single entry.
template <typename T>
void shifted_accumulate(Matrix<T>& out, const Matrix<T>& src, std::span<const T> coef,
                        std::ptrdiff_t delta, std::size_t begin, std::size_t end) {
  const std::ptrdiff_t lo = std::ptrdiff_t(begin) + std::max<std::ptrdiff_t>(0, -delta);
  const std::ptrdiff_t hi = std::ptrdiff_t(end) - std::max<std::ptrdiff_t>(0, delta);
  if (lo >= hi) return;
  const std::size_t n = out.cols();
  for (std::size_t d = 0; d < out.rows(); ++d) {
    const T c = coef.size() == 1 ? coef[0] : coef[d];
    if (c == T(0)) continue;
    T* o = out.data() + d * n;
    const T* s = src.data() + d * n + delta;
    for (std::ptrdiff_t t = lo; t < hi; ++t) o[t] += c * s[t];
  }
}

// grad[d] += sum_t e[d, t] * h[d, t + delta] over valid t (summed over d into
// grad[0] when grad has a single entry).
template <typename T>
void shifted_correlate(std::span<T> grad, const Matrix<T>& e, const Matrix<T>& h,
                       std::ptrdiff_t delta, std::size_t begin, std::size_t end) {
  const std::ptrdiff_t lo = std::ptrdiff_t(begin) + std::max<std::ptrdiff_t>(0, -delta);
  const std::ptrdiff_t hi = std::ptrdiff_t(end) - std::max<std::ptrdiff_t>(0, delta);
  if (lo >= hi) return;
  const std::size_t n = e.cols();
  for (std::size_t d = 0; d < e.rows(); ++d) {
    const T* pe = e.data() + d * n;
    const T* ph = h.data() + d * n + delta;
    T acc = 0;
    for (std::ptrdiff_t t = lo; t < hi; ++t) acc += pe[t] * ph[t];
    grad[grad.size() == 1 ? 0 : d] += acc;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Attention coefficients

/// a_t = V f(U h_t + m): the N1+N2 context-dependent taps for one frame.
template <typename T>
Vector<T> attention_coeffs(std::span<const T> h_t, const MemoryConfig& cfg,
                           const MemoryParams<T>& params) {
  if (cfg.kind != MemoryKind::Attention) throw UsageError("attention_coeffs on non-attention block");
  params.check(cfg);
  if (h_t.size() != cfg.hidden_dim)
    throw ShapeError("attention_coeffs: frame has " + std::to_string(h_t.size()) +
                     " entries, expected " + std::to_string(cfg.hidden_dim));
  Vector<T> g(cfg.attention_dim);
  for (std::size_t r = 0; r < cfg.attention_dim; ++r) {
    T z = params.m(r, 0);
    for (std::size_t d = 0; d < cfg.hidden_dim; ++d) z += params.U(r, d) * h_t[d];
    g[r] = activate(cfg.attention_activation, z);
  }
  Vector<T> a(cfg.attention_taps());
  for (std::size_t k = 0; k < a.size(); ++k) {
    T s = 0;
    for (std::size_t r = 0; r < cfg.attention_dim; ++r) s += params.V(k, r) * g[r];
    a[k] = s;
  }
  return a;
}

namespace detail {

template <typename T>
struct AttentionActivations {
  Matrix<T> z;  // U H + m
  Matrix<T> g;  // f(z)
  Matrix<T> a;  // V g, one column of taps per frame
};

template <typename T>
AttentionActivations<T> attention_all(const Matrix<T>& h, const MemoryConfig& cfg,
                                      const MemoryParams<T>& params) {
  AttentionActivations<T> act;
  act.z = matmul(params.U, h);
  add_column_broadcast(act.z, params.m);
  act.g = activate(cfg.attention_activation, act.z);
  act.a = matmul(params.V, act.g);
  return act;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward encoders

/// Reference encoder: a direct per-frame, per-tap loop with explicit
/// boundary checks. Slow; used as the oracle for the efficient paths.
template <typename T>
Matrix<T> encode_naive(const Matrix<T>& h, const MemoryConfig& cfg, const MemoryParams<T>& params,
                       std::span<const std::size_t> lengths = {}) {
  cfg.validate();
  params.check(cfg);
  detail::check_hidden(h, cfg, "encode_naive");
  const auto offsets = sequence_offsets(lengths, h.cols());
  const std::size_t dim = h.rows();
  Matrix<T> out(dim, h.cols());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto first = std::ptrdiff_t(offsets[s]);
    const auto last = std::ptrdiff_t(offsets[s + 1]);  // exclusive
    auto inside = [&](std::ptrdiff_t u) { return u >= first && u < last; };
    for (std::ptrdiff_t t = first; t < last; ++t) {
      if (cfg.kind == MemoryKind::Attention) {
        const auto a = attention_coeffs(std::span<const T>(h.column(t)), cfg, params);
        for (std::size_t k = 0; k < a.size(); ++k) {
          const auto u = t + detail::attention_offset(cfg, k);
          if (!inside(u)) continue;
          for (std::size_t d = 0; d < dim; ++d) out(d, t) += a[k] * h(d, u);
        }
        continue;
      }
      for (std::size_t i = 0; i <= cfg.lookback; ++i) {
        const auto u = t - std::ptrdiff_t(i);
        if (!inside(u)) continue;
        for (std::size_t d = 0; d < dim; ++d) out(d, t) += detail::tap(params.lookback, i, d) * h(d, u);
      }
      for (std::size_t j = 1; j <= cfg.lookahead; ++j) {
        const auto u = t + std::ptrdiff_t(j);
        if (!inside(u)) continue;
        for (std::size_t d = 0; d < dim; ++d)
          out(d, t) += detail::tap(params.lookahead, j - 1, d) * h(d, u);
      }
    }
  }
  return out;
}

/// Tap-major kernel for scalar and vector blocks: for each tap, one shifted
/// multiply-add over every sequence. Visits only non-zero band entries.
template <typename T>
Matrix<T> encode_taps(const Matrix<T>& h, const MemoryConfig& cfg, const MemoryParams<T>& params,
                      std::span<const std::size_t> lengths = {}) {
  if (cfg.kind == MemoryKind::Attention) throw UsageError("encode_taps on attention block");
  cfg.validate();
  params.check(cfg);
  detail::check_hidden(h, cfg, "encode_taps");
  const auto offsets = sequence_offsets(lengths, h.cols());
  Matrix<T> out(h.rows(), h.cols());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t i = 0; i <= cfg.lookback; ++i)
      detail::shifted_accumulate<T>(out, h, params.lookback.row(i), -std::ptrdiff_t(i),
                                    offsets[s], offsets[s + 1]);
    for (std::size_t j = 1; j <= cfg.lookahead; ++j)
      detail::shifted_accumulate<T>(out, h, params.lookahead.row(j - 1), std::ptrdiff_t(j),
                                    offsets[s], offsets[s + 1]);
  }
  return out;
}

/// Attention encoder: all per-frame taps in two matrix products, then one
/// shifted multiply-add per tap.
template <typename T>
Matrix<T> attention_encode(const Matrix<T>& h, const MemoryConfig& cfg,
                           const MemoryParams<T>& params,
                           std::span<const std::size_t> lengths = {}) {
  if (cfg.kind != MemoryKind::Attention) throw UsageError("attention_encode on non-attention block");
  cfg.validate();
  params.check(cfg);
  detail::check_hidden(h, cfg, "attention_encode");
  const auto offsets = sequence_offsets(lengths, h.cols());
  const auto act = detail::attention_all(h, cfg, params);
  const std::size_t n = h.cols();
  Matrix<T> out(h.rows(), n);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t k = 0; k < cfg.attention_taps(); ++k) {
      const auto delta = detail::attention_offset(cfg, k);
      const std::ptrdiff_t lo = std::ptrdiff_t(offsets[s]) + std::max<std::ptrdiff_t>(0, -delta);
      const std::ptrdiff_t hi = std::ptrdiff_t(offsets[s + 1]) - std::max<std::ptrdiff_t>(0, delta);
      const T* coef = act.a.data() + k * n;
      for (std::size_t d = 0; d < h.rows(); ++d) {
        T* o = out.data() + d * n;
        const T* src = h.data() + d * n + delta;
        for (std::ptrdiff_t t = lo; t < hi; ++t) o[t] += coef[t] * src[t];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Band matrices (scalar blocks)

/// One diagonal block: a T x T band carrying lookback taps a_0..a_N1 on and
/// above the diagonal and lookahead taps c_1..c_N2 below it.
template <typename T>
struct BandBlock {
  std::size_t length = 0;
  Vector<T> lookback;   // a_0..a_N1
  Vector<T> lookahead;  // c_1..c_N2
};

/// Block-diagonal band matrix M (one block) or M-bar (several). Entry (i, j)
/// of a block is a_{j-i} when 0 <= j-i <= N1, c_{i-j} when 1 <= i-j <= N2,
/// and 0 otherwise, so that H~ = H M with frames as columns of H.
template <typename T>
class BandMatrix {
 public:
  BandMatrix() = default;
  explicit BandMatrix(std::vector<BandBlock<T>> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw InputError("band matrix needs at least one block");
    for (const auto& b : blocks_) {
      if (b.length == 0) throw InputError("band block of length 0");
      if (b.lookback.size() != blocks_.front().lookback.size() ||
          b.lookahead.size() != blocks_.front().lookahead.size())
        throw ShapeError("band blocks must share lookback and lookahead orders");
    }
  }

  const std::vector<BandBlock<T>>& blocks() const { return blocks_; }
  std::size_t lookback_order() const { return blocks_.front().lookback.size() - 1; }
  std::size_t lookahead_order() const { return blocks_.front().lookahead.size(); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.length;
    return n;
  }

  std::vector<std::size_t> lengths() const {
    std::vector<std::size_t> out;
    for (const auto& b : blocks_) out.push_back(b.length);
    return out;
  }

  T entry(std::size_t i, std::size_t j) const {
    std::size_t offset = 0;
    for (const auto& b : blocks_) {
      if (i < offset + b.length) {
        if (j < offset || j >= offset + b.length) return T(0);
        const auto r = std::ptrdiff_t(i - offset), c = std::ptrdiff_t(j - offset);
        if (c - r >= 0 && std::size_t(c - r) < b.lookback.size()) return b.lookback[c - r];
        if (r - c >= 1 && std::size_t(r - c) <= b.lookahead.size()) return b.lookahead[r - c - 1];
        return T(0);
      }
      offset += b.length;
    }
    throw InputError("band matrix index out of range");
  }

  /// Materialized (sum T_k) x (sum T_k) matrix.
  Matrix<T> dense() const {
    const std::size_t n = size();
    Matrix<T> m(n, n);
    std::size_t o = 0;
    for (const auto& b : blocks_) {
      for (std::size_t r = 0; r < b.length; ++r) {
        for (std::size_t i = 0; i < b.lookback.size() && r + i < b.length; ++i)
          m(o + r, o + r + i) = b.lookback[i];
        for (std::size_t j = 1; j <= b.lookahead.size() && j <= r; ++j)
          m(o + r, o + r - j) = b.lookahead[j - 1];
      }
      o += b.length;
    }
    return m;
  }

 private:
  std::vector<BandBlock<T>> blocks_;
};

/// T x T band matrix for a scalar block. Rows and columns past the sequence
/// end are cut, so for T <= N1 the band is truncated at the edge.
template <typename T>
BandMatrix<T> build_band_matrix(const MemoryConfig& cfg, const MemoryParams<T>& params,
                                std::size_t length) {
  if (cfg.kind != MemoryKind::Scalar) throw UsageError("band matrices exist for scalar blocks only");
  params.check(cfg);
  if (length == 0) throw InputError("band matrix for an empty sequence");
  BandBlock<T> b;
  b.length = length;
  b.lookback.assign(params.lookback.values().begin(), params.lookback.values().end());
  b.lookahead.assign(params.lookahead.values().begin(), params.lookahead.values().end());
  return BandMatrix<T>({std::move(b)});
}

/// Block-diagonal M-bar from per-sequence blocks.
template <typename T>
BandMatrix<T> build_batch_band(std::span<const BandMatrix<T>> parts) {
  if (parts.empty()) throw InputError("build_batch_band: no blocks");
  std::vector<BandBlock<T>> blocks;
  for (const auto& p : parts) blocks.insert(blocks.end(), p.blocks().begin(), p.blocks().end());
  return BandMatrix<T>(std::move(blocks));
}

template <typename T>
BandMatrix<T> build_batch_band(const MemoryConfig& cfg, const MemoryParams<T>& params,
                               std::span<const std::size_t> lengths) {
  std::vector<BandMatrix<T>> parts;
  for (auto len : lengths) parts.push_back(build_band_matrix(cfg, params, len));
  return build_batch_band<T>(parts);
}

/// H~ = H M as one dense matrix product.
template <typename T>
Matrix<T> encode_banded(const Matrix<T>& h, const BandMatrix<T>& m) {
  if (h.cols() != m.size())
    throw ShapeError("encode_banded: activations have " + std::to_string(h.cols()) +
                     " frames, band matrix is " + std::to_string(m.size()) + "x" +
                     std::to_string(m.size()));
  return matmul(h, m.dense());
}

/// H~ = H M walking the diagonals of M and skipping its structural zeros.
template <typename T>
Matrix<T> encode_band_walk(const Matrix<T>& h, const BandMatrix<T>& m) {
  if (h.cols() != m.size())
    throw ShapeError("encode_band_walk: activations have " + std::to_string(h.cols()) +
                     " frames, band matrix is " + std::to_string(m.size()) + "x" +
                     std::to_string(m.size()));
  Matrix<T> out(h.rows(), h.cols());
  std::size_t o = 0;
  for (const auto& b : m.blocks()) {
    for (std::size_t i = 0; i < b.lookback.size(); ++i)
      detail::shifted_accumulate<T>(out, h, std::span<const T>(&b.lookback[i], 1),
                                    -std::ptrdiff_t(i), o, o + b.length);
    for (std::size_t j = 1; j <= b.lookahead.size(); ++j)
      detail::shifted_accumulate<T>(out, h, std::span<const T>(&b.lookahead[j - 1], 1),
                                    std::ptrdiff_t(j), o, o + b.length);
    o += b.length;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward passes

template <typename T>
struct ScalarBackward {
  Matrix<T> full_grad;   // dL/dM-bar over the whole matrix (dense route only)
  Vector<T> d_lookback;  // tied gradient of a_0..a_N1
  Vector<T> d_lookahead; // tied gradient of c_1..c_N2
  Matrix<T> e_h;         // error signal w.r.t. H-bar
};

/// Dense route: dM-bar = H-bar^T e_H~, e_H-bar = e_H~ M-bar^T. Tied tap
/// gradients are the sums of dM-bar along each in-block diagonal; entries
/// outside the band are discarded.
template <typename T>
ScalarBackward<T> scalar_backward(const Matrix<T>& h, const Matrix<T>& e_out,
                                  const BandMatrix<T>& m) {
  require_same_shape(h, e_out, "scalar_backward");
  if (h.cols() != m.size())
    throw ShapeError("scalar_backward: " + std::to_string(h.cols()) + " frames vs band size " +
                     std::to_string(m.size()));
  ScalarBackward<T> r;
  r.full_grad = matmul_tn(h, e_out);
  r.d_lookback.assign(m.lookback_order() + 1, T(0));
  r.d_lookahead.assign(m.lookahead_order(), T(0));
  std::size_t o = 0;
  for (const auto& b : m.blocks()) {
    for (std::size_t i = 0; i < r.d_lookback.size(); ++i)
      for (std::size_t s = 0; s + i < b.length; ++s) r.d_lookback[i] += r.full_grad(o + s, o + s + i);
    for (std::size_t j = 1; j <= r.d_lookahead.size(); ++j)
      for (std::size_t s = 0; s + j < b.length; ++s)
        r.d_lookahead[j - 1] += r.full_grad(o + s + j, o + s);
    o += b.length;
  }
  r.e_h = matmul_nt(e_out, m.dense());
  return r;
}

/// Same gradients without materializing anything T x T:
/// d a_i = sum_t <e_t, h_{t-i}>, d c_j = sum_t <e_t, h_{t+j}>, and the
/// error signal walks the transposed band. `full_grad` is left empty.
template <typename T>
ScalarBackward<T> scalar_backward_walk(const Matrix<T>& h, const Matrix<T>& e_out,
                                       const BandMatrix<T>& m) {
  require_same_shape(h, e_out, "scalar_backward_walk");
  if (h.cols() != m.size())
    throw ShapeError("scalar_backward_walk: " + std::to_string(h.cols()) +
                     " frames vs band size " + std::to_string(m.size()));
  ScalarBackward<T> r;
  r.d_lookback.assign(m.lookback_order() + 1, T(0));
  r.d_lookahead.assign(m.lookahead_order(), T(0));
  r.e_h = Matrix<T>(h.rows(), h.cols());
  std::size_t o = 0;
  for (const auto& b : m.blocks()) {
    const std::size_t end = o + b.length;
    for (std::size_t i = 0; i < b.lookback.size(); ++i) {
      detail::shifted_correlate<T>(std::span<T>(&r.d_lookback[i], 1), e_out, h, -std::ptrdiff_t(i), o, end);
      detail::shifted_accumulate<T>(r.e_h, e_out, std::span<const T>(&b.lookback[i], 1),
                                    std::ptrdiff_t(i), o, end);
    }
    for (std::size_t j = 1; j <= b.lookahead.size(); ++j) {
      detail::shifted_correlate<T>(std::span<T>(&r.d_lookahead[j - 1], 1), e_out, h,
                                   std::ptrdiff_t(j), o, end);
      detail::shifted_accumulate<T>(r.e_h, e_out, std::span<const T>(&b.lookahead[j - 1], 1),
                                    -std::ptrdiff_t(j), o, end);
    }
    o = end;
  }
  return r;
}

template <typename T>
struct VectorBackward {
  Matrix<T> d_lookback;   // (N1+1) x D
  Matrix<T> d_lookahead;  // N2 x D
  Matrix<T> e_h;
};

/// Vector taps:
///   d a_i = sum_t e_t (.) h_{t-i},  d c_j = sum_t e_t (.) h_{t+j},
///   e_{h_t} = sum_i a_i (.) e_{t+i} + sum_j c_j (.) e_{t-j},
/// with every sum confined to the frame's own sequence.
template <typename T>
VectorBackward<T> vector_backward(const Matrix<T>& h, const Matrix<T>& e_out,
                                  const MemoryConfig& cfg, const MemoryParams<T>& params,
                                  std::span<const std::size_t> lengths = {}) {
  if (cfg.kind != MemoryKind::Vector) throw UsageError("vector_backward on non-vector block");
  cfg.validate();
  params.check(cfg);
  detail::check_hidden(h, cfg, "vector_backward");
  require_same_shape(h, e_out, "vector_backward");
  const auto offsets = sequence_offsets(lengths, h.cols());
  VectorBackward<T> r{Matrix<T>(cfg.lookback + 1, cfg.hidden_dim),
                      Matrix<T>(cfg.lookahead, cfg.hidden_dim), Matrix<T>(h.rows(), h.cols())};
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    for (std::size_t i = 0; i <= cfg.lookback; ++i) {
      detail::shifted_correlate<T>(r.d_lookback.row(i), e_out, h, -std::ptrdiff_t(i), b, e);
      detail::shifted_accumulate<T>(r.e_h, e_out, params.lookback.row(i), std::ptrdiff_t(i), b, e);
    }
    for (std::size_t j = 1; j <= cfg.lookahead; ++j) {
      detail::shifted_correlate<T>(r.d_lookahead.row(j - 1), e_out, h, std::ptrdiff_t(j), b, e);
      detail::shifted_accumulate<T>(r.e_h, e_out, params.lookahead.row(j - 1), -std::ptrdiff_t(j), b, e);
    }
  }
  return r;
}

template <typename T>
struct AttentionBackward {
  Matrix<T> dU, dV, dm;
  Matrix<T> e_h;
};

/// Chain rule through a_t = V f(U h_t + m) and the context-weighted sum.
/// h_t receives error both as an encoded neighbour and as the attention
/// query of its own frame.
template <typename T>
AttentionBackward<T> attention_backward(const Matrix<T>& h, const Matrix<T>& e_out,
                                        const MemoryConfig& cfg, const MemoryParams<T>& params,
                                        std::span<const std::size_t> lengths = {}) {
  if (cfg.kind != MemoryKind::Attention) throw UsageError("attention_backward on non-attention block");
  cfg.validate();
  params.check(cfg);
  detail::check_hidden(h, cfg, "attention_backward");
  require_same_shape(h, e_out, "attention_backward");
  const auto offsets = sequence_offsets(lengths, h.cols());
  const auto act = detail::attention_all(h, cfg, params);
  const std::size_t n = h.cols(), dim = h.rows();

  Matrix<T> da(cfg.attention_taps(), n);
  Matrix<T> e_h(dim, n);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t k = 0; k < cfg.attention_taps(); ++k) {
      const auto delta = detail::attention_offset(cfg, k);
      const std::ptrdiff_t lo = std::ptrdiff_t(offsets[s]) + std::max<std::ptrdiff_t>(0, -delta);
      const std::ptrdiff_t hi = std::ptrdiff_t(offsets[s + 1]) - std::max<std::ptrdiff_t>(0, delta);
      T* dak = da.data() + k * n;
      const T* ak = act.a.data() + k * n;
      for (std::size_t d = 0; d < dim; ++d) {
        const T* pe = e_out.data() + d * n;
        const T* ph = h.data() + d * n + delta;
        T* peh = e_h.data() + d * n + delta;
        for (std::ptrdiff_t t = lo; t < hi; ++t) {
          dak[t] += pe[t] * ph[t];
          peh[t] += ak[t] * pe[t];
        }
      }
    }
  }

  AttentionBackward<T> r;
  r.dV = matmul_nt(da, act.g);
  const Matrix<T> dz = activate_backward(cfg.attention_activation, act.z, act.g, matmul_tn(params.V, da));
  r.dU = matmul_nt(dz, h);
  r.dm = row_sums(dz);
  r.e_h = e_h + matmul_tn(params.U, dz);
  return r;
}

// ---------------------------------------------------------------------------
// Dispatch used by the network layers

enum class MemoryPath {
  Reference,  // per-frame loops (encode_naive and friends)
  Dense,      // scalar: materialized band-matrix products
  Walk,       // scalar/vector: tap-major kernels that skip zeros
};

template <typename T>
Matrix<T> memory_forward(const Matrix<T>& h, const MemoryConfig& cfg, const MemoryParams<T>& params,
                         std::span<const std::size_t> lengths, MemoryPath path) {
  if (path == MemoryPath::Reference) return encode_naive(h, cfg, params, lengths);
  switch (cfg.kind) {
    case MemoryKind::Scalar: {
      std::vector<std::size_t> lens(lengths.begin(), lengths.end());
      if (lens.empty()) lens.push_back(h.cols());
      detail::check_hidden(h, cfg, "memory_forward");
      const auto band = build_batch_band(cfg, params, std::span<const std::size_t>(lens));
      return path == MemoryPath::Dense ? encode_banded(h, band) : encode_band_walk(h, band);
    }
    case MemoryKind::Vector: return encode_taps(h, cfg, params, lengths);
    case MemoryKind::Attention: return attention_encode(h, cfg, params, lengths);
  }
  return {};
}

template <typename T>
struct MemoryGrad {
  MemoryParams<T> grad;
  Matrix<T> e_h;
};

template <typename T>
MemoryGrad<T> memory_backward(const Matrix<T>& h, const Matrix<T>& e_out, const MemoryConfig& cfg,
                              const MemoryParams<T>& params, std::span<const std::size_t> lengths,
                              MemoryPath path) {
  MemoryGrad<T> r{MemoryParams<T>::zeros(cfg), {}};
  switch (cfg.kind) {
    case MemoryKind::Scalar: {
      std::vector<std::size_t> lens(lengths.begin(), lengths.end());
      if (lens.empty()) lens.push_back(h.cols());
      detail::check_hidden(h, cfg, "memory_backward");
      const auto band = build_batch_band(cfg, params, std::span<const std::size_t>(lens));
      auto sb = path == MemoryPath::Dense ? scalar_backward(h, e_out, band)
                                          : scalar_backward_walk(h, e_out, band);
      std::copy(sb.d_lookback.begin(), sb.d_lookback.end(), r.grad.lookback.data());
      std::copy(sb.d_lookahead.begin(), sb.d_lookahead.end(), r.grad.lookahead.data());
      r.e_h = std::move(sb.e_h);
      break;
    }
    case MemoryKind::Vector: {
      auto vb = vector_backward(h, e_out, cfg, params, lengths);
      r.grad.lookback = std::move(vb.d_lookback);
      r.grad.lookahead = std::move(vb.d_lookahead);
      r.e_h = std::move(vb.e_h);
      break;
    }
    case MemoryKind::Attention: {
      auto ab = attention_backward(h, e_out, cfg, params, lengths);
      r.grad.U = std::move(ab.dU);
      r.grad.V = std::move(ab.dV);
      r.grad.m = std::move(ab.dm);
      r.e_h = std::move(ab.e_h);
      break;
    }
  }
  return r;
}

}  // namespace fsmn
