#pragma once

// Layer stacks built from projection, dense, memory-augmented hidden,
// recurrent baseline and softmax output layers, with hand-derived
// backpropagation.
//
// A memory-augmented layer reads its input X and the memory encoding X~ of
// that input:  Y = f(W X + W~ X~ + b).  The recurrent baseline computes
// h_t = f(W x_t + W~ h_{t-1} + b) with h_0 = 0 at the start of every packed
// sequence.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "fsmn/activation.hpp"
#include "fsmn/batch.hpp"
#include "fsmn/errors.hpp"
#include "fsmn/matrix.hpp"
#include "fsmn/memory.hpp"
#include "fsmn/random.hpp"

namespace fsmn {

/// Embedding lookup for `window` context words. The table has vocab + 1 rows;
/// the extra last row is the start-of-sentence padding symbol.
struct ProjectionSpec {
  std::size_t vocab = 0;
  std::size_t window = 0;
  std::size_t dim = 0;
  std::size_t out() const { return window * dim; }
  std::size_t pad_id() const { return vocab; }
};

struct DenseSpec {
  std::size_t in = 0, out = 0;
  Activation activation = Activation::Relu;
};

struct FsmnHiddenSpec {
  std::size_t in = 0, out = 0;
  Activation activation = Activation::Relu;
  MemoryConfig memory;
};

struct RnnBaselineSpec {
  std::size_t in = 0, out = 0;
  Activation activation = Activation::Relu;
};

/// Final affine layer producing logits. May read a memory block on its input
/// when the last hidden layer carries one.
struct OutputSpec {
  std::size_t in = 0, vocab = 0;
  std::optional<MemoryConfig> memory;
};

using LayerSpec = std::variant<ProjectionSpec, DenseSpec, FsmnHiddenSpec, RnnBaselineSpec, OutputSpec>;

inline std::size_t layer_in(const LayerSpec& l) {
  return std::visit(
      [](const auto& s) -> std::size_t {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ProjectionSpec>) return 0;
        else return s.in;
      },
      l);
}

inline std::size_t layer_out(const LayerSpec& l) {
  return std::visit(
      [](const auto& s) -> std::size_t {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ProjectionSpec>) return s.out();
        else if constexpr (std::is_same_v<S, OutputSpec>) return s.vocab;
        else return s.out;
      },
      l);
}

inline const MemoryConfig* layer_memory(const LayerSpec& l) {
  if (auto* f = std::get_if<FsmnHiddenSpec>(&l)) return &f->memory;
  if (auto* o = std::get_if<OutputSpec>(&l)) return o->memory ? &*o->memory : nullptr;
  return nullptr;
}

struct ModelSpec {
  std::vector<LayerSpec> layers;
  /// Width of raw feature input when the model has no projection layer.
  std::size_t feature_dim = 0;

  bool token_input() const {
    return !layers.empty() && std::holds_alternative<ProjectionSpec>(layers.front());
  }
  const ProjectionSpec* projection() const {
    return token_input() ? &std::get<ProjectionSpec>(layers.front()) : nullptr;
  }
  std::size_t output_dim() const { return layers.empty() ? 0 : layer_out(layers.back()); }

  void validate() const {
    if (layers.empty()) throw InputError("model has no layers");
    if (!std::holds_alternative<OutputSpec>(layers.back()))
      throw InputError("the last layer must be the output layer");
    std::size_t width = feature_dim;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (std::holds_alternative<ProjectionSpec>(l)) {
        if (i != 0) throw InputError("projection layer must come first");
        const auto& p = std::get<ProjectionSpec>(l);
        if (p.vocab == 0 || p.window == 0 || p.dim == 0)
          throw InputError("projection layer needs vocab, window and dim > 0");
        width = p.out();
        continue;
      }
      if (std::holds_alternative<OutputSpec>(l) && i + 1 != layers.size())
        throw InputError("output layer must be last");
      if (layer_in(l) != width)
        throw ShapeError("layer " + std::to_string(i) + " expects " + std::to_string(layer_in(l)) +
                         " inputs but receives " + std::to_string(width));
      if (layer_out(l) == 0) throw InputError("layer " + std::to_string(i) + " has no units");
      if (const auto* m = layer_memory(l)) {
        m->validate();
        if (m->hidden_dim != layer_in(l))
          throw ShapeError("memory block of layer " + std::to_string(i) + " has hidden_dim " +
                           std::to_string(m->hidden_dim) + " but the layer input is " +
                           std::to_string(layer_in(l)));
      }
      width = layer_out(l);
    }
    if (width == 0) throw InputError("model input width is zero");
  }
};

// ---------------------------------------------------------------------------
// Architecture strings
//
//   [W*P]-H1(M)-H2-...-OUT      token input: W context words, P-dim projection
//   D-H1(M)-...-OUT             D-dimensional feature input
//
// Hidden segments are a unit count, optionally repeated ("3*600") and marked:
//   (M)            memory block of the default kind and orders
//   (S..) (V..) (A..)   scalar / vector / attention memory, e.g. (V20,0), (A4,2:16)
//                  with lookback, lookahead and attention width after ':'
//   (R)            recurrent baseline layer
// The output segment is a count, a count with a k suffix (80k = 80000), or V
// for the vocabulary size. A memory mark puts the block on that layer's
// output, read by the following layer.

struct ArchDefaults {
  std::size_t vocab = 0;
  MemoryKind memory_kind = MemoryKind::Vector;
  std::size_t lookback = 20;
  std::size_t lookahead = 0;
  std::size_t attention_dim = 16;
  Activation hidden_activation = Activation::Relu;
  Activation attention_activation = Activation::Relu;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline std::optional<std::size_t> parse_count(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

[[noreturn]] inline void arch_error(std::string_view segment, std::string_view why) {
  throw InputError("architecture segment '" + std::string(segment) + "': " + std::string(why));
}

struct HiddenMark {
  enum Kind { None, Memory, Recurrent } kind = None;
  MemoryConfig memory;
};

inline HiddenMark parse_mark(std::string_view seg, std::string_view mark, const ArchDefaults& d) {
  HiddenMark m;
  if (mark.empty()) return m;
  if (mark == "R") {
    m.kind = HiddenMark::Recurrent;
    return m;
  }
  m.kind = HiddenMark::Memory;
  m.memory.lookback = d.lookback;
  m.memory.lookahead = d.lookahead;
  m.memory.attention_dim = d.attention_dim;
  m.memory.attention_activation = d.attention_activation;
  switch (mark.front()) {
    case 'M': m.memory.kind = d.memory_kind; break;
    case 'S': m.memory.kind = MemoryKind::Scalar; break;
    case 'V': m.memory.kind = MemoryKind::Vector; break;
    case 'A': m.memory.kind = MemoryKind::Attention; break;
    default: arch_error(seg, "unknown layer mark '" + std::string(mark) + "'");
  }
  auto rest = mark.substr(1);
  if (rest.empty()) return m;
  if (auto colon = rest.find(':'); colon != std::string_view::npos) {
    auto att = parse_count(rest.substr(colon + 1));
    if (!att) arch_error(seg, "bad attention width");
    m.memory.attention_dim = *att;
    rest = rest.substr(0, colon);
  }
  auto comma = rest.find(',');
  auto n1 = parse_count(rest.substr(0, comma));
  if (!n1) arch_error(seg, "bad lookback order");
  m.memory.lookback = *n1;
  if (comma != std::string_view::npos) {
    auto n2 = parse_count(rest.substr(comma + 1));
    if (!n2) arch_error(seg, "bad lookahead order");
    m.memory.lookahead = *n2;
  }
  return m;
}

inline std::string format_mark(const MemoryConfig& m) {
  std::string s = "(";
  s += m.kind == MemoryKind::Scalar ? 'S' : m.kind == MemoryKind::Vector ? 'V' : 'A';
  s += std::to_string(m.lookback) + "," + std::to_string(m.lookahead);
  if (m.kind == MemoryKind::Attention) s += ":" + std::to_string(m.attention_dim);
  return s + ")";
}

}  // namespace detail

inline ModelSpec parse_architecture(std::string_view arch, const ArchDefaults& d = {}) {
  std::vector<std::string_view> segs;
  for (std::size_t start = 0;;) {
    auto dash = arch.find('-', start);
    segs.push_back(detail::trim(arch.substr(start, dash == std::string_view::npos ? dash : dash - start)));
    if (dash == std::string_view::npos) break;
    start = dash + 1;
  }
  if (segs.size() < 2) detail::arch_error(arch, "need an input and an output segment");

  ModelSpec spec;
  std::size_t width = 0;
  const auto input = segs.front();
  if (!input.empty() && input.front() == '[') {
    if (input.back() != ']') detail::arch_error(input, "missing ']'");
    auto inner = input.substr(1, input.size() - 2);
    auto star = inner.find('*');
    if (star == std::string_view::npos) detail::arch_error(input, "expected [window*dim]");
    auto window = detail::parse_count(inner.substr(0, star));
    auto dim = detail::parse_count(inner.substr(star + 1));
    if (!window || !dim || *window == 0 || *dim == 0) detail::arch_error(input, "bad window or dim");
    if (d.vocab == 0) detail::arch_error(input, "token input needs a vocabulary size");
    spec.layers.push_back(ProjectionSpec{d.vocab, *window, *dim});
    width = *window * *dim;
  } else {
    auto dim = detail::parse_count(input);
    if (!dim || *dim == 0) detail::arch_error(input, "expected [window*dim] or a feature width");
    spec.feature_dim = *dim;
    width = *dim;
  }

  std::optional<MemoryConfig> pending;  // memory on the previous layer's output
  for (std::size_t s = 1; s + 1 < segs.size(); ++s) {
    auto seg = segs[s];
    std::string_view body = seg, mark;
    if (auto open = seg.find('('); open != std::string_view::npos) {
      if (seg.back() != ')') detail::arch_error(seg, "missing ')'");
      body = seg.substr(0, open);
      mark = seg.substr(open + 1, seg.size() - open - 2);
    }
    std::size_t repeat = 1;
    if (auto star = body.find('*'); star != std::string_view::npos) {
      auto r = detail::parse_count(body.substr(0, star));
      if (!r || *r == 0) detail::arch_error(seg, "bad repeat count");
      repeat = *r;
      body = body.substr(star + 1);
    }
    auto units = detail::parse_count(body);
    if (!units || *units == 0) detail::arch_error(seg, "bad unit count");
    const auto hm = detail::parse_mark(seg, mark, d);
    for (std::size_t r = 0; r < repeat; ++r) {
      if (hm.kind == detail::HiddenMark::Recurrent) {
        if (pending) detail::arch_error(seg, "recurrent layer cannot read a memory block");
        spec.layers.push_back(RnnBaselineSpec{width, *units, d.hidden_activation});
      } else if (pending) {
        spec.layers.push_back(FsmnHiddenSpec{width, *units, d.hidden_activation, *pending});
        pending.reset();
      } else {
        spec.layers.push_back(DenseSpec{width, *units, d.hidden_activation});
      }
      width = *units;
      if (hm.kind == detail::HiddenMark::Memory) {
        pending = hm.memory;
        pending->hidden_dim = width;
      }
    }
  }

  auto out = segs.back();
  std::size_t vocab = 0;
  if (out == "V") {
    if (d.vocab == 0) detail::arch_error(out, "vocabulary size unknown");
    vocab = d.vocab;
  } else if (!out.empty() && (out.back() == 'k' || out.back() == 'K')) {
    auto n = detail::parse_count(out.substr(0, out.size() - 1));
    if (!n) detail::arch_error(out, "bad output size");
    vocab = *n * 1000;
  } else {
    auto n = detail::parse_count(out);
    if (!n) detail::arch_error(out, "bad output size");
    vocab = *n;
  }
  if (vocab == 0) detail::arch_error(out, "output size must be positive");
  spec.layers.push_back(OutputSpec{width, vocab, pending});
  spec.validate();
  return spec;
}

/// Canonical architecture string with every memory block spelled out.
inline std::string format_architecture(const ModelSpec& spec) {
  std::string s;
  if (const auto* p = spec.projection()) {
    s = "[" + std::to_string(p->window) + "*" + std::to_string(p->dim) + "]";
  } else {
    s = std::to_string(spec.feature_dim);
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (std::holds_alternative<ProjectionSpec>(l)) continue;
    s += "-" + std::to_string(layer_out(l));
    if (std::holds_alternative<RnnBaselineSpec>(l)) s += "(R)";
    if (i + 1 < spec.layers.size())
      if (const auto* m = layer_memory(spec.layers[i + 1])) s += detail::format_mark(*m);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Parameters

enum class TensorRole { Embedding, Weight, Bias, Memory };

template <typename T>
struct LayerParams {
  Matrix<T> embedding;  // projection: (vocab+1) x dim
  Matrix<T> W;          // out x in
  Matrix<T> W_mem;      // out x in, reads the memory encoding
  Matrix<T> W_rec;      // out x out, recurrent baseline only
  Matrix<T> b;          // out x 1
  MemoryParams<T> memory;
};

template <typename T>
struct ModelParams {
  std::vector<LayerParams<T>> layers;

  /// Visits every tensor as fn(name, tensor, role) in a fixed order.
  template <typename Fn>
  void for_each(const ModelSpec& spec, Fn&& fn) {
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      auto& lp = layers.at(i);
      const std::string prefix = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ProjectionSpec>) {
              fn(prefix + "embedding", lp.embedding, TensorRole::Embedding);
            } else {
              fn(prefix + "W", lp.W, TensorRole::Weight);
              if constexpr (std::is_same_v<S, RnnBaselineSpec>) fn(prefix + "W_rec", lp.W_rec, TensorRole::Weight);
              if (const auto* m = layer_memory(spec.layers[i])) {
                fn(prefix + "W_mem", lp.W_mem, TensorRole::Weight);
                lp.memory.for_each(*m, [&](const char* name, Matrix<T>& t) {
                  const bool is_tap = m->kind != MemoryKind::Attention;
                  const bool is_bias = std::string_view(name) == "m";
                  fn(prefix + "memory." + name, t,
                     is_tap ? TensorRole::Memory : is_bias ? TensorRole::Bias : TensorRole::Weight);
                });
              }
              fn(prefix + "b", lp.b, TensorRole::Bias);
            }
          },
          spec.layers[i]);
    }
  }
  template <typename Fn>
  void for_each(const ModelSpec& spec, Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        spec, [&fn](const std::string& n, Matrix<T>& t, TensorRole r) { fn(n, std::as_const(t), r); });
  }

  std::size_t parameter_count(const ModelSpec& spec) const {
    std::size_t n = 0;
    for_each(spec, [&n](const std::string&, const Matrix<T>& t, TensorRole) { n += t.size(); });
    return n;
  }

  /// Zero tensors shaped like `spec` (also the gradient container).
  static ModelParams zeros(const ModelSpec& spec) {
    ModelParams p;
    for (const auto& l : spec.layers) {
      LayerParams<T> lp;
      std::visit(
          [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, ProjectionSpec>) {
              lp.embedding = Matrix<T>(s.vocab + 1, s.dim);
            } else {
              const std::size_t out = layer_out(l), in = layer_in(l);
              lp.W = Matrix<T>(out, in);
              lp.b = Matrix<T>(out, 1);
              if constexpr (std::is_same_v<S, RnnBaselineSpec>) lp.W_rec = Matrix<T>(out, out);
              if (const auto* m = layer_memory(l)) {
                lp.W_mem = Matrix<T>(out, in);
                lp.memory = MemoryParams<T>::zeros(*m);
              }
            }
          },
          l);
      p.layers.push_back(std::move(lp));
    }
    return p;
  }
};

struct InitOptions {
  std::uint64_t seed = 1;
  /// Uniform perturbation added to the identity memory taps.
  double tap_perturbation = 0.0;
};

/// Weights and embeddings uniform in +-sqrt(6 / (fan_in + fan_out)), biases
/// zero, memory taps start as the identity filter.
template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, const InitOptions& opt = {}) {
  spec.validate();
  auto p = ModelParams<T>::zeros(spec);
  Rng rng(opt.seed);
  auto glorot = [&rng](Matrix<T>& m) {
    const double r = std::sqrt(6.0 / double(m.rows() + m.cols()));
    fill_uniform(m, rng, -r, r);
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    auto& lp = p.layers[i];
    if (!lp.embedding.empty()) glorot(lp.embedding);
    if (!lp.W.empty()) glorot(lp.W);
    if (!lp.W_mem.empty()) glorot(lp.W_mem);
    if (!lp.W_rec.empty()) glorot(lp.W_rec);
    if (const auto* m = layer_memory(spec.layers[i])) lp.memory = init_memory<T>(*m, rng, opt.tap_perturbation);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Layer kernels

/// Y = f(W H + W~ H~ + b), column by column. Pass an empty W~ and H~ for a
/// layer without memory.
template <typename T>
Matrix<T> fsmn_layer_forward(const Matrix<T>& h, const Matrix<T>& h_mem, const Matrix<T>& w,
                             const Matrix<T>& w_mem, const Matrix<T>& b, Activation f) {
  Matrix<T> z = matmul(w, h);
  if (!w_mem.empty()) {
    require_same_shape(h, h_mem, "fsmn_layer_forward");
    axpy(z, T(1), matmul(w_mem, h_mem));
  }
  add_column_broadcast(z, b);
  return activate(f, z);
}

namespace detail {

// z[:, t] += W_rec * h_prev for one column.
template <typename T>
void add_recurrent(Matrix<T>& z, std::size_t t, const Matrix<T>& w_rec, const Matrix<T>& h,
                   std::size_t prev) {
  const std::size_t n = w_rec.rows();
  for (std::size_t r = 0; r < n; ++r) {
    T acc = 0;
    const T* wr = w_rec.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) acc += wr[c] * h(c, prev);
    z(r, t) += acc;
  }
}

}  // namespace detail

template <typename T>
struct RnnForward {
  Matrix<T> z;  // pre-activations
  Matrix<T> h;
};

/// h_t = f(W x_t + W~ h_{t-1} + b), h_0 = 0 at each sequence start.
template <typename T>
RnnForward<T> rnn_layer_forward_trace(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& w_rec,
                                      const Matrix<T>& b, Activation f,
                                      std::span<const std::size_t> lengths = {}) {
  if (w_rec.rows() != w.rows() || w_rec.cols() != w.rows())
    throw ShapeError("recurrent weight " + w_rec.shape_string() + " does not match W " + w.shape_string());
  const auto offsets = sequence_offsets(lengths, x.cols());
  RnnForward<T> r;
  r.z = matmul(w, x);
  add_column_broadcast(r.z, b);
  r.h = Matrix<T>(w.rows(), x.cols());
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t t = offsets[s]; t < offsets[s + 1]; ++t) {
      if (t > offsets[s]) detail::add_recurrent(r.z, t, w_rec, r.h, t - 1);
      for (std::size_t d = 0; d < r.h.rows(); ++d) r.h(d, t) = activate(f, r.z(d, t));
    }
  }
  return r;
}

template <typename T>
Matrix<T> rnn_layer_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& w_rec,
                            const Matrix<T>& b, Activation f,
                            std::span<const std::size_t> lengths = {}) {
  return rnn_layer_forward_trace(x, w, w_rec, b, f, lengths).h;
}

// ---------------------------------------------------------------------------
// Whole-model forward / backward

struct ForwardOptions {
  MemoryPath memory_path = MemoryPath::Walk;
};

template <typename T>
struct LayerTrace {
  Matrix<T> input;
  Matrix<T> memory_out;
  Matrix<T> pre;
  Matrix<T> out;
};

template <typename T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
  std::vector<std::size_t> lengths;
  std::vector<std::uint32_t> context;  // token models only
  std::size_t window = 0;
  const ModelParams<T>* params = nullptr;
  ForwardOptions options;
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;
  ForwardTrace<T> trace;
};

namespace detail {

template <typename T>
Matrix<T> project(const ProjectionSpec& p, const Matrix<T>& table, std::span<const std::uint32_t> context,
                  std::size_t frames) {
  Matrix<T> out(p.out(), frames);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t w = 0; w < p.window; ++w) {
      const auto id = context[t * p.window + w];
      if (id > p.vocab) throw InputError("context id " + std::to_string(id) + " outside the projection table");
      const auto row = table.row(id);
      for (std::size_t k = 0; k < p.dim; ++k) out(w * p.dim + k, t) = row[k];
    }
  }
  return out;
}

template <typename T>
ForwardResult<T> forward_layers(const ModelSpec& spec, const ModelParams<T>& params, Matrix<T> x,
                                std::vector<std::size_t> lengths, const ForwardOptions& opt) {
  ForwardResult<T> res;
  res.trace.params = &params;
  res.trace.options = opt;
  if (lengths.empty()) lengths.push_back(x.cols());
  sequence_offsets(lengths, x.cols());
  if (params.layers.size() != spec.layers.size())
    throw ShapeError("parameters have " + std::to_string(params.layers.size()) + " layers, model has " +
                     std::to_string(spec.layers.size()));
  const std::size_t first = spec.token_input() ? 1 : 0;
  if (first == 1) res.trace.layers.push_back(LayerTrace<T>{{}, {}, {}, x});
  for (std::size_t i = first; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const auto& lp = params.layers[i];
    LayerTrace<T> lt;
    if (x.rows() != layer_in(l))
      throw ShapeError("layer " + std::to_string(i) + " expects " + std::to_string(layer_in(l)) +
                       " input rows, got " + std::to_string(x.rows()));
    if (const auto* rnn = std::get_if<RnnBaselineSpec>(&l)) {
      auto rf = rnn_layer_forward_trace(x, lp.W, lp.W_rec, lp.b, rnn->activation, lengths);
      lt.pre = std::move(rf.z);
      lt.out = std::move(rf.h);
    } else {
      const MemoryConfig* mem = layer_memory(l);
      if (mem) lt.memory_out = memory_forward(x, *mem, lp.memory, std::span<const std::size_t>(lengths), opt.memory_path);
      Activation f = Activation::Linear;
      if (const auto* d = std::get_if<DenseSpec>(&l)) f = d->activation;
      if (const auto* h = std::get_if<FsmnHiddenSpec>(&l)) f = h->activation;
      lt.pre = matmul(lp.W, x);
      if (mem) axpy(lt.pre, T(1), matmul(lp.W_mem, lt.memory_out));
      add_column_broadcast(lt.pre, lp.b);
      lt.out = f == Activation::Linear ? lt.pre : activate(f, lt.pre);
    }
    lt.input = std::move(x);
    x = lt.out;
    res.trace.layers.push_back(std::move(lt));
  }
  res.logits = std::move(x);
  res.trace.lengths = std::move(lengths);
  return res;
}

}  // namespace detail

/// Logits (output_dim x frames) for a packed token batch.
template <typename T>
ForwardResult<T> forward(const ModelSpec& spec, const ModelParams<T>& params, const PackedBatch& batch,
                         const ForwardOptions& opt = {}) {
  const auto* p = spec.projection();
  if (!p) throw ShapeError("model takes feature input, got a token batch");
  if (batch.window != p->window)
    throw ShapeError("batch context window " + std::to_string(batch.window) + " but the model uses " +
                     std::to_string(p->window));
  const std::size_t frames = batch.frames();
  if (batch.context.size() != frames * batch.window)
    throw ShapeError("batch context holds " + std::to_string(batch.context.size()) + " ids for " +
                     std::to_string(frames) + " frames");
  Matrix<T> x = detail::project(*p, params.layers.at(0).embedding, batch.context, frames);
  auto res = detail::forward_layers(spec, params, std::move(x), batch.lengths, opt);
  res.trace.context = batch.context;
  res.trace.window = batch.window;
  return res;
}

/// Logits for real-valued frame features.
template <typename T>
ForwardResult<T> forward(const ModelSpec& spec, const ModelParams<T>& params, const FeatureBatch<T>& batch,
                         const ForwardOptions& opt = {}) {
  if (spec.token_input()) throw ShapeError("model takes token input, got a feature batch");
  if (batch.features.rows() != spec.feature_dim)
    throw ShapeError("features have " + std::to_string(batch.features.rows()) + " rows, model expects " +
                     std::to_string(spec.feature_dim));
  return detail::forward_layers(spec, params, batch.features, batch.lengths, opt);
}

/// Gradients of the loss w.r.t. every parameter, given dL/dlogits. Where an
/// activation feeds both the next layer and a memory block, the two error
/// signals are summed.
template <typename T>
ModelParams<T> backward(const ModelSpec& spec, const ModelParams<T>& params, const ForwardTrace<T>& trace,
                        const Matrix<T>& loss_grad) {
  if (trace.params != &params || trace.layers.size() != spec.layers.size())
    throw UsageError("forward trace does not belong to this model");
  const auto& top = trace.layers.back().out;
  if (!loss_grad.same_shape(top))
    throw UsageError("loss gradient " + loss_grad.shape_string() + " does not match logits " + top.shape_string());
  auto grads = ModelParams<T>::zeros(spec);
  const std::span<const std::size_t> lengths(trace.lengths);
  Matrix<T> e = loss_grad;  // error w.r.t. the current layer's output
  for (std::size_t idx = spec.layers.size(); idx-- > 0;) {
    const auto& l = spec.layers[idx];
    const auto& lp = params.layers[idx];
    const auto& lt = trace.layers[idx];
    auto& g = grads.layers[idx];
    if (const auto* proj = std::get_if<ProjectionSpec>(&l)) {
      for (std::size_t t = 0; t < e.cols(); ++t)
        for (std::size_t w = 0; w < proj->window; ++w) {
          auto row = g.embedding.row(trace.context[t * proj->window + w]);
          for (std::size_t k = 0; k < proj->dim; ++k) row[k] += e(w * proj->dim + k, t);
        }
      continue;
    }
    if (const auto* rnn = std::get_if<RnnBaselineSpec>(&l)) {
      const auto offsets = sequence_offsets(lengths, e.cols());
      Matrix<T> ez(lt.pre.rows(), lt.pre.cols());
      const std::size_t n = lp.W_rec.rows();
      std::vector<T> carry(n);
      for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        std::fill(carry.begin(), carry.end(), T(0));  // W_rec^T e_z(t+1)
        for (std::size_t t = offsets[s + 1]; t-- > offsets[s];) {
          for (std::size_t d = 0; d < n; ++d)
            ez(d, t) = (e(d, t) + carry[d]) * activate_derivative(rnn->activation, lt.pre(d, t), lt.out(d, t));
          if (t == offsets[s]) break;
          std::fill(carry.begin(), carry.end(), T(0));
          for (std::size_t r = 0; r < n; ++r) {
            const T er = ez(r, t);
            const T* wr = lp.W_rec.data() + r * n;
            for (std::size_t c = 0; c < n; ++c) {
              carry[c] += wr[c] * er;
              g.W_rec(r, c) += er * lt.out(c, t - 1);
            }
          }
        }
      }
      g.W = matmul_nt(ez, lt.input);
      g.b = row_sums(ez);
      e = matmul_tn(lp.W, ez);
      continue;
    }
    Activation f = Activation::Linear;
    if (const auto* d = std::get_if<DenseSpec>(&l)) f = d->activation;
    if (const auto* h = std::get_if<FsmnHiddenSpec>(&l)) f = h->activation;
    const Matrix<T> ez = f == Activation::Linear ? e : activate_backward(f, lt.pre, lt.out, e);
    g.W = matmul_nt(ez, lt.input);
    g.b = row_sums(ez);
    Matrix<T> e_in = matmul_tn(lp.W, ez);
    if (const auto* mem = layer_memory(l)) {
      g.W_mem = matmul_nt(ez, lt.memory_out);
      const Matrix<T> e_mem = matmul_tn(lp.W_mem, ez);
      auto mg = memory_backward(lt.input, e_mem, *mem, lp.memory, lengths, trace.options.memory_path);
      g.memory = std::move(mg.grad);
      axpy(e_in, T(1), mg.e_h);
    }
    e = std::move(e_in);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Receptive field

struct ReceptiveField {
  std::size_t past = 0;    // frames before t reachable through memory blocks
  std::size_t future = 0;  // frames after t reachable through memory blocks
  bool unbounded_past = false;  // a recurrent layer sees the whole history
  std::size_t context_window = 0;  // extra words of input context (token models)
};

/// Memory spans compound across stacked blocks: past and future are sums over
/// all memory layers. A recurrent layer makes the past unbounded.
inline ReceptiveField receptive_field(const ModelSpec& spec) {
  ReceptiveField rf;
  if (const auto* p = spec.projection()) rf.context_window = p->window;
  for (const auto& l : spec.layers) {
    if (std::holds_alternative<RnnBaselineSpec>(l)) rf.unbounded_past = true;
    if (const auto* m = layer_memory(l)) {
      rf.past += m->past_span();
      rf.future += m->future_span();
    }
  }
  return rf;
}

}  // namespace fsmn
