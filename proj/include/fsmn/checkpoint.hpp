#pragma once

// Checkpoint container.
//
//   FSMN-CHECKPOINT <version>\n
//   precision f32|f64\n
//   arch <canonical architecture>\n
//   activation <hidden activation>\n
//   attention_activation <activation>\n
//   eos 0|1\n
//   schedule <epoch> <lr> <best> <last> <phase> <halving_done> <stop>\n   (reals as hex floats)
//   vocab <n>\n  followed by n token lines
//   tensors <count>\n
//   end\n
// then <count> tensor records, all integers little-endian:
//   u32 name length, name bytes, u64 rows, u64 cols, u32 element bytes, data
// and a trailing u64 FNV-1a hash of every byte of the tensor records.
// Momentum buffers are stored as tensors named "velocity/<parameter>".

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fsmn/errors.hpp"
#include "fsmn/lm_data.hpp"
#include "fsmn/network.hpp"
#include "fsmn/trainer.hpp"

namespace fsmn {

inline constexpr int kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "FSMN-CHECKPOINT";

template <typename T>
constexpr std::string_view precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

/// Everything needed to rebuild a model and resume training.
template <typename T>
struct Checkpoint {
  std::string arch;  // canonical
  ArchDefaults defaults;
  TextOptions text;
  Vocab vocab;
  ModelSpec spec;
  ModelParams<T> params;
  TrainState<T> state;
};

namespace detail {

class Fnv1a {
 public:
  void update(const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= static_cast<unsigned char>(p[i]);
      h_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_real(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("bad real '" + s + "' in checkpoint header");
  return v;
}

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Matrix<T>& m) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint64_t>(out, m.rows());
  put_le<std::uint64_t>(out, m.cols());
  put_le<std::uint32_t>(out, sizeof(T));
  for (T v : m.values()) put_le<Bits>(out, std::bit_cast<Bits>(v));
}

struct HeaderFields {
  int version = 0;
  std::string precision;
  std::map<std::string, std::string> kv;
  std::vector<std::string> vocab;
  std::size_t tensor_count = 0;
  std::size_t body_offset = 0;
};

inline HeaderFields read_header(const std::string& bytes) {
  HeaderFields h;
  std::size_t pos = 0;
  auto line = [&]() {
    auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("checkpoint header truncated");
    std::string l = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  {
    std::istringstream first(line());
    std::string magic;
    first >> magic >> h.version;
    if (magic != kCheckpointMagic) throw FormatError("not a checkpoint file");
    if (h.version != kCheckpointVersion)
      throw FormatError("checkpoint version " + std::to_string(h.version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
  }
  for (;;) {
    std::string l = line();
    if (l == "end") break;
    auto sp = l.find(' ');
    std::string key = l.substr(0, sp), value = sp == std::string::npos ? "" : l.substr(sp + 1);
    if (key == "vocab") {
      const auto n = std::stoull(value);
      for (std::size_t i = 0; i < n; ++i) h.vocab.push_back(line());
    } else if (key == "tensors") {
      h.tensor_count = std::stoull(value);
    } else {
      h.kv[key] = value;
    }
  }
  h.precision = h.kv["precision"];
  h.body_offset = pos;
  return h;
}

}  // namespace detail

/// Serialized checkpoint bytes.
template <typename T>
std::string serialize_checkpoint(const Checkpoint<T>& ck) {
  std::ostringstream hdr;
  hdr << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  hdr << "precision " << precision_name<T>() << '\n';
  hdr << "arch " << ck.arch << '\n';
  hdr << "activation " << to_string(ck.defaults.hidden_activation) << '\n';
  hdr << "attention_activation " << to_string(ck.defaults.attention_activation) << '\n';
  hdr << "eos " << (ck.text.add_eos ? 1 : 0) << '\n';
  const auto& s = ck.state.schedule;
  hdr << "schedule " << s.epoch << ' ' << detail::hexfloat(s.lr) << ' ' << detail::hexfloat(s.best_valid_ppl) << ' '
      << detail::hexfloat(s.last_valid_ppl) << ' ' << (s.phase == Phase::Plateau ? "plateau" : "halving") << ' '
      << s.halving_done << ' ' << (s.stop ? 1 : 0) << '\n';
  hdr << "vocab " << ck.vocab.size() << '\n';
  for (const auto& t : ck.vocab.tokens()) hdr << t << '\n';

  std::string body;
  std::size_t count = 0;
  ck.params.for_each(ck.spec, [&](const std::string& n, const Matrix<T>& t, TensorRole) {
    detail::put_tensor(body, n, t);
    ++count;
  });
  if (!ck.state.velocity.layers.empty()) {
    ck.state.velocity.for_each(ck.spec, [&](const std::string& n, const Matrix<T>& t, TensorRole) {
      detail::put_tensor(body, "velocity/" + n, t);
      ++count;
    });
  }
  hdr << "tensors " << count << '\n' << "end\n";
  detail::Fnv1a fnv;
  fnv.update(body.data(), body.size());
  std::string out = hdr.str() + body;
  detail::put_le<std::uint64_t>(out, fnv.value());
  return out;
}

/// Precision tag ("f32" / "f64") of serialized checkpoint bytes.
inline std::string checkpoint_precision(const std::string& bytes) { return detail::read_header(bytes).precision; }

template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::string& bytes) {
  const auto h = detail::read_header(bytes);
  if (h.precision != precision_name<T>())
    throw FormatError("checkpoint precision " + h.precision + " does not match requested " +
                      std::string(precision_name<T>()));
  Checkpoint<T> ck;
  ck.arch = h.kv.count("arch") ? h.kv.at("arch") : throw FormatError("checkpoint lacks an architecture");
  try {
    ck.defaults.hidden_activation = parse_activation(h.kv.count("activation") ? h.kv.at("activation") : "relu");
    ck.defaults.attention_activation =
        parse_activation(h.kv.count("attention_activation") ? h.kv.at("attention_activation") : "relu");
    ck.text.add_eos = h.kv.count("eos") && h.kv.at("eos") == "1";
    ck.vocab = Vocab(h.vocab);
    ck.defaults.vocab = ck.vocab.size();
    ck.spec = parse_architecture(ck.arch, ck.defaults);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (h.kv.count("schedule")) {
    std::istringstream ss(h.kv.at("schedule"));
    std::string lr, best, last, phase;
    auto& s = ck.state.schedule;
    int stop = 0;
    ss >> s.epoch >> lr >> best >> last >> phase >> s.halving_done >> stop;
    if (!ss) throw FormatError("malformed schedule line in checkpoint");
    s.lr = detail::parse_real(lr);
    s.best_valid_ppl = detail::parse_real(best);
    s.last_valid_ppl = detail::parse_real(last);
    s.phase = phase == "halving" ? Phase::Halving : Phase::Plateau;
    s.stop = stop != 0;
  }

  // Verify the hash over the whole body before decoding any tensor.
  if (bytes.size() < h.body_offset + 8) throw FormatError("checkpoint truncated");
  const std::size_t body_end = bytes.size() - 8;
  detail::Fnv1a fnv;
  fnv.update(bytes.data() + h.body_offset, body_end - h.body_offset);
  std::size_t tail = body_end;
  if (detail::get_le<std::uint64_t>(bytes, tail) != fnv.value()) throw FormatError("checkpoint checksum mismatch");

  std::map<std::string, Matrix<T>> tensors;
  std::size_t pos = h.body_offset;
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < h.tensor_count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > body_end) throw FormatError("checkpoint truncated");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto rows = detail::get_le<std::uint64_t>(bytes, pos);
    const auto cols = detail::get_le<std::uint64_t>(bytes, pos);
    const auto elem = detail::get_le<std::uint32_t>(bytes, pos);
    if (elem != sizeof(T)) throw FormatError("tensor " + name + " has element size " + std::to_string(elem));
    if (rows * cols * sizeof(T) > body_end - pos) throw FormatError("tensor " + name + " runs past the end of the file");
    Matrix<T> m(rows, cols);
    for (auto& v : m.values()) v = std::bit_cast<T>(detail::get_le<Bits>(bytes, pos));
    tensors.emplace(std::move(name), std::move(m));
  }
  if (pos != body_end) throw FormatError("trailing bytes after the last tensor");

  auto fill = [&](ModelParams<T>& target, const std::string& prefix) {
    target = ModelParams<T>::zeros(ck.spec);
    target.for_each(ck.spec, [&](const std::string& n, Matrix<T>& t, TensorRole) {
      auto it = tensors.find(prefix + n);
      if (it == tensors.end()) throw FormatError("checkpoint lacks tensor " + prefix + n);
      if (!it->second.same_shape(t))
        throw FormatError("tensor " + prefix + n + " is " + it->second.shape_string() + ", architecture expects " +
                          t.shape_string());
      t = std::move(it->second);
      tensors.erase(it);
    });
  };
  fill(ck.params, "");
  if (!tensors.empty()) fill(ck.state.velocity, "velocity/");
  if (!tensors.empty()) throw FormatError("unexpected tensor " + tensors.begin()->first + " in checkpoint");
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw InputError("failed writing '" + path + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

}  // namespace fsmn
