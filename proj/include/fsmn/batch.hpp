#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "fsmn/matrix.hpp"

namespace fsmn {

/// K token sequences laid end to end along the time axis. Frame t carries
/// `window` context ids, stored frame-major at context[t * window + w]
/// (oldest word first), and one target id.
struct PackedBatch {
  std::vector<std::size_t> lengths;
  std::size_t window = 0;
  std::vector<std::uint32_t> context;
  std::vector<std::uint32_t> targets;

  std::size_t sequences() const { return lengths.size(); }
  std::size_t frames() const { return std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}); }
  std::span<const std::uint32_t> frame_context(std::size_t t) const {
    return {context.data() + t * window, window};
  }
};

/// Real-valued inputs, one D-dimensional column per frame.
template <typename T>
struct FeatureBatch {
  std::vector<std::size_t> lengths;
  Matrix<T> features;
  std::vector<std::uint32_t> targets;

  std::size_t frames() const { return features.cols(); }
};

}  // namespace fsmn
