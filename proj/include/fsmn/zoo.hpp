#pragma once

// Small reference models of every layer variant on synthetic feature input.
// Shared by the gradient-check command, the benchmarks and the test suites.

#include <cstdint>
#include <string>
#include <vector>

#include "fsmn/batch.hpp"
#include "fsmn/network.hpp"
#include "fsmn/random.hpp"

namespace fsmn {

struct ZooEntry {
  std::string name;
  std::string arch;
};

/// Two memory layers each (the recurrent baseline: two recurrent layers).
inline std::vector<ZooEntry> variant_zoo() {
  return {
      {"sfsmn-uni", "4-6(S3,0)-6(S2,0)-5"},
      {"sfsmn-bi", "4-6(S3,2)-6(S2,1)-5"},
      {"vfsmn-uni", "4-6(V3,0)-6(V2,0)-5"},
      {"vfsmn-bi", "4-6(V3,2)-6(V2,1)-5"},
      {"attention", "4-6(A2,1:4)-6(A2,2:3)-5"},
      {"rnn", "4-6(R)-6(R)-5"},
  };
}

/// Random features in [-1, 1) and random targets for packed sequences.
template <typename T>
FeatureBatch<T> random_feature_batch(std::size_t dim, std::vector<std::size_t> lengths, std::size_t classes,
                                     std::uint64_t seed) {
  FeatureBatch<T> b;
  b.lengths = std::move(lengths);
  std::size_t frames = 0;
  for (auto l : b.lengths) frames += l;
  Rng rng(seed);
  b.features = Matrix<T>(dim, frames);
  fill_uniform(b.features, rng, -1.0, 1.0);
  for (std::size_t t = 0; t < frames; ++t) b.targets.push_back(static_cast<std::uint32_t>(rng.below(classes)));
  return b;
}

/// Parameters with every tensor, memory taps and biases included, drawn
/// uniformly from [-scale, scale) so no gradient path is trivially zero.
template <typename T>
ModelParams<T> random_params(const ModelSpec& spec, std::uint64_t seed, double scale = 0.5) {
  auto p = ModelParams<T>::zeros(spec);
  Rng rng(seed);
  p.for_each(spec, [&](const std::string&, Matrix<T>& t, TensorRole) { fill_uniform(t, rng, -scale, scale); });
  return p;
}

}  // namespace fsmn
