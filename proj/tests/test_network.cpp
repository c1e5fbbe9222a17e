#include <gtest/gtest.h>

#include "fsmn/network.hpp"
#include "fsmn/trainer.hpp"
#include "fsmn/zoo.hpp"
#include "oracles.hpp"

using namespace fsmn;
using M = Matrix<double>;

namespace {

ModelSpec arch(const std::string& a, std::size_t vocab = 0) {
  ArchDefaults d;
  d.vocab = vocab;
  return parse_architecture(a, d);
}

std::string parse_error(const std::string& a) {
  try {
    arch(a, 50);
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// --- architecture strings -------------------------------------------------------

TEST(Architecture, TableNotation) {
  auto s = arch("[2*200]-600(M)-600-600-80k", 10);
  ASSERT_EQ(s.layers.size(), 5u);
  const auto& p = std::get<ProjectionSpec>(s.layers[0]);
  EXPECT_EQ(p.window, 2u);
  EXPECT_EQ(p.dim, 200u);
  EXPECT_EQ(layer_out(s.layers[0]), 400u);
  // The memory block of the marked layer is read by the layer above it.
  EXPECT_EQ(layer_memory(s.layers[1]), nullptr);
  ASSERT_NE(layer_memory(s.layers[2]), nullptr);
  EXPECT_EQ(layer_memory(s.layers[2])->lookback, 20u);
  EXPECT_EQ(layer_memory(s.layers[2])->hidden_dim, 600u);
  EXPECT_EQ(s.output_dim(), 80000u);
  EXPECT_EQ(format_architecture(s), "[2*200]-600(V20,0)-600-600-80000");
}

TEST(Architecture, VocabOutputAndRoundTrip) {
  auto s = arch("[1*16]-32(M)-32-V", 123);
  EXPECT_EQ(s.output_dim(), 123u);
  for (const char* a : {"4-6(S3,2)-6(S2,1)-5", "4-6(A2,1:4)-6(A2,2:3)-5", "4-6(R)-6(R)-5", "[3*8]-2*16(V5,1)-9"}) {
    auto spec = arch(a, 9);
    EXPECT_EQ(format_architecture(arch(format_architecture(spec), 9)), format_architecture(spec)) << a;
  }
  EXPECT_EQ(arch("4-2*6(R)-5").layers.size(), 3u);
}

TEST(Architecture, ErrorsNameTheSegment) {
  EXPECT_NE(parse_error("[2*x]-6-V").find("'[2*x]'"), std::string::npos);
  EXPECT_NE(parse_error("4-6(M-5").find("'6(M'"), std::string::npos);
  EXPECT_NE(parse_error("4-0-5").find("'0'"), std::string::npos);
  EXPECT_NE(parse_error("4-32(Q)-5").find("'32(Q)'"), std::string::npos);
  EXPECT_FALSE(parse_error("").empty());
  EXPECT_THROW(arch("[2*10]-6-V"), InputError);
}

TEST(Architecture, ReceptiveField) {
  auto one = receptive_field(arch("10-8(V50,50)-8-5"));
  EXPECT_EQ(one.past, 50u);
  EXPECT_EQ(one.future, 50u);
  auto two = receptive_field(arch("10-8(V20,10)-8(V20,10)-8-5"));
  EXPECT_EQ(two.past, 40u);
  EXPECT_EQ(two.future, 20u);
  auto none = receptive_field(arch("[2*4]-8-8-V", 7));
  EXPECT_EQ(none.past, 0u);
  EXPECT_EQ(none.future, 0u);
  EXPECT_EQ(none.context_window, 2u);
  EXPECT_TRUE(receptive_field(arch("4-6(R)-5")).unbounded_past);
}

// --- layer kernels -----------------------------------------------------------------

TEST(FsmnLayer, ZeroMemoryWeightIsDenseLayer) {
  auto h = oracle::random(4, 6, 1), hm = oracle::random(4, 6, 2), w = oracle::random(3, 4, 3), b = oracle::random(3, 1, 4);
  auto dense = fsmn_layer_forward(h, M(), w, M(), b, Activation::Tanh);
  EXPECT_EQ(fsmn_layer_forward(h, hm, w, M(3, 4), b, Activation::Tanh), dense);
  auto pass = fsmn_layer_forward(h, hm, M(4, 4), M::identity(4), M(4, 1), Activation::Linear);
  EXPECT_EQ(pass, hm);
}

TEST(FsmnLayer, MatchesFrameLoop) {
  auto h = oracle::random(4, 6, 5), hm = oracle::random(4, 6, 6);
  auto w = oracle::random(3, 4, 7), wm = oracle::random(3, 4, 8), b = oracle::random(3, 1, 9);
  auto out = fsmn_layer_forward(h, hm, w, wm, b, Activation::Tanh);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t r = 0; r < 3; ++r) {
      double z = b(r, 0);
      for (std::size_t c = 0; c < 4; ++c) z += w(r, c) * h(c, t) + wm(r, c) * hm(c, t);
      EXPECT_NEAR(out(r, t), std::tanh(z), 1e-12);
    }
  EXPECT_THROW(fsmn_layer_forward(h, hm, M(3, 5), wm, b, Activation::Tanh), ShapeError);
}

TEST(RnnLayer, ExamplesAndUnrolledOracle) {
  auto x = oracle::random(3, 5, 10), w = oracle::random(4, 3, 11), wr = oracle::random(4, 4, 12), b = oracle::random(4, 1, 13);
  auto norec = rnn_layer_forward(x, w, M(4, 4), b, Activation::Tanh);
  EXPECT_EQ(norec, fsmn_layer_forward(x, M(), w, M(), b, Activation::Tanh));
  auto first = rnn_layer_forward(slice_columns(x, 0, 1), w, wr, b, Activation::Tanh);
  EXPECT_EQ(first, fsmn_layer_forward(slice_columns(x, 0, 1), M(), w, M(), b, Activation::Tanh));

  auto out = rnn_layer_forward(x, w, wr, b, Activation::Tanh);
  std::vector<double> h(4, 0.0);
  for (std::size_t t = 0; t < 5; ++t) {
    std::vector<double> next(4);
    for (std::size_t r = 0; r < 4; ++r) {
      double z = b(r, 0);
      for (std::size_t c = 0; c < 3; ++c) z += w(r, c) * x(c, t);
      for (std::size_t c = 0; c < 4; ++c) z += wr(r, c) * h[c];
      next[r] = std::tanh(z);
      EXPECT_NEAR(out(r, t), next[r], 1e-12);
    }
    h = next;
  }
  // The state restarts at every sequence head.
  std::vector<std::size_t> lengths{2, 3};
  auto packed = rnn_layer_forward(x, w, wr, b, Activation::Tanh, std::span<const std::size_t>(lengths));
  EXPECT_EQ(slice_columns(packed, 2, 5), rnn_layer_forward(slice_columns(x, 2, 5), w, wr, b, Activation::Tanh));
}

// --- whole models ----------------------------------------------------------------------

TEST(Model, ZeroWeightsGiveZeroLogits) {
  auto spec = arch("[2*4]-6(V3,1)-6-7", 7);
  auto p = ModelParams<double>::zeros(spec);
  PackedBatch b{{3}, 2, {7, 7, 7, 0, 0, 1}, {0, 1, 2}};
  auto r = forward(spec, p, b);
  EXPECT_EQ(r.logits, M(7, 3));
}

TEST(Model, PackedForwardEqualsPerSequence) {
  for (const auto& z : variant_zoo()) {
    auto spec = arch(z.arch);
    auto p = random_params<double>(spec, 3);
    auto batch = random_feature_batch<double>(4, {6, 4, 5}, 5, 4);
    auto packed = forward(spec, p, batch).logits;
    ASSERT_TRUE(all_finite(packed));
    std::size_t o = 0;
    for (auto len : batch.lengths) {
      FeatureBatch<double> one{{len}, slice_columns(batch.features, o, o + len), {}};
      one.targets.assign(batch.targets.begin() + long(o), batch.targets.begin() + long(o + len));
      EXPECT_LE(max_abs_diff(forward(spec, p, one).logits, slice_columns(packed, o, o + len)), 1e-12) << z.name;
      o += len;
    }
  }
}

TEST(Model, ZeroMemoryWeightEqualsModelWithoutMemory) {
  auto with = arch("5-7(V4,2)-7(S2,1)-3");
  auto without = arch("5-7-7-3");
  auto p = init_params<double>(with, {3, 0.05});
  for (auto& l : p.layers) l.W_mem.fill(0);
  auto q = ModelParams<double>::zeros(without);
  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    q.layers[i].W = p.layers[i].W;
    q.layers[i].b = p.layers[i].b;
  }
  auto batch = random_feature_batch<double>(5, {6, 3}, 3, 9);
  EXPECT_LE(max_abs_diff(forward(with, p, batch).logits, forward(without, q, batch).logits), 1e-12);
}

TEST(Model, OutputInvariantOutsideReceptiveField) {
  for (const char* a : {"3-4(S3,2)-4(V2,1)-5", "3-4(V3,0)-4(S2,0)-5", "3-4(A3,1:2)-4-5"}) {
    auto spec = arch(a);
    auto rf = receptive_field(spec);
    auto p = random_params<double>(spec, 11);
    auto batch = random_feature_batch<double>(3, {20}, 5, 12);
    auto base = forward(spec, p, batch).logits;
    for (std::size_t tp = 0; tp < 20; ++tp) {
      auto pert = batch;
      for (std::size_t d = 0; d < 3; ++d) pert.features(d, tp) += 1.5;
      auto out = forward(spec, p, pert).logits;
      for (std::size_t t = 0; t < 20; ++t)
        if (tp + rf.past < t || tp > t + rf.future)
          for (std::size_t v = 0; v < 5; ++v) ASSERT_EQ(out(v, t), base(v, t)) << a << " t=" << t << " tp=" << tp;
    }
  }
}

TEST(Model, BackwardZeroGradientAndStaleTrace) {
  auto spec = arch("4-6(V3,2)-6(S2,1)-5");
  auto p = random_params<double>(spec, 13);
  auto batch = random_feature_batch<double>(4, {5, 3}, 5, 14);
  auto fwd = forward(spec, p, batch);
  auto g = backward(spec, p, fwd.trace, M(5, 8));
  g.for_each(spec, [](const std::string& n, const M& t, TensorRole) { EXPECT_EQ(max_abs(t), 0.0) << n; });
  auto other = p;
  EXPECT_THROW(backward(spec, other, fwd.trace, M(5, 8)), UsageError);
  EXPECT_THROW(backward(spec, p, fwd.trace, M(5, 7)), UsageError);
}

TEST(Model, GradientsMatchFiniteDifferencesForEveryVariant) {
  for (const auto& z : variant_zoo()) {
    auto spec = arch(z.arch);
    auto p = random_params<double>(spec, 15);
    auto batch = random_feature_batch<double>(4, {5, 3}, 5, 16);
    for (auto path : {MemoryPath::Walk, MemoryPath::Dense}) {
      GradCheckOptions o;
      o.path = path;
      auto rep = grad_check(spec, p, batch, o);
      for (const auto& t : rep.tensors) EXPECT_LE(t.max_rel_err, 1e-6) << z.name << " " << t.name;
    }
  }
}

TEST(Model, TokenModelGradients) {
  auto spec = arch("[2*3]-5(V3,1)-5-6", 6);
  auto p = random_params<double>(spec, 17);
  PackedBatch b{{4, 2}, 2, {6, 6, 6, 1, 1, 2, 2, 3, 6, 6, 6, 4}, {1, 2, 3, 0, 4, 5}};
  auto rep = grad_check(spec, p, b);
  EXPECT_LE(rep.max_rel_err(), 1e-6);
  EXPECT_EQ(rep.tensors.front().name, "layer0.embedding");
}

TEST(Model, InitIsDeterministicAndBounded) {
  auto spec = arch("[2*8]-16(V5,0)-16-20", 20);
  auto a = init_params<double>(spec, {4, 0.0});
  auto b = init_params<double>(spec, {4, 0.0});
  a.for_each(spec, [&](const std::string& n, const M& t, TensorRole role) {
    if (role == TensorRole::Bias) EXPECT_EQ(max_abs(t), 0.0) << n;
    if (role == TensorRole::Weight) EXPECT_LE(max_abs(t), std::sqrt(6.0 / double(t.rows() + t.cols()))) << n;
  });
  EXPECT_EQ(a.layers[1].W, b.layers[1].W);
  EXPECT_GT(a.parameter_count(spec), 0u);
}
