#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "encvit/bytes.hpp"
#include "encvit/rng.hpp"
#include "encvit/vit.hpp"

namespace encvit {
namespace {

VitConfig small_config() {
  VitConfig c;
  c.image = {3, 8, 8};
  c.patch = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.num_classes = 4;
  return c;
}

template <class T>
Tensor<T> random_images(const ImageGeometry& g, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Shape shape = g.shape();
  shape.insert(shape.begin(), n);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.uniform());
  return t;
}

// Weights larger than the default init so gradients are not vanishingly small.
template <class T>
VitParams<T> scrambled_params(const VitConfig& c, std::uint64_t seed) {
  auto p = init_params<T>(c, seed);
  Rng rng(seed + 1);
  for (T& v : p.values()) v += static_cast<T>(0.3 * rng.normal());
  return p;
}

double lse_cross_entropy(const Tensor<double>& logits, std::span<const Label> y) {
  const std::size_t k = logits.extent(1);
  double total = 0;
  for (std::size_t r = 0; r < logits.extent(0); ++r) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, logits[r * k + j]);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits[r * k + j] - m);
    total += m + std::log(s) - logits[r * k + static_cast<std::size_t>(y[r])];
  }
  return total / static_cast<double>(logits.extent(0));
}

TEST(Patchify, SingleBlock) {
  Tensor<float> img({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  auto p = patchify(img, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 4}));
  EXPECT_EQ(std::vector<float>(p.values().begin(), p.values().end()),
            (std::vector<float>{1, 2, 3, 4}));
}

TEST(Patchify, RowMajorGrid) {
  std::vector<float> v(16);
  std::iota(v.begin(), v.end(), 0.0f);
  Tensor<float> img({1, 4, 4}, v);
  auto p = patchify(img, 2);
  ASSERT_EQ(p.shape(), (Shape{4, 4}));
  EXPECT_EQ(std::vector<float>(p.row(0).begin(), p.row(0).end()),
            (std::vector<float>{0, 1, 4, 5}));
  EXPECT_EQ(std::vector<float>(p.row(1).begin(), p.row(1).end()),
            (std::vector<float>{2, 3, 6, 7}));
  EXPECT_EQ(std::vector<float>(p.row(2).begin(), p.row(2).end()),
            (std::vector<float>{8, 9, 12, 13}));
  EXPECT_EQ(std::vector<float>(p.row(3).begin(), p.row(3).end()),
            (std::vector<float>{10, 11, 14, 15}));
}

TEST(Patchify, ChannelMajorWithinBlock) {
  std::vector<float> v(8);
  std::iota(v.begin(), v.end(), 0.0f);
  Tensor<float> img({2, 2, 2}, v);
  auto p = patchify(img, 2);
  EXPECT_EQ(std::vector<float>(p.values().begin(), p.values().end()), v);
}

TEST(Patchify, RejectsIndivisible) {
  Tensor<float> img({1, 5, 4});
  EXPECT_THROW(patchify(img, 2), InvalidInput);
}

TEST(Config, Validation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), InvalidInput);
  c = small_config();
  c.image.width = 10;
  EXPECT_THROW(c.validate(), InvalidInput);
}

TEST(Forward, ZeroWeightsGiveUniformScores) {
  VitParams<float> p(small_config());
  auto logits = forward(p, random_images<float>(p.config().image, 3, 1));
  ASSERT_EQ(logits.shape(), (Shape{3, 4}));
  for (float v : logits.data()) EXPECT_EQ(v, logits[0]);
}

TEST(Forward, DeterministicAndBatchIndependent) {
  auto p = init_params<float>(small_config(), 7);
  auto batch = random_images<float>(p.config().image, 5, 2);
  auto a = forward(p, batch);
  auto b = forward(p, batch);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    auto single = forward(p, batch.slice(i));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(single[j], a[i * 4 + j]);
  }
  EXPECT_TRUE(a.all_finite());
}

TEST(Forward, RejectsShapeMismatch) {
  auto p = init_params<float>(small_config(), 7);
  Tensor<float> wrong({2, 3, 8, 4});
  EXPECT_THROW(forward(p, wrong), InvalidInput);
}

TEST(CrossEntropy, UniformLogits) {
  Tensor<double> logits({2, 10}, 0.5);
  std::vector<Label> y{3, 9};
  EXPECT_NEAR(cross_entropy(logits, y), std::log(10.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginApproachesZero) {
  Tensor<double> logits({1, 3}, 0.0);
  logits[1] = 200.0;
  std::vector<Label> y{1};
  EXPECT_LT(cross_entropy(logits, y), 1e-12);
  EXPECT_GE(cross_entropy(logits, y), 0.0);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> logits({4, 7});
    for (double& v : logits.data()) v = 5.0 * rng.normal();
    std::vector<Label> y(4);
    for (auto& l : y) l = static_cast<Label>(rng.uniform_index(7));
    const double expect = lse_cross_entropy(logits, y);
    EXPECT_NEAR(cross_entropy(logits, y), expect, 1e-6 * std::abs(expect));
  }
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  Tensor<double> logits({1, 3});
  std::vector<Label> y{3};
  EXPECT_THROW(cross_entropy(logits, y), InvalidInput);
  y = {-1};
  EXPECT_THROW(cross_entropy(logits, y), InvalidInput);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  Tensor<float> logits({6, 10});
  for (float& v : logits.data()) v = static_cast<float>(10 * rng.normal());
  auto p = softmax(logits);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (float v : p.row(r)) {
      EXPECT_GE(v, 0.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(InputGradient, ZeroWeightsGiveZeroGradient) {
  VitParams<float> p(small_config());
  auto x = random_images<float>(p.config().image, 2, 4);
  std::vector<Label> y{0, 3};
  auto g = input_gradient(p, x, y);
  EXPECT_EQ(g.shape(), x.shape());
  for (float v : g.data()) EXPECT_EQ(v, 0.0f);
}

TEST(InputGradient, MatchesFiniteDifferences) {
  const auto c = small_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto p = scrambled_params<double>(c, 100 + seed);
    auto x = random_images<double>(c.image, 1, 200 + seed);
    std::vector<Label> y{static_cast<Label>(seed % 4)};
    auto g = input_gradient(p, x, y);
    // Independent central-difference oracle.
    std::vector<double> numeric(x.size());
    const double h = 1e-4;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto up = x, down = x;
      up[i] += h;
      down[i] -= h;
      numeric[i] = (lse_cross_entropy(forward(p, up), y) -
                    lse_cross_entropy(forward(p, down), y)) / (2 * h);
    }
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max(worst, std::abs(numeric[i] - g[i]));
      scale = std::max(scale, std::abs(numeric[i]));
    }
    ASSERT_GT(scale, 1e-6);
    EXPECT_LT(worst / scale, 1e-3);
    EXPECT_LT(grad_check(p, x, y, 1e-4), 1e-3);
  }
}

TEST(InputGradient, BatchIsStackOfSingles) {
  auto p = scrambled_params<double>(small_config(), 5);
  auto x = random_images<double>(p.config().image, 3, 6);
  std::vector<Label> y{1, 0, 2};
  auto g = input_gradient(p, x, y);
  for (std::size_t i = 0; i < 3; ++i) {
    auto gi = input_gradient(p, x.slice(i), std::span<const Label>(&y[i], 1));
    for (std::size_t k = 0; k < gi.size(); ++k)
      EXPECT_NEAR(gi[k], g[i * gi.size() + k], 1e-12);
  }
}

TEST(InputVjp, OneHotCotangentIsLogitGradient) {
  auto p = scrambled_params<double>(small_config(), 8);
  auto x = random_images<double>(p.config().image, 1, 9);
  Tensor<double> cot({1, 4}, 0.0);
  cot[2] = 1.0;
  auto g = input_vjp(p, x, cot);
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.size(); i += 17) {
    auto up = x, down = x;
    up[i] += h;
    down[i] -= h;
    const double fd = (forward(p, up)[2] - forward(p, down)[2]) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-6 + 1e-4 * std::abs(fd));
  }
}

TEST(ParamGradients, MatchFiniteDifferencesOnSubsample) {
  auto p = scrambled_params<double>(small_config(), 12);
  auto x = random_images<double>(p.config().image, 2, 13);
  std::vector<Label> y{1, 3};
  EXPECT_LT(grad_check_params(p, x, y, 1e-4, 0.2, 99), 1e-3);
}

TEST(ParamGradients, HalfBatchMeanEqualsFullBatch) {
  auto p = scrambled_params<double>(small_config(), 14);
  auto x = random_images<double>(p.config().image, 4, 15);
  std::vector<Label> y{0, 1, 2, 3};
  const std::size_t n = x.size() / 4;
  auto half = [&](std::size_t from) {
    Tensor<double> h({2, 3, 8, 8},
                     std::vector<double>(x.values().begin() + from * n,
                                         x.values().begin() + (from + 2) * n));
    return param_gradients(p, h, std::span<const Label>(y).subspan(from, 2));
  };
  auto full = param_gradients(p, x, y);
  auto a = half(0), b = half(2);
  for (std::size_t i = 0; i < full.size(); ++i)
    EXPECT_NEAR(0.5 * (a.values()[i] + b.values()[i]), full.values()[i], 1e-12);
}

TEST(ParamGradients, ConfidentCorrectBatchIsStationary) {
  // Zero network with a head bias that makes class 2 overwhelmingly likely.
  VitParams<double> p(small_config());
  auto bias = p.tensor("head.bias");
  bias[2] = 60.0;
  auto x = random_images<double>(p.config().image, 3, 16);
  std::vector<Label> y{2, 2, 2};
  auto lg = loss_and_gradients(p, x, y);
  EXPECT_LT(lg.loss, 1e-20);
  for (double v : lg.gradients.values()) EXPECT_LT(std::abs(v), 1e-20);
}

TEST(GradCheck, ZeroModelIsExactlyZero) {
  VitParams<double> p(small_config());
  auto x = random_images<double>(p.config().image, 1, 17);
  std::vector<Label> y{0};
  EXPECT_EQ(grad_check(p, x, y, 1e-4), 0.0);
}

TEST(GradCheck, SampledCoordinatesAgreeWithFullCheck) {
  auto p = scrambled_params<double>(small_config(), 21);
  auto x = random_images<double>(p.config().image, 2, 22);
  std::vector<Label> y{3, 0};
  EXPECT_EQ(grad_check(p, x, y, 1e-4, 1.0, 1), grad_check(p, x, y, 1e-4));
  EXPECT_LT(grad_check(p, x, y, 1e-4, 0.3, 2), 1e-3);
  EXPECT_EQ(grad_check(p, x, y, 1e-4, 0.0, 3), 0.0);
}

TEST(GradCheck, DetectsCorruptedCoordinate) {
  auto p = scrambled_params<double>(small_config(), 18);
  auto x = random_images<double>(p.config().image, 1, 19);
  std::vector<Label> y{1};
  auto g = input_gradient(p, x, y);
  std::vector<double> numeric(g.values().begin(), g.values().end());
  std::vector<double> corrupted = numeric;
  corrupted[5] += 1.0;
  EXPECT_EQ(gradient_error(g.values(), numeric), 0.0);
  EXPECT_GT(gradient_error(corrupted, numeric), 0.1);
}

TEST(PermutationEquivariance, PermutedEmbeddingRowsCancelPixelShuffle) {
  const auto c = small_config();
  auto p = scrambled_params<float>(c, 20);
  const std::size_t pd = c.patch_dim();
  std::vector<std::size_t> perm(pd);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(21);
  rng.shuffle(perm.begin(), perm.end());

  // Shuffle the pixels of every block: out(k) = in(perm[k]).
  auto x = random_images<float>(c.image, 2, 22);
  auto shuffled = x;
  const BlockGrid grid = c.grid();
  const std::size_t n = c.image.pixels();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t blk = 0; blk < grid.num_blocks(); ++blk)
      for (std::size_t k = 0; k < pd; ++k)
        shuffled[b * n + grid.offset(blk, k)] = x[b * n + grid.offset(blk, perm[k])];

  auto q = p;
  auto w = p.tensor("patch_embed.weight");
  auto wq = q.tensor("patch_embed.weight");
  const std::size_t d = c.embed_dim;
  for (std::size_t k = 0; k < pd; ++k)
    for (std::size_t j = 0; j < d; ++j) wq[k * d + j] = w[perm[k] * d + j];

  auto a = forward(p, x);
  auto b = forward(q, shuffled);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto c = small_config();
  auto x = random_images<float>(c.image, 10, 23);
  std::vector<Label> y(10);
  for (std::size_t i = 0; i < 10; ++i) y[i] = static_cast<Label>(i % 4);
  auto init = init_params<float>(c, 24);
  TrainConfig tc;
  tc.learning_rate = 0;
  tc.epochs = 3;
  tc.batch_size = 4;
  auto r = train(init, {x, y}, tc);
  EXPECT_EQ(r.params, init);
  ASSERT_EQ(r.trace.size(), 3u);
  for (std::uint32_t e = 0; e < 3; ++e) EXPECT_EQ(r.trace[e].epoch, e);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto c = small_config();
  auto x = random_images<float>(c.image, 12, 25);
  std::vector<Label> y(12);
  for (std::size_t i = 0; i < 12; ++i) y[i] = static_cast<Label>(i % 4);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 5;
  tc.rng_seed = 77;
  auto a = train(c, {x, y}, tc);
  auto b = train(c, {x, y}, tc);
  EXPECT_EQ(a.params, b.params);
  tc.rng_seed = 78;
  auto d = train(c, {x, y}, tc);
  EXPECT_NE(a.params, d.params);
}

TEST(Train, FitsSmallSeparableSet) {
  auto c = small_config();
  c.num_classes = 2;
  const std::size_t n = 40;
  Tensor<float> x({n, 3, 8, 8});
  std::vector<Label> y(n);
  Rng rng(26);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<Label>(i % 2);
    for (std::size_t k = 0; k < 192; ++k)
      x[i * 192 + k] = static_cast<float>(0.3 * rng.uniform() + (y[i] ? 0.6 : 0.1));
  }
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.rng_seed = 1;
  auto r = train(c, {x, y}, tc);
  EXPECT_GE(accuracy(r.params, {x, y}), 0.95);
}

TEST(Train, RejectsEmptyDataset) {
  Tensor<float> x;
  std::vector<Label> y;
  EXPECT_THROW(train(small_config(), {x, y}, TrainConfig{}), InvalidInput);
}

TEST(Weights, RoundTripIsBitExact) {
  auto p = init_params<float>(small_config(), 30);
  p.values()[3] = -0.0f;
  auto bytes = encode_weights(p);
  auto q = decode_weights(bytes);
  EXPECT_EQ(encode_weights(q), bytes);
  EXPECT_EQ(q.config(), p.config());
  EXPECT_EQ(std::signbit(q.values()[3]), true);
}

TEST(Weights, HeaderLayout) {
  auto p = init_params<float>(small_config(), 30);
  auto bytes = encode_weights(p);
  ASSERT_GE(bytes.size(), 38u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TVIT");
  ByteReader r(bytes, "test");
  r.raw(4);
  EXPECT_EQ(r.u16(), 1);
  EXPECT_EQ(r.u32(), 4u);   // M
  EXPECT_EQ(r.u32(), 8u);   // d
  EXPECT_EQ(r.u32(), 2u);   // L
  EXPECT_EQ(r.u32(), 2u);   // heads
  EXPECT_EQ(r.u32(), 4u);   // classes
  EXPECT_EQ(r.u32(), 3u);   // C
  EXPECT_EQ(r.u32(), 8u);   // H
  EXPECT_EQ(r.u32(), 8u);   // W
  const std::uint16_t len = r.u16();
  EXPECT_EQ(r.str(len), "patch_embed.weight");
  EXPECT_EQ(r.u8(), 2);
  EXPECT_EQ(r.u32(), 48u);
  EXPECT_EQ(r.u32(), 8u);
}

TEST(Weights, RejectsCorruptInput) {
  auto bytes = encode_weights(init_params<float>(small_config(), 31));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_weights(truncated), ParseError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_weights(bad_magic), ParseError);
  std::vector<std::uint8_t> header_only(bytes.begin(), bytes.begin() + 38);
  EXPECT_THROW(decode_weights(header_only), ParseError);
}

}  // namespace
}  // namespace encvit
