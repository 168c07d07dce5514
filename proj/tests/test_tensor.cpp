// Tensor core and reverse-mode autodiff: op semantics against independent
// oracles, gradient checks against central finite differences, tape
// contracts, and determinism.

#include <gtest/gtest.h>

#include <cstring>

#include "mwformer/ops.hpp"
#include "mwformer/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/gradcheck_rounds.hpp"
#include "support/oracles.hpp"

using mwf::Rng;
using mwf::Shape;
using mwf::Tape;
using mwf::TapeScope;
using mwf::Tensor;
using testsupport::gradcheck;

namespace {

Tensor<double> rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(rng, std::move(shape), lo, hi);
}

}  // namespace

// ---------------------------------------------------------------------------
// construction and basic invariants
// ---------------------------------------------------------------------------

TEST(Tensor, DataMustFillShape) {
  EXPECT_THROW(Tensor<float>::from({2, 3}, {1.f, 2.f}), mwf::DimensionError);
  Tensor<float> t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, ScalarIsRankZero) {
  Tensor<float> s = Tensor<float>::scalar(2.5f);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.numel(), 1u);
  EXPECT_FLOAT_EQ(s.item(), 2.5f);
  Tensor<float> m = Tensor<float>::zeros({2, 2});
  EXPECT_THROW(m.item(), mwf::ContractError);
}

TEST(Tensor, UniformFillIsDeterministic) {
  Rng a(99), b(99);
  Tensor<float> ta = Tensor<float>::uniform(a, {4, 7}, -2.f, 2.f);
  Tensor<float> tb = Tensor<float>::uniform(b, {4, 7}, -2.f, 2.f);
  EXPECT_EQ(0, std::memcmp(ta.data(), tb.data(), sizeof(float) * ta.numel()));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityCase) {
  Tensor<double> eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Tensor<double> b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  Tensor<double> c = mwf::matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(c.values()[i], b.values()[i]);
}

TEST(Matmul, ZeroCase) {
  Tensor<double> a = Tensor<double>::from({1, 2}, {1, 2});
  Tensor<double> b = Tensor<double>::from({2, 1}, {0, 0});
  Tensor<double> c = mwf::matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c.values()[0], 0.0);
}

TEST(Matmul, RandomAgainstTripleLoopOracle) {
  Rng rng(7);
  Tensor<double> a = rand_t(rng, {3, 4});
  Tensor<double> b = rand_t(rng, {4, 2});
  Tensor<double> c = mwf::matmul(a, b);
  auto expect = oracle::matmul(a.values(), b.values(), 3, 4, 2);
  for (std::size_t i = 0; i < expect.size(); ++i)
    EXPECT_NEAR(c.values()[i], expect[i], 1e-12);
}

TEST(Matmul, MismatchMentionsBothShapes) {
  Tensor<double> a = Tensor<double>::zeros({3, 4});
  Tensor<double> b = Tensor<double>::zeros({5, 2});
  try {
    mwf::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const mwf::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3, 4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[5, 2]"), std::string::npos) << msg;
  }
}

// ---------------------------------------------------------------------------
// depthwise conv
// ---------------------------------------------------------------------------

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
  Rng rng(3);
  Tensor<double> x = rand_t(rng, {2, 5, 5});
  std::vector<double> k(2 * 9, 0.0);
  k[4] = 1.0;       // center of channel 0
  k[9 + 4] = 1.0;   // center of channel 1
  Tensor<double> w = Tensor<double>::from({2, 1, 3, 3}, k);
  Tensor<double> y = mwf::depthwise_conv2d(x, w);
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_DOUBLE_EQ(y.values()[i], x.values()[i]);
}

TEST(DepthwiseConv, ZeroKernelIsZero) {
  Rng rng(4);
  Tensor<double> x = rand_t(rng, {3, 4, 4});
  Tensor<double> w = Tensor<double>::zeros({3, 1, 3, 3});
  Tensor<double> y = mwf::depthwise_conv2d(x, w);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(DepthwiseConv, BoxKernelMatchesNestedLoopOracle) {
  // 3x3 ramp image, all-ones kernel: each output pixel is the sum of its
  // zero-padded 3x3 neighborhood.
  std::vector<double> ramp(9);
  for (int i = 0; i < 9; ++i) ramp[i] = i;
  Tensor<double> x = Tensor<double>::from({1, 3, 3}, ramp);
  Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  Tensor<double> y = mwf::depthwise_conv2d(x, w);
  auto expect = oracle::depthwise_conv2d(ramp, 1, 3, 3, std::vector<double>(9, 1.0), 3);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y.values()[i], expect[i], 1e-12);
}

TEST(DepthwiseConv, ChannelMismatchThrows) {
  Tensor<double> x = Tensor<double>::zeros({3, 4, 4});
  Tensor<double> w = Tensor<double>::zeros({2, 1, 3, 3});
  EXPECT_THROW(mwf::depthwise_conv2d(x, w), mwf::DimensionError);
}

// ---------------------------------------------------------------------------
// conv2d against oracle
// ---------------------------------------------------------------------------

TEST(Conv2d, StridedPaddedMatchesOracle) {
  Rng rng(11);
  Tensor<double> x = rand_t(rng, {3, 8, 8});
  Tensor<double> w = rand_t(rng, {5, 3, 3, 3});
  Tensor<double> b = rand_t(rng, {5});
  Tensor<double> y = mwf::conv2d(x, w, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{5, 4, 4}));
  auto expect = oracle::conv2d(x.values(), 3, 8, 8, w.values(), 5, 3, 3, b.values(), 2, 1);
  for (std::size_t i = 0; i < expect.size(); ++i)
    EXPECT_NEAR(y.values()[i], expect[i], 1e-12);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, ConstantVectorIsUniform) {
  Tensor<double> x = Tensor<double>::full({3}, 4.2);
  Tensor<double> y = mwf::softmax(x, 0);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(5);
  Tensor<double> x = rand_t(rng, {7}, -3.0, 3.0);
  Tensor<double> y1 = mwf::softmax(x, 0);
  Tensor<double> y2 = mwf::softmax(mwf::add_scalar(x, 17.25), 0);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(y1.values()[i], y2.values()[i], 1e-6);
}

TEST(Softmax, KnownValues) {
  // softmax([1,0,0]) = [e/(e+2), 1/(e+2), 1/(e+2)], frozen from a
  // long-double scalar evaluation.
  const double kHot = 0.5761168847658291;
  const double kCold = 0.21194155761708544;
  Tensor<double> x = Tensor<double>::from({3}, {1, 0, 0});
  Tensor<double> y = mwf::softmax(x, 0);
  EXPECT_NEAR(y.values()[0], kHot, 1e-12);
  EXPECT_NEAR(y.values()[1], kCold, 1e-12);
  EXPECT_NEAR(y.values()[2], kCold, 1e-12);
  auto expect = oracle::softmax_vec({1, 0, 0});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.values()[i], expect[i], 1e-14);
}

TEST(Softmax, SumsToOneAlongEveryAxis) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(3)};
    Tensor<double> x = rand_t(rng, shape, -30.0, 30.0);
    const std::size_t axis = rng.below(3);
    Tensor<double> y = mwf::softmax(x, axis);
    // Sum along the chosen axis must be 1 everywhere.
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double s = 0;
        for (std::size_t j = 0; j < shape[axis]; ++j)
          s += y.values()[(o * shape[axis] + j) * inner + in];
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(Softmax, BadAxisThrows) {
  Tensor<double> x = Tensor<double>::zeros({3});
  EXPECT_THROW(mwf::softmax(x, 1), mwf::DimensionError);
}

// ---------------------------------------------------------------------------
// backward semantics
// ---------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Rng rng(8);
  Tensor<double> x = rand_t(rng, {3, 4});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> loss = mwf::sum_all(x);
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, HalfSumSquaresGivesX) {
  Rng rng(9);
  Tensor<double> x = rand_t(rng, {5});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> loss = mwf::mul_scalar(mwf::sum_all(mwf::mul(x, x)), 0.5);
  tape.backward(loss);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x.grad()[i], x.values()[i], 1e-12);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor<double> x = Tensor<double>::zeros({2}).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> y = mwf::mul_scalar(x, 2.0);
  EXPECT_THROW(tape.backward(y), mwf::ContractError);
}

TEST(Backward, SecondCallWithoutResetRejected) {
  Tensor<double> x = Tensor<double>::full({2}, 1.0).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> loss = mwf::sum_all(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), mwf::ContractError);
  tape.reset();
  // After reset the tape is re-armed but empty; a fresh graph works.
  Tensor<double> loss2 = mwf::sum_all(x);
  x.clear_grad();
  tape.backward(loss2);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Backward, DetachedTensorHasNoGrad) {
  Tensor<double> x = Tensor<double>::full({2}, 1.0).set_requires_grad(true);
  Tensor<double> d = x.detach();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> loss = mwf::sum_all(x);
  tape.backward(loss);
  EXPECT_THROW(d.grad(), mwf::AbsentGradError);
}

TEST(Backward, LossOffTapeRejected) {
  Tensor<double> x = Tensor<double>::full({}, 1.0).set_requires_grad(true);
  Tape<double> tape;
  EXPECT_THROW(tape.backward(x), mwf::ContractError);  // leaf, never recorded
  Tape<double> other;
  Tensor<double> y;
  {
    TapeScope<double> scope(other);
    y = mwf::mul_scalar(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), mwf::ContractError);  // recorded elsewhere
}

TEST(Tape, RecordsAreTopologicallyOrdered) {
  Rng rng(10);
  Tensor<double> x = rand_t(rng, {4}).set_requires_grad(true);
  Tensor<double> w = rand_t(rng, {4}).set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  Tensor<double> a = mwf::mul(x, w);
  Tensor<double> b = mwf::add(a, x);
  Tensor<double> loss = mwf::sum_all(mwf::gelu(b));
  (void)loss;
  // Every record's inputs must be produced by an earlier record or be leaves.
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.record_at(i).inputs) {
      bool ok = in->tape == nullptr;  // leaf
      for (std::size_t j = 0; j < i && !ok; ++j) ok = (tape.record_at(j).out == in);
      EXPECT_TRUE(ok) << "record " << i << " (" << tape.record_at(i).op
                      << ") uses a value produced later";
    }
  }
}

TEST(Numerics, NonFiniteForwardIsAnError) {
  Tensor<double> a = Tensor<double>::full({2}, 1.0);
  Tensor<double> z = Tensor<double>::zeros({2});
  try {
    mwf::div(a, z);
    FAIL() << "expected NumericError";
  } catch (const mwf::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("div"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// gradient checks: primitives (f64, h=1e-5, >=5 seeds via loop)
// ---------------------------------------------------------------------------

TEST(GradCheck, PrimitivesAcrossSeeds) {
  for (std::uint64_t seed : {11u, 22u, 33u, 44u, 55u}) {
    const double worst = testsupport::primitive_gradcheck_round(seed);
    EXPECT_LT(worst, 1e-5) << "seed " << seed;
  }
}

// ---------------------------------------------------------------------------
// cosine similarity properties
// ---------------------------------------------------------------------------

TEST(Cosine, SelfSimilarityIsOne) {
  Rng rng(13);
  for (int i = 0; i < 10; ++i) {
    Tensor<double> a = rand_t(rng, {8}, -2.0, 2.0);
    // ensure nonzero
    a.data()[0] += 3.0;
    EXPECT_NEAR(mwf::cosine_similarity(a, a).item(), 1.0, 1e-6);
  }
}

TEST(Cosine, Symmetric) {
  Rng rng(14);
  Tensor<double> a = rand_t(rng, {8});
  Tensor<double> b = rand_t(rng, {8});
  EXPECT_DOUBLE_EQ(mwf::cosine_similarity(a, b).item(), mwf::cosine_similarity(b, a).item());
}

TEST(Cosine, MatchesScalarOracle) {
  Rng rng(15);
  for (int i = 0; i < 20; ++i) {
    Tensor<double> a = rand_t(rng, {12});
    Tensor<double> b = rand_t(rng, {12});
    EXPECT_NEAR(mwf::cosine_similarity(a, b).item(), oracle::cosine(a.values(), b.values()),
                1e-12);
  }
}

// ---------------------------------------------------------------------------
// layout composites
// ---------------------------------------------------------------------------

TEST(Layout, TokensImageRoundTrip) {
  Rng rng(16);
  Tensor<double> img = rand_t(rng, {5, 3, 4});
  Tensor<double> tok = mwf::image_to_tokens(img);
  EXPECT_EQ(tok.shape(), (Shape{12, 5}));
  // token (y*w+x) carries pixel (y,x) of every channel
  EXPECT_DOUBLE_EQ(tok(5, 2), img(2, 1, 1));  // token 5 = y1,x1 for w=4
  Tensor<double> back = mwf::tokens_to_image(tok, 3, 4);
  for (std::size_t i = 0; i < img.numel(); ++i)
    EXPECT_DOUBLE_EQ(back.values()[i], img.values()[i]);
}

TEST(Layout, PixelShuffleRoundTripAndPlacement) {
  Rng rng(17);
  Tensor<double> x = rand_t(rng, {8, 2, 2});
  Tensor<double> up = mwf::pixel_shuffle2(x);
  EXPECT_EQ(up.shape(), (Shape{2, 4, 4}));
  // channel group 4c..4c+3 of input -> 2x2 block (dy,dx) of output channel c
  EXPECT_DOUBLE_EQ(up(0, 0, 0), x(0, 0, 0));
  EXPECT_DOUBLE_EQ(up(0, 0, 1), x(1, 0, 0));
  EXPECT_DOUBLE_EQ(up(0, 1, 0), x(2, 0, 0));
  EXPECT_DOUBLE_EQ(up(0, 1, 1), x(3, 0, 0));
  EXPECT_DOUBLE_EQ(up(1, 2, 3), x(5, 1, 1));
  Tensor<double> back = mwf::pixel_unshuffle2(up);
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_DOUBLE_EQ(back.values()[i], x.values()[i]);
}

TEST(Layout, MeanRows) {
  Tensor<double> x = Tensor<double>::from({2, 3}, {1, 2, 3, 5, 6, 7});
  Tensor<double> m = mwf::mean_rows(x);
  EXPECT_EQ(m.shape(), (Shape{3}));
  EXPECT_NEAR(m.values()[0], 3.0, 1e-12);
  EXPECT_NEAR(m.values()[1], 4.0, 1e-12);
  EXPECT_NEAR(m.values()[2], 5.0, 1e-12);
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

TEST(Determinism, SameSeedSamePipelineBitIdentical) {
  auto run = [] {
    Rng rng(1234);
    Tensor<float> x = Tensor<float>::uniform(rng, {4, 8, 8}, 0.f, 1.f);
    Tensor<float> w = Tensor<float>::uniform(rng, {4, 4, 3, 3}, -0.2f, 0.2f);
    Tensor<float> y = mwf::conv2d(x, w, 1, 1);
    Tensor<float> t = mwf::softmax(mwf::image_to_tokens(y), 1);
    return t;
  };
  Tensor<float> a = run();
  Tensor<float> b = run();
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()));
}
