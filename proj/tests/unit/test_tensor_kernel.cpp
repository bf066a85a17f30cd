#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "gazedecode/gradcheck.hpp"
#include "gazedecode/layers.hpp"
#include "gazedecode/optim.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/tensor.hpp"
#include "gazedecode/tnsr_io.hpp"

using namespace gazedecode;

namespace {

using TD = BasicTensor<double>;

TD random_tensor(Rng& rng, Shape shape) {
  TD t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

double dot(const TD& a, const TD& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Direct nested-loop cross-correlation with zero padding.
TD brute_conv(const TD& x, const TD& k, const TD& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3), co = k.dim(0);
  const std::size_t oh = (h + 2 * pad - 3) / stride + 1, ow = (w + 2 * pad - 3) / stride + 1;
  TD out({n, co, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          double acc = b[o];
          for (std::size_t i = 0; i < ci; ++i)
            for (std::size_t dr = 0; dr < 3; ++dr)
              for (std::size_t dc = 0; dc < 3; ++dc) {
                const long y = static_cast<long>(r * stride + dr) - static_cast<long>(pad);
                const long xx = static_cast<long>(c * stride + dc) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(w))
                  continue;
                acc += x(s, i, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) *
                       k(o, i, dr, dc);
              }
          out(s, o, r, c) = acc;
        }
  return out;
}

}  // namespace

TEST(Linear, IdentityWeights) {
  const Tensor x({1, 2}, {1.f, 2.f});
  const Tensor w({2, 2}, {1.f, 0.f, 0.f, 1.f});
  const Tensor b({2}, {0.f, 0.f});
  EXPECT_EQ(linear_forward(x, w, b), Tensor({1, 2}, {1.f, 2.f}));
}

TEST(Linear, HandArithmeticAndBackward) {
  const Tensor x({1, 2}, {1.f, 1.f});
  const Tensor w({2, 1}, {2.f, 3.f});
  const Tensor b({1}, {1.f});
  EXPECT_EQ(linear_forward(x, w, b), Tensor({1, 1}, {6.f}));
  const auto g = linear_backward(x, w, Tensor({1, 1}, {1.f}));
  EXPECT_EQ(g.w, Tensor({2, 1}, {1.f, 1.f}));
  EXPECT_EQ(g.b, Tensor({1}, {1.f}));
  EXPECT_EQ(g.x, Tensor({1, 2}, {2.f, 3.f}));
}

TEST(Linear, ShapeMismatchThrows) {
  EXPECT_THROW(linear_forward(Tensor({1, 3}), Tensor({2, 2}), Tensor({2})), DimensionError);
  EXPECT_THROW(linear_forward(Tensor({1, 2}), Tensor({2, 2}), Tensor({3})), DimensionError);
}

TEST(Linear, GradcheckRandom3x4) {
  Rng rng(1);
  ParamSet<double> p;
  p.values["x"] = random_tensor(rng, {3, 4});
  p.values["w"] = random_tensor(rng, {4, 2});
  p.values["b"] = random_tensor(rng, {2});
  const TD r = random_tensor(rng, {3, 2});
  auto loss = [&](const ParamSet<double>& q) { return dot(linear_forward(q["x"], q["w"], q["b"]), r); };
  const auto g = linear_backward(p["x"], p["w"], r);
  const auto rep = gradcheck<double>(loss, p, {{"x", g.x}, {"w", g.w}, {"b", g.b}}, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  EXPECT_LT(rep.max_rel_error, 1e-4);
  EXPECT_EQ(rep.checked, 12u + 8u + 2u);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  const Tensor x({1, 1, 3, 3}, 1.f);
  const Tensor k({1, 1, 3, 3});
  const Tensor b({1}, {5.f});
  const Tensor out = conv2d_forward(x, k, b, 1, 1);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  for (float v : out.data()) EXPECT_EQ(v, 5.f);
}

TEST(Conv2d, CenterDeltaWithOnesKernel) {
  Tensor x({1, 1, 3, 3});
  x(0, 0, 1, 1) = 1.f;
  const Tensor k({1, 1, 3, 3}, 1.f);
  const Tensor out = conv2d_forward(x, k, Tensor({1}), 1, 1);
  // Every output window overlaps the center pixel.
  for (float v : out.data()) EXPECT_EQ(v, 1.f);
}

TEST(Conv2d, MatchesBruteForce) {
  Rng rng(2);
  for (std::size_t stride : {1u, 2u}) {
    for (int t = 0; t < 10; ++t) {
      const std::size_t h = 3 + rng.index(6), w = 3 + rng.index(6);
      const TD x = random_tensor(rng, {2, 3, h, w});
      const TD k = random_tensor(rng, {4, 3, 3, 3});
      const TD b = random_tensor(rng, {4});
      const TD got = conv2d_forward(x, k, b, stride, 1);
      const TD want = brute_conv(x, k, b, stride, 1);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(Conv2d, OutputSize) {
  EXPECT_EQ(conv_geometry(32, 32, 2, 1).out_h, 16u);
  EXPECT_EQ(conv_geometry(5, 7, 2, 1).out_w, 4u);
  EXPECT_EQ(conv_geometry(5, 5, 1, 1).out_h, 5u);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  EXPECT_THROW(conv2d_forward(Tensor({1, 1, 1, 1}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, 0),
               DimensionError);
}

TEST(Conv2d, GradcheckRandom2x2x5x5) {
  Rng rng(3);
  for (std::size_t stride : {1u, 2u}) {
    ParamSet<double> p;
    p.values["x"] = random_tensor(rng, {2, 2, 5, 5});
    p.values["k"] = random_tensor(rng, {3, 2, 3, 3});
    p.values["b"] = random_tensor(rng, {3});
    const auto geo = conv_geometry(5, 5, stride, 1);
    const TD r = random_tensor(rng, {2, 3, geo.out_h, geo.out_w});
    auto loss = [&](const ParamSet<double>& q) {
      return dot(conv2d_forward(q["x"], q["k"], q["b"], stride, 1), r);
    };
    const auto g = conv2d_backward(p["x"], p["k"], r, stride, 1, true);
    const auto rep = gradcheck<double>(loss, p, {{"x", g.x}, {"k", g.k}, {"b", g.b}}, 1e-4);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "stride " << stride;
  }
}

TEST(Activation, ReluValues) {
  const Tensor out = activation_forward(Tensor({3}, {-1.f, 0.f, 2.f}), Activation::relu);
  EXPECT_EQ(out, Tensor({3}, {0.f, 0.f, 2.f}));
}

TEST(Activation, SigmoidAtZero) {
  const Tensor x({1}, {0.f});
  EXPECT_EQ(activation_forward(x, Activation::sigmoid)[0], 0.5f);
  EXPECT_FLOAT_EQ(activation_backward(x, Tensor({1}, {1.f}), Activation::sigmoid)[0], 0.25f);
}

TEST(Activation, SigmoidStableAtExtremes) {
  const Tensor out = activation_forward(Tensor({2}, {-1000.f, 1000.f}), Activation::sigmoid);
  EXPECT_TRUE(out.all_finite());
  EXPECT_EQ(out[0], 0.f);
  EXPECT_EQ(out[1], 1.f);
}

TEST(Softmax, UniformLogits) {
  const Tensor probs = softmax_rows(Tensor({1, 10}));
  for (float p : probs.data()) EXPECT_FLOAT_EQ(p, 0.1f);
}

TEST(Softmax, ClosedFormTwoClass) {
  const BasicTensor<double> logits({1, 2}, {std::log(2.0), 0.0});
  const int label = 0;
  const auto r = softmax_xent(logits, std::span<const int>(&label, 1));
  EXPECT_NEAR(r.probs[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.probs[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.loss, 0.405465, 1e-6);
  const auto g = softmax_xent_backward(r.probs, std::span<const int>(&label, 1));
  EXPECT_NEAR(g[0], 2.0 / 3.0 - 1.0, 1e-12);
  EXPECT_NEAR(g[1], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, RowsSumToOneOnLargeLogits) {
  Rng rng(4);
  Tensor logits({50, 10});
  for (float& v : logits.data()) v = static_cast<float>(rng.normal() * 200.0);
  const Tensor probs = softmax_rows(logits);
  ASSERT_TRUE(probs.all_finite());
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 10; ++j) {
      EXPECT_GE(probs(i, j), 0.f);
      EXPECT_LE(probs(i, j), 1.f);
      s += probs(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, LabelOutOfRangeThrows) {
  const int bad = 10;
  EXPECT_THROW(softmax_xent(Tensor({1, 10}), std::span<const int>(&bad, 1)), IndexError);
  const int neg = -1;
  EXPECT_THROW(softmax_xent(Tensor({1, 10}), std::span<const int>(&neg, 1)), IndexError);
}

TEST(SpatialMean, ConstantAndArithmetic) {
  EXPECT_EQ(spatial_mean(Tensor({1, 2, 3, 3}, 1.5f)), Tensor({1, 2}, {1.5f, 1.5f}));
  EXPECT_EQ(spatial_mean(Tensor({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f})), Tensor({1, 1}, {2.5f}));
}

TEST(SpatialMean, EmptyExtentThrows) {
  EXPECT_THROW(spatial_mean(Tensor({1, 1, 0, 4})), DimensionError);
}

TEST(SpatialMean, BackwardSpreadsEvenly) {
  const Tensor g = spatial_mean_backward({1, 1, 2, 2}, Tensor({1, 1}, {4.f}));
  for (float v : g.data()) EXPECT_EQ(v, 1.f);
}

TEST(SpatialMean, ConstantWeightingScalesMean) {
  Rng rng(5);
  Tensor x({1, 3, 4, 4});
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  const float c = 1.0f / 16.0f;
  Tensor weighted = x;
  for (float& v : weighted.data()) v *= c;
  const Tensor a = spatial_mean(weighted), b = spatial_mean(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], c * b[i], 1e-7);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamSet<float> p;
  p.values["w"] = Tensor({3}, {1.f, -2.f, 3.f});
  const Tensor before = p["w"];
  adam_step(p, {{"w", Tensor({3})}});
  EXPECT_EQ(p["w"], before);
}

TEST(Adam, FirstStepClosedForm) {
  ParamSet<double> p;
  p.values["w"] = BasicTensor<double>({1}, {1.0});
  adam_step(p, {{"w", BasicTensor<double>({1}, {1.0})}}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  EXPECT_NEAR(p["w"][0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p["w"][0], 0.9, 1e-7);
}

TEST(Adam, DeterministicBitwise) {
  Rng rng(6);
  ParamSet<float> a;
  a.values["w"] = Tensor({8});
  for (float& v : a["w"].data()) v = static_cast<float>(rng.normal());
  Tensor g({8});
  for (float& v : g.data()) v = static_cast<float>(rng.normal());
  ParamSet<float> b = a;
  adam_step(a, {{"w", g}});
  adam_step(b, {{"w", g}});
  EXPECT_EQ(a["w"], b["w"]);
}

TEST(Adam, ShapeMismatchThrows) {
  ParamSet<float> p;
  p.values["w"] = Tensor({3});
  EXPECT_THROW(adam_step(p, {{"w", Tensor({4})}}), DimensionError);
}

TEST(Gradcheck, FlagsWrongGradient) {
  ParamSet<double> p;
  p.values["a"] = BasicTensor<double>({2}, {1.0, 2.0});
  auto loss = [](const ParamSet<double>& q) { return q["a"][0] * q["a"][0] + q["a"][1]; };
  const auto good = gradcheck<double>(loss, p, {{"a", BasicTensor<double>({2}, {2.0, 1.0})}}, 1e-4);
  EXPECT_TRUE(good.passed);
  const auto bad = gradcheck<double>(loss, p, {{"a", BasicTensor<double>({2}, {2.0, 1.5})}}, 1e-4);
  EXPECT_FALSE(bad.passed);
  EXPECT_EQ(bad.flagged, 1u);
  EXPECT_EQ(bad.worst_index, 1u);
}

TEST(Gradcheck, NonFiniteAnalyticFails) {
  ParamSet<double> p;
  p.values["a"] = BasicTensor<double>({1}, {1.0});
  auto loss = [](const ParamSet<double>& q) { return q["a"][0]; };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(gradcheck<double>(loss, p, {{"a", BasicTensor<double>({1}, {nan})}}, 1e-4),
               NumericError);
}

TEST(Gradcheck, RejectsLargeParameterSets) {
  ParamSet<double> p;
  p.values["a"] = BasicTensor<double>({10000});
  auto loss = [](const ParamSet<double>&) { return 0.0; };
  EXPECT_THROW(gradcheck<double>(loss, p, {{"a", BasicTensor<double>({10000})}}, 1e-4),
               ParameterError);
}

TEST(Gradcheck, SkipsKinkCrossingEntries) {
  ParamSet<double> p;
  p.values["a"] = BasicTensor<double>({2}, {1e-4, 1.0});
  auto loss = [](const ParamSet<double>& q) { return std::max(q["a"][0], 0.0) + q["a"][1]; };
  auto signs = [](const ParamSet<double>& q) { return std::vector<bool>{q["a"][0] > 0.0}; };
  const auto rep = gradcheck<double>(loss, p, {{"a", BasicTensor<double>({2}, {1.0, 1.0})}},
                                     1e-4, 1e-3, signs);
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_EQ(rep.checked, 1u);
  EXPECT_TRUE(rep.passed);
}

TEST(Ops, DeterministicBitwise) {
  Rng rng(7);
  Tensor x({2, 3, 8, 8}), k({4, 3, 3, 3}), b({4});
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  for (float& v : k.data()) v = static_cast<float>(rng.normal());
  EXPECT_EQ(conv2d_forward(x, k, b, 2, 1), conv2d_forward(x, k, b, 2, 1));
}

TEST(Tnsr, RoundTripF32) {
  Rng rng(8);
  Tensor t({2, 3, 4});
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  const Bytes bytes = encode_tnsr(t);
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TNSR");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 3);
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes.size(), 8u + 3 * 4 + 24 * 4);
  EXPECT_EQ(decode_tnsr(bytes), t);
}

TEST(Tnsr, RoundTripU8) {
  const Tensor t({4}, {0.f, 0.5f, 1.f, 0.25f});
  const Bytes bytes = encode_tnsr(t, DType::u8);
  EXPECT_EQ(bytes[5], 1);
  const Tensor back = decode_tnsr(bytes);
  // 0.5 lands exactly on the 1/510 bound; allow one float ulp of slack.
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_LE(std::abs(double(back[i]) - double(t[i])), 1.0 / 510.0 + 1e-7);
}

TEST(Tnsr, MalformedInputThrows) {
  Bytes bytes = encode_tnsr(Tensor({2}, {1.f, 2.f}));
  Bytes bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tnsr(bad_magic), FormatError);
  Bytes bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_tnsr(bad_version), FormatError);
  Bytes truncated(bytes.begin(), bytes.end() - 1);
  EXPECT_THROW(decode_tnsr(truncated), FormatError);
  Bytes trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_tnsr(trailing), FormatError);
}

TEST(Tnsr, CheckpointRoundTrip) {
  TensorMap<float> m;
  m.emplace("conv1.k", Tensor({1, 2}, {1.f, 2.f}));
  m.emplace("head.b", Tensor({3}, {3.f, 4.f, 5.f}));
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(m)), m);
}

TEST(Tensor, DataLengthMatchesShape) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1.f, 2.f, 3.f}), DimensionError);
}
