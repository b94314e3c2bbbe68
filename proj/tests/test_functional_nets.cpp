#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "hypersort/hypernet.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/objectives.hpp"
#include "hypersort/ops.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/training.hpp"
#include "hypersort/unet.hpp"

using namespace hypersort;
using hypersort::testing::DTensor;
using hypersort::testing::grad_check;
using hypersort::testing::random_tensor;

namespace {

// Parameters of one 3x3 conv layer, optionally followed by a norm affine.
std::size_t conv_params(std::size_t cin, std::size_t cout, bool norm = true) {
  return cout * cin * 9 + cout + (norm ? 2 * cout : 0);
}

Tensor random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST(ParamLayout, DeskDefaultCountMatchesHandCount) {
  // 1 -> 4 -> 8 -> (16) -> 8 -> 4 -> 2, two convs per stage, concat skips.
  const std::size_t enc0 = conv_params(1, 4) + conv_params(4, 4);
  const std::size_t enc1 = conv_params(4, 8) + conv_params(8, 8);
  const std::size_t mid = conv_params(8, 16) + conv_params(16, 16);
  const std::size_t dec1 = conv_params(16 + 8, 8) + conv_params(8, 8);
  const std::size_t dec0 = conv_params(8 + 4, 4) + conv_params(4, 4);
  const std::size_t head = conv_params(4, 2, false);
  EXPECT_EQ(enc0 + enc1 + mid + dec1 + dec0 + head, 7694u);
  EXPECT_EQ(param_count(UNetConfig{}), 7694u);
}

TEST(ParamLayout, GrowsWithBaseChannels) {
  UNetConfig a, b;
  b.base_channels = 2 * a.base_channels;
  EXPECT_GT(param_count(b), param_count(a));
  for (std::size_t stages = 1; stages <= 3; ++stages) {
    UNetConfig c;
    c.num_stages = stages;
    UNetConfig d = c;
    d.base_channels *= 2;
    EXPECT_LT(param_count(c), param_count(d));
  }
}

TEST(ParamLayout, SlicesTileTheVector) {
  for (std::size_t stages = 1; stages <= 3; ++stages)
    for (std::size_t convs = 1; convs <= 3; ++convs) {
      UNetConfig cfg;
      cfg.num_stages = stages;
      cfg.convs_per_stage = convs;
      cfg.base_channels = 3;
      auto layout = param_layout(cfg);
      auto entries = layout.entries;
      std::sort(entries.begin(), entries.end(),
                [](const LayoutEntry& a, const LayoutEntry& b) { return a.offset < b.offset; });
      std::size_t cursor = 0;
      for (const auto& e : entries) {
        EXPECT_EQ(e.offset, cursor) << e.layer;
        cursor += e.size();
      }
      EXPECT_EQ(cursor, layout.total);
      EXPECT_EQ(param_layout(cfg).total, layout.total);
    }
}

TEST(ParamLayout, RejectsInvalidConfig) {
  UNetConfig cfg;
  cfg.num_stages = 0;
  EXPECT_THROW(param_layout(cfg), ContractError);
  cfg = {};
  cfg.base_channels = 0;
  EXPECT_THROW(param_layout(cfg), ContractError);
}

TEST(UNetForward, ZeroThetaGivesUniformSoftmax) {
  auto layout = param_layout({});
  auto theta = Tensor::zeros({layout.total});
  auto logits = unet_forward(layout, theta, random_image({1, 16, 16}, 3));
  const std::size_t plane = 16 * 16;
  for (std::size_t i = 0; i < plane; ++i) EXPECT_EQ(logits[i], logits[plane + i]);
}

TEST(UNetForward, PreservesSpatialDims) {
  auto layout = param_layout({});
  std::mt19937_64 rng(0);
  auto theta = Tensor::from_data({layout.total}, init_unet_params(layout, rng));
  auto logits = unet_forward(layout, theta, random_image({1, 64, 64}, 1));
  EXPECT_EQ(logits.shape(), (Shape{2, 64, 64}));
}

TEST(UNetForward, IndivisibleDimsNameTheMultiple) {
  auto layout = param_layout({});
  auto theta = Tensor::zeros({layout.total});
  try {
    unet_forward(layout, theta, random_image({1, 30, 32}, 1));
    FAIL() << "expected a contract error";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("multiples of 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(unet_forward(layout, theta, random_image({2, 32, 32}, 1)), DimensionError);
  EXPECT_THROW(unet_forward(layout, Tensor::zeros({layout.total - 1}), random_image({1, 32, 32}, 1)),
               DimensionError);
}

TEST(UNetForward, MatchesDirectCompositionOnToyConfig) {
  UNetConfig cfg;
  cfg.num_stages = 1;
  cfg.base_channels = 2;
  cfg.convs_per_stage = 1;
  auto layout = param_layout(cfg);
  std::mt19937_64 rng(11);
  std::vector<float> values = init_unet_params(layout, rng);
  std::normal_distribution<float> jitter(0.0f, 0.3f);
  for (auto& v : values) v += jitter(rng);  // nontrivial biases and affines
  auto theta = Tensor::from_data({layout.total}, values);
  auto image = random_image({1, 8, 8}, 12);

  const auto expected = hypersort::testing::toy_unet_by_hand(values, image);

  auto got = unet_forward(layout, theta, image);
  ASSERT_EQ(got.shape(), expected.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-6);
}

TEST(HyperNet, OutputsStayInsideTheCap) {
  auto layout = param_layout({});
  auto h = init_hyper(layout, {}, 5);
  // Push the final layer far from init so the cap is exercised.
  std::mt19937_64 rng(1);
  std::normal_distribution<float> big(0.0f, 10.0f);
  for (auto& v : h.weights.back().mutable_data()) v = big(rng);
  for (float a : {-50.0f, 0.0f, 3.0f, 200.0f}) {
    auto out = hyper_forward(h, Tensor::from_data({2}, {a, -a}), layout);
    for (float v : out.theta.data()) {
      EXPECT_LT(v, 5.0f);
      EXPECT_GT(v, -5.0f);
    }
  }
}

TEST(HyperNet, InitIsConstantInLambda) {
  auto layout = param_layout({});
  auto h = init_hyper(layout, {}, 9);
  auto ref = hyper_forward(h, Tensor::zeros({2}), layout).theta.to_vector();
  for (float a : {-3.0f, 0.5f, 7.0f}) {
    auto out = hyper_forward(h, Tensor::from_data({2}, {a, 2 * a}), layout).theta.to_vector();
    EXPECT_EQ(out, ref);
  }
}

TEST(HyperNet, InitReproducesTheta0AtZeroLatent) {
  auto layout = param_layout({});
  auto init = init_hyper_with_theta(layout, {}, 4);
  auto out = hyper_forward(init.params, Tensor::zeros({2}), layout).theta;
  double max_err = 0;
  for (std::size_t i = 0; i < layout.total; ++i) {
    max_err = std::max(max_err, std::abs(static_cast<double>(out[i]) - init.theta0[i]));
    EXPECT_LT(std::abs(init.theta0[i]), 5.0f);
  }
  EXPECT_LT(max_err, 1e-6);
}

TEST(HyperNet, SeedsGiveDifferentTheta0) {
  auto layout = param_layout({});
  EXPECT_NE(init_hyper_with_theta(layout, {}, 1).theta0, init_hyper_with_theta(layout, {}, 2).theta0);
  EXPECT_EQ(init_hyper_with_theta(layout, {}, 1).theta0, init_hyper_with_theta(layout, {}, 1).theta0);
}

TEST(HyperNet, RejectsWrongLatentDim) {
  auto layout = param_layout({});
  auto h = init_hyper(layout, {}, 0);
  EXPECT_THROW(hyper_forward(h, Tensor::zeros({3}), layout), DimensionError);
  auto other = param_layout(UNetConfig{1, 2, 1, 2, 1});
  EXPECT_THROW(hyper_forward(h, Tensor::zeros({2}), other), DimensionError);
}

TEST(HyperNet, ParameterCountConservation) {
  for (std::size_t base : {2, 4, 6}) {
    UNetConfig cfg;
    cfg.base_channels = base;
    auto layout = param_layout(cfg);
    std::size_t sum = 0;
    for (const auto& e : layout.entries) sum += e.size();
    auto h = init_hyper(layout, {}, 0);
    EXPECT_EQ(sum, layout.total);
    EXPECT_EQ(h.output_dim(), layout.total);
  }
}

TEST(HyperNet, BatchRowsPermuteWithInputs) {
  auto layout = param_layout(UNetConfig{1, 2, 1, 2, 1});
  auto h = init_hyper(layout, {}, 3);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : h.weights.back().mutable_data()) v = 0.1f * n(rng);
  const std::size_t B = 5, d = 2, P = layout.total;
  std::vector<float> lat(B * d);
  for (auto& v : lat) v = n(rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  std::vector<float> permuted(B * d);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < d; ++j) permuted[i * d + j] = lat[perm[i] * d + j];
  auto out = hyper_forward_batch(h, Tensor::from_data({B, d}, lat));
  auto out_p = hyper_forward_batch(h, Tensor::from_data({B, d}, permuted));
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < P; ++j) EXPECT_EQ(out_p[i * P + j], out[perm[i] * P + j]);
}

TEST(HyperNet, LatentGradientIsNonzeroAndMatchesDifferences) {
  UNetConfig cfg{1, 2, 1, 2, 1};
  auto layout = param_layout(cfg);
  // Perturb the final weights as one training step would, so the map depends on lambda.
  auto h = init_hyper(layout, {2, {8, 8}}, 6).cast<double>();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : h.weights.back().mutable_data()) v = n(rng);
  auto image = random_image({1, 8, 8}, 1);
  std::vector<double> img(image.data().begin(), image.data().end());
  auto dimg = DTensor::from_data({1, 8, 8}, img);
  Tensor mask = Tensor::zeros({8, 8});
  for (std::size_t i = 18; i < 46; ++i) mask.mutable_data()[i] = 1.0f;
  auto lam = DTensor::from_data({2}, {0.3, -0.2}, true);
  auto f = [&] { return dice_ce_loss(unet_forward(hyper_forward(h, lam, layout), dimg), mask).total; };
  auto res = grad_check(f, {lam});
  EXPECT_LT(res.max_rel_error, 1e-3);
  lam.zero_grad();
  backward(f());
  EXPECT_GT(std::abs(lam.grad()[0]) + std::abs(lam.grad()[1]), 0.0);
}

TEST(Gradients, CompositeLossGraphAtSampledCoordinates) {
  UNetConfig cfg{1, 2, 1, 2, 1};
  auto layout = param_layout(cfg);
  auto h = init_hyper(layout, {2, {6, 6}}, 13).cast<double>();
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : h.weights.back().mutable_data()) v = n(rng);
  auto image = random_image({1, 8, 8}, 2);
  auto dimg = DTensor::from_data({1, 8, 8}, std::vector<double>(image.data().begin(), image.data().end()));
  Tensor mask = Tensor::zeros({8, 8});
  for (std::size_t r = 2; r < 6; ++r)
    for (std::size_t c = 1; c < 6; ++c) mask.mutable_data()[r * 8 + c] = 1.0f;
  auto lam = DTensor::from_data({2}, {0.4, 0.1}, true);
  auto f = [&] {
    auto seg = dice_ce_loss(unet_forward(hyper_forward(h, lam, layout), dimg), mask);
    return add(seg.total, l1_reg(lam, 0.01));
  };
  auto leaves = h.parameters();
  leaves.push_back(lam);
  auto res = grad_check(f, leaves, 1e-3, 100, 5);
  EXPECT_EQ(res.coordinates, 100u);
  EXPECT_LT(res.max_rel_error, 1e-3);
}

namespace {

// Constant background with one flat-intensity blob taken from a phantom mask.
Tensor flat_image(const Tensor& mask, int shift) {
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  std::vector<float> v(h * w, 0.2f);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const long src = static_cast<long>(c) - shift;
      if (src >= 0 && src < static_cast<long>(w) && mask[r * w + src] > 0) v[r * w + c] = 0.7f;
    }
  return Tensor::from_data({1, h, w}, std::move(v));
}

}  // namespace

TEST(UNetForward, TrainedModelIsTranslationConsistent) {
  const std::size_t H = 32, W = 32;
  std::mt19937_64 rng(4);
  DatasetManifest m;
  m.height = H;
  m.width = W;
  std::vector<Sample> samples;
  for (int i = 0; i < 8; ++i) {
    auto p = render_phantom(H, W, rng);
    samples.push_back({flat_image(p.mask, 0), p.mask});
  }
  // Direct optimisation of a plain UNet on in-memory samples.
  auto layout = param_layout({});
  std::mt19937_64 init_rng(1);
  auto theta = Tensor::from_data({layout.total}, init_unet_params(layout, init_rng), true);
  AdamState st(layout.total);
  for (int step = 0; step < 300; ++step) {
    const auto& s = samples[step % samples.size()];
    backward(dice_ce_loss(unet_forward(layout, theta, s.image), s.mask).total);
    adam_step(theta.mutable_data(), theta.grad(), st, {3e-3});
    theta.zero_grad();
  }
  auto frozen = theta.detach();
  auto probe = render_phantom(H, W, rng).mask;
  auto base = argmax_channels(unet_forward(layout, frozen, flat_image(probe, 0)));
  auto moved = argmax_channels(unet_forward(layout, frozen, flat_image(probe, 2)));
  std::size_t agree = 0, total = 0;
  for (std::size_t r = 8; r < H - 8; ++r)
    for (std::size_t c = 8; c < W - 8; ++c) {
      ++total;
      agree += moved[r * W + c] == base[r * W + c - 2];
    }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(total), 0.95);
  EXPECT_GT(dice_coefficient(base, probe), 0.8);
}
