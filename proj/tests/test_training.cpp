#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hypersort/adam.hpp"
#include "hypersort/checkpoint.hpp"
#include "hypersort/latent_analysis.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/train_config.hpp"
#include "hypersort/training.hpp"

using namespace hypersort;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hypersort_train_" + name);
  fs::remove_all(p);
  return p;
}

DatasetManifest small_dataset(const std::string& name, std::size_t n, std::uint64_t seed,
                              StyleFractions f = {}) {
  GenerateOptions opt;
  opt.count = n;
  opt.height = opt.width = 32;
  opt.seed = seed;
  opt.fractions = f;
  return generate_dataset(opt, scratch(name));
}

TrainConfig quick_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.lr = 1e-3;
  cfg.latent_lr = 1e-3;
  cfg.seed = 5;
  cfg.early_stop = false;
  return cfg;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + from, v.begin() + to, 0.0) / static_cast<double>(to - from);
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepMatchesHandFormula) {
  const double lr = 1e-3, b2 = 0.999, eps = 1e-8;
  for (float g : {0.5f, -2.0f, 1e-3f, 30.0f}) {
    std::vector<float> p = {1.0f}, grad = {g};
    AdamState st(1);
    adam_step(p, grad, st, {lr});
    const double expected = -lr * g / (std::abs(g) + eps * std::sqrt(1 - b2));
    EXPECT_NEAR(p[0] - 1.0, expected, 1e-7) << g;
    EXPECT_EQ(st.t, 1u);
  }
}

TEST(Adam, ZeroGradientFromRestIsANoOp) {
  std::vector<float> p = {0.3f, -1.0f}, g = {0.0f, 0.0f};
  AdamState st(2);
  for (int i = 0; i < 5; ++i) adam_step(p, g, st, {});
  EXPECT_EQ(p, (std::vector<float>{0.3f, -1.0f}));
  EXPECT_EQ(st.m, (std::vector<float>{0.0f, 0.0f}));
}

TEST(Adam, ZeroGradientDecaysMoments) {
  std::vector<float> p = {0.0f}, g = {0.0f};
  AdamState st(1);
  st.m = {0.5f};
  st.v = {0.25f};
  st.t = 3;
  adam_step(p, g, st, {});
  EXPECT_FLOAT_EQ(st.m[0], 0.9f * 0.5f);
  EXPECT_FLOAT_EQ(st.v[0], 0.999f * 0.25f);
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  const double lr = 1e-2;
  std::vector<float> p = {0.0f}, g = {-4.0f};
  AdamState st(1);
  float prev = p[0];
  for (int i = 0; i < 2000; ++i) {
    prev = p[0];
    adam_step(p, g, st, {lr});
  }
  EXPECT_NEAR(p[0] - prev, lr, 1e-5);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
  std::vector<float> p(3), g(2);
  AdamState st(3);
  EXPECT_THROW(adam_step(p, g, st, {}), DimensionError);
}

// ---------------------------------------------------------------------------
// Config

TEST(TrainConfig, KeyValueAndJsonForms) {
  auto kv = parse_key_value_config(
      "# comment\nlr = 0.002\nsteps=300\nunet.base_channels=8\nhidden=20,30\nearly_stop=false\n");
  EXPECT_DOUBLE_EQ(kv.lr, 0.002);
  EXPECT_EQ(kv.steps, 300u);
  EXPECT_EQ(kv.unet.base_channels, 8u);
  EXPECT_EQ(kv.hidden, (std::vector<std::size_t>{20, 30}));
  EXPECT_FALSE(kv.early_stop);
  EXPECT_EQ(kv.alpha, TrainConfig{}.alpha);

  auto back = train_config_from_json(to_json(kv));
  EXPECT_EQ(back, kv);
  EXPECT_EQ(config_fingerprint(back), config_fingerprint(kv));
  EXPECT_NE(config_fingerprint(kv), config_fingerprint(TrainConfig{}));

  auto dir = scratch("cfg");
  detail::write_file(dir / "a.json", to_json(kv).dump());
  detail::write_file(dir / "b.cfg", "lr=0.002\nsteps=300\nunet.base_channels=8\nhidden=20,30\nearly_stop=false\n");
  EXPECT_EQ(load_train_config(dir / "a.json"), kv);
  EXPECT_EQ(load_train_config(dir / "b.cfg"), kv);
  fs::remove_all(dir);
}

TEST(TrainConfig, InvalidValues) {
  EXPECT_THROW(parse_key_value_config("lr\n"), FormatError);
  EXPECT_THROW(parse_key_value_config("lr=abc\n"), FormatError);
  TrainConfig c;
  c.lr = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.steps = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = {};
  c.latent_lr = -1;
  EXPECT_THROW(c.validate(), ContractError);
}

// ---------------------------------------------------------------------------
// Hyper training

class EightSamples : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { manifest_ = new DatasetManifest(small_dataset("eight", 8, 3)); }
  static void TearDownTestSuite() {
    fs::remove_all(manifest_->root);
    delete manifest_;
  }
  static DatasetManifest* manifest_;
};

DatasetManifest* EightSamples::manifest_ = nullptr;

TEST_F(EightSamples, SmokeRunReducesLoss) {
  std::vector<double> totals;
  train(*manifest_, quick_config(50), [&](const StepRecord& r) { totals.push_back(r.loss.total); });
  ASSERT_EQ(totals.size(), 50u);
  EXPECT_LT(mean_of(totals, 40, 50), mean_of(totals, 0, 10));
}

TEST_F(EightSamples, LoggedTotalIsAdditive) {
  std::ostringstream log;
  LossLog writer(log);
  std::vector<StepRecord> records;
  train(*manifest_, quick_config(20), [&](const StepRecord& r) {
    records.push_back(r);
    writer.write(r);
  });
  for (const auto& r : records) {
    EXPECT_NEAR(r.loss.seg_total, r.loss.dice + r.loss.cross_entropy, 1e-6);
    EXPECT_NEAR(r.loss.total, r.loss.seg_total + r.loss.latent_l1, 1e-6);
    EXPECT_GT(r.loss.latent_l1, 0.0);
  }
  std::istringstream in(log.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,sample_id,dice,ce,l1,total");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
  }
  EXPECT_EQ(rows, 20u);
}

TEST_F(EightSamples, StepTouchesOnlyItsOwnLatent) {
  HyperTrainer t(*manifest_, quick_config(10));
  for (int s = 0; s < 5; ++s) {
    std::vector<std::vector<float>> before;
    for (const auto& l : t.latents().values) before.push_back(l.to_vector());
    const auto recs = t.train_step();
    ASSERT_EQ(recs.size(), 1u);
    const std::size_t n = t.latents().index_of(recs[0].sample_id);
    for (std::size_t m = 0; m < t.latents().size(); ++m) {
      const auto& lam = t.latents().values[m];
      if (m == n) {
        EXPECT_NE(lam.to_vector(), before[m]);
      } else {
        EXPECT_EQ(lam.to_vector(), before[m]);
      }
      if (lam.has_grad()) {
        for (float g : lam.grad()) EXPECT_EQ(g, 0.0f);
      }
    }
  }
}

TEST_F(EightSamples, EpochsVisitEverySampleOnce) {
  HyperTrainer t(*manifest_, quick_config(16));
  std::vector<std::string> seen;
  t.run([&](const StepRecord& r) { seen.push_back(r.sample_id); });
  for (std::size_t e = 0; e < 2; ++e) {
    std::vector<std::string> epoch(seen.begin() + e * 8, seen.begin() + (e + 1) * 8);
    std::sort(epoch.begin(), epoch.end());
    EXPECT_TRUE(std::adjacent_find(epoch.begin(), epoch.end()) == epoch.end());
  }
}

TEST_F(EightSamples, LargeAlphaCollapsesLatents) {
  auto cfg = quick_config(400);
  cfg.alpha = 10;
  auto ck = train(*manifest_, cfg);
  for (const auto& lam : ck.latents.values) {
    double s = 0;
    for (float v : lam.data()) s += v * v;
    EXPECT_LT(std::sqrt(s), 0.01);
  }
}

TEST_F(EightSamples, FullBatchLossHalvesWithin200Steps) {
  auto cfg = quick_config(201);
  cfg.batch_size = 8;
  std::vector<double> step_total(201, 0.0);
  train(*manifest_, cfg, [&](const StepRecord& r) { step_total[r.step] += r.loss.total / 8; });
  EXPECT_LT(step_total[200], 0.5 * step_total[0]);
}

TEST_F(EightSamples, BatchedStepAveragesNetworkGradients) {
  auto cfg = quick_config(3);
  cfg.batch_size = 4;
  HyperTrainer t(*manifest_, cfg);
  const auto recs = t.train_step();
  EXPECT_EQ(recs.size(), 4u);
  EXPECT_EQ(t.step(), 1u);
  // Only the four sampled latents moved, each by one Adam step.
  std::size_t moved = 0;
  for (const auto& m : t.latents().moments) moved += m.t == 1;
  EXPECT_EQ(moved, 4u);
}

TEST_F(EightSamples, SameSeedGivesBitIdenticalCheckpoints) {
  const auto a = encode_checkpoint(train(*manifest_, quick_config(30)));
  const auto b = encode_checkpoint(train(*manifest_, quick_config(30)));
  EXPECT_EQ(a, b);
  auto other = quick_config(30);
  other.seed = 6;
  EXPECT_NE(a, encode_checkpoint(train(*manifest_, other)));
}

TEST_F(EightSamples, ResumeMatchesStraightRun) {
  const auto cfg = quick_config(24);
  const auto straight = encode_checkpoint(train(*manifest_, cfg));
  HyperTrainer first(*manifest_, cfg);
  first.run({}, 12);
  auto path = scratch("resume") / "half.hsc";
  save_checkpoint(first.checkpoint(), path);
  HyperTrainer second(*manifest_, load_checkpoint(path));
  EXPECT_EQ(second.step(), 12u);
  second.run();
  EXPECT_EQ(encode_checkpoint(second.checkpoint()), straight);
  fs::remove_all(path.parent_path());
}

TEST_F(EightSamples, CheckpointRoundTripAndErrors) {
  const auto ck = train(*manifest_, quick_config(5));
  const auto bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "HSC1");
  const auto back = decode_checkpoint(bytes, "mem");
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.latents.ids, ck.latents.ids);
  EXPECT_EQ(bytes.find("time"), std::string::npos);

  auto dir = scratch("ckerr");
  auto bad = bytes;
  bad[1] = 'X';
  detail::write_file(dir / "bad.hsc", bad);
  try {
    load_checkpoint(dir / "bad.hsc");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "bad.hsc").string()), std::string::npos);
  }
  detail::write_file(dir / "short.hsc", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(dir / "short.hsc"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "none.hsc"), IoError);

  auto other = small_dataset("other", 8, 99);
  EXPECT_THROW(HyperTrainer(other, ck), DataError);
  fs::remove_all(other.root);
  fs::remove_all(dir);
}

TEST_F(EightSamples, MissingSampleIsDataError) {
  auto m = *manifest_;
  m.records[2].image_path = "images/absent.tns";
  EXPECT_THROW(HyperTrainer(m, quick_config(1)), DataError);
}

TEST(Training, NonFiniteLossNamesStepAndSample) {
  auto m = small_dataset("nan", 4, 1);
  const auto& rec = m.records[1];
  auto img = read_tns(m.root / rec.image_path);
  img.mutable_data()[7] = std::numeric_limits<float>::quiet_NaN();
  write_tns(m.root / rec.image_path, img);
  HyperTrainer t(m, quick_config(8));
  try {
    t.run();
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("step"), std::string::npos) << what;
    EXPECT_NE(what.find(rec.id), std::string::npos) << what;
  }
  fs::remove_all(m.root);
}

TEST(Training, EarlyStopTriggersOnFlatLoss) {
  TrainConfig cfg;
  cfg.early_stop_window = 4;
  cfg.early_stop_patience = 2;
  EarlyStopState es;
  for (int i = 0; i < 8; ++i) detail::update_early_stop(es, cfg, 1.0 - 0.1 * (i / 4));
  EXPECT_FALSE(es.stopped);
  for (int i = 0; i < 8; ++i) detail::update_early_stop(es, cfg, 0.9);
  EXPECT_TRUE(es.stopped);
}

// ---------------------------------------------------------------------------
// Plain UNet

TEST(PlainUNet, ConvergesDeterministicallyAndSeparatesStyles) {
  auto m = small_dataset("plain", 32, 11, {0.5, 0.25, 0.25});
  const auto clean = select_ids(m, [](const SampleRecord& r) { return r.perturbation_magnitude == 0; });
  const std::vector<std::string> train_ids(clean.begin(), clean.begin() + 8);
  auto cfg = quick_config(400);
  cfg.lr = 3e-3;
  std::vector<double> seg;
  auto ck = train_plain_unet(m, train_ids, cfg, [&](const StepRecord& r) { seg.push_back(r.loss.seg_total); });
  EXPECT_LT(mean_of(seg, seg.size() - 20, seg.size()), mean_of(seg, 0, 20));
  EXPECT_EQ(ck.theta, train_plain_unet(m, train_ids, cfg).theta);

  Predictor model(ck);
  double clean_dice = 0, perturbed_dice = 0;
  std::size_t nc = 0, np = 0;
  for (const auto& rec : m.records) {
    if (std::find(train_ids.begin(), train_ids.end(), rec.id) != train_ids.end()) continue;
    const auto s = load_sample(m, rec);
    const double d = dice_coefficient(model.predict({}, s.image).mask, s.mask);
    if (rec.perturbation_magnitude == 0) {
      clean_dice += d, ++nc;
    } else {
      perturbed_dice += d, ++np;
    }
  }
  ASSERT_GT(nc, 0u);
  ASSERT_GT(np, 0u);
  EXPECT_LT(perturbed_dice / np, clean_dice / nc);

  EXPECT_THROW(train_plain_unet(m, {}, cfg), ContractError);
  EXPECT_THROW(train_plain_unet(m, {"s9999"}, cfg), DataError);
  fs::remove_all(m.root);
}
