// Acceptance runner. Usage:
//   hypersort_acceptance <prepare|A1|...|A7|all> [--work DIR]
// `prepare` builds the shared artifacts (dataset, trained models) under DIR;
// the training-based criteria reuse them and build whatever is missing.
// Prints one `<id> PASS|FAIL ...` line per criterion; exit 0 iff all passed.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../gradcheck.hpp"
#include "../oracles.hpp"
#include "../primitive_cases.hpp"
#include "hypersort/checkpoint.hpp"
#include "hypersort/cli.hpp"
#include "hypersort/hypernet.hpp"
#include "hypersort/latent_analysis.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/objectives.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/training.hpp"
#include "hypersort/unet.hpp"

using namespace hypersort;
using namespace hypersort::testing;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned protocol

constexpr std::uint64_t kDataSeed = 1;
constexpr std::size_t kSamples = 200, kSize = 64;
constexpr std::uint64_t kTestSetSeed = 1001;
constexpr std::size_t kTestSamples = 30;
constexpr std::size_t kClusters = 3;
constexpr std::uint64_t kClusterSeed = 0;
const std::vector<std::uint64_t> kPlainSeeds = {11, 12, 13};

TrainConfig hyper_config() {
  TrainConfig c;
  c.lr = 1e-3;
  c.latent_lr = 1e-2;
  c.alpha = 0.05;
  c.steps = 20000;
  c.seed = 3;
  c.early_stop = false;
  return c;
}

TrainConfig plain_config(std::uint64_t seed) {
  TrainConfig c;
  c.lr = 1e-3;
  c.steps = 10000;
  c.seed = seed;
  c.early_stop = false;
  return c;
}

// ---------------------------------------------------------------------------

struct Outcome {
  bool pass;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {}

  const DatasetManifest& data() {
    if (!data_) data_ = dataset(root_ / "data", kSamples, kDataSeed, {0.85, 0.075, 0.075});
    return *data_;
  }

  const DatasetManifest& test_set() {
    if (!test_) test_ = dataset(root_ / "test", kTestSamples, kTestSetSeed, {0.85, 0.075, 0.075});
    return *test_;
  }

  const Checkpoint& hyper() {
    if (!hyper_) {
      hyper_ = cached(root_ / "hyper.hsc", [&] {
        log("training hyper-network (" + std::to_string(hyper_config().steps) + " steps)");
        return train(data(), hyper_config());
      });
    }
    return *hyper_;
  }

  // Plain UNet on a seeded half of the clean samples, for Test-Dice.
  const Checkpoint& test_dice_model() {
    if (!test_dice_) {
      test_dice_ = cached(root_ / "test_dice.hsc", [&] {
        const auto cfg = plain_config(hyper_config().seed);
        const auto clean = select_ids(data(), [](const SampleRecord& r) { return r.perturbation_magnitude == 0; });
        log("training Test-Dice UNet");
        return train_plain_unet(data(), cli::seeded_half(clean, cfg.seed), cfg);
      });
    }
    return *test_dice_;
  }

  // Plain UNets on the full (noisy) training set, one per seed.
  const Checkpoint& plain(std::uint64_t seed) {
    auto it = plain_.find(seed);
    if (it == plain_.end()) {
      auto ck = cached(root_ / ("plain_" + std::to_string(seed) + ".hsc"), [&] {
        log("training plain UNet seed " + std::to_string(seed));
        return train_plain_unet(data(), select_ids(data(), [](const SampleRecord&) { return true; }),
                                plain_config(seed));
      });
      it = plain_.emplace(seed, std::move(ck)).first;
    }
    return it->second;
  }

  const LatentMap& latent_map() {
    if (!map_) {
      map_ = build_latent_map(hyper(), data());
      cluster_latent_map(*map_, kClusters, kClusterSeed);
    }
    return *map_;
  }

  const fs::path& root() const { return root_; }

 private:
  static void log(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

  static DatasetManifest dataset(const fs::path& dir, std::size_t n, std::uint64_t seed, StyleFractions f) {
    GenerateOptions opt;
    opt.count = n;
    opt.height = opt.width = kSize;
    opt.seed = seed;
    opt.fractions = f;
    if (fs::exists(dir / "manifest.json")) {
      auto m = load_manifest(dir / "manifest.json");
      if (m.seed == seed && m.records.size() == n && m.height == kSize) return m;
    }
    fs::remove_all(dir);
    return generate_dataset(opt, dir);
  }

  Checkpoint cached(const fs::path& path, const std::function<Checkpoint()>& make) {
    if (fs::exists(path)) {
      auto ck = load_checkpoint(path);
      if (ck.dataset_fingerprint == dataset_fingerprint(data())) return ck;
    }
    auto ck = make();
    save_checkpoint(ck, path);
    return ck;
  }

  fs::path root_;
  std::optional<DatasetManifest> data_, test_;
  std::optional<Checkpoint> hyper_, test_dice_;
  std::map<std::uint64_t, Checkpoint> plain_;
  std::optional<LatentMap> map_;
};

// ---------------------------------------------------------------------------
// A1 gradient integrity

Outcome a1(Workspace&) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t primitive_coords = 0;
  for (const auto& pc : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(5000 + seed);
      auto [leaves, f] = pc.build(rng, seed);
      const auto r = grad_check(f, leaves);
      primitive_coords += r.coordinates;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = pc.name;
    }
  }

  // Full objective on a 1-stage toy UNet: hyper-network -> UNet -> Dice+CE + L1.
  UNetConfig cfg;
  cfg.num_stages = 1;
  cfg.base_channels = 2;
  cfg.convs_per_stage = 1;
  const auto layout = param_layout(cfg);
  auto h = init_hyper(layout, {2, {8, 8}}, 17).cast<double>();
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : h.weights.back().mutable_data()) v = n(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> img(64);
  for (auto& v : img) v = u(rng);
  const auto image = DTensor::from_data({1, 8, 8}, img);
  Tensor mask = Tensor::zeros({8, 8});
  for (std::size_t r = 2; r < 7; ++r)
    for (std::size_t c = 2; c < 6; ++c) mask.mutable_data()[r * 8 + c] = 1.0f;
  auto lam = DTensor::from_data({2}, {0.35, -0.15}, true);
  auto total = [&] {
    auto seg = dice_ce_loss(unet_forward(hyper_forward(h, lam, layout), image), mask);
    return add(seg.total, l1_reg(lam, 0.01));
  };
  auto leaves = h.parameters();
  leaves.push_back(lam);
  const auto full = grad_check(total, leaves, 1e-3, 100, 9, true);
  const double secs = seconds_since(t0);

  const bool pass = worst < 1e-3 && full.max_rel_error < 1e-3 && full.coordinates >= 100 && secs < 60;
  return {pass, "primitives max_rel=" + num(worst) + " (" + worst_name + ", " + std::to_string(primitive_coords) +
                    " coords) full_graph max_rel=" + num(full.max_rel_error) + " at " +
                    std::to_string(full.coordinates) + " coords (" + std::to_string(full.nonsmooth) +
                    " kink-straddling resampled); tol 1e-3; " + num(secs) + "s (< 60s)"};
}

// ---------------------------------------------------------------------------
// A2 cluster separation

Outcome a2(Workspace& w) {
  const auto& map = w.latent_map();
  std::vector<std::size_t> clusters;
  std::vector<std::string> styles;
  for (const auto& r : map.records) {
    clusters.push_back(*r.cluster);
    styles.push_back(r.true_style);
  }
  const double purity = cluster_purity(clusters, styles);
  std::string sizes;
  for (const auto& c : map.clusters) sizes += (sizes.empty() ? "" : "/") + std::to_string(c.size);
  return {purity >= 0.90 && w.hyper().step <= 20000,
          "purity=" + num(purity) + " (>= 0.90) k=3 sizes=" + sizes + " steps=" + std::to_string(w.hyper().step)};
}

// ---------------------------------------------------------------------------
// A3 outlier detection

Outcome a3(Workspace& w) {
  const auto& map = w.latent_map();
  std::vector<double> norm, md, mag;
  for (const auto& r : map.records) {
    norm.push_back(r.norm);
    md.push_back(r.mean_distance);
    mag.push_back(std::abs(r.perturbation_magnitude));
  }
  const double rho_norm = spearman(norm, mag).value_or(-1), rho_md = spearman(md, mag).value_or(-1);

  // Test-Dice can only score samples its UNet did not train on; compare all
  // three predictors on exactly those samples.
  const auto td = cli::test_dice_scores(w.test_dice_model(), w.data());
  std::vector<double> h_norm, h_md, h_td, h_mag;
  for (const auto& r : map.records) {
    auto it = td.find(r.id);
    if (it == td.end()) continue;
    h_norm.push_back(r.norm);
    h_md.push_back(r.mean_distance);
    h_td.push_back(it->second);
    h_mag.push_back(std::abs(r.perturbation_magnitude));
  }
  const double rho_td = spearman(h_td, h_mag).value_or(-1);
  const double rho_norm_h = spearman(h_norm, h_mag).value_or(-1), rho_md_h = spearman(h_md, h_mag).value_or(-1);

  const bool pass = rho_norm >= 0.5 && rho_md >= 0.4 && rho_norm_h > rho_td && rho_md_h > rho_td;
  return {pass, "all " + std::to_string(map.records.size()) + ": rho_norm=" + num(rho_norm) +
                    " (>= 0.5) rho_mean_distance=" + num(rho_md) + " (>= 0.4); held-out " +
                    std::to_string(h_td.size()) + ": rho_norm=" + num(rho_norm_h) + " rho_mean_distance=" +
                    num(rho_md_h) + " vs rho_test_dice=" + num(rho_td) + " (must exceed)"};
}

// ---------------------------------------------------------------------------
// A4 correction property

Outcome a4(Workspace& w) {
  const Predictor model(w.hyper());
  const std::vector<float> origin(w.hyper().config.latent_dim, 0.0f);
  std::size_t better = 0, total = 0;
  for (const auto& rec : w.data().records) {
    if (rec.perturbation_magnitude == 0) continue;
    const auto s = load_sample(w.data(), rec);
    const auto clean = load_clean(w.data(), rec);
    const double pred = dice_coefficient(model.predict(origin, s.image).mask, clean);
    better += pred > dice_coefficient(s.mask, clean);
    ++total;
  }
  const double frac = total ? static_cast<double>(better) / static_cast<double>(total) : 0.0;
  return {total > 0 && frac >= 0.80,
          std::to_string(better) + "/" + std::to_string(total) + " perturbed samples improved = " + num(frac) +
              " (>= 0.80)"};
}

// ---------------------------------------------------------------------------
// A5 diversity property

Outcome a5(Workspace& w) {
  const auto& test = w.test_set();
  std::vector<Tensor> images, refs;
  for (const auto& rec : test.records) {
    images.push_back(load_sample(test, rec).image);
    refs.push_back(load_clean(test, rec));
  }
  auto predict_all = [&](const Predictor& p, const std::vector<float>& lam) {
    std::vector<Tensor> out;
    for (const auto& im : images) out.push_back(p.predict(lam, im).mask);
    return out;
  };

  const Predictor hyper(w.hyper());
  std::vector<std::vector<Tensor>> centroid_preds;
  for (const auto& c : w.latent_map().clusters)
    centroid_preds.push_back(predict_all(hyper, std::vector<float>(c.centroid.begin(), c.centroid.end())));
  std::vector<std::vector<Tensor>> plain_preds;
  for (auto seed : kPlainSeeds) plain_preds.push_back(predict_all(Predictor(w.plain(seed)), {}));

  const auto hs = prediction_diversity(centroid_preds, refs);
  const auto ps = prediction_diversity(plain_preds, refs);
  const double best_single = *std::max_element(hs.mean_dice.begin(), hs.mean_dice.end());
  const bool pass = hs.mean_std > ps.mean_std && hs.mean_best >= best_single;
  return {pass, "centroid dice std=" + num(hs.mean_std) + " vs seed UNets std=" + num(ps.mean_std) +
                    " (must exceed); best-of-3=" + num(hs.mean_best) + " >= best single=" + num(best_single) +
                    " on " + std::to_string(refs.size()) + " held-out cases"};
}

// ---------------------------------------------------------------------------
// A6 oracle equivalences

Outcome a6(Workspace&) {
  std::mt19937_64 rng(606);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> grid(0, 2);
  std::size_t instances = 0, kmeans_fail = 0;
  for (std::size_t n = 1; n <= 8; ++n)
    for (std::size_t k = 1; k <= std::min<std::size_t>(3, n); ++k)
      for (int rep = 0; rep < 20; ++rep) {
        std::vector<Point> pts(n, Point(2));
        // Every fourth instance on a coarse grid, so duplicates and ties occur.
        for (auto& p : pts)
          for (auto& v : p) v = rep % 4 == 3 ? grid(rng) : g(rng);
        const double opt = brute_force_wcss(pts, k);
        const double got = kmeans(pts, k, static_cast<std::uint64_t>(rep)).wcss;
        kmeans_fail += std::abs(got - opt) > 1e-9 * std::max(1.0, opt);
        ++instances;
      }

  std::uniform_int_distribution<int> len(3, 50), coarse(0, 6);
  double spearman_worst = 0;
  std::size_t vectors = 0;
  while (vectors < 1000) {
    std::vector<double> x(static_cast<std::size_t>(len(rng))), y(x.size());
    const bool ties = vectors % 2 == 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = ties ? coarse(rng) : g(rng);
      y[i] = ties ? coarse(rng) : g(rng) + 0.3 * x[i];
    }
    const auto s = spearman(x, y);
    if (!s) continue;  // constant sample, no correlation defined
    spearman_worst = std::max(spearman_worst, std::abs(*s - reference_spearman(x, y)));
    ++vectors;
  }

  UNetConfig cfg;
  cfg.num_stages = 1;
  cfg.base_channels = 2;
  cfg.convs_per_stage = 1;
  const auto layout = param_layout(cfg);
  std::mt19937_64 prng(66);
  auto values = init_unet_params(layout, prng);
  std::normal_distribution<float> jitter(0.0f, 0.3f);
  for (auto& v : values) v += jitter(prng);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> img(64);
  for (auto& v : img) v = u(prng);
  const auto image = Tensor::from_data({1, 8, 8}, img);
  const auto got = unet_forward(layout, Tensor::from_data({layout.total}, values), image);
  const auto ref = toy_unet_by_hand(values, image);
  double unet_worst = 0;
  for (std::size_t i = 0; i < got.numel(); ++i)
    unet_worst = std::max(unet_worst, std::abs(static_cast<double>(got[i]) - ref[i]));

  const bool pass = kmeans_fail == 0 && spearman_worst < 1e-9 && unet_worst < 1e-6;
  char sbuf[32], ubuf[32];
  std::snprintf(sbuf, sizeof sbuf, "%.2e", spearman_worst);
  std::snprintf(ubuf, sizeof ubuf, "%.2e", unet_worst);
  return {pass, "kmeans optimal on " + std::to_string(instances - kmeans_fail) + "/" + std::to_string(instances) +
                    " instances; spearman max|d|=" + sbuf + " over 1000 vectors (< 1e-9); toy UNet max|d|=" + ubuf +
                    " (< 1e-6)"};
}

// ---------------------------------------------------------------------------
// A7 determinism and checkpoint resume

Outcome a7(Workspace& w) {
  auto cfg = hyper_config();
  cfg.steps = 500;
  const auto a = encode_checkpoint(train(w.data(), cfg));
  const auto b = encode_checkpoint(train(w.data(), cfg));

  auto half = cfg;
  half.steps = 250;
  const auto mid = w.root() / "a7_step250.hsc";
  save_checkpoint(train(w.data(), half), mid);
  HyperTrainer resumed(w.data(), load_checkpoint(mid));
  resumed.set_total_steps(500);
  resumed.run();
  const auto c = encode_checkpoint(resumed.checkpoint());

  return {a == b && a == c, std::string("two seeded runs to step 500 ") + (a == b ? "bit-identical" : "DIFFER") +
                                "; resume at 250 -> 500 " + (a == c ? "bit-identical" : "DIFFERS") +
                                " to the straight run (" + std::to_string(a.size()) + " bytes)"};
}

const std::vector<std::pair<std::string, std::function<Outcome(Workspace&)>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome(Workspace&)>>> all = {
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5}, {"A6", a6}, {"A7", a7}};
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  std::string which = argc > 1 ? argv[1] : "all";
  fs::path work = fs::temp_directory_path() / "hypersort_acceptance";
  for (int i = 2; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--work") work = argv[i + 1];
  fs::create_directories(work);
  Workspace ws(work);

  try {
    if (which == "prepare") {
      const auto t0 = std::chrono::steady_clock::now();
      ws.hyper();
      ws.test_dice_model();
      for (auto s : kPlainSeeds) ws.plain(s);
      ws.test_set();
      std::cout << "prepared " << work.string() << " in " << num(seconds_since(t0)) << "s" << std::endl;
      return 0;
    }
    bool all_pass = true, matched = false;
    for (const auto& [id, run] : criteria()) {
      if (which != "all" && which != id) continue;
      matched = true;
      const auto t0 = std::chrono::steady_clock::now();
      const Outcome o = run(ws);
      std::cout << id << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << o.detail << " [" << num(seconds_since(t0))
                << "s]" << std::endl;
      all_pass = all_pass && o.pass;
    }
    if (!matched) {
      std::cerr << "unknown criterion '" << which << "'; expected prepare, A1..A7 or all\n";
      return 2;
    }
    return all_pass ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << which << " FAIL error: " << e.what() << std::endl;
    return 1;
  }
}
