#pragma once

// Downstream of training: clustering of the latent table, outlier scores,
// rank correlation, inference at chosen latents and predictor diversity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "hypersort/checkpoint.hpp"
#include "hypersort/error.hpp"
#include "hypersort/hypernet.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/objectives.hpp"
#include "hypersort/ops.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/training.hpp"
#include "hypersort/unet.hpp"

namespace hypersort {

using Point = std::vector<double>;

inline double squared_distance(const Point& a, const Point& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double euclidean_norm(const Point& a) {
  double s = 0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  std::vector<std::size_t> assignment;  // cluster per point
  std::vector<Point> centroids;
  double wcss = 0;
  // WCSS after each assignment pass of the winning restart.
  std::vector<double> wcss_history;
};

namespace detail {

inline double wcss_of(const std::vector<Point>& pts, const std::vector<std::size_t>& assign,
                      const std::vector<Point>& centroids) {
  double s = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) s += squared_distance(pts[i], centroids[assign[i]]);
  return s;
}

inline std::vector<Point> kmeanspp_seed(const std::vector<Point>& pts, std::size_t k, std::mt19937_64& rng) {
  std::vector<Point> centers;
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  centers.push_back(pts[pick(rng)]);
  std::vector<double> d2(pts.size());
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, squared_distance(pts[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t chosen = 0;
    if (total <= 0) {
      chosen = pick(rng);
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      chosen = pts.size() - 1;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (d2[i] <= 0) continue;
        if (r < d2[i]) {
          chosen = i;
          break;
        }
        r -= d2[i];
      }
      while (d2[chosen] <= 0) --chosen;  // guard against rounding at the tail
    }
    centers.push_back(pts[chosen]);
  }
  return centers;
}

inline KMeansResult lloyd(const std::vector<Point>& pts, std::vector<Point> centroids, std::size_t max_iter) {
  const std::size_t n = pts.size(), k = centroids.size(), d = pts[0].size();
  KMeansResult r;
  r.assignment.assign(n, k);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = squared_distance(pts[i], centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double dc = squared_distance(pts[i], centroids[c]);
        if (dc < bd) bd = dc, best = c;
      }
      if (r.assignment[i] != best) changed = true, r.assignment[i] = best;
    }
    // An empty cluster takes over the point farthest from its own centroid.
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t a : r.assignment) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double fd = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[r.assignment[i]] < 2) continue;
        const double di = squared_distance(pts[i], centroids[r.assignment[i]]);
        if (di > fd) fd = di, far = i;
      }
      if (far == n) continue;
      --counts[r.assignment[far]];
      r.assignment[far] = c;
      counts[c] = 1;
      changed = true;
    }
    r.wcss_history.push_back(wcss_of(pts, r.assignment, centroids));
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      Point sum(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (r.assignment[i] == c)
          for (std::size_t j = 0; j < d; ++j) sum[j] += pts[i][j];
      for (std::size_t j = 0; j < d; ++j) centroids[c][j] = sum[j] / static_cast<double>(counts[c]);
    }
    if (!changed && iter > 0) break;
  }
  r.centroids = std::move(centroids);
  r.wcss = wcss_of(pts, r.assignment, r.centroids);
  r.wcss_history.push_back(r.wcss);
  return r;
}

// Single-point transfers (Hartigan): move a point whenever doing so lowers
// WCSS once both centroids are updated. Leaves a Lloyd fixed point that is
// also stable under every one-point move.
inline void refine_by_transfers(const std::vector<Point>& pts, KMeansResult& r, std::size_t max_pass) {
  const std::size_t n = pts.size(), k = r.centroids.size(), d = pts[0].size();
  std::vector<double> counts(k, 0.0);
  for (std::size_t a : r.assignment) counts[a] += 1;
  for (std::size_t pass = 0; pass < max_pass; ++pass) {
    bool moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t from = r.assignment[i];
      if (counts[from] < 2) continue;
      const double cost_out = counts[from] / (counts[from] - 1) * squared_distance(pts[i], r.centroids[from]);
      std::size_t to = from;
      double gain = 1e-12 * std::max(1.0, cost_out);
      for (std::size_t c = 0; c < k; ++c) {
        if (c == from) continue;
        const double cost_in = counts[c] / (counts[c] + 1) * squared_distance(pts[i], r.centroids[c]);
        if (cost_out - cost_in > gain) gain = cost_out - cost_in, to = c;
      }
      if (to == from) continue;
      for (std::size_t j = 0; j < d; ++j) {
        r.centroids[from][j] = (r.centroids[from][j] * counts[from] - pts[i][j]) / (counts[from] - 1);
        r.centroids[to][j] = (r.centroids[to][j] * counts[to] + pts[i][j]) / (counts[to] + 1);
      }
      counts[from] -= 1;
      counts[to] += 1;
      r.assignment[i] = to;
      moved = true;
    }
    if (!moved) break;
    r.wcss = wcss_of(pts, r.assignment, r.centroids);
    r.wcss_history.push_back(r.wcss);
  }
}

}  // namespace detail

// Lloyd's algorithm from k-means++ seeds, refined by single-point transfers; the restart with the lowest WCSS
// wins (earlier restart on ties).
inline KMeansResult kmeans(const std::vector<Point>& points, std::size_t k, std::uint64_t seed,
                           std::size_t restarts = 10, std::size_t max_iter = 300) {
  if (k < 1) throw ContractError("kmeans: k must be >= 1");
  if (k > points.size()) {
    throw ContractError("kmeans: k=" + std::to_string(k) + " exceeds the number of points " +
                        std::to_string(points.size()));
  }
  for (const auto& p : points)
    if (p.size() != points[0].size()) throw DimensionError("kmeans: points have differing dimensions");
  std::mt19937_64 rng(seed);
  std::optional<KMeansResult> best;
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    auto result = detail::lloyd(points, detail::kmeanspp_seed(points, k, rng), max_iter);
    detail::refine_by_transfers(points, result, max_iter);
    if (!best || result.wcss < best->wcss) best = std::move(result);
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Rank correlation

// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> mid_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// No value when either side has zero rank variance.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw ContractError("spearman: length mismatch " + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()));
  }
  if (x.size() < 3) throw ContractError("spearman: needs at least 3 pairs");
  return pearson(mid_ranks(x), mid_ranks(y));
}

// ---------------------------------------------------------------------------
// Outlier scores

struct OutlierScore {
  double norm = 0;
  double mean_distance = 0;  // averaged over all N samples, itself included
};

inline std::vector<OutlierScore> outlier_scores(const std::vector<Point>& lams) {
  if (lams.empty()) throw ContractError("outlier_scores: empty latent map");
  std::vector<OutlierScore> out(lams.size());
  for (std::size_t i = 0; i < lams.size(); ++i) {
    out[i].norm = euclidean_norm(lams[i]);
    double s = 0;
    for (std::size_t m = 0; m < lams.size(); ++m) s += std::sqrt(squared_distance(lams[i], lams[m]));
    out[i].mean_distance = s / static_cast<double>(lams.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Tensor mask;           // [H x W] class ids
  Tensor probabilities;  // [K x H x W]
};

// A frozen hyper-network (or a fixed plain UNet) ready for tape-free forward passes.
class Predictor {
 public:
  explicit Predictor(const Checkpoint& ck) : kind_(ck.kind), layout_(param_layout(ck.config.unet)) {
    if (kind_ == ModelKind::kHyper) {
      hyper_.latent_dim = ck.hyper.latent_dim;
      hyper_.cap = ck.hyper.cap;
      for (std::size_t i = 0; i < ck.hyper.weights.size(); ++i) {
        hyper_.weights.push_back(ck.hyper.weights[i].detach());
        hyper_.biases.push_back(ck.hyper.biases[i].detach());
      }
    } else {
      theta_ = Tensor::from_data({ck.theta.size()}, ck.theta);
    }
  }

  ModelKind kind() const { return kind_; }
  const LayoutDescriptor& layout() const { return layout_; }
  std::size_t latent_dim() const { return kind_ == ModelKind::kHyper ? hyper_.latent_dim : 0; }

  Tensor theta(const std::vector<float>& lam) const {
    if (kind_ == ModelKind::kPlain) return theta_;
    if (lam.size() != hyper_.latent_dim) {
      throw DimensionError("lambda must have d=" + std::to_string(hyper_.latent_dim) + " components, got " +
                           std::to_string(lam.size()));
    }
    return hyper_forward(hyper_, Tensor::from_data({lam.size()}, lam), layout_).theta;
  }

  Tensor logits(const std::vector<float>& lam, const Tensor& image) const {
    return unet_forward(layout_, theta(lam), image);
  }

  Prediction predict(const std::vector<float>& lam, const Tensor& image) const {
    auto probs = softmax(logits(lam, image));
    auto mask = argmax_channels(probs);
    return {std::move(mask), std::move(probs)};
  }

 private:
  ModelKind kind_;
  LayoutDescriptor layout_;
  HyperParams hyper_;
  Tensor theta_;
};

inline Prediction infer_with_latent(const Checkpoint& ck, const std::vector<float>& lam, const Tensor& image) {
  return Predictor(ck).predict(lam, image);
}

// ---------------------------------------------------------------------------
// Predictor diversity

struct CaseDiversity {
  std::vector<double> dice;  // one per predictor
  double std = 0;            // population standard deviation
  double best = 0;
};

struct DiversityReport {
  std::vector<CaseDiversity> cases;
  double mean_std = 0;
  double std_of_std = 0;
  double mean_best = 0;
  double std_best = 0;
  std::vector<double> mean_dice;  // per predictor
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace detail

// predictions[p][c] is predictor p's mask for case c.
inline DiversityReport prediction_diversity(const std::vector<std::vector<Tensor>>& predictions,
                                            const std::vector<Tensor>& references) {
  if (predictions.size() < 2) throw ContractError("prediction_diversity: needs at least 2 predictors");
  for (const auto& p : predictions) {
    if (p.size() != references.size()) {
      throw ContractError("prediction_diversity: every predictor needs one mask per reference");
    }
  }
  DiversityReport rep;
  rep.mean_dice.assign(predictions.size(), 0.0);
  std::vector<double> stds, bests;
  for (std::size_t c = 0; c < references.size(); ++c) {
    CaseDiversity cd;
    for (std::size_t p = 0; p < predictions.size(); ++p) {
      cd.dice.push_back(dice_coefficient(predictions[p][c], references[c]));
      rep.mean_dice[p] += cd.dice.back() / static_cast<double>(references.size());
    }
    cd.std = detail::mean_std(cd.dice).second;
    cd.best = *std::max_element(cd.dice.begin(), cd.dice.end());
    stds.push_back(cd.std);
    bests.push_back(cd.best);
    rep.cases.push_back(std::move(cd));
  }
  std::tie(rep.mean_std, rep.std_of_std) = detail::mean_std(stds);
  std::tie(rep.mean_best, rep.std_best) = detail::mean_std(bests);
  return rep;
}

// Soft Dice loss of a plain UNet's predictions against the stored labels of
// `ids`, in the order given. Higher means more suspicious.
inline std::vector<double> test_dice_predictor(const Checkpoint& plain, const DatasetManifest& manifest,
                                               const std::vector<std::string>& ids) {
  if (plain.kind != ModelKind::kPlain) throw ContractError("test_dice_predictor: needs a plain UNet checkpoint");
  const Predictor model(plain);
  std::vector<double> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const Sample s = load_sample(manifest, manifest.find(id));
    out.push_back(dice_ce_loss(model.logits({}, s.image), s.mask).dice.item());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latent map

struct LatentRecord {
  std::string id;
  std::vector<double> lam;
  double seg_loss = 0;
  double norm = 0;
  double mean_distance = 0;
  std::optional<std::size_t> cluster;
  int perturbation_magnitude = 0;
  std::string true_style;  // evaluation only

  bool operator==(const LatentRecord&) const = default;
};

struct ClusterSummary {
  std::size_t id = 0;
  std::vector<std::string> members;
  std::vector<double> centroid;
  std::size_t size = 0;
  double mean_seg_loss = 0;

  bool operator==(const ClusterSummary&) const = default;
};

struct LatentMap {
  std::size_t latent_dim = 0;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  std::string dataset_fingerprint;
  std::uint64_t step = 0;
  std::vector<LatentRecord> records;
  std::vector<ClusterSummary> clusters;

  std::vector<Point> points() const {
    std::vector<Point> out;
    for (const auto& r : records) out.push_back(r.lam);
    return out;
  }

  const LatentRecord& find(const std::string& id) const {
    for (const auto& r : records)
      if (r.id == id) return r;
    throw DataError("unknown sample id '" + id + "'");
  }

  bool operator==(const LatentMap&) const = default;
};

// Per-sample latents, their own-latent seg loss, and outlier scores.
inline LatentMap build_latent_map(const Checkpoint& ck, const DatasetManifest& manifest) {
  if (ck.kind != ModelKind::kHyper) throw ContractError("latent map: needs a hyper-network checkpoint");
  const Predictor model(ck);
  LatentMap map;
  map.latent_dim = ck.config.latent_dim;
  map.seed = ck.config.seed;
  map.config_fingerprint = config_fingerprint(ck.config);
  map.dataset_fingerprint = ck.dataset_fingerprint;
  map.step = ck.step;
  for (const auto& rec : manifest.records) {
    const std::size_t i = ck.latents.index_of(rec.id);
    const auto lam = ck.latents.values[i].to_vector();
    const Sample s = load_sample(manifest, rec);
    LatentRecord r;
    r.id = rec.id;
    r.lam.assign(lam.begin(), lam.end());
    r.seg_loss = dice_ce_loss(model.logits(lam, s.image), s.mask).total.item();
    r.perturbation_magnitude = rec.perturbation_magnitude;
    r.true_style = style_name(rec.true_style.kind);
    map.records.push_back(std::move(r));
  }
  const auto scores = outlier_scores(map.points());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    map.records[i].norm = scores[i].norm;
    map.records[i].mean_distance = scores[i].mean_distance;
  }
  return map;
}

// Runs k-means on the map's latents and records cluster ids and summaries.
inline void cluster_latent_map(LatentMap& map, std::size_t k, std::uint64_t seed) {
  const auto km = kmeans(map.points(), k, seed);
  map.clusters.assign(k, {});
  for (std::size_t c = 0; c < k; ++c) {
    map.clusters[c].id = c;
    map.clusters[c].centroid = km.centroids[c];
  }
  for (std::size_t i = 0; i < map.records.size(); ++i) {
    auto& cl = map.clusters[km.assignment[i]];
    map.records[i].cluster = km.assignment[i];
    cl.members.push_back(map.records[i].id);
    cl.mean_seg_loss += map.records[i].seg_loss;
    ++cl.size;
  }
  for (auto& cl : map.clusters)
    if (cl.size) cl.mean_seg_loss /= static_cast<double>(cl.size);
}

// Majority-label purity of cluster ids against reference labels.
inline double cluster_purity(const std::vector<std::size_t>& clusters, const std::vector<std::string>& labels) {
  std::map<std::size_t, std::map<std::string, std::size_t>> counts;
  for (std::size_t i = 0; i < clusters.size(); ++i) ++counts[clusters[i]][labels.at(i)];
  std::size_t majority = 0;
  for (const auto& [c, hist] : counts) {
    std::size_t best = 0;
    for (const auto& [label, n] : hist) best = std::max(best, n);
    majority += best;
  }
  return clusters.empty() ? 0.0 : static_cast<double>(majority) / static_cast<double>(clusters.size());
}

// ---------------------------------------------------------------------------
// latent_map.json; schema lives in docs/latent_map_schema.md.

inline constexpr int kLatentMapVersion = 1;

inline nlohmann::json latent_map_to_json(const LatentMap& map) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : map.records) {
    nlohmann::json j = {{"id", r.id},
                        {"lambda", r.lam},
                        {"seg_loss", r.seg_loss},
                        {"norm", r.norm},
                        {"mean_distance", r.mean_distance},
                        {"cluster", r.cluster ? nlohmann::json(*r.cluster) : nlohmann::json(nullptr)},
                        {"perturbation_magnitude", r.perturbation_magnitude},
                        {"true_style", r.true_style}};
    recs.push_back(std::move(j));
  }
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : map.clusters) {
    clusters.push_back({{"id", c.id},
                        {"members", c.members},
                        {"centroid", c.centroid},
                        {"size", c.size},
                        {"mean_seg_loss", c.mean_seg_loss}});
  }
  return {{"version", kLatentMapVersion},
          {"latent_dim", map.latent_dim},
          {"seed", map.seed},
          {"config_fingerprint", map.config_fingerprint},
          {"dataset_fingerprint", map.dataset_fingerprint},
          {"step", map.step},
          {"records", std::move(recs)},
          {"clusters", std::move(clusters)}};
}

// Throws FormatError naming the first offending field.
inline LatentMap latent_map_from_json(const nlohmann::json& j, const std::string& origin = "latent map") {
  LatentMap map;
  try {
    if (j.at("version").get<int>() != kLatentMapVersion) throw FormatError(origin + ": unsupported version");
    map.latent_dim = j.at("latent_dim").get<std::size_t>();
    map.seed = j.at("seed").get<std::uint64_t>();
    map.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    map.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    map.step = j.at("step").get<std::uint64_t>();
    for (const auto& rj : j.at("records")) {
      LatentRecord r;
      r.id = rj.at("id").get<std::string>();
      r.lam = rj.at("lambda").get<std::vector<double>>();
      if (r.lam.size() != map.latent_dim) {
        throw FormatError(origin + ": record " + r.id + " has " + std::to_string(r.lam.size()) +
                          " latent components, expected " + std::to_string(map.latent_dim));
      }
      r.seg_loss = rj.at("seg_loss").get<double>();
      r.norm = rj.at("norm").get<double>();
      r.mean_distance = rj.at("mean_distance").get<double>();
      if (!rj.at("cluster").is_null()) r.cluster = rj.at("cluster").get<std::size_t>();
      r.perturbation_magnitude = rj.at("perturbation_magnitude").get<int>();
      r.true_style = rj.at("true_style").get<std::string>();
      map.records.push_back(std::move(r));
    }
    for (const auto& cj : j.at("clusters")) {
      ClusterSummary c;
      c.id = cj.at("id").get<std::size_t>();
      c.members = cj.at("members").get<std::vector<std::string>>();
      c.centroid = cj.at("centroid").get<std::vector<double>>();
      c.size = cj.at("size").get<std::size_t>();
      c.mean_seg_loss = cj.at("mean_seg_loss").get<double>();
      map.clusters.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return map;
}

inline void export_latent_map(const LatentMap& map, const std::filesystem::path& path) {
  detail::write_file(path, latent_map_to_json(map).dump(2) + "\n");
}

inline LatentMap import_latent_map(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return latent_map_from_json(nlohmann::json::parse(text), path.string());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// id,norm,mean_distance,test_dice,perturbation_magnitude; test_dice is empty
// for samples the baseline was trained on.
inline std::string scores_csv(const LatentMap& map, const std::map<std::string, double>& test_dice = {}) {
  std::ostringstream out;
  out << "id,norm,mean_distance,test_dice,perturbation_magnitude\n";
  char buf[64];
  for (const auto& r : map.records) {
    out << r.id;
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g,", r.norm, r.mean_distance);
    out << buf;
    if (auto it = test_dice.find(r.id); it != test_dice.end()) {
      std::snprintf(buf, sizeof buf, "%.9g", it->second);
      out << buf;
    }
    out << ',' << r.perturbation_magnitude << '\n';
  }
  return out.str();
}

}  // namespace hypersort
