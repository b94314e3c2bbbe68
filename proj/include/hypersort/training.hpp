#pragma once

// Joint optimization of the hyper-network and the per-sample latent table,
// and a plain (directly parameterized) UNet trainer for baselines.
//
// Per step, for each of batch_size samples drawn from a per-epoch shuffle:
//   theta = H(beta, lam_n), logits = U(theta, image_n),
//   loss_n = dice + ce + alpha * |lam_n|_1
// beta receives the batch-averaged gradient; lam_n receives only the gradient
// of its own loss term and has its own Adam state.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hypersort/adam.hpp"
#include "hypersort/error.hpp"
#include "hypersort/hypernet.hpp"
#include "hypersort/objectives.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/tensor.hpp"
#include "hypersort/train_config.hpp"
#include "hypersort/unet.hpp"

namespace hypersort {

enum class ModelKind { kHyper, kPlain };

struct LatentTable {
  std::vector<std::string> ids;
  std::vector<Tensor> values;  // each [d], requires_grad
  std::vector<AdamState> moments;

  std::size_t size() const { return ids.size(); }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) return i;
    throw DataError("no latent for sample '" + id + "'");
  }
};

struct EarlyStopState {
  double window_sum = 0;
  std::size_t window_count = 0;
  double last_average = -1;  // negative until the first window closes
  std::size_t stalls = 0;
  bool stopped = false;

  bool operator==(const EarlyStopState&) const = default;
};

// Everything needed to resume training bit-exactly or to run inference.
struct Checkpoint {
  ModelKind kind = ModelKind::kHyper;
  TrainConfig config;
  std::string dataset_fingerprint;
  std::uint64_t step = 0;
  EarlyStopState early_stop;

  // kind == kHyper
  HyperParams hyper;
  std::vector<AdamState> hyper_moments;  // one per hyper.parameters() entry
  LatentTable latents;

  // kind == kPlain
  std::vector<float> theta;
  AdamState theta_moments;
  std::vector<std::string> sample_ids;  // the plain model's training subset
};

struct StepRecord {
  std::uint64_t step = 0;
  std::string sample_id;
  LossBreakdown loss;
};

using StepCallback = std::function<void(const StepRecord&)>;

// `step, sample_id, dice, ce, l1, total` lines.
class LossLog {
 public:
  // `header` is false when appending to an existing log.
  explicit LossLog(std::ostream& out, bool header = true) : out_(out) {
    if (header) out_ << "step,sample_id,dice,ce,l1,total\n";
  }

  void write(const StepRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%llu,%s,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<unsigned long long>(r.step), r.sample_id.c_str(), r.loss.dice,
                  r.loss.cross_entropy, r.loss.latent_l1, r.loss.total);
    out_ << buf;
  }

  StepCallback callback() {
    return [this](const StepRecord& r) { write(r); };
  }

 private:
  std::ostream& out_;
};

namespace detail {

inline Tensor clone_leaf(const Tensor& t) {
  auto c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

inline HyperParams clone(const HyperParams& h) {
  HyperParams out;
  out.latent_dim = h.latent_dim;
  out.cap = h.cap;
  for (std::size_t i = 0; i < h.weights.size(); ++i) {
    out.weights.push_back(clone_leaf(h.weights[i]));
    out.biases.push_back(clone_leaf(h.biases[i]));
  }
  return out;
}

inline LatentTable clone(const LatentTable& t) {
  LatentTable out = t;
  for (auto& v : out.values) v = clone_leaf(v);
  return out;
}

// Shuffled order without replacement within each epoch; epoch e's order
// depends only on (seed, e), so resuming needs nothing but the step count.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::size_t at(std::uint64_t position) {
    const std::uint64_t epoch = position / n_;
    if (epoch != cached_epoch_) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                        static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                        0x5eedu};
      std::mt19937_64 rng(seq);
      std::shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    return order_[position % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> order_;
};

inline std::vector<Sample> load_all(const DatasetManifest& m, const std::vector<std::size_t>& which) {
  std::vector<Sample> out;
  out.reserve(which.size());
  for (std::size_t i : which) {
    const auto& rec = m.records.at(i);
    try {
      out.push_back(load_sample(m, rec));
    } catch (const IoError& e) {
      throw DataError("missing sample " + rec.id + ": " + e.what());
    }
  }
  return out;
}

inline void update_early_stop(EarlyStopState& es, const TrainConfig& cfg, double batch_total) {
  if (!cfg.early_stop || es.stopped) return;
  es.window_sum += batch_total;
  if (++es.window_count < cfg.early_stop_window) return;
  const double avg = es.window_sum / static_cast<double>(es.window_count);
  if (es.last_average > 0) {
    const double improvement = (es.last_average - avg) / es.last_average;
    es.stalls = improvement < cfg.early_stop_tolerance ? es.stalls + 1 : 0;
    if (es.stalls >= cfg.early_stop_patience) es.stopped = true;
  }
  es.last_average = avg;
  es.window_sum = 0;
  es.window_count = 0;
}

// Leaves that received no gradient this step are treated as zero-gradient.
inline std::span<const float> grad_or_zero(const Tensor& t, std::vector<float>& scratch) {
  if (t.has_grad()) return t.grad();
  scratch.assign(t.numel(), 0.0f);
  return scratch;
}

inline void check_loss(double total, std::uint64_t step, const std::string& id) {
  if (!std::isfinite(total)) {
    throw NumericError("non-finite loss at step " + std::to_string(step) + " on sample " + id);
  }
}

}  // namespace detail

class HyperTrainer {
 public:
  HyperTrainer(const DatasetManifest& manifest, const TrainConfig& cfg)
      : cfg_(cfg), layout_(param_layout(cfg.unet)), sampler_(manifest.records.size(), cfg.seed) {
    cfg_.validate();
    init_data(manifest);
    hyper_ = init_hyper(layout_, HyperConfig{cfg_.latent_dim, cfg_.hidden}, cfg_.seed);
    for (const auto& p : hyper_.parameters()) hyper_moments_.emplace_back(p.numel());
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      0x1a7e47u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> init(0.0, cfg_.latent_init_std);
    for (const auto& rec : manifest.records) {
      std::vector<float> v(cfg_.latent_dim);
      for (auto& x : v) x = static_cast<float>(init(rng));
      latents_.ids.push_back(rec.id);
      latents_.values.push_back(Tensor::from_data({cfg_.latent_dim}, std::move(v), true));
      latents_.moments.emplace_back(cfg_.latent_dim);
    }
  }

  HyperTrainer(const DatasetManifest& manifest, const Checkpoint& ck)
      : cfg_(ck.config), layout_(param_layout(ck.config.unet)), sampler_(manifest.records.size(), ck.config.seed) {
    if (ck.kind != ModelKind::kHyper) throw DataError("checkpoint does not hold a hyper-network");
    if (ck.dataset_fingerprint != dataset_fingerprint(manifest)) {
      throw DataError("checkpoint was trained on a different dataset (fingerprint " +
                      ck.dataset_fingerprint + " vs " + dataset_fingerprint(manifest) + ")");
    }
    cfg_.validate();
    init_data(manifest);
    hyper_ = detail::clone(ck.hyper);
    hyper_moments_ = ck.hyper_moments;
    latents_ = detail::clone(ck.latents);
    if (latents_.ids != ids_) throw DataError("checkpoint latent table does not match the manifest");
    step_ = ck.step;
    early_stop_ = ck.early_stop;
  }

  // Lets a resumed run extend its step budget.
  void set_total_steps(std::size_t steps) { cfg_.steps = steps; }

  std::uint64_t step() const { return step_; }
  bool finished() const { return step_ >= cfg_.steps || early_stop_.stopped; }
  bool early_stopped() const { return early_stop_.stopped; }
  const TrainConfig& config() const { return cfg_; }
  const LayoutDescriptor& layout() const { return layout_; }
  const HyperParams& hyper() const { return hyper_; }
  const LatentTable& latents() const { return latents_; }

  std::vector<StepRecord> train_step() {
    const AdamOptions net_opt{cfg_.lr}, lat_opt{cfg_.latent_lr};
    std::vector<StepRecord> records;
    std::vector<std::size_t> touched;
    double batch_total = 0;
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const std::size_t n = sampler_.at(step_ * cfg_.batch_size + b);
      const Tensor& lam = latents_.values[n];
      const auto theta = hyper_forward(hyper_, lam, layout_);
      const auto seg = dice_ce_loss(unet_forward(theta, samples_[n].image), samples_[n].mask);
      const auto reg = l1_reg(lam, static_cast<float>(cfg_.alpha));
      const auto total = add(seg.total, reg);
      const auto bd = breakdown(seg, reg);
      detail::check_loss(bd.total, step_, ids_[n]);
      backward(total);
      records.push_back({step_, ids_[n], bd});
      batch_total += bd.total;
      if (std::find(touched.begin(), touched.end(), n) == touched.end()) touched.push_back(n);
    }

    auto params = hyper_.parameters();
    const double scale = 1.0 / static_cast<double>(cfg_.batch_size);
    std::vector<float> scratch;
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam_step(params[i].mutable_data(), detail::grad_or_zero(params[i], scratch), hyper_moments_[i],
                net_opt, scale);
      params[i].zero_grad();
    }
    for (std::size_t n : touched) {
      Tensor& lam = latents_.values[n];
      adam_step(lam.mutable_data(), detail::grad_or_zero(lam, scratch), latents_.moments[n], lat_opt);
      lam.zero_grad();
    }
    ++step_;
    detail::update_early_stop(early_stop_, cfg_, batch_total / static_cast<double>(cfg_.batch_size));
    return records;
  }

  // Trains until `until` (default: the configured budget) or early stop.
  void run(const StepCallback& on_step = {}, std::optional<std::uint64_t> until = std::nullopt) {
    const std::uint64_t stop = std::min<std::uint64_t>(until.value_or(cfg_.steps), cfg_.steps);
    while (step_ < stop && !early_stop_.stopped) {
      for (const auto& r : train_step())
        if (on_step) on_step(r);
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.kind = ModelKind::kHyper;
    ck.config = cfg_;
    ck.dataset_fingerprint = fingerprint_;
    ck.step = step_;
    ck.early_stop = early_stop_;
    ck.hyper = detail::clone(hyper_);
    ck.hyper_moments = hyper_moments_;
    ck.latents = detail::clone(latents_);
    return ck;
  }

 private:
  void init_data(const DatasetManifest& manifest) {
    if (manifest.records.empty()) throw DataError("manifest has no records");
    check_unet_input(cfg_.unet, {cfg_.unet.in_channels, manifest.height, manifest.width});
    std::vector<std::size_t> all(manifest.records.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      all[i] = i;
      ids_.push_back(manifest.records[i].id);
    }
    samples_ = detail::load_all(manifest, all);
    fingerprint_ = dataset_fingerprint(manifest);
  }

  TrainConfig cfg_;
  LayoutDescriptor layout_;
  detail::EpochSampler sampler_;
  std::vector<std::string> ids_;
  std::vector<Sample> samples_;
  std::string fingerprint_;
  HyperParams hyper_;
  std::vector<AdamState> hyper_moments_;
  LatentTable latents_;
  std::uint64_t step_ = 0;
  EarlyStopState early_stop_;
};

// Directly optimizes one UNet parameter vector on a subset of the manifest.
class PlainTrainer {
 public:
  PlainTrainer(const DatasetManifest& manifest, std::vector<std::string> subset, const TrainConfig& cfg)
      : cfg_(cfg), layout_(param_layout(cfg.unet)), subset_(std::move(subset)),
        sampler_(subset_.size(), cfg.seed) {
    cfg_.validate();
    init_data(manifest);
    std::mt19937_64 rng(cfg_.seed);
    theta_ = Tensor::from_data({layout_.total}, init_unet_params(layout_, rng), true);
    moments_ = AdamState(layout_.total);
  }

  PlainTrainer(const DatasetManifest& manifest, const Checkpoint& ck)
      : cfg_(ck.config), layout_(param_layout(ck.config.unet)), subset_(ck.sample_ids),
        sampler_(subset_.size(), ck.config.seed) {
    if (ck.kind != ModelKind::kPlain) throw DataError("checkpoint does not hold a plain UNet");
    if (ck.dataset_fingerprint != dataset_fingerprint(manifest)) {
      throw DataError("checkpoint was trained on a different dataset");
    }
    cfg_.validate();
    init_data(manifest);
    theta_ = Tensor::from_data({layout_.total}, ck.theta, true);
    moments_ = ck.theta_moments;
    step_ = ck.step;
    early_stop_ = ck.early_stop;
  }

  void set_total_steps(std::size_t steps) { cfg_.steps = steps; }
  std::uint64_t step() const { return step_; }
  bool finished() const { return step_ >= cfg_.steps || early_stop_.stopped; }
  const LayoutDescriptor& layout() const { return layout_; }
  const Tensor& theta() const { return theta_; }
  const std::vector<std::string>& subset() const { return subset_; }

  std::vector<StepRecord> train_step() {
    std::vector<StepRecord> records;
    double batch_total = 0;
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const std::size_t n = sampler_.at(step_ * cfg_.batch_size + b);
      const auto seg = dice_ce_loss(unet_forward(layout_, theta_, samples_[n].image), samples_[n].mask);
      const auto bd = breakdown(seg, Tensor::scalar(0.0f));
      detail::check_loss(bd.total, step_, subset_[n]);
      backward(seg.total);
      records.push_back({step_, subset_[n], bd});
      batch_total += bd.total;
    }
    std::vector<float> scratch;
    adam_step(theta_.mutable_data(), detail::grad_or_zero(theta_, scratch), moments_, AdamOptions{cfg_.lr},
              1.0 / static_cast<double>(cfg_.batch_size));
    theta_.zero_grad();
    ++step_;
    detail::update_early_stop(early_stop_, cfg_, batch_total / static_cast<double>(cfg_.batch_size));
    return records;
  }

  void run(const StepCallback& on_step = {}, std::optional<std::uint64_t> until = std::nullopt) {
    const std::uint64_t stop = std::min<std::uint64_t>(until.value_or(cfg_.steps), cfg_.steps);
    while (step_ < stop && !early_stop_.stopped) {
      for (const auto& r : train_step())
        if (on_step) on_step(r);
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.kind = ModelKind::kPlain;
    ck.config = cfg_;
    ck.dataset_fingerprint = fingerprint_;
    ck.step = step_;
    ck.early_stop = early_stop_;
    ck.theta = theta_.to_vector();
    ck.theta_moments = moments_;
    ck.sample_ids = subset_;
    return ck;
  }

 private:
  void init_data(const DatasetManifest& manifest) {
    if (subset_.empty()) throw ContractError("plain UNet training subset is empty");
    check_unet_input(cfg_.unet, {cfg_.unet.in_channels, manifest.height, manifest.width});
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) index[manifest.records[i].id] = i;
    std::vector<std::size_t> which;
    for (const auto& id : subset_) {
      auto it = index.find(id);
      if (it == index.end()) throw DataError("unknown sample id '" + id + "' in training subset");
      which.push_back(it->second);
    }
    samples_ = detail::load_all(manifest, which);
    fingerprint_ = dataset_fingerprint(manifest);
  }

  TrainConfig cfg_;
  LayoutDescriptor layout_;
  std::vector<std::string> subset_;
  detail::EpochSampler sampler_;
  std::vector<Sample> samples_;
  std::string fingerprint_;
  Tensor theta_;
  AdamState moments_;
  std::uint64_t step_ = 0;
  EarlyStopState early_stop_;
};

inline Checkpoint train(const DatasetManifest& manifest, const TrainConfig& cfg,
                        const StepCallback& on_step = {}) {
  HyperTrainer t(manifest, cfg);
  t.run(on_step);
  return t.checkpoint();
}

inline Checkpoint train_plain_unet(const DatasetManifest& manifest, std::vector<std::string> subset,
                                   const TrainConfig& cfg, const StepCallback& on_step = {}) {
  PlainTrainer t(manifest, std::move(subset), cfg);
  t.run(on_step);
  return t.checkpoint();
}

// Sample ids selected by a predicate over records.
template <class Pred>
std::vector<std::string> select_ids(const DatasetManifest& m, Pred&& keep) {
  std::vector<std::string> out;
  for (const auto& r : m.records)
    if (keep(r)) out.push_back(r.id);
  return out;
}

}  // namespace hypersort
