#pragma once

// The hypersort command line: gen-data, train, analyze, infer, serve, report.
//
// Exit codes: 0 success, 1 usage, 2 data/format/IO, 3 numeric abort. Failures
// print a single line `hypersort: error code=<n> kind=<kind> msg=<text>` to
// stderr.

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hypersort/checkpoint.hpp"
#include "hypersort/error.hpp"
#include "hypersort/latent_analysis.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/png.hpp"
#include "hypersort/service.hpp"
#include "hypersort/synth_data.hpp"
#include "hypersort/train_config.hpp"
#include "hypersort/training.hpp"

namespace hypersort {

namespace cli {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::vector<double> parse_reals(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(what + ": '" + text + "' is not a comma-separated list of numbers");
    }
  }
  return out;
}

inline DatasetManifest open_dataset(const fs::path& p) {
  return load_manifest(fs::is_directory(p) ? p / "manifest.json" : p);
}

inline std::string provenance_line(const Checkpoint& ck) {
  return "# seed=" + std::to_string(ck.config.seed) + " config_fingerprint=" + config_fingerprint(ck.config) +
         " dataset_fingerprint=" + ck.dataset_fingerprint + " step=" + std::to_string(ck.step);
}

inline PngText provenance_text(const Checkpoint& ck) {
  return {{"hypersort-seed", std::to_string(ck.config.seed)},
          {"hypersort-config-fingerprint", config_fingerprint(ck.config)},
          {"hypersort-dataset-fingerprint", ck.dataset_fingerprint}};
}

// Test-Dice scores for every sample outside the plain model's training subset.
inline std::map<std::string, double> test_dice_scores(const Checkpoint& plain, const DatasetManifest& m) {
  std::vector<std::string> ids;
  for (const auto& r : m.records)
    if (std::find(plain.sample_ids.begin(), plain.sample_ids.end(), r.id) == plain.sample_ids.end())
      ids.push_back(r.id);
  const auto scores = test_dice_predictor(plain, m, ids);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = scores[i];
  return out;
}

struct Correlations {
  std::optional<double> norm, mean_distance, test_dice;
  std::size_t test_dice_n = 0;
};

inline Correlations correlations(const LatentMap& map, const std::map<std::string, double>& test_dice) {
  std::vector<double> nrm, md, mag, td, td_mag;
  for (const auto& r : map.records) {
    nrm.push_back(r.norm);
    md.push_back(r.mean_distance);
    mag.push_back(std::abs(r.perturbation_magnitude));
    if (auto it = test_dice.find(r.id); it != test_dice.end()) {
      td.push_back(it->second);
      td_mag.push_back(std::abs(r.perturbation_magnitude));
    }
  }
  Correlations c;
  if (nrm.size() >= 3) {
    c.norm = spearman(nrm, mag);
    c.mean_distance = spearman(md, mag);
  }
  if (td.size() >= 3) c.test_dice = spearman(td, td_mag);
  c.test_dice_n = td.size();
  return c;
}

inline std::string fmt(std::optional<double> v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

inline std::string fmt(double v) { return fmt(std::optional<double>(v)); }

// Deterministic half of `ids` chosen by `seed`, in manifest order.
inline std::vector<std::string> seeded_half(const std::vector<std::string>& ids, std::uint64_t seed) {
  std::vector<std::size_t> idx(ids.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x4a1fULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(ids.size() / 2);
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(ids[i]);
  return out;
}

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    CLI::App app{"hypersort: hyper-network segmentation with per-sample latent styles"};
    app.require_subcommand(1);
    setup(app);
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {
        app.exit(e, out_, err_);
        return 0;
      }
      CLI::App* active = &app;
      for (auto* sub : app.get_subcommands()) active = sub;
      fail_line(1, "usage", e.what());
      err_ << active->help();
      return 1;
    }
    try {
      action_();
      return 0;
    } catch (const UsageError& e) {
      fail_line(1, "usage", e.what());
      CLI::App* active = &app;
      for (auto* sub : app.get_subcommands()) active = sub;
      err_ << active->help();
      return 1;
    } catch (const ContractError& e) {
      fail_line(1, "contract", e.what());
      return 1;
    } catch (const NumericError& e) {
      fail_line(3, "numeric", e.what());
      return 3;
    } catch (const DataError& e) {
      fail_line(2, "data", e.what());
    } catch (const FormatError& e) {
      fail_line(2, "format", e.what());
    } catch (const IoError& e) {
      fail_line(2, "io", e.what());
    } catch (const DimensionError& e) {
      fail_line(2, "dimension", e.what());
    } catch (const std::filesystem::filesystem_error& e) {
      fail_line(2, "io", e.what());
    }
    return 2;
  }

 private:
  void fail_line(int code, const std::string& kind, std::string msg) {
    for (auto& c : msg)
      if (c == '\n' || c == '\r') c = ' ';
    err_ << "hypersort: error code=" << code << " kind=" << kind << " msg=" << msg << '\n';
  }

  void setup(CLI::App& app) {
    setup_gen_data(app);
    setup_train(app);
    setup_analyze(app);
    setup_infer(app);
    setup_serve(app);
    setup_report(app);
  }

  // -------------------------------------------------------------------------
  void setup_gen_data(CLI::App& app) {
    auto* c = app.add_subcommand("gen-data", "Generate a synthetic dataset with perturbed labels");
    c->add_option("--out", gen_.out, "Output directory")->required();
    c->add_option("--n", gen_.opt.count, "Number of samples")->capture_default_str();
    c->add_option("--size", gen_.size, "Square image size (overrides --height/--width)");
    c->add_option("--height", gen_.opt.height, "Image height")->capture_default_str();
    c->add_option("--width", gen_.opt.width, "Image width")->capture_default_str();
    c->add_option("--seed", gen_.opt.seed, "Generator seed")->capture_default_str();
    c->add_option("--fractions", gen_.fractions, "clean,erode,dilate fractions")->capture_default_str();
    c->add_option("--spatial-multiple", gen_.opt.spatial_multiple, "Required divisor of H and W")
        ->capture_default_str();
    c->callback([this] { action_ = [this] { gen_data(); }; });
  }

  void gen_data() {
    if (gen_.size) gen_.opt.height = gen_.opt.width = gen_.size;
    const auto f = parse_reals(gen_.fractions, "--fractions");
    if (f.size() != 3) throw UsageError("--fractions needs three values");
    gen_.opt.fractions = {f[0], f[1], f[2]};
    out_ << "config " << nlohmann::json({{"count", gen_.opt.count},
                                          {"height", gen_.opt.height},
                                          {"width", gen_.opt.width},
                                          {"seed", gen_.opt.seed},
                                          {"fractions", f},
                                          {"spatial_multiple", gen_.opt.spatial_multiple}})
                                .dump()
         << '\n';
    const auto m = generate_dataset(gen_.opt, gen_.out);
    out_ << "wrote " << (fs::path(gen_.out) / "manifest.json").string() << " records=" << m.records.size()
         << " dataset_fingerprint=" << dataset_fingerprint(m) << '\n';
  }

  // -------------------------------------------------------------------------
  void setup_train(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train the hyper-network and latent table (or a plain UNet)");
    c->add_option("--data", train_.data, "Dataset directory or manifest.json")->required();
    c->add_option("--out", train_.out, "Checkpoint path (.hsc)")->required();
    c->add_option("--config", train_.config, "Config file (JSON or key=value)");
    c->add_option("--resume", train_.resume, "Resume from a checkpoint");
    c->add_option("--log", train_.log, "Loss log path (default: <out>.log.csv)");
    c->add_option("--checkpoint-every", train_.every, "Also write <out>.step<N>.hsc every N steps");
    c->add_flag("--plain", train_.plain, "Train a plain UNet instead of the hyper-network");
    c->add_option("--subset", train_.subset, "Plain UNet training subset: all | clean | half-clean")
        ->capture_default_str();
    c->add_option("--subset-file", train_.subset_file, "File with one sample id per line");
    auto ov = [&](const char* name, std::string& slot, const char* help) {
      train_.overrides.push_back(c->add_option(name, slot, help));
    };
    ov("--steps", train_.steps, "Step budget");
    ov("--lr", train_.lr, "Network learning rate");
    ov("--latent-lr", train_.latent_lr, "Latent learning rate");
    ov("--alpha", train_.alpha, "L1 weight on latents");
    ov("--batch-size", train_.batch, "Samples per step");
    ov("--seed", train_.seed, "Training seed");
    ov("--latent-dim", train_.latent_dim, "Latent dimension d");
    ov("--stages", train_.stages, "UNet downsampling stages");
    ov("--base-channels", train_.base, "UNet channels at full resolution");
    ov("--convs", train_.convs, "Convolutions per stage");
    ov("--hidden", train_.hidden, "Hyper-network hidden widths, e.g. 50,50,50");
    train_.no_early = c->add_flag("--no-early-stop", "Disable early stopping");
    c->callback([this] { action_ = [this] { train(); }; });
  }

  TrainConfig resolved_config() const {
    TrainConfig cfg;
    if (!train_.config.empty()) cfg = load_train_config(train_.config);
    std::string kv;
    auto put = [&](const char* key, const std::string& v) {
      if (!v.empty()) kv += std::string(key) + "=" + v + "\n";
    };
    put("steps", train_.steps);
    put("lr", train_.lr);
    put("latent_lr", train_.latent_lr);
    put("alpha", train_.alpha);
    put("batch_size", train_.batch);
    put("seed", train_.seed);
    put("latent_dim", train_.latent_dim);
    put("unet.num_stages", train_.stages);
    put("unet.base_channels", train_.base);
    put("unet.convs_per_stage", train_.convs);
    put("hidden", train_.hidden);
    if (train_.no_early->count()) kv += "early_stop=false\n";
    try {
      cfg = parse_key_value_config(kv, cfg);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    } catch (const std::exception& e) {
      throw UsageError(std::string("bad option value: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }

  std::vector<std::string> plain_subset(const DatasetManifest& m, const TrainConfig& cfg) const {
    if (!train_.subset_file.empty()) {
      std::istringstream in(detail::read_file(train_.subset_file));
      std::vector<std::string> ids;
      std::string line;
      while (std::getline(in, line))
        if (!line.empty() && line[0] != '#') ids.push_back(line);
      return ids;
    }
    if (train_.subset == "all") return select_ids(m, [](const SampleRecord&) { return true; });
    auto clean = select_ids(m, [](const SampleRecord& r) { return r.perturbation_magnitude == 0; });
    if (train_.subset == "clean") return clean;
    if (train_.subset == "half-clean") return seeded_half(clean, cfg.seed);
    throw UsageError("--subset must be all, clean or half-clean");
  }

  void train() {
    const auto m = open_dataset(train_.data);
    std::optional<Checkpoint> resume;
    TrainConfig cfg;
    if (!train_.resume.empty()) {
      for (auto* o : train_.overrides)
        if (o->count() && o->get_name() != "--steps") {
          throw UsageError("--resume takes its config from the checkpoint; only --steps may be given");
        }
      if (!train_.config.empty()) throw UsageError("--resume cannot be combined with --config");
      resume = load_checkpoint(train_.resume);
      cfg = resume->config;
      if (!train_.steps.empty()) cfg.steps = std::stoul(train_.steps);
      if (resume->kind == ModelKind::kPlain) train_.plain = true;
    } else {
      cfg = resolved_config();
    }
    out_ << "config " << to_json(cfg).dump() << '\n';
    out_ << "config_fingerprint " << config_fingerprint(cfg) << " dataset_fingerprint " << dataset_fingerprint(m)
         << '\n';

    const fs::path out_path = train_.out;
    const fs::path log_path = train_.log.empty() ? fs::path(train_.out + ".log.csv") : fs::path(train_.log);
    if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
    std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    if (!resume) {
      log << "# seed=" << cfg.seed << " config_fingerprint=" << config_fingerprint(cfg)
          << " dataset_fingerprint=" << dataset_fingerprint(m) << '\n';
    }
    LossLog writer(log, !resume);
    const StepCallback sink = writer.callback();

    auto run_loop = [&](auto& trainer) {
      if (resume) trainer.set_total_steps(cfg.steps);
      while (!trainer.finished()) {
        std::uint64_t until = cfg.steps;
        if (train_.every) until = std::min<std::uint64_t>(cfg.steps, (trainer.step() / train_.every + 1) * train_.every);
        trainer.run(sink, until);
        if (train_.every && trainer.step() % train_.every == 0 && trainer.step() < cfg.steps) {
          const fs::path p = out_path.string() + ".step" + std::to_string(trainer.step()) + ".hsc";
          save_checkpoint(trainer.checkpoint(), p);
          out_ << "checkpoint " << p.string() << '\n';
        }
      }
      save_checkpoint(trainer.checkpoint(), out_path);
      out_ << "wrote " << out_path.string() << " step=" << trainer.step() << '\n';
    };

    if (train_.plain) {
      if (resume) {
        PlainTrainer t(m, *resume);
        run_loop(t);
      } else {
        auto subset = plain_subset(m, cfg);
        out_ << "subset " << subset.size() << " samples\n";
        PlainTrainer t(m, subset, cfg);
        run_loop(t);
      }
    } else if (resume) {
      HyperTrainer t(m, *resume);
      run_loop(t);
      if (t.early_stopped()) out_ << "early stop at step " << t.step() << '\n';
    } else {
      HyperTrainer t(m, cfg);
      run_loop(t);
      if (t.early_stopped()) out_ << "early stop at step " << t.step() << '\n';
    }
  }

  // -------------------------------------------------------------------------
  void setup_analyze(CLI::App& app) {
    auto* c = app.add_subcommand("analyze", "Build the latent map, clusters and outlier scores");
    c->add_option("--checkpoint", an_.checkpoint, "Hyper-network checkpoint")->required();
    c->add_option("--data", an_.data, "Dataset directory or manifest.json")->required();
    c->add_option("--out", an_.out, "Output directory")->required();
    c->add_option("--k", an_.k, "Number of clusters")->capture_default_str();
    c->add_option("--cluster-seed", an_.cluster_seed, "k-means seed")->capture_default_str();
    c->add_option("--test-dice", an_.test_dice, "Plain UNet checkpoint for the Test-Dice column");
    c->callback([this] { action_ = [this] { analyze(); }; });
  }

  void analyze() {
    const auto m = open_dataset(an_.data);
    const auto ck = load_checkpoint(an_.checkpoint);
    check_match(ck, m);
    out_ << "config " << to_json(ck.config).dump() << '\n';
    out_ << "analysis " << nlohmann::json({{"k", an_.k}, {"cluster_seed", an_.cluster_seed}}).dump() << '\n';
    auto map = build_latent_map(ck, m);
    cluster_latent_map(map, an_.k, an_.cluster_seed);
    std::map<std::string, double> td;
    if (!an_.test_dice.empty()) {
      const auto plain = load_checkpoint(an_.test_dice);
      if (plain.dataset_fingerprint != ck.dataset_fingerprint) {
        throw DataError("Test-Dice checkpoint was trained on a different dataset");
      }
      td = test_dice_scores(plain, m);
    }
    const fs::path dir = an_.out;
    export_latent_map(map, dir / "latent_map.json");
    detail::write_file(dir / "scores.csv", provenance_line(ck) + "\n" + scores_csv(map, td));
    const auto c = correlations(map, td);
    out_ << "spearman norm=" << fmt(c.norm) << " mean_distance=" << fmt(c.mean_distance)
         << " test_dice=" << fmt(c.test_dice) << '\n';
    out_ << "wrote " << (dir / "latent_map.json").string() << " and " << (dir / "scores.csv").string() << '\n';
  }

  static void check_match(const Checkpoint& ck, const DatasetManifest& m) {
    if (ck.dataset_fingerprint != dataset_fingerprint(m)) {
      throw DataError("checkpoint dataset fingerprint " + ck.dataset_fingerprint + " does not match manifest " +
                      dataset_fingerprint(m));
    }
  }

  // -------------------------------------------------------------------------
  void setup_infer(CLI::App& app) {
    auto* c = app.add_subcommand("infer", "Segment an image with the UNet emitted at a chosen latent");
    c->add_option("--checkpoint", inf_.checkpoint, "Checkpoint (hyper or plain)")->required();
    c->add_option("--image", inf_.image, "Input image (.tns, 1xHxW or HxW)");
    c->add_option("--data", inf_.data, "Dataset (with --sample)");
    c->add_option("--sample", inf_.sample, "Sample id in --data");
    c->add_option("--lambda", inf_.lambda, "Latent, e.g. 0,0 (default: origin)");
    c->add_option("--centroid", inf_.centroid, "Use this cluster's centroid from --latent-map");
    c->add_option("--latent-map", inf_.latent_map, "latent_map.json from analyze");
    c->add_option("--out", inf_.out, "Output mask (.tns)")->required();
    c->add_option("--overlay", inf_.overlay, "Also write an overlay PNG");
    c->add_option("--probabilities", inf_.probs, "Also write class probabilities (.tns)");
    c->callback([this] { action_ = [this] { infer(); }; });
  }

  void infer() {
    const auto ck = load_checkpoint(inf_.checkpoint);
    const Predictor model(ck);
    Tensor image;
    std::optional<SampleRecord> rec;
    std::optional<DatasetManifest> m;
    if (!inf_.image.empty()) {
      image = read_tns(inf_.image);
      if (image.rank() == 2) image = Tensor::from_data({1, image.dim(0), image.dim(1)}, image.to_vector());
    } else if (!inf_.data.empty() && !inf_.sample.empty()) {
      m = open_dataset(inf_.data);
      rec = m->find(inf_.sample);
      image = load_sample(*m, *rec).image;
    } else {
      throw UsageError("give --image, or --data with --sample");
    }
    std::vector<float> lam(model.latent_dim(), 0.0f);
    if (!inf_.lambda.empty() && inf_.centroid >= 0) throw UsageError("--lambda and --centroid are exclusive");
    if (!inf_.lambda.empty()) {
      const auto v = parse_reals(inf_.lambda, "--lambda");
      lam.assign(v.begin(), v.end());
    } else if (inf_.centroid >= 0) {
      if (inf_.latent_map.empty()) throw UsageError("--centroid needs --latent-map");
      const auto map = import_latent_map(inf_.latent_map);
      if (static_cast<std::size_t>(inf_.centroid) >= map.clusters.size()) {
        throw DataError("latent map has no cluster " + std::to_string(inf_.centroid));
      }
      const auto& c = map.clusters[static_cast<std::size_t>(inf_.centroid)].centroid;
      lam.assign(c.begin(), c.end());
    }
    const auto pred = model.predict(lam, image);
    write_tns(inf_.out, pred.mask);
    if (!inf_.probs.empty()) write_tns(inf_.probs, pred.probabilities);
    if (!inf_.overlay.empty()) detail::write_file(inf_.overlay, overlay_png(image, pred.mask, provenance_text(ck)));
    nlohmann::json meta = {{"seed", ck.config.seed},
                           {"config_fingerprint", config_fingerprint(ck.config)},
                           {"dataset_fingerprint", ck.dataset_fingerprint},
                           {"step", ck.step},
                           {"lambda", lam},
                           {"shape", pred.mask.shape()},
                           {"foreground", foreground_count(pred.mask)}};
    if (rec) {
      meta["sample_id"] = rec->id;
      meta["dice_vs_stored"] = dice_coefficient(pred.mask, load_sample(*m, *rec).mask);
      if (!rec->clean_path.empty()) meta["dice_vs_clean"] = dice_coefficient(pred.mask, load_clean(*m, *rec));
    }
    detail::write_file(inf_.out + ".json", meta.dump(2) + "\n");
    out_ << "wrote " << inf_.out << ' ' << meta.dump() << '\n';
  }

  // -------------------------------------------------------------------------
  void setup_serve(CLI::App& app) {
    auto* c = app.add_subcommand("serve", "Serve the curation API");
    c->add_option("--checkpoint", srv_.checkpoint, "Hyper-network checkpoint")->required();
    c->add_option("--data", srv_.data, "Dataset directory or manifest.json")->required();
    c->add_option("--flags", srv_.flags, "Flag log (default: <data>/flags.jsonl)");
    c->add_option("--latent-map", srv_.latent_map, "Precomputed latent_map.json");
    c->add_option("--scores", srv_.test_dice, "Plain UNet checkpoint for the Test-Dice column");
    c->add_option("--host", srv_.host, "Bind address")->capture_default_str();
    c->add_option("--port", srv_.port, "Port (0 picks a free one)")->capture_default_str();
    c->add_option("--queue-depth", srv_.depth, "Inference queue depth")->capture_default_str();
    c->add_option("--k", srv_.k, "Default cluster count")->capture_default_str();
    c->add_option("--static", srv_.static_dir, "Directory of UI files to serve at /");
    c->callback([this] { action_ = [this] { serve(); }; });
  }

  void serve() {
    auto m = open_dataset(srv_.data);
    auto ck = load_checkpoint(srv_.checkpoint);
    ServiceOptions opt;
    opt.queue_depth = srv_.depth;
    opt.default_k = srv_.k;
    opt.cluster_seed = 0;
    if (!srv_.test_dice.empty()) opt.test_dice = test_dice_scores(load_checkpoint(srv_.test_dice), m);
    std::optional<LatentMap> map;
    if (!srv_.latent_map.empty()) map = import_latent_map(srv_.latent_map);
    const fs::path flags = srv_.flags.empty() ? m.root / "flags.jsonl" : fs::path(srv_.flags);
    CurationService service(std::move(m), std::move(ck), flags, opt, std::move(map));
    httplib::Server server;
    if (!srv_.static_dir.empty() && !server.set_mount_point("/", srv_.static_dir)) {
      throw IoError("cannot serve static files from " + srv_.static_dir);
    }
    serve_http(service, server, srv_.host, srv_.port, [&](int port) {
      out_ << "serving http://" << srv_.host << ':' << port << "/api flags=" << flags.string() << std::endl;
    });
  }

  // -------------------------------------------------------------------------
  void setup_report(CLI::App& app) {
    auto* c = app.add_subcommand("report", "Write a single-file summary of a trained model");
    c->add_option("--checkpoint", rep_.checkpoint, "Hyper-network checkpoint")->required();
    c->add_option("--data", rep_.data, "Dataset directory or manifest.json")->required();
    c->add_option("--out", rep_.out, "Report path (Markdown)")->required();
    c->add_option("--latent-map", rep_.latent_map, "Precomputed latent_map.json");
    c->add_option("--test-dice", rep_.test_dice, "Plain UNet checkpoint for the Test-Dice baseline");
    c->add_option("--k", rep_.k, "Number of clusters")->capture_default_str();
    c->callback([this] { action_ = [this] { report(); }; });
  }

  void report() {
    const auto m = open_dataset(rep_.data);
    const auto ck = load_checkpoint(rep_.checkpoint);
    check_match(ck, m);
    LatentMap map;
    if (!rep_.latent_map.empty()) {
      map = import_latent_map(rep_.latent_map);
    } else {
      map = build_latent_map(ck, m);
      cluster_latent_map(map, rep_.k, 0);
    }
    std::map<std::string, double> td;
    if (!rep_.test_dice.empty()) td = test_dice_scores(load_checkpoint(rep_.test_dice), m);

    std::ostringstream r;
    r << "# hypersort report\n\n";
    r << "- seed: " << ck.config.seed << "\n- config fingerprint: " << config_fingerprint(ck.config)
      << "\n- dataset fingerprint: " << ck.dataset_fingerprint << "\n- step: " << ck.step
      << "\n- samples: " << m.records.size() << "\n- latent dim: " << ck.config.latent_dim << "\n\n";
    r << "## Clusters\n\n| cluster | size | centroid | mean seg loss | clean | erode | dilate |\n"
      << "|---|---|---|---|---|---|---|\n";
    std::vector<std::size_t> assign;
    std::vector<std::string> styles;
    for (const auto& rec : map.records) {
      if (rec.cluster) assign.push_back(*rec.cluster);
      styles.push_back(rec.true_style);
    }
    for (const auto& c : map.clusters) {
      std::map<std::string, int> comp;
      for (const auto& id : c.members) ++comp[map.find(id).true_style];
      r << "| " << c.id << " | " << c.size << " | (";
      for (std::size_t j = 0; j < c.centroid.size(); ++j) r << (j ? ", " : "") << fmt(c.centroid[j]);
      r << ") | " << fmt(c.mean_seg_loss) << " | " << comp["clean"] << " | " << comp["erode"] << " | "
        << comp["dilate"] << " |\n";
    }
    if (assign.size() == styles.size() && !assign.empty()) {
      r << "\nMajority-style purity: " << fmt(cluster_purity(assign, styles)) << "\n";
    }
    const auto c = correlations(map, td);
    r << "\n## Spearman correlation with |perturbation magnitude|\n\n| predictor | rho |\n|---|---|\n"
      << "| latent norm | " << fmt(c.norm) << " |\n| mean distance | " << fmt(c.mean_distance) << " |\n"
      << "| Test-Dice (" << c.test_dice_n << " samples) | " << fmt(c.test_dice) << " |\n";

    const Predictor model(ck);
    std::size_t improved = 0, perturbed = 0;
    double before = 0, after = 0;
    for (const auto& rec : m.records) {
      if (rec.perturbation_magnitude == 0 || rec.clean_path.empty()) continue;
      const auto s = load_sample(m, rec);
      const auto clean = load_clean(m, rec);
      const double d_stored = dice_coefficient(s.mask, clean);
      const double d_zero = dice_coefficient(model.predict(std::vector<float>(ck.config.latent_dim, 0.0f), s.image).mask, clean);
      ++perturbed;
      improved += d_zero > d_stored;
      before += d_stored;
      after += d_zero;
    }
    r << "\n## Correction at the origin latent\n\n";
    if (perturbed) {
      r << "- perturbed samples: " << perturbed << "\n- improved vs clean: " << improved << " ("
        << fmt(static_cast<double>(improved) / perturbed) << ")\n- mean Dice(stored, clean): "
        << fmt(before / perturbed) << "\n- mean Dice(origin prediction, clean): " << fmt(after / perturbed) << "\n";
    } else {
      r << "No perturbed samples with clean references.\n";
    }
    detail::write_file(rep_.out, r.str());
    out_ << "wrote " << rep_.out << '\n';
  }

  std::ostream& out_;
  std::ostream& err_;
  std::function<void()> action_;

  struct {
    std::string out;
    std::size_t size = 0;
    GenerateOptions opt;
    std::string fractions = "0.85,0.075,0.075";
  } gen_;
  struct {
    std::string data, out, config, resume, log, subset = "clean", subset_file;
    std::size_t every = 0;
    bool plain = false;
    std::string steps, lr, latent_lr, alpha, batch, seed, latent_dim, stages, base, convs, hidden;
    std::vector<CLI::Option*> overrides;
    CLI::Option* no_early = nullptr;
  } train_;
  struct {
    std::string checkpoint, data, out, test_dice;
    std::size_t k = 3;
    std::uint64_t cluster_seed = 0;
  } an_;
  struct {
    std::string checkpoint, image, data, sample, lambda, latent_map, out, overlay, probs;
    int centroid = -1;
  } inf_;
  struct {
    std::string checkpoint, data, flags, latent_map, test_dice, host = "127.0.0.1", static_dir;
    int port = 8080;
    std::size_t depth = 4, k = 3;
  } srv_;
  struct {
    std::string checkpoint, data, out, latent_map, test_dice;
    std::size_t k = 3;
  } rep_;
};

}  // namespace cli

inline int cli_run(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  return cli::Runner(out, err).run(argc, argv);
}

}  // namespace hypersort
