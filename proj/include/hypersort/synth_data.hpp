#pragma once

// Synthetic labeling oracle: images of a single organ-like blob, the blob's
// true support as the clean mask, and an annotation produced by applying the
// record's labeling style to that mask. Owns the on-disk dataset layout:
//
//   dataset_dir/manifest.json
//   dataset_dir/images/<id>.tns   [1 x H x W] intensities
//   dataset_dir/labels/<id>.tns   [H x W] stored (possibly perturbed) annotation
//   dataset_dir/clean/<id>.tns    [H x W] clean annotation, evaluation only

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypersort/error.hpp"
#include "hypersort/fingerprint.hpp"
#include "hypersort/morphology.hpp"
#include "hypersort/tensor.hpp"
#include "hypersort/tns_io.hpp"

namespace hypersort {

inline constexpr int kManifestVersion = 1;

struct StyleFractions {
  double clean = 0.85;
  double erode = 0.075;
  double dilate = 0.075;

  bool operator==(const StyleFractions&) const = default;
};

struct SampleRecord {
  std::string id;
  std::string image_path;  // relative to the dataset root
  std::string label_path;
  std::string clean_path;  // empty when the dataset has no oracle truth
  OracleStyle true_style;
  int perturbation_magnitude = 0;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  StyleFractions fractions;
  std::vector<SampleRecord> records;
  std::filesystem::path root;  // where the manifest lives; not serialized

  const SampleRecord& find(const std::string& id) const {
    for (const auto& r : records)
      if (r.id == id) return r;
    throw DataError("unknown sample id '" + id + "'");
  }

  bool operator==(const DatasetManifest& o) const {
    return version == o.version && seed == o.seed && height == o.height && width == o.width &&
           fractions == o.fractions && records == o.records;
  }
};

struct Sample {
  Tensor image;  // [1 x H x W]
  Tensor mask;   // [H x W], 0/1
};

struct GenerateOptions {
  std::size_t count = 200;
  std::size_t height = 64;
  std::size_t width = 64;
  StyleFractions fractions;
  std::uint64_t seed = 0;
  // Images must be divisible by this (2^num_stages of the UNet that will consume them).
  std::size_t spatial_multiple = 4;
};

// ---------------------------------------------------------------------------
// Manifest JSON

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json j = {{"id", r.id},
                        {"image", r.image_path},
                        {"label", r.label_path},
                        {"style", {{"kind", style_name(r.true_style.kind)}}},
                        {"perturbation_magnitude", r.perturbation_magnitude}};
    if (!r.clean_path.empty()) j["clean"] = r.clean_path;
    if (r.true_style.kind != StyleKind::kClean) j["style"]["iterations"] = r.true_style.iterations;
    recs.push_back(std::move(j));
  }
  return {{"version", m.version},
          {"seed", m.seed},
          {"height", m.height},
          {"width", m.width},
          {"fractions", {{"clean", m.fractions.clean}, {"erode", m.fractions.erode}, {"dilate", m.fractions.dilate}}},
          {"records", std::move(recs)}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& origin) {
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) {
      throw FormatError(origin + ": unsupported manifest version " + std::to_string(m.version));
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    const auto& f = j.at("fractions");
    m.fractions = {f.at("clean").get<double>(), f.at("erode").get<double>(), f.at("dilate").get<double>()};
    std::set<std::string> ids;
    for (const auto& r : j.at("records")) {
      SampleRecord rec;
      rec.id = r.at("id").get<std::string>();
      rec.image_path = r.at("image").get<std::string>();
      rec.label_path = r.at("label").get<std::string>();
      rec.clean_path = r.value("clean", std::string{});
      rec.true_style.kind = parse_style(r.at("style").at("kind").get<std::string>());
      rec.true_style.iterations = r.at("style").value("iterations", 0);
      rec.true_style.validate();
      rec.perturbation_magnitude = r.at("perturbation_magnitude").get<int>();
      if (rec.perturbation_magnitude != rec.true_style.signed_magnitude()) {
        throw DataError(origin + ": record " + rec.id + " magnitude disagrees with its style");
      }
      if (!ids.insert(rec.id).second) throw DataError(origin + ": duplicate sample id " + rec.id);
      m.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed manifest: " + e.what());
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const auto text = detail::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
  auto m = manifest_from_json(j, path.string());
  m.root = path.parent_path();
  return m;
}

// Hash of the serialized manifest; checkpoints carry it to detect mismatched data.
inline std::string dataset_fingerprint(const DatasetManifest& m) {
  return fingerprint(manifest_to_json(m).dump());
}

// ---------------------------------------------------------------------------
// Sample I/O

inline Tensor load_mask(const DatasetManifest& m, const std::string& rel) {
  const auto path = m.root / rel;
  auto mask = read_tns(path);
  if (mask.shape() != Shape{m.height, m.width}) {
    throw DataError(path.string() + ": mask shape " + shape_str(mask.shape()) + " != manifest " +
                    shape_str({m.height, m.width}));
  }
  require_binary(mask, path.string());
  return mask;
}

inline Sample load_sample(const DatasetManifest& m, const SampleRecord& r) {
  const auto ipath = m.root / r.image_path;
  auto image = read_tns(ipath);
  if (image.shape() != Shape{1, m.height, m.width}) {
    throw DataError(ipath.string() + ": image shape " + shape_str(image.shape()) +
                    " != manifest " + shape_str({1, m.height, m.width}));
  }
  return {std::move(image), load_mask(m, r.label_path)};
}

inline Tensor load_clean(const DatasetManifest& m, const SampleRecord& r) {
  if (r.clean_path.empty()) throw DataError("sample " + r.id + " has no clean mask");
  return load_mask(m, r.clean_path);
}

// ---------------------------------------------------------------------------
// Generation

struct Phantom {
  Tensor image;  // [1 x H x W]
  Tensor mask;   // [H x W]
};

// One blob with noise texture on a background with a linear intensity
// gradient. The blob covers 20-40% of the image and keeps a margin of at
// least six pixels from every border, so five dilations never touch it and
// five erosions never empty it.
inline Phantom render_phantom(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  using std::numbers::pi;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  constexpr double kMargin = 6.0;
  constexpr int kHarmonics = 3;

  const double image_area = static_cast<double>(h * w);
  std::vector<float> mask(h * w);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const double frac = uni(0.20, 0.40);
    const double aspect = uni(1.0, 1.3);
    const double phi = uni(0.0, pi);
    double amp[kHarmonics], phase[kHarmonics], wobble = 0;
    for (int k = 0; k < kHarmonics; ++k) {
      amp[k] = uni(0.0, 0.05);
      phase[k] = uni(0.0, 2 * pi);
      wobble += amp[k];
    }
    // Equal-area ellipse, enlarged slightly so the wobble does not bias the area down.
    const double r_eq = std::sqrt(frac * image_area / pi);
    const double a = r_eq * std::sqrt(aspect), b = r_eq / std::sqrt(aspect);
    const double ext_x = std::hypot(a * std::cos(phi), b * std::sin(phi)) * (1 + wobble);
    const double ext_y = std::hypot(a * std::sin(phi), b * std::cos(phi)) * (1 + wobble);
    const double lo_x = kMargin + ext_x, hi_x = static_cast<double>(w) - 1 - kMargin - ext_x;
    const double lo_y = kMargin + ext_y, hi_y = static_cast<double>(h) - 1 - kMargin - ext_y;
    if (lo_x > hi_x || lo_y > hi_y) continue;
    const double cx = uni(lo_x, hi_x), cy = uni(lo_y, hi_y);

    std::size_t area = 0;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double dx = static_cast<double>(c) - cx, dy = static_cast<double>(r) - cy;
        const double u = (dx * std::cos(phi) + dy * std::sin(phi)) / a;
        const double v = (-dx * std::sin(phi) + dy * std::cos(phi)) / b;
        const double theta = std::atan2(v, u);
        double radius = 1;
        for (int k = 0; k < kHarmonics; ++k) radius += amp[k] * std::cos((k + 2) * theta + phase[k]);
        const bool inside = std::hypot(u, v) <= radius;
        mask[r * w + c] = inside ? 1.0f : 0.0f;
        area += inside;
      }
    const double got = static_cast<double>(area) / image_area;
    if (got < 0.20 || got > 0.40) continue;

    // Intensities.
    const double bg = uni(0.10, 0.30), fg = uni(0.55, 0.80);
    const double grad = uni(-0.15, 0.15), grad_dir = uni(0.0, 2 * pi);
    double tex_amp[3], tex_fx[3], tex_fy[3], tex_ph[3];
    for (int k = 0; k < 3; ++k) {
      tex_amp[k] = uni(0.01, 0.04);
      tex_fx[k] = uni(-0.5, 0.5);
      tex_fy[k] = uni(-0.5, 0.5);
      tex_ph[k] = uni(0.0, 2 * pi);
    }
    std::normal_distribution<double> noise(0.0, 0.04);
    std::vector<float> img(h * w);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double x = static_cast<double>(c) / static_cast<double>(w);
        const double y = static_cast<double>(r) / static_cast<double>(h);
        double v = bg + grad * (x * std::cos(grad_dir) + y * std::sin(grad_dir));
        if (mask[r * w + c] > 0) {
          v = fg;
          for (int k = 0; k < 3; ++k)
            v += tex_amp[k] * std::sin(tex_fx[k] * static_cast<double>(c) +
                                       tex_fy[k] * static_cast<double>(r) + tex_ph[k]);
        }
        img[r * w + c] = static_cast<float>(v + noise(rng));
      }
    return {Tensor::from_data({1, h, w}, std::move(img)), Tensor::from_data({h, w}, mask)};
  }
  throw ContractError("generate_dataset: a " + std::to_string(h) + "x" + std::to_string(w) +
                      " image is too small to hold a 20-40% blob with a 6 pixel margin");
}

inline std::string sample_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "s%04zu", index);
  return buf;
}

// Style counts are allocated exactly (rounded) and then shuffled across
// records, so the realized fractions match the requested ones to within one
// sample.
inline std::vector<OracleStyle> assign_styles(std::size_t n, const StyleFractions& f,
                                              std::uint64_t seed) {
  const auto n_erode = static_cast<std::size_t>(std::llround(f.erode * static_cast<double>(n)));
  const auto n_dilate = static_cast<std::size_t>(std::llround(f.dilate * static_cast<double>(n)));
  if (n_erode + n_dilate > n) throw ContractError("style fractions exceed the dataset size");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> iters(3, 5);
  std::vector<OracleStyle> styles(n, OracleStyle::clean());
  for (std::size_t i = 0; i < n_erode; ++i) styles[i] = OracleStyle::erode(iters(rng));
  for (std::size_t i = 0; i < n_dilate; ++i) styles[n_erode + i] = OracleStyle::dilate(iters(rng));
  std::shuffle(styles.begin(), styles.end(), rng);
  return styles;
}

inline DatasetManifest generate_dataset(const GenerateOptions& opt, const std::filesystem::path& dir) {
  const double fsum = opt.fractions.clean + opt.fractions.erode + opt.fractions.dilate;
  if (opt.fractions.clean < 0 || opt.fractions.erode < 0 || opt.fractions.dilate < 0 ||
      std::abs(fsum - 1.0) > 1e-9) {
    throw ContractError("style fractions must be nonnegative and sum to 1");
  }
  if (opt.count == 0) throw ContractError("generate_dataset: count must be positive");
  if (opt.height % opt.spatial_multiple || opt.width % opt.spatial_multiple) {
    throw ContractError("generate_dataset: dims " + std::to_string(opt.height) + "x" +
                        std::to_string(opt.width) + " must be multiples of " +
                        std::to_string(opt.spatial_multiple));
  }

  DatasetManifest m;
  m.seed = opt.seed;
  m.height = opt.height;
  m.width = opt.width;
  m.root = dir;
  const auto styles = assign_styles(opt.count, opt.fractions, opt.seed);
  std::size_t counts[3] = {0, 0, 0};
  for (std::size_t i = 0; i < opt.count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    auto phantom = render_phantom(opt.height, opt.width, rng);
    SampleRecord rec;
    rec.id = sample_id(i);
    rec.image_path = "images/" + rec.id + ".tns";
    rec.label_path = "labels/" + rec.id + ".tns";
    rec.clean_path = "clean/" + rec.id + ".tns";
    rec.true_style = styles[i];
    rec.perturbation_magnitude = styles[i].signed_magnitude();
    write_tns(dir / rec.image_path, phantom.image);
    write_tns(dir / rec.clean_path, phantom.mask);
    write_tns(dir / rec.label_path, perturb_mask(phantom.mask, styles[i]));
    ++counts[static_cast<int>(styles[i].kind)];
    m.records.push_back(std::move(rec));
  }
  const double n = static_cast<double>(opt.count);
  m.fractions = {counts[0] / n, counts[1] / n, counts[2] / n};
  save_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace hypersort
