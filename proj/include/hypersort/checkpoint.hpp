#pragma once

// ".hsc" checkpoint files.
//
//   "HSC1"  u32 format version  u32 header length  header JSON (UTF-8)
//   u32 section count
//   section table: per section  u16 name length, name, u64 offset, u64 length
//   section payloads, each a complete ".tns" blob
//
// Offsets are absolute from the start of the file. The header carries the
// UNet config, latent dimension, P, seed, step, full train config, dataset
// fingerprint, latent ids and per-latent Adam step counts.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hypersort/error.hpp"
#include "hypersort/tns_io.hpp"
#include "hypersort/train_config.hpp"
#include "hypersort/training.hpp"

namespace hypersort {

inline constexpr std::string_view kCheckpointMagic = "HSC1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct Section {
  std::string name;
  std::string blob;
};

inline void add_buffer(std::vector<Section>& out, std::string name, const Shape& shape,
                       std::span<const float> values) {
  out.push_back({std::move(name), encode_tns(shape, values)});
}

inline void add_moments(std::vector<Section>& out, const std::string& name, const Shape& shape,
                        const AdamState& s) {
  add_buffer(out, name + ".m", shape, s.m);
  add_buffer(out, name + ".v", shape, s.v);
}

inline nlohmann::json early_stop_json(const EarlyStopState& e) {
  return {{"window_sum", e.window_sum},
          {"window_count", e.window_count},
          {"last_average", e.last_average},
          {"stalls", e.stalls},
          {"stopped", e.stopped}};
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const auto layout = param_layout(ck.config.unet);
  nlohmann::json header = {
      {"format_version", kCheckpointVersion},
      {"kind", ck.kind == ModelKind::kHyper ? "hyper" : "plain"},
      {"unet", to_json(ck.config.unet)},
      {"latent_dim", ck.config.latent_dim},
      {"param_count", layout.total},
      {"seed", ck.config.seed},
      {"step", ck.step},
      {"train_config", to_json(ck.config)},
      {"config_fingerprint", config_fingerprint(ck.config)},
      {"dataset_fingerprint", ck.dataset_fingerprint},
      {"early_stop", detail::early_stop_json(ck.early_stop)},
  };

  std::vector<detail::Section> sections;
  if (ck.kind == ModelKind::kHyper) {
    const auto params = ck.hyper.parameters();
    if (ck.hyper_moments.size() != params.size()) {
      throw ContractError("checkpoint: moment count does not match hyper-network parameters");
    }
    header["hyper_layers"] = ck.hyper.weights.size();
    header["hyper_adam_step"] = ck.hyper_moments.empty() ? 0 : ck.hyper_moments.front().t;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string name = "hyper." + std::string(i % 2 ? "b" : "w") + std::to_string(i / 2);
      detail::add_buffer(sections, name, params[i].shape(), params[i].data());
      detail::add_moments(sections, name, params[i].shape(), ck.hyper_moments[i]);
    }
    const std::size_t n = ck.latents.size(), d = ck.config.latent_dim;
    std::vector<float> lam, m, v;
    std::vector<std::uint64_t> steps;
    for (std::size_t i = 0; i < n; ++i) {
      lam.insert(lam.end(), ck.latents.values[i].data().begin(), ck.latents.values[i].data().end());
      m.insert(m.end(), ck.latents.moments[i].m.begin(), ck.latents.moments[i].m.end());
      v.insert(v.end(), ck.latents.moments[i].v.begin(), ck.latents.moments[i].v.end());
      steps.push_back(ck.latents.moments[i].t);
    }
    header["latent_ids"] = ck.latents.ids;
    header["latent_adam_steps"] = steps;
    if (n > 0) {
      detail::add_buffer(sections, "latents", {n, d}, lam);
      detail::add_buffer(sections, "latents.m", {n, d}, m);
      detail::add_buffer(sections, "latents.v", {n, d}, v);
    }
  } else {
    header["sample_ids"] = ck.sample_ids;
    header["theta_adam_step"] = ck.theta_moments.t;
    detail::add_buffer(sections, "theta", {ck.theta.size()}, ck.theta);
    detail::add_moments(sections, "theta", {ck.theta.size()}, ck.theta_moments);
  }

  const std::string header_text = header.dump();
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  detail::put_u32(out, static_cast<std::uint32_t>(sections.size()));
  std::uint64_t table_size = 0;
  for (const auto& s : sections) table_size += 2 + s.name.size() + 16;
  std::uint64_t offset = out.size() + table_size;
  for (const auto& s : sections) {
    out.push_back(static_cast<char>(s.name.size() & 0xFF));
    out.push_back(static_cast<char>((s.name.size() >> 8) & 0xFF));
    out += s.name;
    detail::put_u64(out, offset);
    detail::put_u64(out, s.blob.size());
    offset += s.blob.size();
  }
  for (const auto& s : sections) out += s.blob;
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) { return FormatError(origin + ": " + why); };
  if (bytes.size() < 12 || bytes.substr(0, 4) != kCheckpointMagic) throw fail("bad magic, not an HSC1 checkpoint");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t hlen = detail::get_u32(bytes, 8);
  std::size_t pos = 12;
  if (bytes.size() < pos + hlen + 4) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("corrupt header: ") + e.what());
  }
  pos += hlen;
  const std::uint32_t count = detail::get_u32(bytes, pos);
  pos += 4;
  std::map<std::string, Tensor> sections;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (bytes.size() < pos + 2) throw fail("truncated section table");
    const std::size_t nlen = static_cast<unsigned char>(bytes[pos]) |
                             (static_cast<std::size_t>(static_cast<unsigned char>(bytes[pos + 1])) << 8);
    pos += 2;
    if (bytes.size() < pos + nlen + 16) throw fail("truncated section table");
    std::string name(bytes.substr(pos, nlen));
    pos += nlen;
    const std::uint64_t off = detail::get_u64(bytes, pos), len = detail::get_u64(bytes, pos + 8);
    pos += 16;
    if (off + len > bytes.size()) throw fail("section " + name + " runs past end of file");
    sections.emplace(name, decode_tns(bytes.substr(off, len), origin + "#" + name));
  }
  auto section = [&](const std::string& name) -> const Tensor& {
    auto it = sections.find(name);
    if (it == sections.end()) throw fail("missing section " + name);
    return it->second;
  };
  auto moments = [&](const std::string& name, std::uint64_t t) {
    AdamState s;
    s.m = section(name + ".m").to_vector();
    s.v = section(name + ".v").to_vector();
    s.t = t;
    return s;
  };

  Checkpoint ck;
  try {
    ck.config = train_config_from_json(header.at("train_config"));
    ck.dataset_fingerprint = header.at("dataset_fingerprint").get<std::string>();
    ck.step = header.at("step").get<std::uint64_t>();
    const auto& es = header.at("early_stop");
    ck.early_stop = {es.at("window_sum").get<double>(), es.at("window_count").get<std::size_t>(),
                     es.at("last_average").get<double>(), es.at("stalls").get<std::size_t>(),
                     es.at("stopped").get<bool>()};
    const std::string kind = header.at("kind").get<std::string>();
    if (header.at("param_count").get<std::size_t>() != param_count(ck.config.unet)) {
      throw fail("param_count disagrees with the stored UNet config");
    }
    if (kind == "hyper") {
      ck.kind = ModelKind::kHyper;
      const std::size_t layers = header.at("hyper_layers").get<std::size_t>();
      const std::uint64_t t = header.at("hyper_adam_step").get<std::uint64_t>();
      ck.hyper.latent_dim = ck.config.latent_dim;
      for (std::size_t i = 0; i < layers; ++i) {
        for (const char* part : {"w", "b"}) {
          const std::string name = std::string("hyper.") + part + std::to_string(i);
          auto t_leaf = section(name).detach();
          t_leaf.set_requires_grad(true);
          (part[0] == 'w' ? ck.hyper.weights : ck.hyper.biases).push_back(t_leaf);
          ck.hyper_moments.push_back(moments(name, t));
        }
      }
      ck.latents.ids = header.at("latent_ids").get<std::vector<std::string>>();
      const auto steps = header.at("latent_adam_steps").get<std::vector<std::uint64_t>>();
      const std::size_t n = ck.latents.ids.size(), d = ck.config.latent_dim;
      if (steps.size() != n) throw fail("latent step counts do not match latent ids");
      if (n > 0) {
        const Tensor &lam = section("latents"), &m = section("latents.m"), &v = section("latents.v");
        if (lam.shape() != Shape{n, d}) throw fail("latents section has shape " + shape_str(lam.shape()));
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<float> row(lam.data().begin() + i * d, lam.data().begin() + (i + 1) * d);
          ck.latents.values.push_back(Tensor::from_data({d}, std::move(row), true));
          AdamState s;
          s.m.assign(m.data().begin() + i * d, m.data().begin() + (i + 1) * d);
          s.v.assign(v.data().begin() + i * d, v.data().begin() + (i + 1) * d);
          s.t = steps[i];
          ck.latents.moments.push_back(std::move(s));
        }
      }
    } else if (kind == "plain") {
      ck.kind = ModelKind::kPlain;
      ck.sample_ids = header.at("sample_ids").get<std::vector<std::string>>();
      ck.theta = section("theta").to_vector();
      ck.theta_moments = moments("theta", header.at("theta_adam_step").get<std::uint64_t>());
    } else {
      throw fail("unknown checkpoint kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path.string());
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace hypersort
