#pragma once

// Training configuration plus its file forms: JSON, or key=value lines.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypersort/error.hpp"
#include "hypersort/fingerprint.hpp"
#include "hypersort/tns_io.hpp"
#include "hypersort/unet.hpp"

namespace hypersort {

struct TrainConfig {
  double lr = 1e-4;
  double latent_lr = 1e-4;
  double alpha = 0.01;
  std::size_t steps = 20000;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  UNetConfig unet;
  std::size_t latent_dim = 2;
  std::vector<std::size_t> hidden = {50, 50, 50};
  double latent_init_std = 0.01;
  // Stop when a window-averaged total loss improves by less than
  // early_stop_tolerance (relative) for early_stop_patience windows in a row.
  bool early_stop = true;
  std::size_t early_stop_window = 200;
  std::size_t early_stop_patience = 3;
  double early_stop_tolerance = 1e-3;

  void validate() const {
    if (!(lr > 0) || !(latent_lr > 0)) throw ContractError("lr and latent_lr must be positive");
    if (!(alpha >= 0)) throw ContractError("alpha must be nonnegative");
    if (steps < 1) throw ContractError("steps must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (latent_dim < 1) throw ContractError("latent_dim must be >= 1");
    if (early_stop_window < 1) throw ContractError("early_stop_window must be >= 1");
    unet.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"num_stages", c.num_stages},
          {"base_channels", c.base_channels},
          {"convs_per_stage", c.convs_per_stage}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"latent_lr", c.latent_lr},
          {"alpha", c.alpha},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"unet", to_json(c.unet)},
          {"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"latent_init_std", c.latent_init_std},
          {"early_stop", c.early_stop},
          {"early_stop_window", c.early_stop_window},
          {"early_stop_patience", c.early_stop_patience},
          {"early_stop_tolerance", c.early_stop_tolerance}};
}

namespace detail {

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline UNetConfig unet_config_from_json(const nlohmann::json& j, UNetConfig c = {}) {
  detail::read_opt(j, "in_channels", c.in_channels);
  detail::read_opt(j, "num_classes", c.num_classes);
  detail::read_opt(j, "num_stages", c.num_stages);
  detail::read_opt(j, "base_channels", c.base_channels);
  detail::read_opt(j, "convs_per_stage", c.convs_per_stage);
  return c;
}

// Missing keys keep the values of `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    detail::read_opt(j, "lr", c.lr);
    detail::read_opt(j, "latent_lr", c.latent_lr);
    detail::read_opt(j, "alpha", c.alpha);
    detail::read_opt(j, "steps", c.steps);
    detail::read_opt(j, "batch_size", c.batch_size);
    detail::read_opt(j, "seed", c.seed);
    if (j.contains("unet")) c.unet = unet_config_from_json(j.at("unet"), c.unet);
    detail::read_opt(j, "latent_dim", c.latent_dim);
    detail::read_opt(j, "hidden", c.hidden);
    detail::read_opt(j, "latent_init_std", c.latent_init_std);
    detail::read_opt(j, "early_stop", c.early_stop);
    detail::read_opt(j, "early_stop_window", c.early_stop_window);
    detail::read_opt(j, "early_stop_patience", c.early_stop_patience);
    detail::read_opt(j, "early_stop_tolerance", c.early_stop_tolerance);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

// key=value lines; '#' starts a comment. Nested UNet keys are written as
// unet.base_channels=8, hidden layers as hidden=50,50,50.
inline TrainConfig parse_key_value_config(const std::string& text, TrainConfig base = {}) {
  nlohmann::json j = nlohmann::json::object();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    nlohmann::json parsed;
    if (key == "hidden") {
      parsed = nlohmann::json::array();
      std::istringstream vs(value);
      std::string item;
      while (std::getline(vs, item, ',')) parsed.push_back(std::stoul(item));
    } else if (value == "true" || value == "false") {
      parsed = value == "true";
    } else {
      try {
        parsed = nlohmann::json::parse(value);
      } catch (const nlohmann::json::exception&) {
        throw FormatError("config line " + std::to_string(lineno) + ": bad value for " + key);
      }
    }
    if (key.rfind("unet.", 0) == 0) {
      j["unet"][key.substr(5)] = parsed;
    } else {
      j[key] = parsed;
    }
  }
  return train_config_from_json(j, base);
}

inline TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {}) {
  const std::string text = detail::read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return train_config_from_json(nlohmann::json::parse(text), base);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return parse_key_value_config(text, base);
}

inline std::string config_fingerprint(const TrainConfig& c) { return fingerprint(to_json(c).dump()); }

}  // namespace hypersort
