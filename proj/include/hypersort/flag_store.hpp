#pragma once

// Append-only curation flags, one JSON event per line in flags.jsonl:
//   {"id": "s0003", "flag": "relabel-with", "lambda": [0.4, -0.1], "note": "...", "ts": "..."}
// The current flag of a sample is its most recent event.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hypersort/error.hpp"

namespace hypersort {

inline const std::vector<std::string>& flag_names() {
  static const std::vector<std::string> names = {"unreviewed", "looks-wrong", "confirmed-ok", "relabel-with"};
  return names;
}

inline bool is_flag_name(const std::string& s) {
  for (const auto& n : flag_names())
    if (n == s) return true;
  return false;
}

struct FlagEvent {
  std::string id;
  std::string flag;
  std::optional<std::vector<double>> lambda;  // only for relabel-with
  std::optional<std::string> note;
  std::string ts;

  bool operator==(const FlagEvent&) const = default;
};

inline nlohmann::json to_json(const FlagEvent& e) {
  nlohmann::json j = {{"id", e.id}, {"flag", e.flag}};
  if (e.lambda) j["lambda"] = *e.lambda;
  if (e.note) j["note"] = *e.note;
  j["ts"] = e.ts;
  return j;
}

// Validates the event shape; `latent_dim` of 0 skips the lambda length check.
inline FlagEvent flag_event_from_json(const nlohmann::json& j, std::size_t latent_dim = 0) {
  FlagEvent e;
  try {
    e.id = j.at("id").get<std::string>();
    e.flag = j.at("flag").get<std::string>();
    if (j.contains("lambda") && !j.at("lambda").is_null()) e.lambda = j.at("lambda").get<std::vector<double>>();
    if (j.contains("note") && !j.at("note").is_null()) e.note = j.at("note").get<std::string>();
    e.ts = j.value("ts", std::string{});
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("flag event: ") + ex.what());
  }
  if (!is_flag_name(e.flag)) throw FormatError("flag event: unknown flag '" + e.flag + "'");
  if (e.flag == "relabel-with" && !e.lambda) throw FormatError("flag event: relabel-with needs a lambda");
  if (e.flag != "relabel-with" && e.lambda) throw FormatError("flag event: only relabel-with carries a lambda");
  if (latent_dim && e.lambda && e.lambda->size() != latent_dim) {
    throw FormatError("flag event: lambda must have d=" + std::to_string(latent_dim) + " components");
  }
  return e;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class FlagStore {
 public:
  // Loads any existing log; the file is created on first append.
  explicit FlagStore(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_);
    if (!in) throw IoError("cannot read " + path_.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        events_.push_back(flag_event_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
      } catch (const FormatError& e) {
        throw FormatError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  const std::filesystem::path& path() const { return path_; }

  // Stamps the event if it has no timestamp, persists it, and returns it.
  FlagEvent append(FlagEvent e) {
    if (e.ts.empty()) e.ts = utc_timestamp();
    std::lock_guard<std::mutex> lock(mu_);
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    out << to_json(e).dump() << '\n';
    out.flush();
    if (!out) throw IoError("write failed on " + path_.string());
    events_.push_back(e);
    return e;
  }

  std::vector<FlagEvent> events() const {
    std::lock_guard<std::mutex> lock(mu_);
    return events_;
  }

  std::map<std::string, FlagEvent> current() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::map<std::string, FlagEvent> out;
    for (const auto& e : events_) out[e.id] = e;
    return out;
  }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<FlagEvent> events_;
};

}  // namespace hypersort
