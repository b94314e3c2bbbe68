#pragma once

// Read-mostly HTTP API over a frozen checkpoint, its dataset and a flag log.
//
//   GET  /api/info                         model and dataset summary
//   GET  /api/latent-map                   latent_map.json payload
//   GET  /api/sample/{id}/image|label|clean  PNG
//   POST /api/infer   {sample_id?, lambda}   mask PNG (base64) and Dice readouts
//   GET  /api/flags                        all events and the current flag per id
//   POST /api/flags   {id, flag, lambda?, note?}
//   GET  /api/clusters?k=K                 k-means on the latent table
//   GET  /api/scores                       predictor scores CSV
//
// Errors are JSON {"error": message, "status": code}.

#include <atomic>
#include <cstddef>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "hypersort/checkpoint.hpp"
#include "hypersort/error.hpp"
#include "hypersort/flag_store.hpp"
#include "hypersort/latent_analysis.hpp"
#include "hypersort/metrics.hpp"
#include "hypersort/png.hpp"
#include "hypersort/synth_data.hpp"

namespace hypersort {

struct ApiRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Admits at most `depth` inference requests at once (running plus waiting)
// and runs them one at a time.
class InferenceQueue {
 public:
  explicit InferenceQueue(std::size_t depth) : depth_(depth) {
    if (depth_ < 1) throw ContractError("inference queue depth must be >= 1");
  }

  std::size_t depth() const { return depth_; }

  template <class F>
  std::optional<std::invoke_result_t<F>> run(F&& f) {
    if (pending_.fetch_add(1) >= depth_) {
      pending_.fetch_sub(1);
      return std::nullopt;
    }
    struct Leave {
      std::atomic<std::size_t>& n;
      ~Leave() { n.fetch_sub(1); }
    } leave{pending_};
    std::lock_guard<std::mutex> lock(run_);
    return f();
  }

 private:
  std::size_t depth_;
  std::atomic<std::size_t> pending_{0};
  std::mutex run_;
};

struct ServiceOptions {
  std::size_t queue_depth = 4;
  std::size_t default_k = 3;
  std::uint64_t cluster_seed = 0;
  std::map<std::string, double> test_dice;  // optional column for /api/scores
};

class CurationService {
 public:
  // `map` may come from a previous analyze run; otherwise it is rebuilt from
  // the checkpoint and clustered with default_k.
  CurationService(DatasetManifest manifest, Checkpoint ck, std::filesystem::path flags_path,
                  ServiceOptions opt = {}, std::optional<LatentMap> map = std::nullopt)
      : manifest_(std::move(manifest)), ck_(std::move(ck)), model_(ck_), flags_(std::move(flags_path)),
        queue_(opt.queue_depth), opt_(std::move(opt)) {
    if (ck_.kind != ModelKind::kHyper) throw DataError("service needs a hyper-network checkpoint");
    const auto fp = dataset_fingerprint(manifest_);
    if (ck_.dataset_fingerprint != fp) {
      throw DataError("checkpoint dataset fingerprint " + ck_.dataset_fingerprint +
                      " does not match manifest " + fp);
    }
    if (map) {
      if (map->dataset_fingerprint != fp) throw DataError("latent map was built from a different dataset");
      map_ = std::move(*map);
    } else {
      map_ = build_latent_map(ck_, manifest_);
      if (manifest_.records.size() >= opt_.default_k) cluster_latent_map(map_, opt_.default_k, opt_.cluster_seed);
    }
    for (const auto& r : manifest_.records) {
      Cached c;
      auto s = load_sample(manifest_, r);
      c.image = std::move(s.image);
      c.label = std::move(s.mask);
      if (!r.clean_path.empty()) c.clean = load_clean(manifest_, r);
      cache_.emplace(r.id, std::move(c));
    }
  }

  const LatentMap& latent_map() const { return map_; }
  const FlagStore& flags() const { return flags_; }

  ApiResponse handle(const ApiRequest& req) {
    try {
      return route(req);
    } catch (const ApiError& e) {
      return error(e.status, e.what());
    } catch (const FormatError& e) {
      return error(400, e.what());
    } catch (const DimensionError& e) {
      return error(400, e.what());
    } catch (const Error& e) {
      return error(500, e.what());
    }
  }

 private:
  struct Cached {
    Tensor image, label;
    std::optional<Tensor> clean;
  };

  struct ApiError : std::runtime_error {
    ApiError(int s, const std::string& m) : std::runtime_error(m), status(s) {}
    int status;
  };

  static ApiResponse json(const nlohmann::json& j, int status = 200) { return {status, "application/json", j.dump()}; }
  static ApiResponse error(int status, const std::string& msg) {
    return json({{"error", msg}, {"status", status}}, status);
  }

  const Cached& sample(const std::string& id) const {
    auto it = cache_.find(id);
    if (it == cache_.end()) throw ApiError(404, "unknown sample id '" + id + "'");
    return it->second;
  }

  static nlohmann::json parse_body(const std::string& body) {
    try {
      return nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ApiError(400, std::string("request body is not JSON: ") + e.what());
    }
  }

  std::vector<float> parse_lambda(const nlohmann::json& j) const {
    const std::size_t d = model_.latent_dim();
    if (!j.is_array()) throw ApiError(400, "lambda must be an array of d=" + std::to_string(d) + " numbers");
    std::vector<float> lam;
    for (const auto& v : j) {
      if (!v.is_number()) throw ApiError(400, "lambda must be an array of d=" + std::to_string(d) + " numbers");
      lam.push_back(v.get<float>());
    }
    if (lam.size() != d) {
      throw ApiError(400, "lambda has " + std::to_string(lam.size()) + " components, expected d=" +
                              std::to_string(d));
    }
    return lam;
  }

  ApiResponse route(const ApiRequest& req) {
    static const std::regex sample_re("^/api/sample/([^/]+)/(image|label|clean)$");
    std::smatch m;
    const bool get = req.method == "GET", post = req.method == "POST";
    if (get && req.path == "/api/info") return info();
    if (get && req.path == "/api/latent-map") return json(latent_map_to_json(map_));
    if (get && std::regex_match(req.path, m, sample_re)) return sample_png(m[1], m[2]);
    if (post && req.path == "/api/infer") return infer(parse_body(req.body));
    if (get && req.path == "/api/flags") return list_flags();
    if (post && req.path == "/api/flags") return add_flag(parse_body(req.body));
    if (get && req.path == "/api/clusters") return clusters(req.query);
    if (get && req.path == "/api/scores") {
      return {200, "text/csv", scores_csv(map_, opt_.test_dice)};
    }
    if (req.path.rfind("/api/", 0) == 0) throw ApiError(404, "no endpoint " + req.method + " " + req.path);
    throw ApiError(404, "not found: " + req.path);
  }

  ApiResponse info() const {
    return json({{"latent_dim", model_.latent_dim()},
                 {"param_count", model_.layout().total},
                 {"step", ck_.step},
                 {"seed", ck_.config.seed},
                 {"config_fingerprint", config_fingerprint(ck_.config)},
                 {"dataset_fingerprint", ck_.dataset_fingerprint},
                 {"records", manifest_.records.size()},
                 {"height", manifest_.height},
                 {"width", manifest_.width},
                 {"has_clean", !manifest_.records.empty() && !manifest_.records[0].clean_path.empty()},
                 {"queue_depth", queue_.depth()}});
  }

  ApiResponse sample_png(const std::string& id, const std::string& which) const {
    const Cached& c = sample(id);
    if (which == "image") return {200, "image/png", image_png(c.image)};
    if (which == "label") return {200, "image/png", mask_png(c.label)};
    if (!c.clean) throw ApiError(404, "sample '" + id + "' has no clean label");
    return {200, "image/png", mask_png(*c.clean)};
  }

  ApiResponse infer(const nlohmann::json& body) {
    if (!body.is_object() || !body.contains("lambda")) throw ApiError(400, "body needs a lambda array");
    const auto lam = parse_lambda(body.at("lambda"));
    std::optional<std::string> id;
    if (body.contains("sample_id") && !body.at("sample_id").is_null()) id = body.at("sample_id").get<std::string>();
    Tensor image;
    const Cached* c = nullptr;
    if (id) {
      c = &sample(*id);
      image = c->image;
    } else if (body.contains("image_tns")) {
      image = decode_tns(base64_decode(body.at("image_tns").get<std::string>()), "image_tns");
    } else {
      throw ApiError(400, "body needs a sample_id or an image_tns");
    }
    auto result = queue_.run([&] { return model_.predict(lam, image); });
    if (!result) throw ApiError(503, "inference queue is full (depth " + std::to_string(queue_.depth()) + ")");
    nlohmann::json out = {{"sample_id", id ? nlohmann::json(*id) : nlohmann::json(nullptr)},
                          {"lambda", lam},
                          {"foreground", foreground_count(result->mask)},
                          {"mask_png", base64_encode(mask_png(result->mask))},
                          {"dice_vs_stored", nullptr},
                          {"dice_vs_clean", nullptr}};
    if (c) {
      out["dice_vs_stored"] = dice_coefficient(result->mask, c->label);
      if (c->clean) out["dice_vs_clean"] = dice_coefficient(result->mask, *c->clean);
    }
    return json(out);
  }

  ApiResponse list_flags() const {
    nlohmann::json events = nlohmann::json::array(), current = nlohmann::json::object();
    for (const auto& e : flags_.events()) events.push_back(to_json(e));
    for (const auto& [id, e] : flags_.current()) current[id] = to_json(e);
    return json({{"events", events}, {"current", current}});
  }

  ApiResponse add_flag(const nlohmann::json& body) {
    if (!body.is_object()) throw ApiError(400, "flag body must be an object");
    if (body.contains("lambda") && !body.at("lambda").is_null()) parse_lambda(body.at("lambda"));
    auto e = flag_event_from_json(body, model_.latent_dim());
    sample(e.id);
    e.ts.clear();
    return json(to_json(flags_.append(std::move(e))), 201);
  }

  ApiResponse clusters(const std::map<std::string, std::string>& query) const {
    std::size_t k = opt_.default_k;
    if (auto it = query.find("k"); it != query.end()) {
      try {
        std::size_t used = 0;
        const long v = std::stol(it->second, &used);
        if (used != it->second.size() || v < 1) throw std::invalid_argument("k");
        k = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ApiError(400, "k must be a positive integer");
      }
    }
    if (k > map_.records.size()) {
      throw ApiError(400, "k=" + std::to_string(k) + " exceeds the " + std::to_string(map_.records.size()) +
                              " samples");
    }
    LatentMap copy = map_;
    cluster_latent_map(copy, k, opt_.cluster_seed);
    nlohmann::json assignment = nlohmann::json::object();
    for (const auto& r : copy.records) assignment[r.id] = *r.cluster;
    return json({{"k", k}, {"clusters", latent_map_to_json(copy).at("clusters")}, {"assignment", assignment}});
  }

  DatasetManifest manifest_;
  Checkpoint ck_;
  Predictor model_;
  FlagStore flags_;
  InferenceQueue queue_;
  ServiceOptions opt_;
  LatentMap map_;
  std::map<std::string, Cached> cache_;
};

// Serves `service` until stop() is called on the returned server's owner.
// `on_ready` receives the bound port (useful with port 0).
inline void serve_http(CurationService& service, httplib::Server& server, const std::string& host, int port,
                       const std::function<void(int)>& on_ready = {}) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    ApiRequest a{req.method, req.path, {}, req.body};
    for (const auto& [k, v] : req.params) a.query[k] = v;
    const ApiResponse r = service.handle(a);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get(".*", forward);
  server.Post(".*", forward);
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  if (on_ready) on_ready(bound);
  server.listen_after_bind();
}

}  // namespace hypersort
