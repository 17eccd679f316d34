#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/annotate.hpp"
#include "parafill/pipeline.hpp"

namespace httplib {
class Server;
}

namespace parafill::service {

enum class Role { All, Master, Ner, Generate };
std::string to_string(Role r);
Role parse_role(const std::string& s);

struct ComputeNode {
  std::string id;
  Role role = Role::Generate;  // Ner or Generate
  std::string base_url;        // "http://host:port"
  bool healthy = true;
  nlohmann::json health;  // last probe body
};

/// Round-robin over the healthy nodes of each role.
class Router {
 public:
  explicit Router(std::vector<ComputeNode> nodes);
  Router(const Router& other);
  Router& operator=(const Router&) = delete;

  /// Reads {"nodes": [{"role": "ner"|"generate", "url": ...}]}.
  static Router load(const std::filesystem::path& path);

  /// Next healthy node of `role` in rotation; none when all are down.
  std::optional<ComputeNode> next(Role role);
  void mark(const std::string& id, bool healthy, nlohmann::json health = nullptr);
  std::vector<ComputeNode> nodes() const;

 private:
  mutable std::mutex mu_;
  std::vector<ComputeNode> nodes_;
  std::size_t cursor_[4] = {0, 0, 0, 0};
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

/// Forwards a JSON POST to a node; throws std::runtime_error when the node
/// cannot be reached. Replaceable for tests.
using Forwarder = std::function<Reply(const ComputeNode& node, const std::string& path, const std::string& body)>;
Forwarder http_forwarder(std::chrono::milliseconds timeout = std::chrono::seconds(60));

struct ServiceConfig {
  Role role = Role::All;
  std::size_t max_body_bytes = 64 * 1024;
  std::size_t max_suggestions = 5;
  std::string cors_origin = "*";
  std::optional<std::filesystem::path> static_dir;  // mounted at "/" by master and all-in-one nodes
};

/// Request handling independent of the socket layer. The loaded engine is
/// immutable and shared; reload swaps it atomically.
class Service {
 public:
  Service(ServiceConfig config, annotate::Gazetteer gazetteer, std::shared_ptr<const pipeline::Engine> engine,
          std::optional<Router> router = std::nullopt, Forwarder forward = http_forwarder());

  Reply ner(const std::string& body) const;
  Reply generate(const std::string& body) const;
  Reply health() const;

  void swap_engine(std::shared_ptr<const pipeline::Engine> engine);
  std::shared_ptr<const pipeline::Engine> engine() const { return std::atomic_load(&engine_); }

  /// Probes every routed node's /health and updates the router.
  void probe_nodes();

  /// Registers routes, CORS and size limits on `server`.
  void mount(httplib::Server& server);

  const ServiceConfig& config() const { return config_; }

 private:
  Reply route(Role role, const std::string& path, const std::string& body) const;

  ServiceConfig config_;
  annotate::Gazetteer gazetteer_;
  std::shared_ptr<const pipeline::Engine> engine_;
  mutable std::optional<Router> router_;
  Forwarder forward_;
  std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();
};

/// Parsed body of POST /api/generate.
struct GenerationRequest {
  pipeline::Request sections;
  nlohmann::json decode_overrides = nlohmann::json::object();
  std::size_t n_suggestions = 3;
  std::uint64_t seed = 0;
};

/// Throws UsageError on a malformed request.
GenerationRequest parse_generation_request(const nlohmann::json& j, std::size_t max_suggestions = 5);

/// Removes literal special-token names from generated text.
std::string strip_special_names(std::string text);

/// Environment configuration: MODEL_PATH, VOCAB_PATH, BIND_ADDR, NODES_FILE,
/// GAZETTEER_PATH.
struct EnvConfig {
  std::optional<std::string> model_path;
  std::optional<std::string> vocab_path;
  std::string bind_addr = "127.0.0.1:8080";
  std::optional<std::string> nodes_file;
  std::optional<std::string> gazetteer_path;
};
EnvConfig env_config();

/// Splits "host:port"; throws UsageError when malformed.
std::pair<std::string, int> parse_bind(const std::string& addr);

}  // namespace parafill::service
