#include "parafill/service.hpp"

#include <cstdlib>
#include <stdexcept>

#include <httplib.h>

#include "parafill/hash.hpp"

namespace parafill::service {

namespace {

int role_index(Role r) { return static_cast<int>(r); }

Reply error(int status, const std::string& message, nlohmann::json extra = nlohmann::json::object()) {
  extra["error"] = message;
  return {status, std::move(extra)};
}

std::optional<Reply> check_size(const std::string& body, std::size_t limit) {
  if (body.size() > limit)
    return error(413, "request body exceeds " + std::to_string(limit) + " bytes", {{"limit", limit}});
  return std::nullopt;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

EntitySet parse_entities(const nlohmann::json& j) {
  if (j.is_null()) return {};
  if (j.is_array()) {
    EntitySet e;
    for (const auto& v : j) e.misc.push_back(v.get<std::string>());
    return e;
  }
  if (!j.is_object()) throw UsageError("entities must be an object or a list of names");
  auto list = [&](const char* key) {
    return j.contains(key) ? j.at(key).get<std::vector<std::string>>() : std::vector<std::string>{};
  };
  return {list("persons"), list("locations"), list("organisations"), list("misc")};
}

}  // namespace

std::string to_string(Role r) {
  switch (r) {
    case Role::All: return "all";
    case Role::Master: return "master";
    case Role::Ner: return "ner";
    case Role::Generate: return "generate";
  }
  return "all";
}

Role parse_role(const std::string& s) {
  if (s == "all") return Role::All;
  if (s == "master") return Role::Master;
  if (s == "ner") return Role::Ner;
  if (s == "generate") return Role::Generate;
  throw UsageError("unknown role '" + s + "' (expected all, master, ner or generate)");
}

Router::Router(std::vector<ComputeNode> nodes) : nodes_(std::move(nodes)) {
  for (const auto& n : nodes_) {
    if (n.role != Role::Ner && n.role != Role::Generate) throw UsageError("compute nodes must have role ner or generate");
  }
}

Router::Router(const Router& other) : nodes_(other.nodes()) {
  std::lock_guard lock(other.mu_);
  std::copy(std::begin(other.cursor_), std::end(other.cursor_), cursor_);
}

Router Router::load(const std::filesystem::path& path) {
  std::vector<ComputeNode> nodes;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    for (const auto& n : j.at("nodes")) {
      ComputeNode node;
      node.role = parse_role(n.at("role").get<std::string>());
      node.base_url = n.at("url").get<std::string>();
      node.id = n.value("id", to_string(node.role) + "-" + std::to_string(nodes.size()));
      nodes.push_back(std::move(node));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return Router(std::move(nodes));
}

std::optional<ComputeNode> Router::next(Role role) {
  std::lock_guard lock(mu_);
  const std::size_t n = nodes_.size();
  auto& cursor = cursor_[role_index(role)];
  for (std::size_t step = 0; step < n; ++step) {
    const auto& node = nodes_[(cursor + step) % n];
    if (node.role == role && node.healthy) {
      cursor = (cursor + step + 1) % n;
      return node;
    }
  }
  return std::nullopt;
}

void Router::mark(const std::string& id, bool healthy, nlohmann::json health) {
  std::lock_guard lock(mu_);
  for (auto& n : nodes_) {
    if (n.id == id) {
      n.healthy = healthy;
      n.health = std::move(health);
    }
  }
}

std::vector<ComputeNode> Router::nodes() const {
  std::lock_guard lock(mu_);
  return nodes_;
}

Forwarder http_forwarder(std::chrono::milliseconds timeout) {
  return [timeout](const ComputeNode& node, const std::string& path, const std::string& body) {
    httplib::Client cli(node.base_url);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    auto res = body.empty() ? cli.Get(path) : cli.Post(path, body, "application/json");
    if (!res) throw std::runtime_error("node " + node.id + " unreachable: " + httplib::to_string(res.error()));
    Reply r{res->status, nullptr};
    try {
      r.body = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      r.body = {{"error", "node returned a non-JSON body"}};
    }
    return r;
  };
}

GenerationRequest parse_generation_request(const nlohmann::json& j, std::size_t max_suggestions) {
  if (!j.is_object()) throw UsageError("request must be a JSON object");
  GenerationRequest r;
  try {
    r.sections.p1 = j.value("p1", std::string());
    r.sections.p3 = j.value("p3", std::string());
    r.sections.genre = j.value("genre", std::string());
    const auto size = parse_size_class(j.value("size", std::string("M")));
    if (!size) throw UsageError("size must be S, M or L");
    r.sections.size = *size;
    r.sections.entities = parse_entities(j.value("entities", nlohmann::json()));
    if (j.contains("summary")) {
      const auto& s = j.at("summary");
      if (s.is_array()) {
        for (const auto& kw : s) {
          if (!r.sections.summary.empty()) r.sections.summary += ", ";
          r.sections.summary += kw.get<std::string>();
        }
      } else if (!s.is_null()) {
        r.sections.summary = s.get<std::string>();
      }
    }
    if (j.contains("decode")) {
      r.decode_overrides = j.at("decode");
      if (!r.decode_overrides.is_object()) throw UsageError("decode must be an object");
    }
    r.n_suggestions = j.value("n_suggestions", std::size_t{3});
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed request: ") + e.what());
  }
  if (r.n_suggestions < 1 || r.n_suggestions > max_suggestions)
    throw UsageError("n_suggestions must be in [1, " + std::to_string(max_suggestions) + "]");
  return r;
}

std::string strip_special_names(std::string text) {
  for (auto name : tokenizer::kSpecialNames) {
    for (auto pos = text.find(name); pos != std::string::npos; pos = text.find(name, pos)) text.erase(pos, name.size());
  }
  return text;
}

Service::Service(ServiceConfig config, annotate::Gazetteer gazetteer, std::shared_ptr<const pipeline::Engine> engine,
                 std::optional<Router> router, Forwarder forward)
    : config_(std::move(config)),
      gazetteer_(std::move(gazetteer)),
      engine_(std::move(engine)),
      router_(std::move(router)),
      forward_(std::move(forward)) {
  if (config_.role == Role::Master && !router_) throw UsageError("master role needs a nodes file");
}

void Service::swap_engine(std::shared_ptr<const pipeline::Engine> engine) { std::atomic_store(&engine_, std::move(engine)); }

Reply Service::route(Role role, const std::string& path, const std::string& body) const {
  const std::size_t attempts = router_->nodes().size();
  for (std::size_t i = 0; i < attempts; ++i) {
    auto node = router_->next(role);
    if (!node) break;
    try {
      return forward_(*node, path, body);
    } catch (const std::exception& e) {
      router_->mark(node->id, false, {{"error", e.what()}});
    }
  }
  return error(503, "no healthy " + to_string(role) + " node");
}

Reply Service::ner(const std::string& body) const {
  if (auto r = check_size(body, config_.max_body_bytes)) return *r;
  if (config_.role == Role::Generate) return error(404, "this node does not serve ner");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    return error(400, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("text") || !j.at("text").is_string()) return error(400, "expected {\"text\": string}");
  if (config_.role == Role::Master) return route(Role::Ner, "/api/ner", body);
  return {200, {{"entities", annotate::extract_entities(j.at("text").get<std::string>(), gazetteer_)}}};
}

Reply Service::generate(const std::string& body) const {
  if (auto r = check_size(body, config_.max_body_bytes)) return *r;
  if (config_.role == Role::Ner) return error(404, "this node does not serve generation");
  GenerationRequest req;
  try {
    req = parse_generation_request(nlohmann::json::parse(body), config_.max_suggestions);
  } catch (const nlohmann::json::exception& e) {
    return error(400, std::string("malformed JSON: ") + e.what());
  } catch (const UsageError& e) {
    return error(400, e.what());
  }
  if (config_.role == Role::Master) return route(Role::Generate, "/api/generate", body);

  const auto engine = this->engine();
  if (!engine) return error(503, "model not loaded");
  const auto start = std::chrono::steady_clock::now();
  decode::DecodeParams params =
      pipeline::with_length_bounds({}, engine->lengths, req.sections.size, pipeline::LengthPolicy::PerClass);
  try {
    decode::from_json(req.decode_overrides, params);
    params.validate();
  } catch (const nlohmann::json::exception& e) {
    return error(400, std::string("malformed decode parameters: ") + e.what());
  } catch (const UsageError& e) {
    return error(400, e.what());
  }

  const auto sections = pipeline::request_sections(*engine, req.sections);
  const auto block = static_cast<std::size_t>(engine->model.config().block_size);
  const std::size_t fixed = assembly::fixed_length(sections, engine->format);
  if (fixed + params.max_length > block) {
    return error(422, "context too large",
                 {{"fixed_tokens", fixed},
                  {"reserve_tokens", params.max_length},
                  {"block_size", block},
                  {"p1_tokens", sections.p1.size()},
                  {"p3_tokens", sections.p3.size()},
                  {"summary_tokens", sections.summary.size()},
                  {"entity_tokens", sections.entities.size()},
                  {"theme_tokens", sections.theme.size()}});
  }

  nlohmann::json suggestions = nlohmann::json::array();
  for (std::size_t i = 0; i < req.n_suggestions; ++i) {
    auto p = params;
    p.seed = req.seed + i;
    const auto gen = pipeline::generate_p2(engine->model, engine->format, sections, engine->vocab, p);
    suggestions.push_back(
        {{"text", strip_special_names(gen.text)}, {"stop_reason", decode::to_string(gen.stop_reason)}, {"seed", p.seed}});
  }
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {200, {{"suggestions", suggestions}, {"timing_ms", ms}}};
}

Reply Service::health() const {
  const auto engine = this->engine();
  nlohmann::json j{{"role", to_string(config_.role)},
                   {"model_loaded", engine != nullptr},
                   {"model_checksum", engine ? nlohmann::json(engine->model_checksum) : nlohmann::json(nullptr)},
                   {"vocab_checksum", engine ? nlohmann::json(engine->vocab_checksum) : nlohmann::json(nullptr)},
                   {"uptime", std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count()}};
  if (router_) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : router_->nodes()) {
      nodes.push_back({{"id", n.id}, {"role", to_string(n.role)}, {"url", n.base_url}, {"healthy", n.healthy}, {"health", n.health}});
    }
    j["nodes"] = nodes;
  }
  return {200, j};
}

void Service::probe_nodes() {
  if (!router_) return;
  httplib::Headers none;
  for (const auto& n : router_->nodes()) {
    httplib::Client cli(n.base_url);
    cli.set_connection_timeout(std::chrono::seconds(2));
    cli.set_read_timeout(std::chrono::seconds(5));
    auto res = cli.Get("/health");
    if (res && res->status == 200) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception&) {
        body = nullptr;
      }
      router_->mark(n.id, true, body);
    } else {
      router_->mark(n.id, false, {{"error", res ? "status " + std::to_string(res->status) : httplib::to_string(res.error())}});
    }
  }
}

void Service::mount(httplib::Server& server) {
  server.set_payload_max_length(config_.max_body_bytes);
  server.set_default_headers({{"Access-Control-Allow-Origin", config_.cors_origin},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server.Get("/api/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server.Post("/api/ner", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, ner(req.body)); });
  server.Post("/api/generate",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, generate(req.body)); });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send(res, error(500, e.what()));
    }
  });
  if (config_.static_dir && (config_.role == Role::All || config_.role == Role::Master)) {
    server.set_mount_point("/", config_.static_dir->string());
  }
}

EnvConfig env_config() {
  EnvConfig c;
  c.model_path = env("MODEL_PATH");
  c.vocab_path = env("VOCAB_PATH");
  if (auto b = env("BIND_ADDR")) c.bind_addr = *b;
  c.nodes_file = env("NODES_FILE");
  c.gazetteer_path = env("GAZETTEER_PATH");
  return c;
}

std::pair<std::string, int> parse_bind(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == addr.size())
    throw UsageError("bind address must look like host:port, got '" + addr + "'");
  try {
    std::size_t used = 0;
    const int port = std::stoi(addr.substr(colon + 1), &used);
    if (used != addr.size() - colon - 1 || port < 0 || port > 65535) throw std::out_of_range("port");
    return {addr.substr(0, colon), port};
  } catch (const std::logic_error&) {
    throw UsageError("invalid port in bind address '" + addr + "'");
  }
}

}  // namespace parafill::service
