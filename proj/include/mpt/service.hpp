#pragma once

// Interactive session service. One session owns one subsequence and its
// memory bank; prompts are written on request and every infer call reads
// all windows against the bank. Sessions are event-sourced: each keeps a
// JSON-lines log that rebuilds it on restart.

#include "mpt/eval.hpp"
#include "mpt/membank.hpp"
#include "mpt/model.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace mpt {

struct ServiceConfig {
  /// Window stride and windows per subsequence; T comes from the model.
  Index hop = 64;
  Index W = 8;
  /// Label layers of the unified space; defaults to one level spanning K.
  std::vector<Granularity> levels;
  /// Subsequences that sessions can reference by index, with ground truth.
  std::vector<Subsequence> bundled;
  /// Event logs live here; empty disables persistence.
  std::filesystem::path data_dir;
  std::chrono::milliseconds lock_timeout{5000};
  std::string checkpoint_hash;
};

struct ServiceRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

class SessionService {
 public:
  SessionService(Model<float> model, ServiceConfig config);
  ~SessionService();

  /// Routes one request. Never throws; failures map to an error body.
  ServiceResponse handle(const ServiceRequest& request);

  std::size_t session_count() const;
  const WindowSpec& spec() const { return spec_; }

 private:
  struct Session;

  ServiceResponse create_session(const nlohmann::json& body, bool replaying);
  ServiceResponse add_prompts(Session& s, const nlohmann::json& body, bool replaying);
  ServiceResponse infer(Session& s, bool replaying);
  ServiceResponse memory(Session& s, bool vectors) const;
  ServiceResponse remove(const std::string& id);

  std::shared_ptr<Session> find(const std::string& id) const;
  void append_event(Session& s, const nlohmann::json& event) const;
  void replay_logs();
  std::string new_id();

  Model<float> model_;
  ServiceConfig config_;
  WindowSpec spec_;
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex id_mutex_;
  Rng id_rng_;
};

/// Hash of a model's parameter bytes, as hex.
std::string checkpoint_hash(const Model<float>& model);

/// HTTP front end for a SessionService, with CORS headers on every reply.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();
  /// Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stopped.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mpt
