#include "mpt/service.hpp"

#include <httplib.h>

#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace mpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HttpError : std::runtime_error {
  HttpError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

HttpError bad_request(const std::string& m) { return {400, "bad_request", m}; }
HttpError not_found(const std::string& m) { return {404, "not_found", m}; }
HttpError unprocessable(const std::string& m) { return {422, "invalid_prompt", m}; }

ServiceResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, json{{"error", {{"code", code}, {"message", message}}}}};
}

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

json prompt_to_json(const Prompt& p) {
  json j{{"kind", p.kind == PromptKind::Label ? "label" : "boundary"}, {"t_c", p.t_c}, {"level", p.granularity_level}};
  if (p.kind == PromptKind::Label) {
    j["correct_state"] = p.correct_state;
    j["incorrect_states"] = p.incorrect_states;
  } else {
    j["present"] = p.present;
  }
  return j;
}

const char* kind_name(PromptKind k) { return k == PromptKind::Label ? "label" : "boundary"; }

}  // namespace

struct SessionService::Session {
  std::string id;
  Subsequence subseq;
  int level = 0;
  bool has_truth = false;
  MemoryBank<float> bank;
  int iteration = 0;
  std::vector<Prompt> log;
  json create_request;
  std::string created, updated;
  std::timed_mutex mutex;

  Session(Index dim) : bank(dim) {}
  const std::vector<int>& truth() const { return subseq.labels_per_level[static_cast<std::size_t>(level)]; }
};

std::string checkpoint_hash(const Model<float>& model) {
  std::string bytes;
  for (const auto& p : model.params()) {
    bytes += p.name;
    bytes.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(float));
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << std::hash<std::string>{}(bytes);
  return out.str();
}

SessionService::SessionService(Model<float> model, ServiceConfig config)
    : model_(std::move(model)), config_(std::move(config)), spec_{model_.config().T, config_.hop, config_.W},
      id_rng_(std::random_device{}()) {
  spec_.validate();
  if (config_.levels.empty()) config_.levels.push_back({0, model_.config().K_total, 0});
  for (const auto& g : config_.levels)
    if (g.state_offset + g.num_states > model_.config().K_total)
      throw ConfigError("granularity level " + std::to_string(g.level) + " exceeds the model's label space");
  for (const auto& s : config_.bundled)
    if (s.length() != spec_.subsequence_length() || s.data.cols() != model_.config().C)
      throw DataError("bundled subsequence " + std::to_string(s.index) + " does not match the window layout");
  if (config_.checkpoint_hash.empty()) config_.checkpoint_hash = checkpoint_hash(model_);
  if (!config_.data_dir.empty()) {
    fs::create_directories(config_.data_dir);
    replay_logs();
  }
}

SessionService::~SessionService() = default;

std::size_t SessionService::session_count() const {
  std::shared_lock lock(sessions_mutex_);
  return sessions_.size();
}

std::string SessionService::new_id() {
  std::lock_guard lock(id_mutex_);
  for (;;) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << id_rng_();
    std::shared_lock map_lock(sessions_mutex_);
    if (!sessions_.count(out.str())) return out.str();
  }
}

std::shared_ptr<SessionService::Session> SessionService::find(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw not_found("no session '" + id + "'");
  return it->second;
}

void SessionService::append_event(Session& s, const json& event) const {
  if (config_.data_dir.empty()) return;
  std::ofstream out(config_.data_dir / (s.id + ".jsonl"), std::ios::app);
  if (!out) throw std::runtime_error("cannot write the session log for " + s.id);
  out << event.dump() << "\n";
}

ServiceResponse SessionService::create_session(const json& body, bool replaying) {
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  const Index Ls = spec_.subsequence_length();
  const Index C = model_.config().C;
  auto s = std::make_shared<Session>(model_.config().D);
  s->level = body.value("level", 0);
  if (s->level < 0 || static_cast<std::size_t>(s->level) >= config_.levels.size())
    throw bad_request("level " + std::to_string(s->level) + " does not exist; the model has " +
                      std::to_string(config_.levels.size()) + " level(s)");
  const Granularity& g = config_.levels[static_cast<std::size_t>(s->level)];

  if (body.contains("dataset_index")) {
    const auto index = body.at("dataset_index").get<long>();
    if (index < 0 || static_cast<std::size_t>(index) >= config_.bundled.size())
      throw not_found("bundled subsequence " + std::to_string(index) + " does not exist (" +
                      std::to_string(config_.bundled.size()) + " available)");
    s->subseq = config_.bundled[static_cast<std::size_t>(index)];
    if (static_cast<std::size_t>(s->level) >= s->subseq.labels_per_level.size())
      throw bad_request("bundled subsequence has no labels at level " + std::to_string(s->level));
    s->has_truth = true;
  } else if (body.contains("series")) {
    const json& rows = body.at("series");
    if (!rows.is_array() || rows.empty()) throw bad_request("'series' must be a non-empty array of rows");
    const auto L = static_cast<Index>(rows.size());
    if (L > Ls)
      throw HttpError(413, "payload_too_large",
                      "series has " + std::to_string(L) + " rows; one session holds exactly " + std::to_string(Ls) +
                          " (slice longer series into several sessions)");
    if (L < Ls)
      throw bad_request("series has " + std::to_string(L) + " rows; a session needs exactly " + std::to_string(Ls));
    s->subseq.data.resize(L, C);
    for (Index t = 0; t < L; ++t) {
      const json& row = rows[static_cast<std::size_t>(t)];
      if (!row.is_array() || static_cast<Index>(row.size()) != C)
        throw bad_request("row " + std::to_string(t) + ": expected C=" + std::to_string(C) + ", got " +
                          (row.is_array() ? std::to_string(row.size()) + " channels" : std::string("a non-array")));
      for (Index c = 0; c < C; ++c) {
        const json& v = row[static_cast<std::size_t>(c)];
        if (!v.is_number()) throw bad_request("row " + std::to_string(t) + " holds a non-numeric value");
        s->subseq.data(t, c) = v.get<double>();
      }
    }
    s->subseq.labels_per_level.resize(static_cast<std::size_t>(s->level) + 1);
    if (body.contains("labels")) {
      auto labels = body.at("labels").get<std::vector<int>>();
      if (static_cast<Index>(labels.size()) != L) throw bad_request("'labels' must have one entry per row");
      for (int l : labels)
        if (!g.contains(l)) throw bad_request("label " + std::to_string(l) + " is outside level " + std::to_string(g.level));
      s->subseq.labels_per_level[static_cast<std::size_t>(s->level)] = std::move(labels);
      s->has_truth = true;
    }
  } else {
    throw bad_request("provide either 'series' or 'dataset_index'");
  }

  s->id = replaying ? body.at("id").get<std::string>() : new_id();
  s->created = s->updated = replaying ? body.value("created", now_iso()) : now_iso();
  s->create_request = body;
  s->create_request.erase("id");
  s->create_request.erase("created");
  if (!replaying) {
    json event = s->create_request;
    event["event"] = "create";
    event["id"] = s->id;
    event["created"] = s->created;
    append_event(*s, event);
  }
  {
    std::unique_lock lock(sessions_mutex_);
    sessions_[s->id] = s;
  }
  return {201, json{{"session_id", s->id}, {"length", Ls}, {"channels", C}, {"K", model_.config().K_total},
                    {"level", s->level}, {"ground_truth", s->has_truth}}};
}

ServiceResponse SessionService::add_prompts(Session& s, const json& body, bool replaying) {
  if (!body.is_object()) throw bad_request("request body must be a JSON object");
  const Index Ls = spec_.subsequence_length();
  std::vector<Prompt> prompts;

  std::set<std::pair<Index, PromptKind>> taken;
  for (const Prompt& p : s.log) taken.insert({p.t_c, p.kind});

  if (body.contains("sample")) {
    // Ground-truth prompts for sessions that carry labels.
    if (!s.has_truth) throw unprocessable("'sample' needs a session with ground truth");
    const auto n = body.at("sample").get<long>();
    if (n < 1) throw unprocessable("'sample' must be >= 1");
    std::vector<Index> free;
    for (Index t = 0; t < Ls; ++t)
      if (!taken.count({t, PromptKind::Label}) && !taken.count({t, PromptKind::Boundary})) free.push_back(t);
    if (static_cast<long>(free.size()) < n) throw HttpError(409, "conflict", "not enough unprompted timestamps left");
    std::seed_seq seq(s.id.begin(), s.id.end());
    Rng rng(seq);
    rng.discard(s.log.size());
    std::shuffle(free.begin(), free.end(), rng);
    PromptSamplingOptions opts;
    const Granularity& g = config_.levels[static_cast<std::size_t>(s.level)];
    for (long i = 0; i < n; ++i) {
      const bool label = std::bernoulli_distribution(opts.kind_mix)(rng);
      Prompt p = ground_truth_prompt(s.subseq, g, free[static_cast<std::size_t>(i)],
                                     label ? PromptKind::Label : PromptKind::Boundary,
                                     std::min(opts.n_neg < 0 ? 3 : opts.n_neg, model_.config().n_neg_max), rng);
      prompts.push_back(std::move(p));
    }
  } else {
    if (!body.contains("prompts") || !body.at("prompts").is_array() || body.at("prompts").empty())
      throw bad_request("'prompts' must be a non-empty array");
    for (const json& j : body.at("prompts")) {
      if (!j.is_object()) throw bad_request("each prompt must be an object");
      Prompt p;
      const std::string kind = j.value("kind", "");
      if (kind == "label") {
        p.kind = PromptKind::Label;
        if (!j.contains("correct_state")) throw unprocessable("label prompts need 'correct_state'");
        p.correct_state = j.at("correct_state").get<int>();
        p.incorrect_states = j.value("incorrect_states", std::vector<int>{});
      } else if (kind == "boundary") {
        p.kind = PromptKind::Boundary;
        if (!j.contains("present") || !j.at("present").is_boolean())
          throw unprocessable("boundary prompts need a boolean 'present'");
        p.present = j.at("present").get<bool>();
      } else {
        throw unprocessable("prompt kind must be 'label' or 'boundary'");
      }
      if (!j.contains("t_c") || !j.at("t_c").is_number_integer()) throw unprocessable("prompt needs an integer 't_c'");
      p.t_c = j.at("t_c").get<Index>();
      p.granularity_level = j.value("level", s.level);
      prompts.push_back(std::move(p));
    }
  }

  // Validate everything before touching the session.
  for (const Prompt& p : prompts) {
    if (p.granularity_level < 0 || static_cast<std::size_t>(p.granularity_level) >= config_.levels.size())
      throw unprocessable("level " + std::to_string(p.granularity_level) + " does not exist");
    if (p.t_c < 0 || p.t_c >= Ls)
      throw unprocessable("t_c " + std::to_string(p.t_c) + " outside [0, " + std::to_string(Ls) + ")");
    try {
      validate_prompt(p, Ls, config_.levels[static_cast<std::size_t>(p.granularity_level)]);
    } catch (const DataError& e) {
      throw unprocessable(e.what());
    }
    if (static_cast<int>(p.incorrect_states.size()) > model_.config().n_neg_max)
      throw unprocessable("at most " + std::to_string(model_.config().n_neg_max) + " incorrect states per prompt");
    if (!taken.insert({p.t_c, p.kind}).second)
      throw HttpError(409, "duplicate_prompt",
                      std::string("a ") + kind_name(p.kind) + " prompt at t_c=" + std::to_string(p.t_c) + " already exists");
  }

  const int tag = s.iteration + 1;
  s.bank.write(encode_prompts(model_, s.subseq.data, prompts, tag));
  s.log.insert(s.log.end(), prompts.begin(), prompts.end());
  s.updated = now_iso();
  if (!replaying) {
    json event{{"event", "prompts"}, {"prompts", json::array()}};
    for (const Prompt& p : prompts) event["prompts"].push_back(prompt_to_json(p));
    append_event(s, event);
  }
  json added = json::array();
  for (const Prompt& p : prompts) added.push_back(prompt_to_json(p));
  return {200, json{{"bank_size", s.bank.size()}, {"iteration", s.iteration}, {"prompts", added}}};
}

ServiceResponse SessionService::infer(Session& s, bool replaying) {
  ++s.iteration;
  s.updated = now_iso();
  if (replaying) return {200, {}};
  append_event(s, json{{"event", "infer"}});
  const MatrixXf logits = subsequence_logits(model_, s.subseq.data, spec_, s.bank.read_all());
  const MatrixXf probs = softmax_rows(logits);
  const std::vector<int> states = argmax_rows(logits);
  std::vector<double> confidence(states.size());
  for (std::size_t t = 0; t < states.size(); ++t) confidence[t] = probs(static_cast<Index>(t), states[t]);
  json levels = json::array();
  for (const auto& g : config_.levels)
    levels.push_back({{"level", g.level}, {"num_states", g.num_states}, {"state_offset", g.state_offset}});
  json body{{"states", states},
            {"confidence", confidence},
            {"iteration", s.iteration},
            {"level", s.level},
            {"levels", levels},
            {"bank_size", s.bank.size()},
            {"density", static_cast<double>(s.log.size()) / static_cast<double>(spec_.subsequence_length())}};
  if (s.has_truth) body["accuracy"] = accuracy(states, s.truth());
  return {200, body};
}

ServiceResponse SessionService::memory(Session& s, bool vectors) const {
  json tokens = json::array();
  std::map<std::string, int> per_iteration;
  for (const auto& t : s.bank.tokens()) {
    json j{{"anchor", t.anchor}, {"kind", kind_name(t.kind)}, {"iteration", t.iteration}};
    if (vectors) j["vector"] = std::vector<float>(t.vector.data(), t.vector.data() + t.vector.size());
    tokens.push_back(std::move(j));
    ++per_iteration[std::to_string(t.iteration)];
  }
  return {200, json{{"session_id", s.id},
                    {"count", s.bank.size()},
                    {"D", s.bank.dim()},
                    {"iterations", per_iteration},
                    {"tokens", tokens}}};
}

ServiceResponse SessionService::remove(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::unique_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw not_found("no session '" + id + "'");
    s = it->second;
    sessions_.erase(it);
  }
  // Wait for in-flight requests on this session.
  std::lock_guard guard(s->mutex);
  if (!config_.data_dir.empty()) fs::remove(config_.data_dir / (id + ".jsonl"));
  return {200, json{{"deleted", id}}};
}

void SessionService::replay_logs() {
  std::vector<fs::path> logs;
  for (const auto& entry : fs::directory_iterator(config_.data_dir))
    if (entry.path().extension() == ".jsonl") logs.push_back(entry.path());
  std::sort(logs.begin(), logs.end());
  for (const auto& path : logs) {
    std::ifstream in(path);
    std::string line;
    std::shared_ptr<Session> s;
    std::size_t line_no = 0;
    try {
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const json event = json::parse(line);
        const std::string type = event.at("event").get<std::string>();
        if (type == "create") {
          json request = event;
          request.erase("event");
          create_session(request, true);
          s = find(event.at("id").get<std::string>());
        } else if (!s) {
          throw DataError("event before session creation");
        } else if (type == "prompts") {
          add_prompts(*s, json{{"prompts", event.at("prompts")}}, true);
        } else if (type == "infer") {
          infer(*s, true);
        } else {
          throw DataError("unknown event '" + type + "'");
        }
      }
    } catch (const std::exception& e) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

ServiceResponse SessionService::handle(const ServiceRequest& request) {
  try {
    std::vector<std::string> parts;
    {
      std::istringstream in(request.path);
      std::string part;
      while (std::getline(in, part, '/'))
        if (!part.empty()) parts.push_back(part);
    }
    const std::string& m = request.method;
    const auto parse_body = [&]() -> json {
      if (request.body.empty()) return json::object();
      try {
        return json::parse(request.body);
      } catch (const json::parse_error& e) {
        throw bad_request(std::string("malformed JSON: ") + e.what());
      }
    };
    const auto method_not_allowed = [&]() {
      return error_response(405, "method_not_allowed", m + " is not supported on " + request.path);
    };

    if (parts.size() == 1 && parts[0] == "healthz") {
      if (m != "GET") return method_not_allowed();
      return {200, json{{"status", "ok"},
                        {"version", MPT_VERSION},
                        {"checkpoint_hash", config_.checkpoint_hash},
                        {"sessions", session_count()}}};
    }
    if (parts.size() == 1 && parts[0] == "model") {
      if (m != "GET") return method_not_allowed();
      json j = model_.config();
      j["hop"] = spec_.hop;
      j["W"] = spec_.W;
      j["L_s"] = spec_.subsequence_length();
      j["bundled"] = config_.bundled.size();
      return {200, j};
    }
    if (parts.empty() || parts[0] != "sessions") throw not_found("no route for " + request.path);
    if (parts.size() == 1) {
      if (m != "POST") return method_not_allowed();
      return create_session(parse_body(), false);
    }
    const std::string& id = parts[1];
    if (parts.size() == 2) {
      if (m != "DELETE") return method_not_allowed();
      return remove(id);
    }
    if (parts.size() != 3) throw not_found("no route for " + request.path);
    const std::shared_ptr<Session> s = find(id);
    std::unique_lock lock(s->mutex, std::defer_lock);
    if (!lock.try_lock_for(config_.lock_timeout))
      throw HttpError(503, "busy", "session '" + id + "' is busy; retry later");
    {
      // The session may have been deleted while this request waited.
      std::shared_lock map_lock(sessions_mutex_);
      if (!sessions_.count(id)) throw not_found("no session '" + id + "'");
    }
    const std::string& action = parts[2];
    if (action == "prompts") {
      if (m != "POST") return method_not_allowed();
      return add_prompts(*s, parse_body(), false);
    }
    if (action == "infer") {
      if (m != "POST") return method_not_allowed();
      return infer(*s, false);
    }
    if (action == "memory") {
      if (m != "GET") return method_not_allowed();
      const auto it = request.query.find("vectors");
      return memory(*s, it != request.query.end() && (it->second == "true" || it->second == "1"));
    }
    throw not_found("no route for " + request.path);
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.what());
  } catch (const json::exception& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

// ---------------------------------------------------------------------------
// HTTP

struct HttpServer::Impl {
  SessionService* service;
  httplib::Server server;
};

HttpServer::HttpServer(SessionService& service) : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    ServiceRequest r{req.method, req.path, {}, req.body};
    for (const auto& [k, v] : req.params) r.query[k] = v;
    const ServiceResponse out = impl_->service->handle(r);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  auto& s = impl_->server;
  s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                         {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  s.Get(".*", handler);
  s.Post(".*", handler);
  s.Delete(".*", handler);
  s.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw ConfigError("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port))
    throw ConfigError("cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace mpt
