#pragma once

// In-process session store and JSON/HTTP handlers for live adaptive
// experiments. The handlers are plain functions returning (status, body) so
// they can be exercised without a socket; mount() wires them to httplib.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <string>

#include "eiglab/bad_loop.hpp"
#include "eiglab/models.hpp"
#include "eiglab/policy.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro.
#include <httplib.h>

namespace eiglab {

struct ServiceResponse {
  int status = 200;
  json body;
};

inline ServiceResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, {{"code", code}, {"message", message}}};
}

enum class SessionStatus { awaiting_outcome, proposing, finished };

inline const char* status_name(SessionStatus s) {
  switch (s) {
    case SessionStatus::awaiting_outcome: return "awaiting_outcome";
    case SessionStatus::proposing: return "proposing";
    case SessionStatus::finished: return "finished";
  }
  return "?";
}

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

/// Session parameters shared by the service and the sequential CLI command.
struct SessionSpec {
  std::string model_id;
  json params = json::object();
  StrategyKind strategy = StrategyKind::greedy_grid;
  std::size_t horizon = 1;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::size_t particles = std::size_t{1} << 14;
  std::optional<std::size_t> grid_points;
  std::vector<Design> fixed;

  json to_json() const {
    json j = {{"model", model_id}, {"params", params}, {"strategy", strategy_name(strategy)},
              {"T", horizon},      {"seed", seed},     {"particles", particles}};
    if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
    if (grid_points) j["grid_points"] = *grid_points;
    if (!fixed.empty()) {
      json f = json::array();
      for (const auto& d : fixed) f.push_back(d.values);
      j["fixed"] = f;
    }
    return j;
  }

  /// Strict parse: unknown keys, missing seed or wrong types are config errors.
  static SessionSpec from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("session request must be a JSON object");
    static const std::vector<std::string> allowed = {"model", "params", "strategy", "T", "seed",
                                                     "checkpoint", "particles", "grid_points", "fixed"};
    for (const auto& [k, v] : j.items())
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) throw ConfigError("unknown key '" + k + "'");
    for (const char* k : {"model", "seed", "T"})
      if (!j.contains(k)) throw ConfigError(std::string("missing required key '") + k + "'");
    SessionSpec s;
    try {
      s.model_id = j.at("model").get<std::string>();
      if (j.contains("params")) {
        s.params = j.at("params");
        if (!s.params.is_object()) throw ConfigError("'params' must be an object");
      }
      if (j.contains("strategy")) s.strategy = parse_strategy(j.at("strategy").get<std::string>());
      if (!j.at("T").is_number_integer() || j.at("T").get<long long>() < 1) throw ConfigError("'T' must be a positive integer");
      s.horizon = j.at("T").get<std::size_t>();
      if (!j.at("seed").is_number_integer() || j.at("seed").get<long long>() < 0)
        throw ConfigError("'seed' must be a non-negative integer");
      s.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("checkpoint")) s.checkpoint = j.at("checkpoint").get<std::string>();
      if (j.contains("particles")) s.particles = j.at("particles").get<std::size_t>();
      if (j.contains("grid_points")) s.grid_points = j.at("grid_points").get<std::size_t>();
      if (j.contains("fixed"))
        for (const auto& d : j.at("fixed")) s.fixed.emplace_back(d.is_array() ? d.get<std::vector<double>>() : std::vector<double>{d.get<double>()});
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed session request: ") + e.what());
    }
    if (s.particles < 1) throw ConfigError("'particles' must be at least 1");
    return s;
  }
};

/// Default loop settings for a model: grid density and estimator sizes that
/// keep one step well under a second.
inline Strategy default_strategy(const Model& model, StrategyKind kind) {
  Strategy s;
  s.kind = kind;
  const bool two_d = model.design_dim() >= 2;
  s.grid_points = two_d ? 21 : 121;
  s.grid = model.outcome_space().finite ? GridConfig{EstimatorId::rb, 1000, 1, {}}
                                        : GridConfig{EstimatorId::nmc, two_d ? 128u : 500u, two_d ? 32u : 50u, {}};
  return s;
}

inline EigSpec default_eig_spec(const Model& model) {
  if (model.outcome_space().finite) return {"rb", 2000, 1, {}};
  return {"nmc", 1000, 100, {}};
}

struct BuiltSession {
  std::shared_ptr<const Model> model;
  Strategy strategy;
  BeliefConfig belief;
  EigSpec eig;
};

/// Resolves a session request into runnable pieces. Unknown models raise
/// UnknownModelError; a missing or incompatible checkpoint raises
/// CapabilityError.
inline BuiltSession build_session(const SessionSpec& spec) {
  BuiltSession b;
  b.model = make_model(spec.model_id, spec.params);
  b.strategy = default_strategy(*b.model, spec.strategy);
  if (spec.grid_points) b.strategy.grid_points = *spec.grid_points;
  b.strategy.fixed = spec.fixed;
  if (spec.strategy == StrategyKind::fixed && spec.fixed.empty()) throw ConfigError("fixed strategy needs a 'fixed' design list");
  for (const auto& d : spec.fixed) b.model->validate_design(d);
  if (spec.strategy == StrategyKind::policy) {
    if (spec.checkpoint.empty()) throw CapabilityError("policy strategy needs a 'checkpoint'");
    if (!std::filesystem::exists(spec.checkpoint))
      throw CapabilityError("policy checkpoint '" + spec.checkpoint + "' not found");
    try {
      b.strategy.policy = std::make_shared<PolicyNetwork>(PolicyNetwork::load(spec.checkpoint, *b.model));
    } catch (const ConfigError& e) {
      throw CapabilityError(e.what());
    }
  }
  b.belief.particles = spec.particles;
  b.eig = default_eig_spec(*b.model);
  return b;
}

class Session {
 public:
  Session(std::string id, SessionSpec spec, BuiltSession built)
      : id_(std::move(id)),
        spec_(std::move(spec)),
        state_(built.model, built.strategy, built.belief, built.eig, RngStream(spec_.seed, 0)),
        created_(now_ms()),
        updated_(created_) {
    propose();
  }

  const std::string& id() const { return id_; }
  std::mutex& mutex() { return mu_; }

  /// Caller holds mutex().
  ServiceResponse post_outcome(const json& body) {
    if (status_ != SessionStatus::awaiting_outcome)
      return error_response(409, "wrong_status", std::string("session is ") + status_name(status_));
    if (!body.is_object()) return error_response(400, "bad_request", "outcome body must be a JSON object");
    for (const auto& [k, v] : body.items())
      if (k != "y" && k != "t") return error_response(400, "bad_request", "unknown key '" + k + "'");
    if (!body.contains("y")) return error_response(400, "bad_request", "missing key 'y'");
    if (body.contains("t") && (!body["t"].is_number_integer() || body["t"].get<long long>() != static_cast<long long>(state_.t() + 1)))
      return error_response(409, "wrong_step", "session is at step " + std::to_string(state_.t() + 1));
    Outcome y;
    try {
      y = outcome_from_json(state_.model(), body["y"]);
      state_.model().validate_outcome(y);
    } catch (const ConfigError& e) {
      return error_response(422, "invalid_outcome", e.what());
    } catch (const ShapeError& e) {
      return error_response(422, "invalid_outcome", e.what());
    }
    status_ = SessionStatus::proposing;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      state_.observe(*pending_, y);
    } catch (const NumericError& e) {
      status_ = SessionStatus::awaiting_outcome;
      return error_response(422, "impossible_outcome", e.what());
    }
    TranscriptRow row{state_.t(), *pending_, y, pending_eig_, state_.belief().mean(), state_.belief().stddev(), 0.0};
    pending_.reset();
    if (state_.t() >= spec_.horizon) {
      status_ = SessionStatus::finished;
    } else {
      propose();
    }
    row.wall_ms = propose_ms_ + std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    transcript_.push_back(row);
    updated_ = now_ms();
    json out = {{"session_id", id_},
                {"status", status_name(status_)},
                {"t", state_.t()},
                {"eig", row.eig.to_json()},
                {"belief", belief_json()},
                {"row", row.to_json()}};
    if (pending_) {
      out["next_design"] = pending_->values;
      out["next_eig"] = pending_eig_.to_json();
    } else {
      out["next_design"] = nullptr;
      out["transcript"] = "/v1/sessions/" + id_;
    }
    return {200, out};
  }

  json snapshot() const {
    json j = {{"session_id", id_},
              {"config", spec_.to_json()},
              {"status", status_name(status_)},
              {"t", state_.t()},
              {"T", spec_.horizon},
              {"created_ms", created_},
              {"updated_ms", updated_},
              {"belief", belief_json()},
              {"transcript", transcript_json(transcript_)}};
    j["proposed_design"] = pending_ ? json(pending_->values) : json(nullptr);
    if (pending_) j["proposed_eig"] = pending_eig_.to_json();
    return j;
  }

  json created_json() const {
    return {{"session_id", id_},
            {"status", status_name(status_)},
            {"t", state_.t()},
            {"design", pending_->values},
            {"eig", pending_eig_.to_json()},
            {"belief", belief_json()}};
  }

  SessionStatus status() const { return status_; }

 private:
  void propose() {
    const auto t0 = std::chrono::steady_clock::now();
    pending_ = state_.choose_design();
    pending_eig_ = state_.incremental_eig(*pending_);
    status_ = SessionStatus::awaiting_outcome;
    propose_ms_ = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  json belief_json() const { return {{"mean", state_.belief().mean()}, {"std", state_.belief().stddev()}}; }

  std::string id_;
  SessionSpec spec_;
  SessionState state_;
  SessionStatus status_ = SessionStatus::proposing;
  std::optional<Design> pending_;
  EigEstimate pending_eig_;
  double propose_ms_ = 0.0;
  std::vector<TranscriptRow> transcript_;
  std::int64_t created_, updated_;
  std::mutex mu_;
};

struct ServiceConfig {
  std::string snapshot_dir;  // finished sessions are written here when set
};

class SessionService {
 public:
  explicit SessionService(ServiceConfig cfg = {}) : cfg_(std::move(cfg)) {}

  ServiceResponse create_session(const std::string& body_text) {
    json body;
    try {
      body = json::parse(body_text);
    } catch (const json::exception& e) {
      return error_response(400, "bad_json", e.what());
    }
    return create_session(body);
  }

  ServiceResponse create_session(const json& body) {
    try {
      SessionSpec spec = SessionSpec::from_json(body);
      BuiltSession built = build_session(spec);
      auto s = std::make_shared<Session>(new_id(), std::move(spec), std::move(built));
      {
        std::unique_lock lock(store_mu_);
        sessions_[s->id()] = s;
      }
      return {201, s->created_json()};
    } catch (const UnknownModelError& e) {
      return error_response(422, "unknown_model", e.what());
    } catch (const CapabilityError& e) {
      return error_response(422, "unsupported", e.what());
    } catch (const ConfigError& e) {
      return error_response(400, "invalid_config", e.what());
    } catch (const ShapeError& e) {
      return error_response(400, "invalid_config", e.what());
    } catch (const NumericError& e) {
      return error_response(500, "numeric_error", e.what());
    }
  }

  ServiceResponse post_outcome(const std::string& id, const std::string& body_text) {
    json body;
    try {
      body = json::parse(body_text);
    } catch (const json::exception& e) {
      return error_response(400, "bad_json", e.what());
    }
    return post_outcome(id, body);
  }

  ServiceResponse post_outcome(const std::string& id, const json& body) {
    auto s = find(id);
    if (!s) return error_response(404, "not_found", "no session '" + id + "'");
    std::unique_lock lock(s->mutex(), std::try_to_lock);
    if (!lock.owns_lock()) return error_response(409, "busy", "another outcome for this session is being processed");
    ServiceResponse r;
    try {
      r = s->post_outcome(body);
    } catch (const NumericError& e) {
      return error_response(500, "numeric_error", e.what());
    }
    if (r.status == 200 && s->status() == SessionStatus::finished && !cfg_.snapshot_dir.empty()) {
      std::filesystem::create_directories(cfg_.snapshot_dir);
      std::ofstream(std::filesystem::path(cfg_.snapshot_dir) / ("session_" + id + ".json")) << s->snapshot().dump(2) << "\n";
    }
    return r;
  }

  ServiceResponse get_session(const std::string& id) {
    auto s = find(id);
    if (!s) return error_response(404, "not_found", "no session '" + id + "'");
    std::lock_guard lock(s->mutex());
    return {200, s->snapshot()};
  }

  ServiceResponse list_models() const { return {200, {{"models", model_catalog()}}}; }

 private:
  std::shared_ptr<Session> find(const std::string& id) {
    std::shared_lock lock(store_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  static std::string new_id() {
    static thread_local std::random_device rd;
    static const char* hex = "0123456789abcdef";
    std::string id;
    for (int i = 0; i < 4; ++i) {
      std::uint32_t v = rd();
      for (int k = 0; k < 8; ++k) id += hex[(v >> (4 * k)) & 0xF];
    }
    return id;
  }

  ServiceConfig cfg_;
  std::shared_mutex store_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

inline void send(httplib::Response& res, const ServiceResponse& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json; charset=utf-8");
}

/// Routes the four endpoints onto `server`.
inline void mount(httplib::Server& server, SessionService& svc) {
  server.Post("/v1/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.create_session(req.body));
  });
  server.Post(R"(/v1/sessions/([0-9a-zA-Z_-]+)/outcome)", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.post_outcome(req.matches[1], req.body));
  });
  server.Get(R"(/v1/sessions/([0-9a-zA-Z_-]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_session(req.matches[1]));
  });
  server.Get("/v1/models", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.list_models()); });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send(res, error_response(res.status, "http_error", "no such route"));
  });
}

}  // namespace eiglab
