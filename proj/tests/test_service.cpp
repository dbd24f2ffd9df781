#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <thread>

#include <unistd.h>

#include "eiglab/service.hpp"

using namespace eiglab;

namespace {

json probit_request(std::uint64_t seed, std::size_t T = 3) {
  return {{"model", "probit"}, {"strategy", "greedy-grid"}, {"T", T}, {"seed", seed}};
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("eiglab_service_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string write_policy(const Model& m, std::size_t T, const std::string& name) {
  PolicyNetwork p(m, T, RngStream(41, 0));
  RngStream r(41, 1);
  for (auto& t : p.params())
    for (double& v : t.data) v += 0.3 * r.normal();
  const auto path = std::filesystem::temp_directory_path() / ("eiglab_service_" + std::to_string(::getpid()) + "_" + name);
  p.save(path.string());
  return path.string();
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TEST(Service, CreateProbitSession) {
  SessionService svc;
  const auto r = svc.create_session(probit_request(1));
  ASSERT_EQ(r.status, 201) << r.body.dump();
  const double xi = r.body["design"][0];
  EXPECT_GE(xi, -6.0);
  EXPECT_LE(xi, 6.0);
  EXPECT_EQ(r.body["status"], "awaiting_outcome");
  EXPECT_EQ(r.body["t"], 0);
  EXPECT_EQ(r.body["session_id"].get<std::string>().size(), 32u);
  EXPECT_TRUE(r.body["belief"].contains("mean"));
}

TEST(Service, SameSeedSameFirstDesign) {
  SessionService svc;
  const json req = {{"model", "lg"}, {"strategy", "greedy-grid"}, {"T", 2}, {"seed", 9}, {"particles", 2048}};
  const auto a = svc.create_session(req), b = svc.create_session(req);
  ASSERT_EQ(a.status, 201);
  EXPECT_EQ(a.body["design"], b.body["design"]);
  EXPECT_NE(a.body["session_id"], b.body["session_id"]);
}

TEST(Service, CreateErrors) {
  SessionService svc;
  EXPECT_EQ(svc.create_session(std::string("{not json")).status, 400);
  EXPECT_EQ(svc.create_session(json{{"model", "probit"}, {"T", 2}}).status, 400);  // no seed
  EXPECT_EQ(svc.create_session(json{{"model", "probit"}, {"T", 2}, {"seed", 1}, {"sead", 1}}).status, 400);
  EXPECT_EQ(svc.create_session(json{{"model", "probit"}, {"T", 0}, {"seed", 1}}).status, 400);
  EXPECT_EQ(svc.create_session(json{{"model", "probit"}, {"T", 1}, {"seed", 1}, {"strategy", "best"}}).status, 400);
  EXPECT_EQ(svc.create_session(json{{"model", "probit"}, {"T", 1}, {"seed", 1}, {"params", {{"slope", -1}}}}).status, 400);
  const auto unknown = svc.create_session(json{{"model", "quantum"}, {"T", 1}, {"seed", 1}});
  EXPECT_EQ(unknown.status, 422);
  EXPECT_EQ(unknown.body["code"], "unknown_model");
  const auto missing = svc.create_session(
      json{{"model", "lg"}, {"T", 1}, {"seed", 1}, {"strategy", "policy"}, {"checkpoint", "/nonexistent/p.eigp"}});
  EXPECT_EQ(missing.status, 422);
  EXPECT_TRUE(missing.body.contains("message"));
}

TEST(Service, OutcomeLoopToCompletion) {
  SessionService svc;
  const auto c = svc.create_session(probit_request(2, 2));
  const std::string id = c.body["session_id"];
  auto r = svc.post_outcome(id, json{{"y", 1}, {"t", 1}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["t"], 1);
  EXPECT_EQ(r.body["status"], "awaiting_outcome");
  EXPECT_TRUE(r.body["next_design"].is_array());
  EXPECT_TRUE(r.body["belief"]["std"][0].get<double>() < 2.0);
  r = svc.post_outcome(id, json{{"y", 0}});
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["status"], "finished");
  EXPECT_TRUE(r.body["next_design"].is_null());
  EXPECT_EQ(r.body["transcript"], "/v1/sessions/" + id);
  const auto g = svc.get_session(id);
  ASSERT_EQ(g.status, 200);
  EXPECT_EQ(g.body["transcript"].size(), 2u);
  EXPECT_TRUE(g.body["proposed_design"].is_null());
  for (const char* k : {"t", "xi", "y", "eig_estimate", "eig_std_error", "belief_mean", "belief_std", "wall_ms"})
    EXPECT_TRUE(g.body["transcript"][0].contains(k)) << k;
  // finished sessions are immutable
  EXPECT_EQ(svc.post_outcome(id, json{{"y", 1}}).status, 409);
}

TEST(Service, FreshSessionSnapshot) {
  SessionService svc;
  const std::string id = svc.create_session(probit_request(3)).body["session_id"];
  const auto g = svc.get_session(id);
  ASSERT_EQ(g.status, 200);
  EXPECT_EQ(g.body["transcript"].size(), 0u);
  EXPECT_TRUE(g.body["proposed_design"].is_array());
  EXPECT_EQ(g.body["config"]["seed"], 3);
}

TEST(Service, OutcomeErrors) {
  SessionService svc;
  EXPECT_EQ(svc.post_outcome("deadbeef", json{{"y", 1}}).status, 404);
  EXPECT_EQ(svc.get_session("deadbeef").status, 404);
  const std::string id = svc.create_session(probit_request(4)).body["session_id"];
  const auto bad = svc.post_outcome(id, json{{"y", 5}});
  EXPECT_EQ(bad.status, 422);
  EXPECT_EQ(bad.body["code"], "invalid_outcome");
  EXPECT_EQ(svc.post_outcome(id, json{{"y", "yes"}}).status, 422);
  EXPECT_EQ(svc.post_outcome(id, json{{"outcome", 1}}).status, 400);
  EXPECT_EQ(svc.post_outcome(id, json::object()).status, 400);
  EXPECT_EQ(svc.post_outcome(id, std::string("[")).status, 400);
  EXPECT_EQ(svc.post_outcome(id, json{{"y", 1}, {"t", 3}}).status, 409);
  // errors leave the session untouched
  EXPECT_EQ(svc.get_session(id).body["t"], 0);
  EXPECT_EQ(svc.post_outcome(id, json{{"y", 1}, {"t", 1}}).status, 200);
}

TEST(Service, ConcurrentPostsExactlyOneWins) {
  SessionService svc;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const std::string id = svc.create_session(probit_request(10 + seed)).body["session_id"];
    std::atomic<int> go{0};
    int codes[2] = {0, 0};
    std::thread th[2];
    for (int k = 0; k < 2; ++k)
      th[k] = std::thread([&, k] {
        while (go.load() == 0) {
        }
        codes[k] = svc.post_outcome(id, json{{"y", k}, {"t", 1}}).status;
      });
    go = 1;
    th[0].join();
    th[1].join();
    EXPECT_EQ((codes[0] == 200) + (codes[1] == 200), 1) << codes[0] << " " << codes[1];
    EXPECT_EQ((codes[0] == 409) + (codes[1] == 409), 1) << codes[0] << " " << codes[1];
    EXPECT_EQ(svc.get_session(id).body["t"], 1);
  }
}

TEST(Service, SnapshotOnFinishAndNoDurableStore) {
  const auto dir = scratch_dir("snap");
  std::string id;
  {
    SessionService svc(ServiceConfig{dir.string()});
    id = svc.create_session(probit_request(5, 1)).body["session_id"];
    ASSERT_EQ(svc.post_outcome(id, json{{"y", 1}}).status, 200);
  }
  const auto file = dir / ("session_" + id + ".json");
  ASSERT_TRUE(std::filesystem::exists(file));
  std::ifstream in(file);
  const json snap = json::parse(in);
  EXPECT_EQ(snap["status"], "finished");
  EXPECT_EQ(snap["transcript"].size(), 1u);
  // a new process (service instance) starts empty
  SessionService restarted(ServiceConfig{dir.string()});
  EXPECT_EQ(restarted.get_session(id).status, 404);
  std::filesystem::remove_all(dir);
}

TEST(Service, ListsModels) {
  SessionService svc;
  const auto r = svc.list_models();
  ASSERT_EQ(r.status, 200);
  ASSERT_EQ(r.body["models"].size(), 3u);
  for (const auto& m : r.body["models"]) {
    EXPECT_TRUE(m.contains("id"));
    EXPECT_TRUE(m.contains("schema"));
    EXPECT_TRUE(m.contains("outcome"));
  }
}

TEST(Service, PolicyStepsAreFast) {
  const LocationFindingModel loc;
  const std::string ckpt = write_policy(loc, 5, "fast.eigp");
  SessionService svc;
  const auto c = svc.create_session(
      json{{"model", "location_finding"}, {"strategy", "policy"}, {"T", 5}, {"seed", 6}, {"checkpoint", ckpt}});
  ASSERT_EQ(c.status, 201) << c.body.dump();
  const std::string id = c.body["session_id"];
  RngStream r(6, 1);
  for (int t = 0; t < 4; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto resp = svc.post_outcome(id, json{{"y", {r.normal()}}});
    const double ms = elapsed_ms(t0);
    ASSERT_EQ(resp.status, 200) << resp.body.dump();
    EXPECT_LT(ms, 50.0) << "step " << t;
  }
  std::filesystem::remove(ckpt);
}

TEST(Service, GreedyStepsUnderOneSecond) {
  SessionService svc;
  for (const char* model : {"lg", "probit", "location_finding"}) {
    const auto c = svc.create_session(json{{"model", model}, {"T", 3}, {"seed", 7}});
    ASSERT_EQ(c.status, 201) << model << c.body.dump();
    const std::string id = c.body["session_id"];
    for (int t = 0; t < 2; ++t) {
      const json y = std::string(model) == "probit" ? json(t % 2) : json(0.3);
      const auto t0 = std::chrono::steady_clock::now();
      const auto resp = svc.post_outcome(id, json{{"y", y}});
      ASSERT_EQ(resp.status, 200) << model << resp.body.dump();
      EXPECT_LT(elapsed_ms(t0), 1000.0) << model;
    }
  }
}

TEST(Http, ReplayReproducesTheDesignSequence) {
  SessionService svc;
  httplib::Server server;
  mount(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto run = [&](const std::vector<json>& outcomes, std::vector<json>& designs) {
    const auto c = cli.Post("/v1/sessions", probit_request(77, 4).dump(), "application/json");
    EXPECT_TRUE(c);
    EXPECT_EQ(c->status, 201);
    const json body = json::parse(c->body);
    const std::string id = body["session_id"];
    designs.push_back(body["design"]);
    for (std::size_t t = 0; t < outcomes.size(); ++t) {
      const auto r = cli.Post("/v1/sessions/" + id + "/outcome", json{{"y", outcomes[t]}}.dump(), "application/json");
      EXPECT_TRUE(r);
      EXPECT_EQ(r->status, 200);
      const json b = json::parse(r->body);
      if (!b["next_design"].is_null()) designs.push_back(b["next_design"]);
    }
    const auto g = cli.Get("/v1/sessions/" + id);
    EXPECT_EQ(g->status, 200);
    return json::parse(g->body);
  };
  std::vector<json> first, second;
  const std::vector<json> ys = {1, 0, 0, 1};
  const json snap = run(ys, first);
  EXPECT_EQ(snap["status"], "finished");
  ASSERT_EQ(snap["transcript"].size(), 4u);
  // replay the recorded outcomes
  std::vector<json> recorded;
  for (const auto& row : snap["transcript"]) recorded.push_back(row["y"]);
  run(recorded, second);
  EXPECT_EQ(first, second);
  EXPECT_EQ(first.size(), 4u);

  const auto models = cli.Get("/v1/models");
  EXPECT_EQ(models->status, 200);
  EXPECT_EQ(json::parse(models->body)["models"].size(), 3u);
  const auto missing = cli.Get("/v1/sessions/0123");
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["code"], "not_found");
  const auto route = cli.Get("/v2/nothing");
  EXPECT_EQ(route->status, 404);
  EXPECT_EQ(json::parse(route->body)["code"], "http_error");
  const auto bad = cli.Post("/v1/sessions", "{", "application/json");
  EXPECT_EQ(bad->status, 400);

  server.stop();
  th.join();
}
