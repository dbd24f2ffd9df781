#pragma once

// The `eiglab` command line: one subcommand per pipeline. Every run writes
// summary.json (config echo, content hash of the inputs, results) plus the
// CSV/JSON artifacts for that pipeline under --out. Nothing is written unless
// the whole run succeeds.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric error, 1 other.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "eiglab/bad_loop.hpp"
#include "eiglab/bounds.hpp"
#include "eiglab/design_opt.hpp"
#include "eiglab/estimators.hpp"
#include "eiglab/models.hpp"
#include "eiglab/parallel.hpp"
#include "eiglab/policy.hpp"
#include "eiglab/service.hpp"

#include <CLI11.hpp>

namespace eiglab::cli {

/// SHA-1 of "blob <size>\0<bytes>", the object id git would give `bytes`.
inline std::string git_blob_sha1(const std::string& bytes) {
  const std::string data = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Files produced by a run, flushed together at the end.
struct Artifacts {
  std::map<std::string, std::string> files;
  json results = json::object();
  std::vector<std::string> extra_inputs;  // files whose bytes enter the input hash
};

inline json parse_params(const std::string& text) {
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw ConfigError("--params must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("--params is not valid JSON: ") + e.what());
  }
}

inline Design design_arg(const Model& model, const std::vector<double>& v) {
  Design xi(v);
  model.validate_design(xi);
  return xi;
}

inline std::string transcript_csv(const std::vector<TranscriptRow>& rows) {
  std::string out;
  if (rows.empty()) return "t,eig_estimate,eig_std_error,wall_ms\n";
  const auto& r0 = rows.front();
  out = "t";
  for (std::size_t j = 0; j < r0.xi.dim(); ++j) out += ",xi" + std::to_string(j);
  const std::size_t ydim = r0.y.is_discrete() ? 1 : r0.y.values().size();
  for (std::size_t j = 0; j < ydim; ++j) out += ",y" + std::to_string(j);
  out += ",eig_estimate,eig_std_error";
  for (std::size_t j = 0; j < r0.belief_mean.size(); ++j) out += ",belief_mean" + std::to_string(j);
  for (std::size_t j = 0; j < r0.belief_std.size(); ++j) out += ",belief_std" + std::to_string(j);
  out += ",wall_ms\n";
  for (const auto& r : rows) {
    out += std::to_string(r.t);
    for (double v : r.xi.values) out += "," + fmt(v);
    if (r.y.is_discrete())
      out += "," + std::to_string(r.y.index());
    else
      for (double v : r.y.values()) out += "," + fmt(v);
    out += "," + fmt(r.eig.value) + "," + fmt(r.eig.std_error);
    for (double v : r.belief_mean) out += "," + fmt(v);
    for (double v : r.belief_std) out += "," + fmt(v);
    out += "," + fmt(r.wall_ms) + "\n";
  }
  return out;
}

inline std::string grid_csv(const GridResult& g) {
  std::string out;
  const std::size_t d = g.table.empty() ? 0 : g.table.front().xi.dim();
  for (std::size_t j = 0; j < d; ++j) out += "xi" + std::to_string(j) + ",";
  out += "eig_estimate,std_error\n";
  for (const auto& r : g.table) {
    for (double v : r.xi.values) out += fmt(v) + ",";
    out += fmt(r.estimate.value) + "," + fmt(r.estimate.std_error) + "\n";
  }
  return out;
}

struct Common {
  std::string model;
  std::string params = "{}";
  std::uint64_t seed = 0;
  std::string out = "out";
  std::size_t threads = 0;
};

inline void add_common(CLI::App* sub, Common& c, bool needs_model = true) {
  auto* m = sub->add_option("--model", c.model, "model id (lg, location_finding, probit)");
  if (needs_model) m->required();
  sub->add_option("--params", c.params, "model parameters as a JSON object");
  sub->add_option("--seed", c.seed, "root seed")->required();
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--threads", c.threads, "worker cap (falls back to EIGLAB_THREADS)");
}

/// Every option of `sub` with its effective value.
inline json echo_options(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const std::string name = o->get_name(false, true);
    if (name.empty() || o->get_lnames().empty() || o->get_lnames()[0] == "help") continue;
    const std::string key = o->get_lnames()[0];
    if (o->count() > 0) {
      const auto& res = o->results();
      j[key] = res.size() == 1 ? json(res[0]) : json(res);
    } else {
      j[key] = o->get_default_str();
    }
  }
  return j;
}

inline void write_artifacts(const std::string& dir, const Artifacts& a) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, bytes] : a.files) {
    std::ofstream f(std::filesystem::path(dir) / name, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing '" + name + "'");
  }
}

/// Parses argv and runs the chosen pipeline.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"eiglab: expected information gain estimation, bounds and experimental design"};
  app.name("eiglab");
  app.require_subcommand(1, 1);
  app.option_defaults()->always_capture_default();

  Common common;

  // estimate
  auto* est = app.add_subcommand("estimate", "estimate EIG or a bound at one design");
  add_common(est, common);
  std::vector<double> xi_arg;
  std::string estimator = "nmc", inner = "fresh", optimizer = "sgd";
  std::size_t n = 1000, m = 100, replicates = 1000, m0 = 4, l_max = 12, steps = 2000, batch = 128, bootstrap = 200;
  double tau = 1.5, lr = 1e-2;
  est->add_option("--xi", xi_arg, "design (comma separated)")->required()->delimiter(',');
  est->add_option("--estimator", estimator, "rb | nmc | mlmc | marginal | ba | vnmc | ace | pce");
  est->add_option("--n", n, "outer samples (bounds: evaluation samples)");
  est->add_option("--m", m, "inner samples or contrasts");
  est->add_option("--inner", inner, "fresh | shared | replay_outer");
  est->add_option("--replicates", replicates, "MLMC replicates R");
  est->add_option("--m0", m0, "MLMC base inner count");
  est->add_option("--tau", tau, "MLMC level decay");
  est->add_option("--lmax", l_max, "MLMC truncation level");
  est->add_option("--bootstrap", bootstrap, "bootstrap resamples for rb");
  est->add_option("--steps", steps, "training steps for variational bounds");
  est->add_option("--batch", batch, "training batch size");
  est->add_option("--lr", lr, "training step size");
  est->add_option("--optimizer", optimizer, "sgd | adam");

  // optimize
  auto* opt = app.add_subcommand("optimize", "optimize a static design");
  add_common(opt, common);
  std::string method = "sga", objective = "pce", scheme = "alternating", grid_estimator = "nmc";
  std::size_t restarts = 8, opt_steps = 300, opt_batch = 64, opt_m = 16, eval_n = 4096, eval_m = 1023, grid_points = 121,
              grid_n = 1000, grid_m = 100;
  double xi_lr = 0.2;
  opt->add_option("--method", method, "sga | grid");
  opt->add_option("--objective", objective, "pce | ace | ba (sga)");
  opt->add_option("--scheme", scheme, "alternating | joint (sga)");
  opt->add_option("--restarts", restarts);
  opt->add_option("--steps", opt_steps);
  opt->add_option("--batch", opt_batch);
  opt->add_option("--m", opt_m, "contrasts during training");
  opt->add_option("--eval-n", eval_n, "held-out outer samples");
  opt->add_option("--eval-m", eval_m, "held-out contrasts");
  opt->add_option("--xi-lr", xi_lr, "design step size");
  opt->add_option("--grid-points", grid_points, "grid points per design dimension");
  opt->add_option("--estimator", grid_estimator, "rb | nmc | mlmc (grid)");
  opt->add_option("--n", grid_n, "outer samples per grid point");
  opt->add_option("--inner-m", grid_m, "inner samples per grid point");

  // sequential
  auto* seq = app.add_subcommand("sequential", "run the adaptive loop against a simulated ground truth");
  add_common(seq, common);
  std::string strategy = "greedy-grid", checkpoint, fixed;
  std::size_t horizon = 5, particles = std::size_t{1} << 14, seq_grid = 0, eig_n = 0, eig_m = 0;
  std::vector<double> theta_star;
  seq->add_option("--strategy", strategy, "greedy-grid | greedy-sga | policy | fixed");
  seq->add_option("--T", horizon, "number of experiments");
  seq->add_option("--particles", particles);
  seq->add_option("--checkpoint", checkpoint, "policy checkpoint (policy strategy)");
  seq->add_option("--fixed", fixed, "JSON list of designs (fixed strategy)");
  seq->add_option("--grid-points", seq_grid, "grid points per design dimension (0: model default)");
  seq->add_option("--eig-n", eig_n, "outer samples for the reported incremental EIG (0: default)");
  seq->add_option("--eig-m", eig_m, "inner samples for the reported incremental EIG (0: default)");
  seq->add_option("--theta-star", theta_star, "ground-truth latent (default: prior draw)")->delimiter(',');

  // train-policy
  auto* tp = app.add_subcommand("train-policy", "train an amortized design policy");
  add_common(tp, common);
  std::size_t tp_T = 2, tp_steps = 1000, tp_batch = 64, tp_l = 31, eval_b = 2000, eval_l = 4095;
  double tp_lr = 3e-4;
  std::string ckpt_name = "policy.eigp";
  tp->add_option("--T", tp_T, "horizon");
  tp->add_option("--steps", tp_steps);
  tp->add_option("--batch", tp_batch);
  tp->add_option("--L", tp_l, "contrasts during training");
  tp->add_option("--lr", tp_lr, "Adam step size");
  tp->add_option("--eval-b", eval_b, "held-out rollouts");
  tp->add_option("--eval-l", eval_l, "held-out contrasts");
  tp->add_option("--checkpoint", ckpt_name, "checkpoint file name under --out");

  // study
  auto* st = app.add_subcommand("study", "MSE against cost for one estimator");
  add_common(st, common);
  std::string st_estimator = "nmc", pairing = "sqrt";
  std::vector<double> costs{256, 1024, 4096, 16384, 65536}, st_xi;
  std::size_t st_reps = 100;
  std::optional<double> oracle;
  st->add_option("--xi", st_xi, "design (comma separated)")->required()->delimiter(',');
  st->add_option("--estimator", st_estimator, "rb | nmc | mlmc");
  st->add_option("--pairing", pairing, "sqrt | fixed:<M>");
  st->add_option("--costs", costs, "cost budgets (comma separated)")->delimiter(',');
  st->add_option("--replicates", st_reps);
  st->add_option("--oracle", oracle, "reference EIG when the model has no closed form");
  st->add_option("--m0", m0);
  st->add_option("--tau", tau);
  st->add_option("--lmax", l_max);

  // serve
  auto* sv = app.add_subcommand("serve", "run the HTTP session service");
  std::string bind = "127.0.0.1", snapshot_dir;
  int port = 8080;
  std::size_t sv_threads = 0;
  sv->add_option("--bind", bind, "listen address");
  sv->add_option("--port", port, "listen port (0: any free port)");
  sv->add_option("--out", snapshot_dir, "directory for finished-session snapshots");
  sv->add_option("--threads", sv_threads, "worker cap (falls back to EIGLAB_THREADS)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "eiglab: " << e.what() << "\n";
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (sub == sv) {
      if (sv_threads) set_max_threads(sv_threads);
      SessionService svc(ServiceConfig{snapshot_dir});
      httplib::Server server;
      mount(server, svc);
      int p = port;
      if (port == 0) {
        p = server.bind_to_any_port(bind);
      } else if (!server.bind_to_port(bind, port)) {
        err << "eiglab: cannot bind " << bind << ":" << port << "\n";
        return 1;
      }
      if (p < 0) {
        err << "eiglab: cannot bind " << bind << "\n";
        return 1;
      }
      out << "listening on http://" << bind << ":" << p << std::endl;
      return server.listen_after_bind() ? 0 : 1;
    }

    if (common.threads) set_max_threads(common.threads);
    const json params = parse_params(common.params);
    std::shared_ptr<const Model> model = make_model(common.model, params);
    const RngStream rng(common.seed, 0);
    Artifacts a;

    if (sub == est) {
      const Design xi = design_arg(*model, xi_arg);
      json r;
      const std::string e = estimator;
      if (e == "rb" || e == "nmc" || e == "mlmc") {
        EigEstimate v;
        if (e == "rb") {
          v = rb_eig(*model, xi, n, rng, PriorSampler(*model), bootstrap);
        } else if (e == "nmc") {
          v = nmc_eig(*model, xi, NmcConfig{n, m, nullptr, parse_inner_sampling(inner)}, rng);
        } else {
          MlmcConfig mc;
          mc.m0 = m0;
          mc.tau = tau;
          mc.l_max = l_max;
          mc.replicates = replicates;
          v = mlmc_eig(*model, xi, mc, rng);
        }
        r = v.to_json();
      } else {
        const BoundKind kind = parse_bound_kind(e);
        EigEstimate v;
        if (kind == BoundKind::pce) {
          v = pce_bound(*model, xi, n, m, rng, parse_inner_sampling(inner));
        } else {
          BoundConfig bc;
          bc.kind = kind;
          bc.m = std::min<std::size_t>(m, 64);
          bc.batch = batch;
          bc.steps = steps;
          bc.optimizer = optimizer == "adam" ? nn::OptimizerKind::adam
                         : optimizer == "sgd" ? nn::OptimizerKind::sgd
                                              : throw ConfigError("unknown optimizer '" + optimizer + "'");
          bc.schedule.base = lr;
          const TrainedBound tb = train_variational(*model, xi, bc, rng);
          v = evaluate_bound(*model, xi, kind, tb.q, n, m, rng.derive(streams::kHeldOut, 0));
          a.files["trace.csv"] = trace_csv(tb.trace);
        }
        r = v.to_json();
        r["bound"] = bound_name(kind);
        r["side"] = kind == BoundKind::marginal || kind == BoundKind::vnmc ? "upper" : "lower";
      }
      r["estimator"] = e;
      r["xi"] = xi.values;
      if (auto oracle_v = model->closed_form_eig(xi)) r["closed_form_eig"] = *oracle_v;
      a.results = r;
      out << r.dump() << "\n";
    } else if (sub == opt) {
      if (method == "sga") {
        OptConfig oc;
        oc.objective = parse_bound_kind(objective);
        oc.scheme = scheme == "joint" ? UpdateScheme::joint
                    : scheme == "alternating" ? UpdateScheme::alternating
                                              : throw ConfigError("unknown update scheme '" + scheme + "'");
        oc.restarts = restarts;
        oc.steps = opt_steps;
        oc.batch = opt_batch;
        oc.m = opt_m;
        oc.eval_n = eval_n;
        oc.eval_m = eval_m;
        oc.xi_schedule.base = xi_lr;
        const OptResult res = sga_optimize(*model, oc, rng);
        json rs = json::array();
        for (const auto& rr : res.restarts) rs.push_back({{"xi", rr.xi.values}, {"held_out", rr.held_out.to_json()}});
        a.results = {{"xi", res.xi.values}, {"bound", res.bound.to_json()}, {"best_restart", res.best_restart}, {"restarts", rs}};
        a.files["trace.csv"] = res.trace_csv();
      } else if (method == "grid") {
        GridConfig gc{parse_estimator_id(grid_estimator), grid_n, grid_m, {}};
        const GridResult g = grid_search(*model, uniform_grid(model->constraint(), grid_points), gc, rng);
        a.results = {{"xi", g.xi.values}, {"best", g.table[g.best].estimate.to_json()}, {"points", g.table.size()}};
        a.files["grid.csv"] = grid_csv(g);
      } else {
        throw ConfigError("unknown method '" + method + "' (expected sga or grid)");
      }
      if (auto o = model->closed_form_eig(Design(a.results["xi"].get<std::vector<double>>()))) a.results["closed_form_eig"] = *o;
      out << a.results.dump() << "\n";
    } else if (sub == seq) {
      json req = {{"model", common.model}, {"params", params}, {"strategy", strategy}, {"T", horizon},
                  {"seed", common.seed},   {"particles", particles}};
      if (!checkpoint.empty()) {
        req["checkpoint"] = checkpoint;
        a.extra_inputs.push_back(checkpoint);
      }
      if (!fixed.empty()) req["fixed"] = parse_params("{\"f\":" + fixed + "}")["f"];
      if (seq_grid) req["grid_points"] = seq_grid;
      const SessionSpec spec = SessionSpec::from_json(req);
      BuiltSession b = build_session(spec);
      if (eig_n) b.eig.n = eig_n;
      if (eig_m) b.eig.m = eig_m;
      std::optional<LatentSample> ts;
      if (!theta_star.empty()) ts = LatentSample(theta_star);
      const SequentialResult res = run_sequential(b.model, spec.horizon, b.strategy, b.belief, b.eig, rng, ts);
      const json tj = transcript_json(res.transcript);
      a.results = {{"theta_star", res.theta_star.values}, {"transcript", tj}};
      a.files["transcript.json"] = tj.dump(2) + "\n";
      a.files["transcript.csv"] = transcript_csv(res.transcript);
      out << json{{"theta_star", res.theta_star.values}, {"final", tj.back()}}.dump() << "\n";
    } else if (sub == tp) {
      PolicyTrainConfig pc;
      pc.batch = tp_batch;
      pc.contrasts = tp_l;
      pc.steps = tp_steps;
      pc.schedule.base = tp_lr;
      const TrainedPolicy trained = train_policy(*model, tp_T, pc, rng);
      const RngStream held = rng.derive(streams::kHeldOut, 0);
      const EigEstimate v = spce_total_bound(*model, trained.policy, tp_T, eval_b, eval_l, held);
      const RandomDesignPolicy random(model->constraint(), common.seed);
      const EigEstimate vr = spce_total_bound(*model, random, tp_T, eval_b, eval_l, held);
      a.results = {{"T", tp_T}, {"checkpoint", ckpt_name}, {"bound", v.to_json()}, {"random_baseline", vr.to_json()}};
      a.files[ckpt_name] = trained.policy.serialize();
      a.files["trace.csv"] = trace_csv(trained.trace);
      out << a.results.dump() << "\n";
    } else if (sub == st) {
      StudyConfig sc;
      sc.estimator = parse_estimator_id(st_estimator);
      sc.costs = costs;
      sc.pairing = Pairing::parse(pairing);
      sc.replicates = st_reps;
      sc.oracle = oracle;
      sc.mlmc.m0 = m0;
      sc.mlmc.tau = tau;
      sc.mlmc.l_max = l_max;
      sc.mlmc.validate();
      const StudyResult res = convergence_study(*model, design_arg(*model, st_xi), sc, rng);
      json rows = json::array();
      for (const auto& r : res.rows) rows.push_back({{"cost", r.cost}, {"mse", r.mse}});
      a.results = {{"slope", res.slope}, {"rows", rows}};
      a.files["study.csv"] = res.to_csv();
      out << a.results.dump() << "\n";
    }

    json inputs = {{"subcommand", sub->get_name()},
                   {"model", model->id()},
                   {"params", model->params()},
                   {"options", echo_options(sub)}};
    // where the artifacts go and how many workers ran do not change them
    json hashed_inputs = inputs;
    hashed_inputs["options"].erase("out");
    hashed_inputs["options"].erase("threads");
    std::string hashed = hashed_inputs.dump();
    for (const auto& f : a.extra_inputs) hashed += read_file(f);
    json summary = {{"config", inputs},
                    {"argv", std::vector<std::string>(argv + 1, argv + argc)},
                    {"inputs_sha1", git_blob_sha1(hashed)},
                    {"artifacts", json::array()},
                    {"results", a.results}};
    for (const auto& [name, bytes] : a.files) summary["artifacts"].push_back(name);
    a.files["summary.json"] = summary.dump(2) + "\n";
    write_artifacts(common.out, a);
    return 0;
  } catch (const ConfigError& e) {
    err << "eiglab: config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "eiglab: config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "eiglab: numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "eiglab: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace eiglab::cli
