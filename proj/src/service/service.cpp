#include "topoforge/service.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/eval.hpp"
#include "topoforge/postprocess.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include "httplib.h"

namespace topoforge::service {

using nlohmann::json;

const char* job_kind_name(JobKind k) {
  switch (k) {
    case JobKind::kSimp: return "simp";
    case JobKind::kTrain: return "train";
    case JobKind::kEval: return "eval";
  }
  return "?";
}

const char* job_state_name(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "?";
}

namespace {

struct FieldError {
  std::string field;
  std::string message;
};

std::string hex(std::uint64_t v, int digits) {
  std::ostringstream s;
  s << std::hex << std::setw(digits) << std::setfill('0') << v;
  return s.str();
}

Response json_response(int status, const json& j) { return {status, j.dump()}; }

Response field_error(const FieldError& e) {
  json j = {{"error", e.message}};
  j["field"] = e.field.empty() ? json(nullptr) : json(e.field);
  return json_response(400, j);
}

double number_field(const json& body, const char* name, std::optional<double> fallback = std::nullopt) {
  if (!body.contains(name)) {
    if (fallback) return *fallback;
    throw FieldError{name, std::string(name) + " is required"};
  }
  const auto& v = body.at(name);
  if (!v.is_number()) throw FieldError{name, std::string(name) + " must be a number"};
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw FieldError{name, std::string(name) + " must be finite"};
  return d;
}

std::int64_t integer_field(const json& body, const char* name, std::int64_t fallback, std::int64_t lo,
                           std::int64_t hi) {
  if (!body.contains(name)) return fallback;
  const auto& v = body.at(name);
  if (!v.is_number_integer()) throw FieldError{name, std::string(name) + " must be an integer"};
  const auto i = v.get<std::int64_t>();
  if (i < lo || i > hi) {
    throw FieldError{name, std::string(name) + " must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]"};
  }
  return i;
}

bool bool_field(const json& body, const char* name, bool fallback) {
  if (!body.contains(name)) return fallback;
  if (!body.at(name).is_boolean()) throw FieldError{name, std::string(name) + " must be a boolean"};
  return body.at(name).get<bool>();
}

json flat_grid(const DensityField& f) { return json(f.values); }

// First word of a ParameterError message names the offending parameter.
std::string leading_word(const std::string& msg) { return msg.substr(0, msg.find(' ')); }

}  // namespace

struct Service::Impl {
  Impl(const gan::CwganModel& m, ServiceOptions o)
      : model(m.clone()),
        options(std::move(o)),
        mesh{model.config.width, model.config.height},
        load(fem::cantilever_load(mesh)),
        id_prefix(hex(std::random_device{}(), 8)) {}

  const gan::CwganModel model;
  const ServiceOptions options;
  const fem::MeshSpec mesh;
  const fem::LoadCase load;
  const std::string id_prefix;
  std::atomic<std::uint64_t> next_id{0};

  mutable std::mutex jobs_mu;
  mutable std::condition_variable jobs_cv;
  std::map<std::string, JobStatus> jobs;

  std::mutex queue_mu;
  std::condition_variable queue_cv;
  std::deque<std::pair<std::string, simp::OptimizationParams>> queue;
  bool stopping = false;
  std::vector<std::jthread> workers;

  httplib::Server server;
  std::thread server_thread;

  std::string new_id(const char* kind) { return std::string(kind) + "-" + id_prefix + hex(next_id++, 8); }

  void update(const std::string& id, const std::function<void(JobStatus&)>& fn) {
    {
      std::lock_guard lock(jobs_mu);
      fn(jobs.at(id));
    }
    jobs_cv.notify_all();
  }

  void worker_loop() {
    for (;;) {
      std::pair<std::string, simp::OptimizationParams> job;
      {
        std::unique_lock lock(queue_mu);
        queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        job = std::move(queue.front());
        queue.pop_front();
      }
      run_simp(job.first, job.second);
    }
  }

  void run_simp(const std::string& id, const simp::OptimizationParams& params) {
    update(id, [](JobStatus& s) { s.state = JobState::kRunning; });
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = simp::optimize(mesh, load, params, [&](const simp::IterationRecord& rec) {
        update(id, [&](JobStatus& s) { s.iteration = rec.iteration; });
      });
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      json result = {{"grid", flat_grid(r.field)},
                     {"height", mesh.nely},
                     {"width", mesh.nelx},
                     {"compliance", r.trace.final_compliance},
                     {"iterations", r.trace.iteration_count()},
                     {"converged", r.trace.converged},
                     {"measured_volfrac", r.field.mean()},
                     {"wall_ms", ms}};
      update(id, [&](JobStatus& s) {
        s.state = JobState::kDone;
        s.result = result.dump();
      });
    } catch (const std::exception& e) {
      update(id, [&](JobStatus& s) {
        s.state = JobState::kFailed;
        s.message = e.what();
      });
    }
  }

  Response internal_error(const std::exception& e) {
    const std::string error_id = new_id("err");
    std::cerr << "[" << error_id << "] " << e.what() << std::endl;
    return json_response(500, {{"error", "internal error"}, {"error_id", error_id}});
  }

  Response model_info() const {
    const auto& c = model.config;
    return json_response(200, {{"resolution", {{"height", c.height}, {"width", c.width}}},
                               {"training_config",
                                {{"latent_dim", c.latent_dim},
                                 {"batch_size", c.batch_size},
                                 {"n_critic", c.n_critic},
                                 {"clip_c", c.clip_c},
                                 {"lr", c.lr},
                                 {"epochs", c.epochs},
                                 {"seed", c.seed},
                                 {"critic_mode", gan::critic_mode_name(c.critic_mode)},
                                 {"stages", c.resolved_stages()}}},
                               {"conditions_range", {{"min", model.label_min}, {"max", model.label_max}}},
                               {"generator_steps", model.generator_steps}});
  }

  Response generate(const json& body) {
    const double volfrac = number_field(body, "volfrac");
    if (volfrac < 0.0 || volfrac > 1.0) throw FieldError{"volfrac", "volfrac must lie in [0, 1]"};
    const auto count = static_cast<int>(integer_field(body, "count", 1, 1, options.max_generate_count));
    const auto seed = integer_field(body, "seed", 0, 0, std::numeric_limits<std::int64_t>::max());
    const bool post = bool_field(body, "post", false);
    try {
      const auto t0 = std::chrono::steady_clock::now();
      auto r = gan::sample(model, volfrac, count, static_cast<std::uint64_t>(seed));
      json grids = json::array();
      json measured = json::array();
      for (auto& f : r.fields) {
        if (post) f = post::postprocess(f);
        grids.push_back(flat_grid(f));
        measured.push_back(post::measured_volfrac(f));
      }
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      return json_response(200, {{"grids", grids},
                                 {"measured_volfrac", measured},
                                 {"requested_volfrac", volfrac},
                                 {"height", model.config.height},
                                 {"width", model.config.width},
                                 {"post", post},
                                 {"gen_ms", ms},
                                 {"warnings", r.warnings}});
    } catch (const std::exception& e) {
      return internal_error(e);
    }
  }

  Response submit_simp(const json& body) {
    simp::OptimizationParams p = options.simp_base;
    p.volfrac = number_field(body, "volfrac");
    p.penal = number_field(body, "penal", 3.0);
    p.rmin = number_field(body, "rmin", 1.5);
    try {
      p.validate();
    } catch (const ParameterError& e) {
      throw FieldError{leading_word(e.what()), e.what()};
    }
    JobStatus s;
    s.id = new_id("simp");
    s.kind = JobKind::kSimp;
    s.max_iterations = p.max_iters;
    {
      std::lock_guard lock(jobs_mu);
      jobs.emplace(s.id, s);
    }
    {
      std::lock_guard lock(queue_mu);
      queue.emplace_back(s.id, p);
    }
    queue_cv.notify_one();
    return json_response(202, {{"job_id", s.id}, {"state", job_state_name(JobState::kQueued)}});
  }

  Response job_status(const std::string& id) const {
    JobStatus s;
    {
      std::lock_guard lock(jobs_mu);
      const auto it = jobs.find(id);
      if (it == jobs.end()) return json_response(404, {{"error", "unknown job " + id}});
      s = it->second;
    }
    json j = {{"job_id", s.id},
              {"kind", job_kind_name(s.kind)},
              {"state", job_state_name(s.state)},
              {"progress", {{"iteration", s.iteration}, {"max_iterations", s.max_iterations}}}};
    if (s.state == JobState::kDone) j["result"] = json::parse(s.result);
    if (s.state == JobState::kFailed) j["error"] = s.message;
    return json_response(200, j);
  }

  DensityField parse_grid(const json& body) const {
    if (!body.contains("grid")) throw FieldError{"grid", "grid is required"};
    const auto& g = body.at("grid");
    if (!g.is_array()) throw FieldError{"grid", "grid must be an array"};
    std::vector<double> values;
    auto take = [&](const json& v) {
      if (!v.is_number()) throw FieldError{"grid", "grid entries must be numbers"};
      const double d = v.get<double>();
      if (!(d >= 0.0 && d <= 1.0)) throw FieldError{"grid", "grid values must lie in [0, 1]"};
      values.push_back(d);
    };
    if (!g.empty() && g.front().is_array()) {
      if (static_cast<int>(g.size()) != mesh.nely) {
        throw FieldError{"grid", "grid has " + std::to_string(g.size()) + " rows, model has " +
                                     std::to_string(mesh.nely)};
      }
      for (const auto& row : g) {
        if (!row.is_array() || static_cast<int>(row.size()) != mesh.nelx) {
          throw FieldError{"grid", "every grid row must have " + std::to_string(mesh.nelx) + " entries"};
        }
        for (const auto& v : row) take(v);
      }
    } else {
      if (g.size() != static_cast<std::size_t>(mesh.element_count())) {
        throw FieldError{"grid", "grid has " + std::to_string(g.size()) + " values, model resolution needs " +
                                     std::to_string(mesh.element_count())};
      }
      for (const auto& v : g) take(v);
    }
    return DensityField(mesh.nelx, mesh.nely, std::move(values));
  }

  Response evaluate(const json& body) {
    const auto field = parse_grid(body);
    try {
      const auto r = eval::compliance_eval(field, mesh, load);
      json j = {{"feasible", r.feasible}, {"measured_volfrac", post::measured_volfrac(field)}};
      j["compliance"] = r.feasible ? json(r.compliance) : json(nullptr);
      if (!r.feasible) j["reason"] = r.reason;
      return json_response(200, j);
    } catch (const std::exception& e) {
      return internal_error(e);
    }
  }
};

Service::Service(const gan::CwganModel& model, ServiceOptions options)
    : impl_(std::make_unique<Impl>(model, std::move(options))) {
  if (impl_->options.simp_workers < 1) throw ParameterError("simp_workers must be >= 1");
  impl_->options.simp_base.validate();
  for (int i = 0; i < impl_->options.simp_workers; ++i) {
    impl_->workers.emplace_back([this] { impl_->worker_loop(); });
  }
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    const auto r = handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  auto& srv = impl_->server;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Get(R"(/api/.*)", route);
  srv.Post(R"(/api/.*)", route);
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
}

Service::~Service() {
  stop();
  {
    std::lock_guard lock(impl_->queue_mu);
    impl_->stopping = true;
  }
  impl_->queue_cv.notify_all();
  impl_->workers.clear();
}

const gan::CwganModel& Service::model() const { return impl_->model; }

Response Service::handle(const std::string& method, const std::string& path, const std::string& body) {
  auto& d = *impl_;
  try {
    if (method == "OPTIONS") return {204, ""};
    const std::string jobs_prefix = "/api/jobs/";
    if (path.rfind(jobs_prefix, 0) == 0) {
      if (method != "GET") return json_response(405, {{"error", "use GET for " + path}});
      return d.job_status(path.substr(jobs_prefix.size()));
    }
    if (path == "/api/model/info") {
      if (method != "GET") return json_response(405, {{"error", "use GET for " + path}});
      return d.model_info();
    }
    if (path != "/api/generate" && path != "/api/simp" && path != "/api/evaluate") {
      return json_response(404, {{"error", "no route for " + path}});
    }
    if (method != "POST") return json_response(405, {{"error", "use POST for " + path}});
    json parsed;
    try {
      parsed = json::parse(body);
    } catch (const json::parse_error& e) {
      return field_error({"", std::string("malformed JSON body: ") + e.what()});
    }
    if (!parsed.is_object()) return field_error({"", "request body must be a JSON object"});
    if (path == "/api/generate") return d.generate(parsed);
    if (path == "/api/simp") return d.submit_simp(parsed);
    return d.evaluate(parsed);
  } catch (const FieldError& e) {
    return field_error(e);
  } catch (const std::exception& e) {
    return d.internal_error(e);
  }
}

std::optional<JobStatus> Service::job(const std::string& id) const {
  std::lock_guard lock(impl_->jobs_mu);
  const auto it = impl_->jobs.find(id);
  if (it == impl_->jobs.end()) return std::nullopt;
  return it->second;
}

std::optional<JobStatus> Service::wait(const std::string& id, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(impl_->jobs_mu);
  const auto it = impl_->jobs.find(id);
  if (it == impl_->jobs.end()) return std::nullopt;
  impl_->jobs_cv.wait_for(lock, timeout, [&] {
    return it->second.state == JobState::kDone || it->second.state == JobState::kFailed;
  });
  return it->second;
}

int Service::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = srv.bind_to_any_port(host);
  } else if (!srv.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound <= 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  impl_->server_thread = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return bound;
}

void Service::run(const std::string& host, int port) {
  auto& srv = impl_->server;
  if (!srv.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  srv.listen_after_bind();
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

}  // namespace topoforge::service
