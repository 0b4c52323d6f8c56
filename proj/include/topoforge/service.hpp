#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "topoforge/gan.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::service {

enum class JobKind { kSimp, kTrain, kEval };
enum class JobState { kQueued, kRunning, kDone, kFailed };

const char* job_kind_name(JobKind k);
const char* job_state_name(JobState s);

struct JobStatus {
  std::string id;
  JobKind kind = JobKind::kSimp;
  JobState state = JobState::kQueued;
  int iteration = 0;
  int max_iterations = 0;
  std::string message;  // set when failed
  std::string result;   // JSON object text once done
};

struct ServiceOptions {
  int simp_workers = 2;
  simp::OptimizationParams simp_base;  // iteration cap and tolerances for jobs
  int max_generate_count = 64;
};

struct Response {
  int status = 200;
  std::string body;  // JSON
};

/// Request handling over one immutable model. Thread-safe; SIMP jobs run on a
/// bounded worker pool owned by the service.
class Service {
 public:
  /// Keeps its own copy of the model.
  explicit Service(const gan::CwganModel& model, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Routes one request. Never throws; failures become 4xx/5xx JSON bodies.
  Response handle(const std::string& method, const std::string& path, const std::string& body);

  [[nodiscard]] std::optional<JobStatus> job(const std::string& id) const;
  /// Blocks until the job leaves queued/running or the timeout passes.
  std::optional<JobStatus> wait(const std::string& id, std::chrono::milliseconds timeout) const;

  /// Binds `host:port` (port 0 picks a free one) and serves on a background
  /// thread. Returns the bound port. Throws IoError when binding fails.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

  [[nodiscard]] const gan::CwganModel& model() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace topoforge::service
