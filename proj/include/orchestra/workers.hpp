#pragma once

// Worker invocation: request/response value types, the scripted deterministic
// backend used for tests and desk runs, and the retrying dispatch wrapper.
//
// Backends never throw into the scheduler. Every outcome, including crashes
// of the transport, is a WorkerResponse with a status; an observation is
// non-empty exactly when the status is ok.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"
#include "orchestra/pool.hpp"

namespace orchestra::workers {

struct WorkerRequest {
  std::string worker_id;
  std::string primitive_id;
  std::string instruction;  // route payload
  std::string context;      // upstream observations spliced by the scheduler
  int subtask_id = 0;
  std::uint64_t attempt_seed = 0;
  double timeout_s = 60.0;
};

enum class CallStatus { ok, timeout, refusal, transport_error };

inline const char* to_string(CallStatus status) {
  switch (status) {
    case CallStatus::ok:
      return "ok";
    case CallStatus::timeout:
      return "timeout";
    case CallStatus::refusal:
      return "refusal";
    case CallStatus::transport_error:
      return "transport_error";
  }
  return "unknown";
}

struct WorkerResponse {
  CallStatus status = CallStatus::transport_error;
  std::string observation;  // non-empty iff status == ok
  UsageRecord usage;
  double latency_s = 0.0;
  int attempts = 1;
};

class WorkerBackend {
 public:
  virtual ~WorkerBackend() = default;
  // Must not throw; transport faults become statuses.
  virtual WorkerResponse call(const WorkerRequest& request) noexcept = 0;
};

using BackendMap = std::map<std::string, std::shared_ptr<WorkerBackend>>;

// Environment variable holding the bearer token for a worker:
// ORCHESTRA_API_KEY_ plus the worker id uppercased with every non-alphanumeric
// character mapped to '_'.
inline std::string api_key_env_name(std::string_view worker_id) {
  std::string name = "ORCHESTRA_API_KEY_";
  for (char c : worker_id) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      name += static_cast<char>(
          std::toupper(static_cast<unsigned char>(c)));
    } else {
      name += '_';
    }
  }
  return name;
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

// A canned response for one (fingerprint, primitive) request shape. The
// fingerprint is the instruction text verbatim; an empty primitive matches
// any. Rows with a non-ok status inject transport faults.
struct ScriptedResponseRow {
  std::string fingerprint;
  std::string primitive;
  CallStatus status = CallStatus::ok;
  std::string ok_text;
  std::string fail_text;
};

struct ScriptedBehaviour {
  // Probability the worker gets a request right, keyed by primitive with an
  // optional "*" fallback; unlisted primitives always succeed.
  std::map<std::string, double> competence;
  std::int64_t prompt_tokens = 200;   // fixed per-call token profile
  std::int64_t completion_tokens = 60;
  double latency_s = 0.05;
  std::vector<ScriptedResponseRow> rows;
  std::string default_ok = "resolved: {instruction}";
  std::string default_fail = "unable to resolve: {instruction}";

  [[nodiscard]] double competence_for(const std::string& primitive) const {
    if (const auto it = competence.find(primitive); it != competence.end()) {
      return it->second;
    }
    if (const auto it = competence.find("*"); it != competence.end()) {
      return it->second;
    }
    return 1.0;
  }
};

inline CallStatus status_from_string(const std::string& name) {
  if (name == "ok") return CallStatus::ok;
  if (name == "timeout") return CallStatus::timeout;
  if (name == "refusal") return CallStatus::refusal;
  if (name == "transport_error") return CallStatus::transport_error;
  throw std::invalid_argument("unknown call status: " + name);
}

inline ScriptedBehaviour behaviour_from_json(const nlohmann::json& doc) {
  ScriptedBehaviour b;
  if (doc.contains("competence")) {
    for (const auto& [key, value] : doc.at("competence").items()) {
      b.competence[key] = value.get<double>();
    }
  }
  if (doc.contains("tokens")) {
    b.prompt_tokens = doc.at("tokens").value("prompt", b.prompt_tokens);
    b.completion_tokens =
        doc.at("tokens").value("completion", b.completion_tokens);
  }
  if (doc.contains("latency_ms")) {
    b.latency_s = doc.at("latency_ms").get<double>() / 1e3;
  }
  if (doc.contains("responses")) {
    for (const auto& item : doc.at("responses")) {
      ScriptedResponseRow row;
      row.fingerprint = item.at("fingerprint").get<std::string>();
      row.primitive = item.value("skill", std::string{});
      row.status = status_from_string(item.value("status", std::string{"ok"}));
      row.ok_text = item.value("ok", std::string{});
      row.fail_text = item.value("fail", std::string{});
      b.rows.push_back(std::move(row));
    }
  }
  b.default_ok = doc.value("default_ok", b.default_ok);
  b.default_fail = doc.value("default_fail", b.default_fail);
  return b;
}

namespace detail {

inline std::string fill_template(std::string text,
                                 const std::string& instruction) {
  const std::string needle = "{instruction}";
  const std::size_t at = text.find(needle);
  if (at != std::string::npos) text.replace(at, needle.size(), instruction);
  return text;
}

}  // namespace detail

// Pure function of (behaviour, request): the success draw is keyed on the
// attempt seed, the instruction, the primitive, and the worker id, so reruns
// reproduce byte-identical observations.
inline WorkerResponse scripted_worker_eval(const ScriptedBehaviour& behaviour,
                                           const WorkerRequest& request) {
  const ScriptedResponseRow* row = nullptr;
  for (const ScriptedResponseRow& r : behaviour.rows) {
    if (r.fingerprint == request.instruction &&
        (r.primitive.empty() || r.primitive == request.primitive_id)) {
      row = &r;
      break;
    }
  }

  WorkerResponse response;
  response.attempts = 1;
  response.latency_s = behaviour.latency_s;

  if (row != nullptr && row->status != CallStatus::ok) {
    response.status = row->status;
    switch (row->status) {
      case CallStatus::transport_error:
        response.usage = {0, 0};
        break;
      case CallStatus::timeout:
        response.usage = {behaviour.prompt_tokens, 0};
        response.latency_s = request.timeout_s;
        break;
      default:  // refusal
        response.usage = {behaviour.prompt_tokens, 0};
        break;
    }
    return response;
  }

  std::uint64_t draw = request.attempt_seed;
  draw = mix_seed(draw, request.instruction);
  draw = mix_seed(draw, request.primitive_id);
  draw = mix_seed(draw, request.worker_id);
  const bool success =
      unit_double(splitmix64(draw)) <
      behaviour.competence_for(request.primitive_id);

  std::string text;
  if (row != nullptr) {
    text = success ? row->ok_text : row->fail_text;
  } else {
    text = detail::fill_template(
        success ? behaviour.default_ok : behaviour.default_fail,
        request.instruction);
  }
  if (text.empty()) text = success ? "done" : "no result";

  response.status = CallStatus::ok;
  response.observation = std::move(text);
  response.usage = {behaviour.prompt_tokens, behaviour.completion_tokens};
  return response;
}

class ScriptedBackend : public WorkerBackend {
 public:
  explicit ScriptedBackend(ScriptedBehaviour behaviour)
      : behaviour_(std::move(behaviour)) {}

  WorkerResponse call(const WorkerRequest& request) noexcept override {
    return scripted_worker_eval(behaviour_, request);
  }

  [[nodiscard]] const ScriptedBehaviour& behaviour() const {
    return behaviour_;
  }

 private:
  ScriptedBehaviour behaviour_;
};

// Builds scripted backends for every worker in the registry that carries a
// "scripted" block. Workers with only an endpoint need the HTTP factory in
// workers_http.hpp; a worker with neither is a configuration error there.
inline BackendMap make_scripted_backends(const pool::Registry& registry) {
  BackendMap backends;
  for (const pool::WorkerSpec& w : registry.workers()) {
    if (!w.scripted.is_null()) {
      backends[w.id] =
          std::make_shared<ScriptedBackend>(behaviour_from_json(w.scripted));
    }
  }
  return backends;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

struct DispatchOptions {
  int retries = 2;  // additional attempts after the first
};

// Invokes the backend with bounded retries on transport faults. Refusals are
// terminal (the worker answered; it said no). Usage and latency accumulate
// across attempts so every token sent is billed.
inline WorkerResponse dispatch_call(WorkerBackend& backend,
                                    const WorkerRequest& request,
                                    const DispatchOptions& options = {}) {
  const std::uint64_t base_seed = request.attempt_seed;
  UsageRecord total_usage;
  double total_latency = 0.0;
  int attempts = 0;
  WorkerResponse response;

  for (int attempt = 0; attempt <= options.retries; ++attempt) {
    WorkerRequest this_attempt = request;
    if (attempt > 0) {
      this_attempt.attempt_seed =
          mix_seed(base_seed, static_cast<std::uint64_t>(attempt));
    }
    response = backend.call(this_attempt);
    ++attempts;
    total_usage.prompt_tokens += response.usage.prompt_tokens;
    total_usage.completion_tokens += response.usage.completion_tokens;
    total_latency += response.latency_s;
    if (response.status == CallStatus::ok ||
        response.status == CallStatus::refusal) {
      break;
    }
  }

  response.usage = total_usage;
  response.latency_s = total_latency;
  response.attempts = attempts;
  return response;
}

}  // namespace orchestra::workers
