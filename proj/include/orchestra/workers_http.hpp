#pragma once

// HTTP worker backend speaking the OpenAI-compatible chat completion shape,
// plus the factory that assembles a backend map from a registry. Kept out of
// workers.hpp so only translation units that actually talk HTTP pay for the
// httplib include.

#include <chrono>
#include <memory>
#include <semaphore>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "orchestra/pool.hpp"
#include "orchestra/workers.hpp"

namespace orchestra::workers {

class BackendError : public std::runtime_error {
 public:
  explicit BackendError(const std::string& what)
      : std::runtime_error("backend: " + what) {}
};

struct HttpOptions {
  double timeout_s = 60.0;
  int inflight_limit = 8;
};

// POSTs {endpoint}/chat/completions with a bearer token drawn from the
// worker's environment variable. A fresh client per call keeps concurrent
// dispatches safe; the semaphore bounds how many are in flight at once.
class HttpBackend : public WorkerBackend {
 public:
  HttpBackend(std::string worker_id, std::string model, std::string endpoint,
              HttpOptions options = {})
      : worker_id_(std::move(worker_id)),
        model_(std::move(model)),
        endpoint_(std::move(endpoint)),
        options_(options),
        inflight_(options.inflight_limit) {}

  WorkerResponse call(const WorkerRequest& request) noexcept override {
    inflight_.acquire();
    WorkerResponse response;
    try {
      response = call_once(request);
    } catch (...) {
      response.status = CallStatus::transport_error;
      response.usage = {0, 0};
    }
    inflight_.release();
    return response;
  }

 private:
  WorkerResponse call_once(const WorkerRequest& request) {
    const double timeout_s =
        request.timeout_s > 0 ? request.timeout_s : options_.timeout_s;

    httplib::Client client(endpoint_);
    const auto timeout =
        std::chrono::milliseconds(static_cast<long>(timeout_s * 1e3));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    httplib::Headers headers;
    if (const char* key = std::getenv(api_key_env_name(worker_id_).c_str())) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    nlohmann::json body;
    body["model"] = model_;
    body["messages"] = nlohmann::json::array();
    body["messages"].push_back(
        {{"role", "system"}, {"content", "primitive: " + request.primitive_id}});
    std::string user = request.instruction;
    if (!request.context.empty()) {
      user = request.context + "\n\n" + request.instruction;
    }
    body["messages"].push_back({{"role", "user"}, {"content", user}});
    const std::string payload = body.dump();

    const auto start = std::chrono::steady_clock::now();
    httplib::Result result = client.Post("/chat/completions", headers,
                                         payload, "application/json");
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();

    WorkerResponse response;
    response.latency_s = elapsed;
    if (!result) {
      response.status = elapsed >= 0.9 * timeout_s
                            ? CallStatus::timeout
                            : CallStatus::transport_error;
      response.usage = {0, 0};
      return response;
    }
    if (result->status != 200) {
      response.status = CallStatus::transport_error;
      response.usage = {0, 0};
      return response;
    }

    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::exception&) {
      response.status = CallStatus::transport_error;
      response.usage = {0, 0};
      return response;
    }

    std::string content;
    if (doc.contains("choices") && doc.at("choices").is_array() &&
        !doc.at("choices").empty()) {
      const auto& choice = doc.at("choices").at(0);
      if (choice.contains("message")) {
        content = choice.at("message").value("content", std::string{});
      }
    }
    if (doc.contains("usage")) {
      response.usage.prompt_tokens =
          doc.at("usage").value("prompt_tokens", std::int64_t{0});
      response.usage.completion_tokens =
          doc.at("usage").value("completion_tokens", std::int64_t{0});
    } else {
      // Endpoint reported no usage; bill whitespace-token estimates.
      response.usage.prompt_tokens = whitespace_tokens(user);
      response.usage.completion_tokens = whitespace_tokens(content);
    }

    if (content.empty()) {
      response.status = CallStatus::refusal;
      return response;
    }
    response.status = CallStatus::ok;
    response.observation = std::move(content);
    return response;
  }

  std::string worker_id_;
  std::string model_;
  std::string endpoint_;
  HttpOptions options_;
  std::counting_semaphore<4096> inflight_;
};

// One backend per registry worker: HTTP when an endpoint is configured,
// scripted when a scripted block is present, error otherwise.
inline BackendMap make_backends(const pool::Registry& registry,
                                HttpOptions options = {}) {
  BackendMap backends;
  for (const pool::WorkerSpec& w : registry.workers()) {
    if (!w.endpoint.empty()) {
      backends[w.id] =
          std::make_shared<HttpBackend>(w.id, w.model, w.endpoint, options);
    } else if (!w.scripted.is_null()) {
      backends[w.id] =
          std::make_shared<ScriptedBackend>(behaviour_from_json(w.scripted));
    } else {
      throw BackendError("worker " + w.id +
                         " has neither an endpoint nor a scripted block");
    }
  }
  return backends;
}

}  // namespace orchestra::workers
