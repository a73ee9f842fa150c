#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>

#include <json.hpp>

#include "omgseg/decoder.hpp"
#include "omgseg/inference.hpp"

namespace httplib {
class Server;
}

namespace omgseg {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int session_ttl_s = 900;
  int max_image_side = 1024;
  std::size_t max_body_bytes = 16u << 20;
  int max_sessions = 256;
  std::string cors_origin = "*";
};

void validate(const ServiceConfig& c);
void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
  std::map<std::string, std::string> headers;
};

/// Session store and request handlers, independent of the HTTP transport.
/// Model parameters are read-only; each session serializes its own requests
/// and answers 409 to an overlapping one.
class PromptService {
 public:
  using Clock = std::chrono::steady_clock;

  explicit PromptService(ServiceConfig cfg, std::function<Clock::time_point()> now = Clock::now);

  void load(std::shared_ptr<const OmgSegModel> model, ClassVocabulary vocab, InferenceConfig infer = {},
            std::string model_hash = {});
  bool loaded() const;

  ServiceResponse health() const;
  ServiceResponse create_session(const std::string& body);
  ServiceResponse segment(const std::string& id, const std::string& body);
  ServiceResponse set_vocabulary(const std::string& id, const std::string& body);
  ServiceResponse panoptic(const std::string& id, const std::string& body);

  /// Drops expired sessions; returns how many were removed.
  std::size_t sweep();
  std::size_t session_count() const;
  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Session;
  std::shared_ptr<Session> find(const std::string& id);
  ServiceResponse with_session(const std::string& id,
                               const std::function<ServiceResponse(Session&)>& fn);

  ServiceConfig cfg_;
  std::function<Clock::time_point()> now_;
  mutable std::shared_mutex model_mu_;
  std::shared_ptr<const OmgSegModel> model_;
  ClassVocabulary vocab_;
  InferenceConfig infer_;
  std::string model_hash_;
  mutable std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// Registers the JSON API and CORS handling on `server`.
void mount(httplib::Server& server, PromptService& service);

}  // namespace omgseg
