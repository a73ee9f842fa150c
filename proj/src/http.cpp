// keep before httplib.h
#include "omgseg/service.hpp"

#include <httplib.h>

namespace omgseg {

namespace {

void reply(httplib::Response& res, const ServiceResponse& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

void mount(httplib::Server& server, PromptService& service) {
  const auto& cfg = service.config();
  server.set_payload_max_length(cfg.max_body_bytes);
  server.set_default_headers({{"Access-Control-Allow-Origin", cfg.cors_origin},
                              {"Access-Control-Expose-Headers", "X-Latency-Ms"}});

  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server.Get("/v1/health", [&](const httplib::Request&, httplib::Response& res) { reply(res, service.health()); });
  server.Post("/v1/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.create_session(req.body));
  });
  server.Post(R"(/v1/sessions/([^/]+)/segment)", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.segment(req.matches[1], req.body));
  });
  server.Put(R"(/v1/sessions/([^/]+)/vocabulary)", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.set_vocabulary(req.matches[1], req.body));
  });
  server.Post(R"(/v1/sessions/([^/]+)/panoptic)", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.panoptic(req.matches[1], req.body));
  });

  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply(res, {500, nlohmann::json{{"error", what}}, {}});
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const char* msg = res.status == 413 ? "payload too large" : res.status == 404 ? "not found" : "request failed";
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  });
}

}  // namespace omgseg
