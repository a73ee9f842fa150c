#include "omgseg/service.hpp"

#include <sodium.h>

#include <algorithm>

#include "omgseg/io.hpp"

namespace omgseg {

using nlohmann::json;

void validate(const ServiceConfig& c) {
  if (c.port < 0 || c.port > 65535) throw ConfigError("service.port must be in [0, 65535]");
  if (c.session_ttl_s < 1) throw ConfigError("service.session_ttl_s must be >= 1");
  if (c.max_image_side < 32) throw ConfigError("service.max_image_side must be >= 32");
  if (c.max_body_bytes < 1024) throw ConfigError("service.max_body_bytes must be >= 1024");
  if (c.max_sessions < 1) throw ConfigError("service.max_sessions must be >= 1");
}

void to_json(json& j, const ServiceConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"session_ttl_s", c.session_ttl_s},
       {"max_image_side", c.max_image_side},
       {"max_body_bytes", c.max_body_bytes},
       {"max_sessions", c.max_sessions},
       {"cors_origin", c.cors_origin}};
}

void from_json(const json& j, ServiceConfig& c) {
  io::reject_unknown_keys(
      j, {"host", "port", "session_ttl_s", "max_image_side", "max_body_bytes", "max_sessions", "cors_origin"},
      "service");
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  c.session_ttl_s = j.value("session_ttl_s", c.session_ttl_s);
  c.max_image_side = j.value("max_image_side", c.max_image_side);
  c.max_body_bytes = j.value("max_body_bytes", c.max_body_bytes);
  c.max_sessions = j.value("max_sessions", c.max_sessions);
  c.cors_origin = j.value("cors_origin", c.cors_origin);
  validate(c);
}

struct PromptService::Session {
  std::mutex mu;
  std::shared_ptr<const OmgSegModel> model;
  Image image;
  MultiScaleFeatures frozen;
  FusedFeatures fused;
  ClassVocabulary vocab;
  ClassEmbeddingMatrix embeds;
  Clock::time_point created;
  Clock::time_point last_used;
};

namespace {

ServiceResponse error(int status, const std::string& message) { return {status, json{{"error", message}}, {}}; }

std::optional<json> parse_object(const std::string& body) {
  auto j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

std::string new_token() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (sodium_init() < 0) throw Error("libsodium failed to initialize");
  });
  unsigned char raw[16];
  randombytes_buf(raw, sizeof raw);
  char hex[2 * sizeof raw + 1];
  sodium_bin2hex(hex, sizeof hex, raw, sizeof raw);
  return hex;
}

constexpr std::size_t kMaxPrompts = 64;

}  // namespace

PromptService::PromptService(ServiceConfig cfg, std::function<Clock::time_point()> now)
    : cfg_(std::move(cfg)), now_(std::move(now)) {
  validate(cfg_);
}

void PromptService::load(std::shared_ptr<const OmgSegModel> model, ClassVocabulary vocab, InferenceConfig infer,
                         std::string model_hash) {
  if (!model) throw ConfigError("service needs a model");
  validate(infer);
  std::unique_lock lock(model_mu_);
  model_ = std::move(model);
  vocab_ = std::move(vocab);
  infer_ = infer;
  model_hash_ = std::move(model_hash);
}

bool PromptService::loaded() const {
  std::shared_lock lock(model_mu_);
  return model_ != nullptr;
}

ServiceResponse PromptService::health() const {
  std::shared_lock lock(model_mu_);
  if (!model_) return {503, json{{"status", "loading"}}, {}};
  return {200, json{{"status", "ok"}, {"model_hash", model_hash_}}, {}};
}

std::size_t PromptService::sweep() {
  const auto now = now_();
  const auto ttl = std::chrono::seconds(cfg_.session_ttl_s);
  std::lock_guard lock(sessions_mu_);
  return std::erase_if(sessions_, [&](const auto& kv) { return now - kv.second->last_used > ttl; });
}

std::size_t PromptService::session_count() const {
  std::lock_guard lock(sessions_mu_);
  return sessions_.size();
}

std::shared_ptr<PromptService::Session> PromptService::find(const std::string& id) {
  const auto now = now_();
  std::lock_guard lock(sessions_mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  if (now - it->second->last_used > std::chrono::seconds(cfg_.session_ttl_s)) {
    sessions_.erase(it);
    return nullptr;
  }
  return it->second;
}

ServiceResponse PromptService::with_session(const std::string& id,
                                            const std::function<ServiceResponse(Session&)>& fn) {
  if (!loaded()) return error(503, "model not loaded");
  auto s = find(id);
  if (!s) return error(404, "unknown session");
  std::unique_lock lock(s->mu, std::try_to_lock);
  if (!lock.owns_lock()) return error(409, "session busy");
  s->last_used = now_();
  return fn(*s);
}

ServiceResponse PromptService::create_session(const std::string& body) {
  std::shared_ptr<const OmgSegModel> model;
  ClassVocabulary vocab;
  {
    std::shared_lock lock(model_mu_);
    model = model_;
    vocab = vocab_;
  }
  if (!model) return error(503, "model not loaded");
  const auto j = parse_object(body);
  if (!j || !j->contains("image") || !(*j)["image"].is_string()) return error(400, "expected {\"image\": base64 PNG}");

  auto s = std::make_shared<Session>();
  try {
    const auto bytes = io::base64_decode((*j)["image"].get<std::string>());
    s->image = io::decode_png(bytes);
  } catch (const Error& e) {
    return error(400, std::string("bad image: ") + e.what());
  }
  if (s->image.height > cfg_.max_image_side || s->image.width > cfg_.max_image_side)
    return error(413, "image side exceeds " + std::to_string(cfg_.max_image_side));

  s->model = model;
  s->frozen = model->extract({s->image});
  s->fused = model->fuse(s->frozen);
  s->vocab = vocab;
  s->embeds = model->embeddings(vocab);
  s->created = s->last_used = now_();

  sweep();
  std::string id;
  {
    std::lock_guard lock(sessions_mu_);
    if (static_cast<int>(sessions_.size()) >= cfg_.max_sessions) return error(503, "session limit reached");
    do id = new_token();
    while (sessions_.contains(id));
    sessions_.emplace(id, s);
  }
  return {200, json{{"session_id", id}, {"image_size", {{"height", s->image.height}, {"width", s->image.width}}}}, {}};
}

ServiceResponse PromptService::segment(const std::string& id, const std::string& body) {
  const auto j = parse_object(body);
  if (!j) return error(400, "expected a JSON object");
  return with_session(id, [&](Session& s) -> ServiceResponse {
    const auto start = Clock::now();
    if (!j->contains("prompts") || !(*j)["prompts"].is_array()) return error(400, "expected {\"prompts\": [...]}");
    std::vector<VisualPrompt> prompts;
    try {
      for (const auto& p : (*j)["prompts"]) prompts.push_back(p.get<VisualPrompt>());
    } catch (const Error& e) {
      return error(422, std::string("invalid prompt: ") + e.what());
    } catch (const json::exception& e) {
      return error(422, std::string("invalid prompt: ") + e.what());
    }
    if (prompts.empty()) return error(422, "at least one prompt is required");
    if (prompts.size() > kMaxPrompts) return error(422, "too many prompts");

    const auto results = interactive_segment(*s.model, s.frozen, s.fused, prompts, s.embeds, infer_);
    json masks = json::array(), scores = json::array(), labels = json::array();
    for (const auto& r : results) {
      const int k = r.scores.argmax();
      const double score = r.scores.fused(k);
      const bool known = r.mask.any() && score >= infer_.score_threshold;
      masks.push_back(encode_rle(r.mask));
      scores.push_back(score);
      labels.push_back(known ? s.vocab.name(k) : "unknown");
    }
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", ms);
    return {200, json{{"masks", masks}, {"scores", scores}, {"labels", labels}}, {{"X-Latency-Ms", buf}}};
  });
}

ServiceResponse PromptService::set_vocabulary(const std::string& id, const std::string& body) {
  const auto j = parse_object(body);
  if (!j || !j->contains("names") || !(*j)["names"].is_array()) return error(400, "expected {\"names\": [...]}");
  std::vector<std::string> names;
  for (const auto& n : (*j)["names"]) {
    if (!n.is_string()) return error(400, "names must be strings");
    names.push_back(n.get<std::string>());
  }
  if (names.empty()) return error(422, "vocabulary must not be empty");
  std::vector<bool> things;
  if (j->contains("thing_flags")) {
    const auto& f = (*j)["thing_flags"];
    if (!f.is_array() || f.size() != names.size()) return error(422, "thing_flags must match names");
    for (const auto& b : f) {
      if (!b.is_boolean()) return error(400, "thing_flags must be booleans");
      things.push_back(b.get<bool>());
    }
  }
  return with_session(id, [&](Session& s) -> ServiceResponse {
    std::vector<bool> flags = things;
    if (flags.empty()) {
      std::shared_lock lock(model_mu_);
      // unknown names default to things
      for (const auto& n : names) {
        const auto k = vocab_.index_of(n);
        flags.push_back(k ? vocab_.is_thing(*k) : true);
      }
    }
    try {
      ClassVocabulary v(names, flags);
      auto embeds = s.model->embeddings(v);
      s.vocab = std::move(v);
      s.embeds = std::move(embeds);
    } catch (const Error& e) {
      return error(422, e.what());
    }
    return {200, json{{"ok", true}, {"names", s.vocab.names()}}, {}};
  });
}

ServiceResponse PromptService::panoptic(const std::string& id, const std::string& body) {
  if (!body.empty() && !parse_object(body)) return error(400, "expected a JSON object");
  return with_session(id, [&](Session& s) -> ServiceResponse {
    const auto pred = s.model->forward_fused(s.fused, {}, s.embeds.class_rows, DecodeMode::image);
    const auto merged = panoptic_merge(pred, s.vocab, infer_);
    return {200, json{{"panoptic", merged.frames.front()}, {"classes", s.vocab.names()}}, {}};
  });
}

}  // namespace omgseg
