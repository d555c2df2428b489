#include "tbd/llm.hpp"

#include <cstdlib>
#include <regex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace tbd::llm {

using nlohmann::json;

ClientConfig ClientConfig::from_env() {
  ClientConfig c;
  const char* endpoint = std::getenv("TBD_LLM_ENDPOINT");
  if (!endpoint || !*endpoint) {
    throw LlmError(LlmError::Kind::kUnreachable, "TBD_LLM_ENDPOINT is not set");
  }
  c.endpoint = endpoint;
  if (const char* m = std::getenv("TBD_LLM_MODEL")) c.model = m;
  if (const char* t = std::getenv("TBD_LLM_TOKEN")) c.token = t;
  if (const char* s = std::getenv("TBD_LLM_TIMEOUT")) {
    c.timeout = std::chrono::milliseconds(static_cast<long long>(std::atof(s) * 1000.0));
  }
  return c;
}

std::string build_request_body(const std::vector<ChatMessage>& messages, const std::string& model) {
  json msgs = json::array();
  for (const auto& m : messages) {
    if (m.image_png.empty()) {
      msgs.push_back({{"role", m.role}, {"content", m.content}});
      continue;
    }
    json parts = json::array();
    parts.push_back({{"type", "text"}, {"text", m.content}});
    parts.push_back({{"type", "image_url"},
                     {"image_url",
                      {{"url", "data:image/png;base64," + httplib::detail::base64_encode(m.image_png)}}}});
    msgs.push_back({{"role", m.role}, {"content", parts}});
  }
  json body{{"messages", msgs}, {"temperature", 0}};
  if (!model.empty()) body["model"] = model;
  return body.dump();
}

std::string parse_reply(const std::string& body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error&) {
    throw LlmError(LlmError::Kind::kMalformedResponse, "response is not JSON");
  }
  try {
    const auto& content = doc.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) {
      throw LlmError(LlmError::Kind::kMalformedResponse, "reply content is not text");
    }
    return content.get<std::string>();
  } catch (const json::exception&) {
    throw LlmError(LlmError::Kind::kMalformedResponse, "response lacks choices[0].message.content");
  }
}

HttpChatClient::HttpChatClient(ClientConfig cfg) : cfg_(std::move(cfg)) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(cfg_.endpoint, m, url)) {
    throw LlmError(LlmError::Kind::kInvalidRequest, "malformed LLM endpoint '" + cfg_.endpoint + "'");
  }
  scheme_host_ = m[1];
  path_ = m[2].matched ? std::string(m[2]) : "/v1/chat/completions";
  if (cfg_.max_in_flight < 1) throw LlmError(LlmError::Kind::kInvalidRequest, "max_in_flight < 1");
  in_flight_ = std::make_unique<std::counting_semaphore<>>(cfg_.max_in_flight);
}

std::string HttpChatClient::complete(const std::vector<ChatMessage>& messages) {
  const std::string body = build_request_body(messages, cfg_.model);
  httplib::Headers headers;
  if (!cfg_.token.empty()) headers.emplace("Authorization", "Bearer " + cfg_.token);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - seconds);

  LlmError::Kind last_kind = LlmError::Kind::kUnreachable;
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff * (1 << (attempt - 1)));
    httplib::Client cli(scheme_host_);
    cli.set_connection_timeout(seconds.count(), micros.count());
    cli.set_read_timeout(seconds.count(), micros.count());
    cli.set_write_timeout(seconds.count(), micros.count());
    ++attempts_;
    in_flight_->acquire();
    auto res = cli.Post(path_, headers, body, "application/json");
    in_flight_->release();

    if (!res) {
      const auto err = res.error();
      last_kind = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read
                      ? LlmError::Kind::kTimeout
                      : LlmError::Kind::kUnreachable;
      last_error = httplib::to_string(err);
      continue;
    }
    if (res->status == 200) return parse_reply(res->body);
    if (res->status == 401 || res->status == 403) {
      throw LlmError(LlmError::Kind::kAuthentication,
                     "LLM endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status == 429 || res->status >= 500) {
      last_kind = LlmError::Kind::kUnreachable;
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    throw LlmError(LlmError::Kind::kInvalidRequest,
                   "LLM endpoint returned HTTP " + std::to_string(res->status));
  }
  throw LlmError(last_kind, "LLM backend unreachable after " + std::to_string(cfg_.max_retries) +
                                " retries: " + last_error);
}

std::string llm_step(Conversation& conversation, const std::string& instruction,
                     ChatBackend& backend, const std::string& image_png) {
  if (instruction.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw LlmError(LlmError::Kind::kInvalidRequest, "empty instruction");
  }
  conversation.messages.push_back({"user", instruction, image_png});
  std::string reply = backend.complete(conversation.messages);
  conversation.messages.push_back({"assistant", reply, {}});
  const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::system_clock::now().time_since_epoch());
  conversation.log.push_back({instruction, reply, now.count()});
  return reply;
}

}  // namespace tbd::llm
