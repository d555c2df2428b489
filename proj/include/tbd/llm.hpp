#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <semaphore>
#include <string>
#include <vector>

#include "tbd/tensor.hpp"

// Chat-completion client used by the LLM backend of the prompt pipeline.
namespace tbd::llm {

struct LlmError : Error {
  enum class Kind { kUnreachable, kTimeout, kAuthentication, kMalformedResponse, kInvalidRequest };
  LlmError(Kind k, const std::string& what) : Error(what), kind(k) {}
  Kind kind;
};

struct ChatMessage {
  std::string role;     // "system", "user" or "assistant"
  std::string content;
  std::string image_png;  // optional raw PNG bytes attached to a user turn
};

/// One request/response pair, as recorded in a trace.
struct Exchange {
  std::string request;
  std::string response;
  long long timestamp_ms = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Reply text for the full conversation so far.
  virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

struct ClientConfig {
  std::string endpoint;  // http(s)://host[:port]/path
  std::string model;
  std::string token;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds backoff{250};
  int max_in_flight = 4;

  /// Reads TBD_LLM_ENDPOINT, TBD_LLM_MODEL, TBD_LLM_TOKEN and TBD_LLM_TIMEOUT
  /// (seconds). Throws LlmError when no endpoint is set.
  static ClientConfig from_env();
};

/// HTTP client speaking the chat-completion JSON protocol.
class HttpChatClient : public ChatBackend {
 public:
  explicit HttpChatClient(ClientConfig cfg);
  std::string complete(const std::vector<ChatMessage>& messages) override;

  int attempts() const { return attempts_.load(); }

 private:
  ClientConfig cfg_;
  std::string scheme_host_;
  std::string path_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
  std::atomic<int> attempts_{0};
};

/// Request body for a conversation.
std::string build_request_body(const std::vector<ChatMessage>& messages, const std::string& model);
/// Assistant text from a response body; throws kMalformedResponse.
std::string parse_reply(const std::string& body);

/// Multi-turn conversation with its request/response log.
struct Conversation {
  std::vector<ChatMessage> messages;
  std::vector<Exchange> log;
};

/// Appends `instruction` as a user turn, sends the conversation and appends
/// the reply. Empty instructions are rejected before dispatch.
std::string llm_step(Conversation& conversation, const std::string& instruction,
                     ChatBackend& backend, const std::string& image_png = {});

}  // namespace tbd::llm
