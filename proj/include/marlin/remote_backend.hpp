#pragma once

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "marlin/negotiation.hpp"

namespace marlin {

/// Chat-completions endpoint settings. from_env reads MARLIN_CHAT_URL,
/// MARLIN_API_KEY and MARLIN_CHAT_MODEL so credentials stay out of argv.
struct RemoteBackendConfig {
  std::string url;      // full endpoint, e.g. http://host:8000/v1/chat/completions
  std::string api_key;  // sent as a bearer token when non-empty
  std::string model = "default";
  double temperature = 0.0;
  int max_retries = 3;          // transport errors and 5xx responses
  int connect_timeout_sec = 10;
  int read_timeout_sec = 120;

  static RemoteBackendConfig from_env() {
    RemoteBackendConfig cfg;
    if (const char* url = std::getenv("MARLIN_CHAT_URL")) cfg.url = url;
    if (const char* key = std::getenv("MARLIN_API_KEY")) cfg.api_key = key;
    if (const char* model = std::getenv("MARLIN_CHAT_MODEL")) cfg.model = model;
    return cfg;
  }
};

/// Blocking chat-completions client. Each reply() posts the agent's full
/// conversation view and returns the assistant text verbatim; the caller's
/// grammar layer deals with whatever comes back.
class RemoteBackend : public ChatBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.url.empty()) {
      throw BackendError("remote backend: no endpoint url (set MARLIN_CHAT_URL)");
    }
    const std::size_t scheme = cfg_.url.find("://");
    if (scheme == std::string::npos) {
      throw BackendError("remote backend: url has no scheme: " + cfg_.url);
    }
    const std::size_t slash = cfg_.url.find('/', scheme + 3);
    base_ = slash == std::string::npos ? cfg_.url : cfg_.url.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : cfg_.url.substr(slash);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (base_.rfind("https://", 0) == 0) {
      throw BackendError("remote backend: built without TLS support, use http");
    }
#endif
  }

  std::string reply(const std::vector<ChatMessage>& conversation) override {
    nlohmann::json messages = nlohmann::json::array();
    for (const ChatMessage& m : conversation) {
      const char* role = m.role == ChatRole::System ? "system"
                         : m.role == ChatRole::Self ? "assistant"
                                                    : "user";
      messages.push_back({{"role", role}, {"content", m.content}});
    }
    const std::string body = nlohmann::json{{"model", cfg_.model},
                                            {"messages", std::move(messages)},
                                            {"temperature", cfg_.temperature}}
                                 .dump();

    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200 * attempt));
      }
      httplib::Client client(base_);
      client.set_connection_timeout(cfg_.connect_timeout_sec, 0);
      client.set_read_timeout(cfg_.read_timeout_sec, 0);
      httplib::Headers headers;
      if (!cfg_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + cfg_.api_key);
      }
      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "server error: status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw BackendError("remote backend: status " + std::to_string(res->status) +
                           ": " + res->body);
      }
      try {
        const auto json = nlohmann::json::parse(res->body);
        return json.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("remote backend: bad response: ") + e.what());
      }
    }
    throw BackendError("remote backend: " + last_error);
  }

 private:
  RemoteBackendConfig cfg_;
  std::string base_;
  std::string path_;
};

}  // namespace marlin
