// SPDX-License-Identifier: Apache-2.0
//
// OpenAI-compatible chat completion over HTTP(S). https:// endpoints need the
// build to define MU2_WITH_OPENSSL and link OpenSSL.

#pragma once

#ifdef MU2_WITH_OPENSSL
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include "mu2/chat.hpp"

#include <cstdlib>

namespace mu2::chat {

struct HttpSettings {
    std::string base_url = "http://localhost:8000";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4o-mini";
    std::string token_env = "MU2_API_TOKEN";
    double temperature = 0.0;
    int timeout_seconds = 60;
};

class HttpChatClient : public ChatClient {
  public:
    explicit HttpChatClient(HttpSettings s) : settings_(std::move(s)) {
        require(!settings_.base_url.empty(), "http client: base_url is empty");
        require(settings_.timeout_seconds > 0, "http client: timeout must be positive");
        if (const char* tok = std::getenv(settings_.token_env.c_str())) token_ = tok;
    }

    std::string complete(const std::string& prompt) override {
        httplib::Client cli(settings_.base_url);
        if (!cli.is_valid()) throw ChatError("http client: unsupported endpoint " + settings_.base_url, false);
        cli.set_connection_timeout(settings_.timeout_seconds, 0);
        cli.set_read_timeout(settings_.timeout_seconds, 0);
        cli.set_write_timeout(settings_.timeout_seconds, 0);
        if (!token_.empty()) cli.set_bearer_token_auth(token_);

        const json body{{"model", settings_.model},
                        {"temperature", settings_.temperature},
                        {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})}};
        auto res = cli.Post(settings_.path, body.dump(), "application/json");
        if (!res) throw ChatError("http client: request failed: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500) {
            throw ChatError("http client: status " + std::to_string(res->status));
        }
        if (res->status != 200) throw ChatError("http client: status " + std::to_string(res->status), false);
        try {
            const json reply = json::parse(res->body);
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw ChatError(std::string("http client: malformed reply: ") + e.what(), false);
        }
    }

  private:
    HttpSettings settings_;
    std::string token_;
};

}  // namespace mu2::chat
