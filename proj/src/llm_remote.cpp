// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <json.hpp>

#include "mullama/qa_gen.hpp"

namespace mullama {

void RemoteBackendConfig::validate() const {
  if (endpoint.empty()) throw ConfigError("remote backend: endpoint URL is required");
  if (model.empty()) throw ConfigError("remote backend: model name is required");
  if (!(timeout_seconds > 0.0)) throw ConfigError("remote backend: timeout must be positive");
  static const std::regex url(R"(^(https?)://([^/:]+)(:\d+)?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, url)) {
    throw ConfigError("remote backend: malformed endpoint URL '" + endpoint + "'");
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (m[1] == "https") throw ConfigError("remote backend: this build has no TLS support");
#endif
}

namespace {

class RemoteBackend final : public LLMBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig config) : config_(std::move(config)) {
    config_.validate();
    static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    std::regex_match(config_.endpoint, m, url);
    base_ = m[1];
    path_ = m[2].matched ? std::string(m[2]) : "/";
    if (const char* t = std::getenv(config_.token_env.c_str())) token_ = t;
  }

  std::string name() const override { return "remote:" + config_.model; }

  std::string complete(const BackendRequest& request) override {
    httplib::Client cli(base_);
    const auto secs = static_cast<time_t>(config_.timeout_seconds);
    const auto usecs = static_cast<time_t>((config_.timeout_seconds - secs) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    const nlohmann::json body{
        {"model", config_.model},
        {"temperature", 0},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}})}};
    const auto res = cli.Post(path_, headers, body.dump(), "application/json");
    if (!res) {
      throw BackendError("request to " + config_.endpoint + " failed: " +
                         httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw BackendError("backend returned HTTP " + std::to_string(res->status));
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& choice = j.at("choices").at(0);
      if (choice.contains("message")) return choice.at("message").at("content").get<std::string>();
      return choice.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("unexpected backend response: ") + e.what());
    }
  }

 private:
  RemoteBackendConfig config_;
  std::string base_, path_, token_;
};

}  // namespace

std::shared_ptr<LLMBackend> make_remote_backend(const RemoteBackendConfig& config) {
  return std::make_shared<RemoteBackend>(config);
}

}  // namespace mullama
