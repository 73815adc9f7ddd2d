#include "compkg/http_backend.hpp"

#include <httplib.h>

#include <json.hpp>

namespace compkg::oracle {

HttpBackend::HttpBackend(std::string endpoint, std::string api_key)
    : api_key_(std::move(api_key)) {
  const std::string scheme = "http://";
  if (endpoint.rfind("https://", 0) == 0)
    throw UsageError("https endpoints need a TLS-enabled build; use an http proxy");
  if (endpoint.rfind(scheme, 0) != 0) throw UsageError("endpoint must start with http://");
  auto rest = endpoint.substr(scheme.size());
  auto slash = rest.find('/');
  auto authority = rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  auto colon = authority.find(':');
  host_ = authority.substr(0, colon);
  if (colon != std::string::npos) port_ = int(parse_int(authority.substr(colon + 1), "port"));
  if (host_.empty()) throw UsageError("endpoint has no host");
}

std::string HttpBackend::complete(const std::string& model_id, const std::string& prompt,
                                  std::chrono::milliseconds timeout) {
  httplib::Client cli(host_, port_);
  const auto secs = timeout.count() / 1000;
  const auto usecs = (timeout.count() % 1000) * 1000;
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);

  nlohmann::json body = {
      {"model", model_id},
      {"temperature", 0},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
  };
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read)
      throw TimeoutError("backend timed out: " + httplib::to_string(err));
    throw TransportError("backend transport failure: " + httplib::to_string(err));
  }
  if (res->status == 429) throw RateLimitError("backend rate limited (429)");
  if (res->status != 200)
    throw TransportError("backend returned HTTP " + std::to_string(res->status));
  try {
    auto j = nlohmann::json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("unexpected backend envelope: ") + e.what());
  }
}

}  // namespace compkg::oracle
