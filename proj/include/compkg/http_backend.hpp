#pragma once

#include <string>

#include "compkg/oracle.hpp"

namespace compkg::oracle {

/// Chat-completions style backend over plain HTTP. The endpoint is a full
/// URL such as "http://127.0.0.1:8080/v1/chat/completions". Status 429 maps
/// to RateLimitError, timeouts to TimeoutError, everything else that fails
/// to TransportError. The message content is returned untouched.
class HttpBackend : public Backend {
 public:
  HttpBackend(std::string endpoint, std::string api_key);

  std::string complete(const std::string& model_id, const std::string& prompt,
                       std::chrono::milliseconds timeout) override;

 private:
  std::string host_;
  int port_ = 80;
  std::string path_;
  std::string api_key_;
};

}  // namespace compkg::oracle
