// Copyright 2025 The podpilot Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Socket-backed HttpTransport for talking to a real cluster API endpoint.

#pragma once

#include <mutex>
#include <string>

#include <httplib.h>

#include "podpilot/error.hpp"
#include "podpilot/kube_client.hpp"

namespace podpilot {

class HttplibTransport : public HttpTransport {
 public:
  explicit HttplibTransport(const std::string& base_url) : client_(base_url) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(60, 0);
  }

  HttpResponse get(const std::string& path, const HttpHeaders& headers) override {
    std::lock_guard<std::mutex> lock(mutex_);
    auto res = client_.Get(path, to_httplib(headers));
    return convert(res, path);
  }

  HttpResponse patch(const std::string& path, const std::string& content_type,
                     const std::string& body, const HttpHeaders& headers) override {
    std::lock_guard<std::mutex> lock(mutex_);
    httplib::Request req;
    req.method = "PATCH";
    req.path = path;
    req.body = body;
    req.headers = to_httplib(headers);
    req.set_header("Content-Type", content_type);
    auto result = client_.send(req);
    return convert(result, path);
  }

 private:
  static httplib::Headers to_httplib(const HttpHeaders& headers) {
    httplib::Headers out;
    for (const auto& [name, value] : headers) out.emplace(name, value);
    return out;
  }

  static HttpResponse convert(const httplib::Result& result, const std::string& path) {
    if (!result) {
      throw TransportError("cluster api unreachable for '" + path +
                           "': " + httplib::to_string(result.error()));
    }
    return HttpResponse{result->status, result->body};
  }

  std::mutex mutex_;
  httplib::Client client_;
};

}  // namespace podpilot
