#pragma once
// Model generation through an external HTTP service, with an optional local
// fallback.  Wire protocol: POST {path} with a JSON body
//   {"spec": <prosumer roster entry>, "horizon": H, "dt_hours": dt}
// and a dispatch-IR JSON document as the response.  Kept in its own header
// so only the code that actually talks HTTP pays for the client library.

#include <memory>
#include <string>
#include <utility>

#include "p2plab/expert.hpp"
#include "p2plab/scenario_io.hpp"

// httplib drags in <resolv.h>, whose `_res` macro corrupts any later Eigen
// include; pull it in after Eigen and scrub the macro.
#include <httplib.h>
#ifdef _res
#undef _res
#endif

#include <json.hpp>

namespace p2plab {

class ExternalBackend : public GeneratorBackend {
 public:
  ExternalBackend(std::string host, int port, std::string path = "/generate",
                  std::unique_ptr<GeneratorBackend> fallback = nullptr,
                  int timeout_ms = 2000)
      : host_(std::move(host)),
        port_(port),
        path_(std::move(path)),
        fallback_(std::move(fallback)),
        timeout_ms_(timeout_ms) {}

  ModelIR generate(const ProsumerSpec& spec, int horizon,
                   double dt_hours) override {
    try {
      httplib::Client cli(host_, port_);
      cli.set_connection_timeout(0, timeout_ms_ * 1000);
      cli.set_read_timeout(0, timeout_ms_ * 1000);
      nlohmann::json body{{"spec", prosumer_to_json(spec)},
                          {"horizon", horizon},
                          {"dt_hours", dt_hours}};
      auto res = cli.Post(path_, body.dump(), "application/json");
      if (!res || res->status != 200)
        throw DataError("model service unreachable or returned status " +
                        std::to_string(res ? res->status : -1));
      return ModelIR::from_json(nlohmann::json::parse(res->body));
    } catch (const std::exception& e) {
      if (fallback_) {
        logf(1, "external generator failed (%s); using %s fallback", e.what(),
             fallback_->name().c_str());
        return fallback_->generate(spec, horizon, dt_hours);
      }
      throw;
    }
  }

  std::string name() const override { return "external"; }

 private:
  std::string host_;
  int port_;
  std::string path_;
  std::unique_ptr<GeneratorBackend> fallback_;
  int timeout_ms_;
};

}  // namespace p2plab
