#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "semiq/harness.h"

namespace semiq {

// Schema violation; field() is the dotted path of the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct MdpSource {
  // Either a generated instance or a serialized one.
  std::optional<std::string> path;
  int num_states = 6;
  int num_actions = 2;
  double smoothing = 0.2;
  double r_max = 1.0;
  std::uint64_t seed = 0;
};

struct RunConfig {
  Variant variant = Variant::discounted(0.9);
  MdpSource mdp;
  int n_agents = 1;
  double eps_p = 0.0;
  double eps_r = 0.0;
  std::uint64_t fleet_seed = 0;
  // Exactly one of alpha / (classic_c, offset) is in force.
  std::optional<double> alpha = 0.7;
  double classic_c = 0.0;
  double offset = 0.0;
  std::int64_t total_iters = 100000;
  int replicas = 32;
  std::uint64_t master_seed = 0;
  int checkpoints_per_decade = 20;
  std::string output_dir = "out";
};

// Unknown keys and out-of-range values throw ConfigError. Relative MDP
// paths are resolved against base_dir when it is non-empty.
RunConfig parse_config(const nlohmann::json& doc, const std::string& base_dir = "");
RunConfig load_config(const std::string& path);

// Canonical echo: every field spelled out, so it reproduces the run.
nlohmann::json to_json(const RunConfig& config);

StepSchedule schedule_of(const RunConfig& config);
ExperimentSpec to_experiment(const RunConfig& config);

}  // namespace semiq
