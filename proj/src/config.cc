#include "semiq/config.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "semiq/mdp_io.h"

namespace semiq {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::string& prefix, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(prefix + key, "unknown key");
  }
}

const json& object_at(const json& doc, const std::string& key, const std::string& path) {
  const json& v = doc.at(key);
  if (!v.is_object()) throw ConfigError(path, "expected an object");
  return v;
}

double get_real(const json& obj, const std::string& key, const std::string& path) {
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  return v.get<double>();
}

std::int64_t get_int(const json& obj, const std::string& key, const std::string& path) {
  const json& v = obj.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(path, "expected an integer");
  return v.get<std::int64_t>();
}

std::uint64_t get_seed(const json& obj, const std::string& key, const std::string& path) {
  const json& v = obj.at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw ConfigError(path, "expected a non-negative integer");
}

}  // namespace

RunConfig parse_config(const json& doc, const std::string& base_dir) {
  if (!doc.is_object()) throw ConfigError("(root)", "expected a JSON object");
  reject_unknown(doc, "", {"variant", "mdp", "n_agents", "eps_p", "eps_r", "fleet_seed", "schedule",
                           "total_iters", "replicas", "master_seed", "checkpoints_per_decade", "output_dir"});
  RunConfig c;

  if (!doc.contains("variant")) throw ConfigError("variant", "missing");
  {
    const json& v = object_at(doc, "variant", "variant");
    reject_unknown(v, "variant.", {"kind", "gamma", "j"});
    if (!v.contains("kind") || !v["kind"].is_string()) throw ConfigError("variant.kind", "expected \"discounted\" or \"avg_jstep\"");
    const std::string kind = v["kind"];
    if (kind == "discounted") {
      if (v.contains("j")) throw ConfigError("variant.j", "only valid for avg_jstep");
      const double gamma = v.contains("gamma") ? get_real(v, "gamma", "variant.gamma") : 0.9;
      if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("variant.gamma", "must lie in (0, 1)");
      c.variant = Variant::discounted(gamma);
    } else if (kind == "avg_jstep") {
      if (v.contains("gamma")) throw ConfigError("variant.gamma", "only valid for discounted");
      if (!v.contains("j")) throw ConfigError("variant.j", "missing");
      const std::int64_t j = get_int(v, "j", "variant.j");
      if (j < 1 || j > 1000) throw ConfigError("variant.j", "must lie in [1, 1000]");
      c.variant = Variant::jstep(static_cast<int>(j));
    } else {
      throw ConfigError("variant.kind", "expected \"discounted\" or \"avg_jstep\", got \"" + kind + "\"");
    }
  }

  if (!doc.contains("mdp")) throw ConfigError("mdp", "missing");
  {
    const json& m = object_at(doc, "mdp", "mdp");
    if (m.contains("path")) {
      reject_unknown(m, "mdp.", {"path"});
      if (!m["path"].is_string()) throw ConfigError("mdp.path", "expected a string");
      std::filesystem::path p = m["path"].get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
      c.mdp.path = p.string();
    } else {
      reject_unknown(m, "mdp.", {"num_states", "num_actions", "smoothing", "r_max", "seed"});
      if (m.contains("num_states")) c.mdp.num_states = static_cast<int>(get_int(m, "num_states", "mdp.num_states"));
      if (m.contains("num_actions")) c.mdp.num_actions = static_cast<int>(get_int(m, "num_actions", "mdp.num_actions"));
      if (m.contains("smoothing")) c.mdp.smoothing = get_real(m, "smoothing", "mdp.smoothing");
      if (m.contains("r_max")) c.mdp.r_max = get_real(m, "r_max", "mdp.r_max");
      if (m.contains("seed")) c.mdp.seed = get_seed(m, "seed", "mdp.seed");
      if (c.mdp.num_states < 2 || c.mdp.num_states > 4096) throw ConfigError("mdp.num_states", "must lie in [2, 4096]");
      if (c.mdp.num_actions < 2 || c.mdp.num_actions > 4096) throw ConfigError("mdp.num_actions", "must lie in [2, 4096]");
      if (!(c.mdp.smoothing > 0.0 && c.mdp.smoothing < 1.0)) throw ConfigError("mdp.smoothing", "must lie in (0, 1)");
      if (!(c.mdp.r_max > 0.0)) throw ConfigError("mdp.r_max", "must be positive");
    }
  }

  if (doc.contains("n_agents")) {
    const std::int64_t n = get_int(doc, "n_agents", "n_agents");
    if (n < 1 || n > 100000) throw ConfigError("n_agents", "must lie in [1, 100000]");
    c.n_agents = static_cast<int>(n);
  }
  if (doc.contains("eps_p")) c.eps_p = get_real(doc, "eps_p", "eps_p");
  if (!(c.eps_p >= 0.0 && c.eps_p <= 1.0)) throw ConfigError("eps_p", "must lie in [0, 1]");
  if (doc.contains("eps_r")) c.eps_r = get_real(doc, "eps_r", "eps_r");
  if (!(c.eps_r >= 0.0)) throw ConfigError("eps_r", "must be >= 0");
  if (doc.contains("fleet_seed")) c.fleet_seed = get_seed(doc, "fleet_seed", "fleet_seed");

  if (doc.contains("schedule")) {
    const json& s = object_at(doc, "schedule", "schedule");
    if (s.contains("alpha")) {
      reject_unknown(s, "schedule.", {"alpha"});
      const double alpha = get_real(s, "alpha", "schedule.alpha");
      if (!(alpha > 0.5 && alpha < 1.0)) throw ConfigError("schedule.alpha", "must lie in (0.5, 1)");
      c.alpha = alpha;
    } else {
      reject_unknown(s, "schedule.", {"classic_c", "offset"});
      if (!s.contains("classic_c")) throw ConfigError("schedule", "expected alpha or classic_c");
      c.classic_c = get_real(s, "classic_c", "schedule.classic_c");
      if (!(c.classic_c > 0.0)) throw ConfigError("schedule.classic_c", "must be positive");
      c.offset = s.contains("offset") ? get_real(s, "offset", "schedule.offset") : std::max(1.0, c.classic_c);
      if (!(c.offset >= c.classic_c)) throw ConfigError("schedule.offset", "must be >= classic_c so that alpha_0 <= 1");
      c.alpha.reset();
    }
  }

  if (doc.contains("total_iters")) c.total_iters = get_int(doc, "total_iters", "total_iters");
  if (c.total_iters < 1) throw ConfigError("total_iters", "must be >= 1");
  if (doc.contains("replicas")) {
    const std::int64_t r = get_int(doc, "replicas", "replicas");
    if (r < 1 || r > 1000000) throw ConfigError("replicas", "must lie in [1, 10^6]");
    c.replicas = static_cast<int>(r);
  }
  if (doc.contains("master_seed")) c.master_seed = get_seed(doc, "master_seed", "master_seed");
  if (doc.contains("checkpoints_per_decade")) {
    const std::int64_t k = get_int(doc, "checkpoints_per_decade", "checkpoints_per_decade");
    if (k < 1 || k > 1000) throw ConfigError("checkpoints_per_decade", "must lie in [1, 1000]");
    c.checkpoints_per_decade = static_cast<int>(k);
  }
  if (doc.contains("output_dir")) {
    if (!doc["output_dir"].is_string()) throw ConfigError("output_dir", "expected a string");
    c.output_dir = doc["output_dir"];
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("(file)", "cannot open " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("(file)", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(doc, std::filesystem::path(path).parent_path().string());
}

json to_json(const RunConfig& c) {
  json variant = {{"kind", c.variant.name()}};
  if (c.variant.is_avg()) {
    variant["j"] = c.variant.j;
  } else {
    variant["gamma"] = c.variant.gamma;
  }
  json mdp;
  if (c.mdp.path) {
    mdp = {{"path", *c.mdp.path}};
  } else {
    mdp = {{"num_states", c.mdp.num_states},
           {"num_actions", c.mdp.num_actions},
           {"smoothing", c.mdp.smoothing},
           {"r_max", c.mdp.r_max},
           {"seed", c.mdp.seed}};
  }
  json schedule = c.alpha ? json{{"alpha", *c.alpha}} : json{{"classic_c", c.classic_c}, {"offset", c.offset}};
  return {{"variant", variant},
          {"mdp", mdp},
          {"n_agents", c.n_agents},
          {"eps_p", c.eps_p},
          {"eps_r", c.eps_r},
          {"fleet_seed", c.fleet_seed},
          {"schedule", schedule},
          {"total_iters", c.total_iters},
          {"replicas", c.replicas},
          {"master_seed", c.master_seed},
          {"checkpoints_per_decade", c.checkpoints_per_decade},
          {"output_dir", c.output_dir}};
}

StepSchedule schedule_of(const RunConfig& c) {
  return c.alpha ? StepSchedule::polynomial(*c.alpha) : StepSchedule::classic(c.classic_c, c.offset);
}

ExperimentSpec to_experiment(const RunConfig& c) {
  ExperimentSpec spec;
  spec.base = c.mdp.path ? load_mdp(*c.mdp.path)
                         : generate_mdp(c.mdp.num_states, c.mdp.num_actions, c.mdp.smoothing, c.mdp.r_max, c.mdp.seed);
  spec.variant = c.variant;
  spec.schedule = schedule_of(c);
  spec.n_agents = c.n_agents;
  spec.eps_p = c.eps_p;
  spec.eps_r = c.eps_r;
  spec.fleet_seed = c.fleet_seed;
  spec.total_iters = c.total_iters;
  spec.replicas = c.replicas;
  spec.master_seed = c.master_seed;
  spec.checkpoints_per_decade = c.checkpoints_per_decade;
  return spec;
}

}  // namespace semiq
