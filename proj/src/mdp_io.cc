#include "semiq/mdp_io.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace semiq {

std::string hex_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

double parse_double(const nlohmann::json& value) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) {
    const std::string& text = value.get_ref<const std::string&>();
    char* end = nullptr;
    const double x = std::strtod(text.c_str(), &end);
    if (end == text.c_str() || *end != '\0') {
      throw std::invalid_argument("not a real number: \"" + text + "\"");
    }
    return x;
  }
  throw std::invalid_argument("expected a number or numeric string");
}

nlohmann::json mdp_to_json(const Mdp& mdp) {
  nlohmann::json doc;
  doc["num_states"] = mdp.num_states;
  doc["num_actions"] = mdp.num_actions;
  doc["r_max"] = hex_double(mdp.r_max);
  auto& transitions = doc["transitions"] = nlohmann::json::array();
  for (Eigen::Index r = 0; r < mdp.transitions.rows(); ++r) {
    for (Eigen::Index c = 0; c < mdp.transitions.cols(); ++c) {
      transitions.push_back(hex_double(mdp.transitions(r, c)));
    }
  }
  auto& rewards = doc["rewards"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < mdp.rewards.size(); ++i) rewards.push_back(hex_double(mdp.rewards[i]));
  return doc;
}

Mdp mdp_from_json(const nlohmann::json& doc) {
  for (const char* key : {"num_states", "num_actions", "transitions", "rewards", "r_max"}) {
    if (!doc.contains(key)) throw std::invalid_argument(std::string("mdp: missing field ") + key);
  }
  Mdp mdp;
  mdp.num_states = doc.at("num_states").get<int>();
  mdp.num_actions = doc.at("num_actions").get<int>();
  mdp.r_max = parse_double(doc.at("r_max"));
  if (mdp.num_states < 1 || mdp.num_actions < 1) throw std::invalid_argument("mdp: empty state or action set");

  const auto& transitions = doc.at("transitions");
  const auto& rewards = doc.at("rewards");
  if (!transitions.is_array() || transitions.size() != static_cast<std::size_t>(mdp.dim() * mdp.num_states)) {
    throw std::invalid_argument("mdp: transitions must hold |S||A| x |S| entries");
  }
  if (!rewards.is_array() || rewards.size() != static_cast<std::size_t>(mdp.dim())) {
    throw std::invalid_argument("mdp: rewards must hold |S||A| entries");
  }
  mdp.transitions.resize(mdp.dim(), mdp.num_states);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < mdp.dim(); ++r) {
    for (Eigen::Index c = 0; c < mdp.num_states; ++c) mdp.transitions(r, c) = parse_double(transitions[k++]);
  }
  mdp.rewards.resize(mdp.dim());
  for (Eigen::Index i = 0; i < mdp.dim(); ++i) mdp.rewards[i] = parse_double(rewards[static_cast<std::size_t>(i)]);
  mdp.validate();
  return mdp;
}

void save_mdp(const Mdp& mdp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << mdp_to_json(mdp).dump(1) << '\n';
}

Mdp load_mdp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read " + path);
  return mdp_from_json(nlohmann::json::parse(in));
}

}  // namespace semiq
