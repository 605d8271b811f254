#pragma once

#include <string>

#include <json.hpp>

#include "semiq/mdp.h"

namespace semiq {

// {num_states, num_actions, transitions (row-major), rewards, r_max}. Reals
// are written as hex-float strings so a round trip is bit-exact; plain JSON
// numbers are accepted on input.
nlohmann::json mdp_to_json(const Mdp& mdp);
Mdp mdp_from_json(const nlohmann::json& doc);

void save_mdp(const Mdp& mdp, const std::string& path);
Mdp load_mdp(const std::string& path);

std::string hex_double(double x);
double parse_double(const nlohmann::json& value);

}  // namespace semiq
