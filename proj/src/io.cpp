#include "ntd/io.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ntd {

Json to_json(const Environment& env) {
  const FiniteMdp& mdp = env.mdp;
  Json transition = Json::array();
  Json reward = Json::array();
  Json features = Json::array();
  for (int s = 0; s < mdp.n_states; ++s) {
    Json t_row = Json::array();
    Json r_row = Json::array();
    Json f_row = Json::array();
    for (int a = 0; a < mdp.n_actions; ++a) {
      const int x = mdp.pair(s, a);
      std::vector<double> p(mdp.transition.row(x).begin(),
                            mdp.transition.row(x).end());
      t_row.push_back(p);
      r_row.push_back(mdp.reward(x));
      std::vector<double> f(env.features.table.row(x).begin(),
                            env.features.table.row(x).end());
      f_row.push_back(f);
    }
    transition.push_back(t_row);
    reward.push_back(r_row);
    features.push_back(f_row);
  }
  return Json{{"version", 1},
              {"n_states", mdp.n_states},
              {"n_actions", mdp.n_actions},
              {"gamma", mdp.gamma},
              {"r_bar", mdp.r_bar},
              {"transition", transition},
              {"reward", reward},
              {"features", features}};
}

Environment environment_from_json(const Json& doc) {
  try {
    require(doc.at("version").get<int>() == 1, "unsupported env version");
    Environment env;
    FiniteMdp& mdp = env.mdp;
    mdp.n_states = doc.at("n_states").get<int>();
    mdp.n_actions = doc.at("n_actions").get<int>();
    require(mdp.n_states > 0 && mdp.n_actions > 0, "empty MDP");
    mdp.gamma = doc.at("gamma").get<double>();
    const int n = mdp.n_pairs();
    const auto& transition = doc.at("transition");
    const auto& reward = doc.at("reward");
    const auto& features = doc.at("features");
    require(transition.size() == static_cast<size_t>(mdp.n_states) &&
                reward.size() == static_cast<size_t>(mdp.n_states) &&
                features.size() == static_cast<size_t>(mdp.n_states),
            "env arrays do not match n_states");
    const int d = static_cast<int>(features.at(0).at(0).size());
    mdp.transition.resize(n, mdp.n_states);
    mdp.reward.resize(n);
    env.features.table.resize(n, d);
    for (int s = 0; s < mdp.n_states; ++s) {
      for (int a = 0; a < mdp.n_actions; ++a) {
        const int x = mdp.pair(s, a);
        const auto p = transition.at(s).at(a).get<std::vector<double>>();
        require(p.size() == static_cast<size_t>(mdp.n_states),
                "transition row has wrong length");
        for (int k = 0; k < mdp.n_states; ++k) mdp.transition(x, k) = p[k];
        mdp.reward(x) = reward.at(s).at(a).get<double>();
        const auto f = features.at(s).at(a).get<std::vector<double>>();
        require(f.size() == static_cast<size_t>(d), "ragged feature table");
        for (int k = 0; k < d; ++k) env.features.table(x, k) = f[k];
      }
    }
    mdp.r_bar = doc.contains("r_bar") ? doc.at("r_bar").get<double>()
                                      : mdp.reward.cwiseAbs().maxCoeff();
    mdp.validate();
    env.features.validate(n);
    return env;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed environment document: ") +
                      e.what());
  }
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SolverError("cannot write " + path);
  out << text;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ntd
