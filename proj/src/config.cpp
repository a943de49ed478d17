#include "aat/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "aat/errors.hpp"

namespace aat {

namespace {

// Desk-scale defaults. Model sizes follow the generator's desk preset;
// `generator.preset = full` restores d=128, 8 heads, 6 layers.
const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "0"},
      {"env", "grid"},
      {"epsilon", "1.5"},

      {"victim.algorithm", "q_learning"},
      {"victim.episodes", "400"},
      {"victim.eval_episodes", "20"},

      {"collect.episodes", "2000"},
      {"collect.mix.random", "0.5"},
      {"collect.mix.fgsm", "0.5"},

      {"value.gamma", "0.99"},
      {"value.sigma", "0.9"},
      {"value.lambda", "0.5"},
      {"value.hidden", "64,64"},
      {"value.reward", "attacker"},
      {"value.batch", "128"},
      {"value.steps", "3000"},
      {"value.lr", "1e-3"},
      {"value.target_refresh", "100"},
      {"value.delta_scale", "auto"},

      {"predictor.kappa", "0.1"},
      {"predictor.neighbors", "8"},
      {"predictor.proposals", "8"},
      {"predictor.target_rule", "max_product"},
      {"predictor.architecture", "encoded"},
      {"predictor.targets", "4000"},
      {"predictor.steps", "1000"},
      {"predictor.lr", "1e-3"},

      {"generator.preset", "desk"},
      {"generator.model_dim", "auto"},
      {"generator.num_heads", "auto"},
      {"generator.num_layers", "auto"},
      {"generator.dropout", "0.2"},
      {"generator.num_scales", "3"},
      {"generator.base_window", "5"},
      {"generator.growth", "exponential"},
      {"generator.growth_ratio", "2"},
      {"generator.context", "20"},
      {"generator.omega", "1.0"},
      {"generator.condition", "weighted_advantage"},
      {"generator.norm", "l2"},
      {"generator.batch", "8"},
      {"generator.steps", "600"},
      {"generator.lr", "1e-3"},

      {"attack.episodes", "20"},
      {"attack.seed", "1000"},
      {"attack.mode", "white_box"},
      {"attack.trace", "true"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config::Config() : values_(defaults()) {}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Config c;
  c.merge_text(ss.str(), path);
  return c;
}

void Config::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      set(line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

const std::string& Config::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double Config::real(const std::string& key) const {
  const std::string& v = str(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

int Config::integer(const std::string& key) const {
  const std::string& v = str(key);
  int x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  }
  return x;
}

std::uint64_t Config::seed(const std::string& key) const {
  const std::string& v = str(key);
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return x;
}

bool Config::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int> Config::int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    int x = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError("config key '" + key + "' expects a comma-separated integer list");
    }
    out.push_back(x);
  }
  return out;
}

nlohmann::json Config::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace aat
