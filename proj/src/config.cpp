#include "mdmt/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mdmt {

const std::vector<std::string>& Config::known_keys() {
  static const std::vector<std::string> keys = {
      "data.cache",
      "data.csv",
      "data.domain_col",
      "data.label_cols",
      "data.feature_cols",
      "data.split",
      "data.split_seed",
      "model.variant",
      "model.embedding_dim",
      "model.hidden_dim",
      "model.expert_dim",
      "model.tower_hidden",
      "model.shared_experts",
      "train.epochs",
      "train.batch_size",
      "train.lr",
      "train.fusion_lr",
      "train.optimizer",
      "train.seed",
      "train.patience",
      "synth.domains",
      "synth.tasks",
      "synth.fields",
      "synth.samples_per_domain",
      "synth.latent_dim",
      "synth.rho_domain",
      "synth.rho_task",
      "synth.noise",
      "synth.seed",
      "ablate.variants",
      "ablate.seeds",
      "eval.split",
      "export.stage",
      "export.task",
      "export.split",
      "export.limit",
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  const auto& known = known_keys();
  if (std::find(known.begin(), known.end(), key) == known.end()) {
    throw ValidationError("unknown config key '" + key + "'");
  }
  values_[key] = value;
}

void Config::apply_override(const std::string& kv) {
  const size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override must look like key=value, got '" + kv + "'");
  }
  set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

Config Config::from_string(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + " has no '='");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_string(buf.str());
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Config::require_str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ValidationError("missing required config key '" + key + "'");
  return it->second;
}

int64_t Config::get_i64(const std::string& key, int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t used = 0;
    const int64_t v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

uint64_t Config::get_u64(const std::string& key, uint64_t fallback) const {
  const int64_t v = get_i64(key, static_cast<int64_t>(fallback));
  if (v < 0) throw ValidationError("config key '" + key + "' must be non-negative");
  return static_cast<uint64_t>(v);
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "' is not a number: '" + it->second + "'");
  }
}

std::string Config::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [k, v] : values_) {  // std::map: already sorted
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%012llx",
                static_cast<unsigned long long>(h & 0xFFFFFFFFFFFFULL));
  return buf;
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  const std::string last = trim(cur);
  if (!last.empty() || !out.empty()) out.push_back(last);
  for (const auto& s : out) {
    if (s.empty()) throw ValidationError("empty entry in list '" + csv + "'");
  }
  return out;
}

}  // namespace mdmt
