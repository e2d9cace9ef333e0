#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <boost/algorithm/string/trim.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace nsde::lab {

inline constexpr std::string_view kConfigSchema = "nsde-config-1";

/// Bad config file, section, key or value. `key` is "section.key" when known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Allowed keys per section; the empty section name holds top-level keys.
using ConfigSchema = std::map<std::string, std::set<std::string>>;

inline const ConfigSchema& config_schema() {
  static const ConfigSchema schema{
      {"", {"schema", "out_dir"}},
      {"toy", {"seed", "sigmas", "x0", "t_end", "n_steps", "n_paths", "record_every", "fit_t_lo", "fit_t_hi"}},
      {"stability",
       {"seed", "lipschitz", "state_dim", "sigmas", "h0", "eps0", "t_end", "n_steps", "n_paths", "record_every",
        "fit_t_lo", "fit_t_hi"}},
      {"gradcheck",
       {"seed", "variants", "sigma", "state_dim", "hidden", "activation", "t_end", "n_steps", "n_paths", "delta",
        "coordinates"}},
      {"data", {"dataset", "n_train", "n_test", "noise_sd", "turns", "seed", "train_images", "train_labels",
                "test_images", "test_labels"}},
      {"model", {"variants", "sigma", "schedule", "state_dim", "hidden", "activation", "t_end", "n_steps"}},
      {"train",
       {"seeds", "optimizer", "lr", "momentum", "beta1", "beta2", "adam_eps", "epochs", "batch_size", "k_paths",
        "ttn_passes", "checkpoint_dir"}},
      {"attack", {"norm", "epsilons", "steps", "step_size", "grad_paths", "n_eval", "seed"}},
      {"corrupt", {"kinds", "n_eval", "seed"}},
      {"depthprobe", {"epsilon", "n_samples", "record_every", "seed"}},
  };
  return schema;
}

/// key = value file with [sections]; lines starting with ';' or '#' are comments.
/// Every key is checked against config_schema() on load. Typed getters record
/// the value actually used (default or given) so the run can echo it.
class Config {
 public:
  static Config from_string(const std::string& text, const std::string& origin = "<string>") {
    Config c;
    c.text_ = text;
    c.origin_ = origin;
    std::istringstream is(text);
    try {
      boost::property_tree::ini_parser::read_ini(is, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("", origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    c.validate();
    return c;
  }

  static Config from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("", "cannot read config file " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_string(ss.str(), path);
  }

  const std::string& text() const { return text_; }
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

  bool has(const std::string& section, const std::string& key) const { return raw(section, key) != nullptr; }

  std::string get_string(const std::string& section, const std::string& key, const std::string& def) const {
    const std::string* v = raw(section, key);
    const std::string out = v ? *v : def;
    resolved_[dotted(section, key)] = out;
    return out;
  }

  double get_double(const std::string& section, const std::string& key, double def) const {
    const std::string* v = raw(section, key);
    const double out = v ? parse_double(section, key, *v) : def;
    resolved_[dotted(section, key)] = v ? *v : format_default(def);
    return out;
  }

  long long get_int(const std::string& section, const std::string& key, long long def) const {
    const std::string* v = raw(section, key);
    const long long out = v ? parse_int(section, key, *v) : def;
    resolved_[dotted(section, key)] = std::to_string(out);
    return out;
  }

  std::uint64_t get_seed(const std::string& section, const std::string& key, std::uint64_t def) const {
    const long long v = get_int(section, key, static_cast<long long>(def));
    if (v < 0) fail(section, key, "seed must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::vector<std::string>& def) const {
    const std::string* v = raw(section, key);
    std::vector<std::string> out;
    if (v) {
      std::string item;
      std::istringstream is(*v);
      while (std::getline(is, item, ',')) {
        boost::algorithm::trim(item);
        if (item.empty()) fail(section, key, "empty list element");
        out.push_back(item);
      }
      if (out.empty()) fail(section, key, "empty list");
    } else {
      out = def;
    }
    std::string joined;
    for (const auto& s : out) joined += (joined.empty() ? "" : ", ") + s;
    resolved_[dotted(section, key)] = joined;
    return out;
  }

  std::vector<double> get_double_list(const std::string& section, const std::string& key,
                                      const std::vector<double>& def) const {
    std::vector<std::string> d;
    for (double x : def) d.push_back(format_default(x));
    std::vector<double> out;
    for (const auto& s : get_list(section, key, d)) out.push_back(parse_double(section, key, s));
    return out;
  }

  std::vector<long long> get_int_list(const std::string& section, const std::string& key,
                                      const std::vector<long long>& def) const {
    std::vector<std::string> d;
    for (long long x : def) d.push_back(std::to_string(x));
    std::vector<long long> out;
    for (const auto& s : get_list(section, key, d)) out.push_back(parse_int(section, key, s));
    return out;
  }

  [[noreturn]] void fail(const std::string& section, const std::string& key, const std::string& why) const {
    const auto name = dotted(section, key);
    const int line = line_of(section, key);
    throw ConfigError(name, origin_ + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": key '" + name +
                                "': " + why);
  }

  static std::string format_default(double x) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
  }

 private:
  static std::string dotted(const std::string& section, const std::string& key) {
    return section.empty() ? key : section + "." + key;
  }

  const std::string* raw(const std::string& section, const std::string& key) const {
    const auto& node = section.empty() ? tree_ : tree_.get_child(section, empty_);
    const auto it = node.find(key);
    if (it == node.not_found()) return nullptr;
    return &it->second.data();
  }

  double parse_double(const std::string& section, const std::string& key, const std::string& s) const {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) fail(section, key, "expected a number, got '" + s + "'");
    return v;
  }

  long long parse_int(const std::string& section, const std::string& key, const std::string& s) const {
    long long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) fail(section, key, "expected an integer, got '" + s + "'");
    return v;
  }

  // 1-based line of `key` inside `section`, 0 when not found.
  int line_of(const std::string& section, const std::string& key) const {
    std::istringstream is(text_);
    std::string line, current;
    int number = 0;
    while (std::getline(is, line)) {
      ++number;
      boost::algorithm::trim(line);
      if (line.empty() || line[0] == ';' || line[0] == '#') continue;
      if (line.front() == '[' && line.back() == ']') {
        current = line.substr(1, line.size() - 2);
        boost::algorithm::trim(current);
        continue;
      }
      auto name = line.substr(0, line.find('='));
      boost::algorithm::trim(name);
      if (current == section && name == key) return number;
    }
    return 0;
  }

  void validate() const {
    const auto& schema = config_schema();
    for (const auto& [name, node] : tree_) {
      if (node.empty()) {
        // a section without keys parses like a top-level key with no value
        if (!schema.at("").contains(name) && !schema.contains(name)) fail("", name, "unknown key");
        continue;
      }
      const auto sec = schema.find(name);
      if (sec == schema.end() || name.empty()) {
        throw ConfigError(name, origin_ + ": unknown section [" + name + "]");
      }
      for (const auto& [key, value] : node) {
        if (!sec->second.contains(key)) fail(name, key, "unknown key in [" + name + "]");
      }
    }
    const std::string* version = raw("", "schema");
    if (version && *version != kConfigSchema) {
      fail("", "schema", "unsupported schema '" + *version + "' (expected " + std::string(kConfigSchema) + ")");
    }
    resolved_["schema"] = std::string(kConfigSchema);
  }

  std::string text_;
  std::string origin_;
  boost::property_tree::ptree tree_;
  boost::property_tree::ptree empty_;
  mutable std::map<std::string, std::string> resolved_;
};

}  // namespace nsde::lab
