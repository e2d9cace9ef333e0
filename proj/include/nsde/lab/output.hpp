#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nsde/corrupt.hpp"

namespace nsde::lab {

inline constexpr std::string_view kArtifactVersion = "0.1.0";

/// Shortest round-trip decimal form, so reruns produce identical bytes.
inline std::string num(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// Writes `content` to a sibling temporary file, then renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ResultRow {
  std::string experiment, dataset, variant;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

/// Collects files of one run. Every file is staged in memory and written
/// atomically; results.csv carries the corruption severity table as a header
/// comment.
class RunOutput {
 public:
  explicit RunOutput(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

  const std::filesystem::path& dir() const { return dir_; }

  void write_file(const std::string& name, const std::string& content) {
    const auto path = dir_ / name;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_atomic(path, content);
    files_.push_back(name);
  }

  void add_result(ResultRow row) { results_.push_back(std::move(row)); }
  const std::vector<ResultRow>& results() const { return results_; }

  void write_results() {
    std::ostringstream os;
    std::istringstream table{std::string(kSeverityTableText)};
    std::string line;
    os << "# severity table " << kSeverityTableVersion << "\n";
    while (std::getline(table, line)) os << "# " << line << "\n";
    os << "experiment,dataset,variant,sigma,seed,metric,value\n";
    for (const auto& r : results_) {
      os << r.experiment << ',' << r.dataset << ',' << r.variant << ',' << num(r.sigma) << ',' << r.seed << ','
         << r.metric << ',' << num(r.value) << '\n';
    }
    write_file("results.csv", os.str());
  }

  const std::vector<std::string>& files() const { return files_; }

  std::map<std::string, long long>& counters() { return counters_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
  std::vector<ResultRow> results_;
  std::map<std::string, long long> counters_;
};

struct RunManifest {
  std::string command;
  std::string config_text;
  std::map<std::string, std::string> resolved;
  std::string started, finished;
  std::vector<std::string> outputs;
  std::map<std::string, long long> counters;
  unsigned threads = 1;
  bool complete = false;
  std::string error;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["artifact_version"] = kArtifactVersion;
    j["command"] = command;
    j["config"] = {{"text", config_text}, {"resolved", resolved}};
    j["threads"] = threads;
    j["started"] = started;
    j["finished"] = finished;
    j["outputs"] = outputs;
    j["counters"] = counters;
    j["complete"] = complete;
    if (!error.empty()) j["error"] = error;
    return j;
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    write_atomic(dir / "manifest.json", to_json().dump(2) + "\n");
  }
};

}  // namespace nsde::lab
