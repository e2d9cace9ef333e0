// neural-sde-lab <command> --config <path> [--out <dir>] [--threads N]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "nsde/lab/config.hpp"
#include "nsde/lab/experiments.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> names;
  for (const auto& [name, fn] : nsde::lab::commands()) names.push_back(name);

  CLI::App app{"Neural SDE experiments"};
  std::string command, config_path, out_dir;
  unsigned threads = 1;
  app.add_option("command", command, "experiment to run")->required()->check(CLI::IsMember(names));
  app.add_option("--config", config_path, "experiment config file")->required();
  app.add_option("--out", out_dir, "output directory (overrides out_dir in the config)");
  app.add_option("--threads", threads, "worker threads; results do not depend on it")
      ->check(CLI::Range(1u, 4096u));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  nsde::lab::Config cfg;
  try {
    cfg = nsde::lab::Config::from_file(config_path);
    if (out_dir.empty()) out_dir = cfg.get_string("", "out_dir", "results/" + command);
  } catch (const nsde::lab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto manifest = nsde::lab::run_command(command, cfg, out_dir, nsde::Exec{threads});
    std::cout << command << ": wrote " << manifest.outputs.size() << " files to " << out_dir << "\n";
  } catch (const nsde::lab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
