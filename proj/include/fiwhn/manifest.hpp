#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#ifndef FIWHN_GIT_DESCRIBE
#define FIWHN_GIT_DESCRIBE "unknown"
#endif

namespace fiwhn {

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Record of one command invocation, kept as manifest.json in its output
/// directory. It is written before work starts and rewritten on completion.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string git_describe = FIWHN_GIT_DESCRIBE;
  std::string started;
  std::string finished;  // empty while running
  std::string status = "running";
  std::vector<std::string> outputs;

  static RunManifest begin(std::string command, nlohmann::json config, std::uint64_t seed) {
    RunManifest m;
    m.command = std::move(command);
    m.config = std::move(config);
    m.seed = seed;
    m.started = utc_timestamp();
    return m;
  }

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config},     {"seed", seed},     {"git_describe", git_describe},
            {"started", started}, {"finished", finished}, {"status", status}, {"outputs", outputs}};
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const auto tmp = dir / "manifest.json.tmp";
    std::ofstream(tmp) << to_json().dump(2) << '\n';
    std::filesystem::rename(tmp, dir / "manifest.json");
  }
};

}  // namespace fiwhn
