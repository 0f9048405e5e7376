#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace shapegan {

namespace fs = std::filesystem;

// Provenance record of one command invocation. The config echo is complete:
// feeding it back (see the README) reproduces the run's metric outputs.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json seeds = nlohmann::ordered_json::object();    // name -> value
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();   // label -> path
  nlohmann::ordered_json outputs = nlohmann::ordered_json::object();  // label -> path
  std::string version;
  double wall_seconds = 0.0;
  int exit_status = 0;

  nlohmann::ordered_json to_json() const;
  // Write tmp + rename so a manifest is either absent or complete.
  void write_atomic(const fs::path& file) const;
  static RunManifest load(const fs::path& file);
};

}  // namespace shapegan
