#include "shapegan/manifest.hpp"

#include <fstream>

#include "shapegan/common.hpp"

namespace shapegan {

using json = nlohmann::ordered_json;

json RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = seeds;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["version"] = version.empty() ? std::string(kVersion) : version;
  j["wall_seconds"] = wall_seconds;
  j["exit_status"] = exit_status;
  return j;
}

void RunManifest::write_atomic(const fs::path& file) const {
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write manifest " + tmp.string());
    os << to_json().dump(2) << '\n';
  }
  fs::rename(tmp, file);
}

RunManifest RunManifest::load(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot read manifest " + file.string());
  RunManifest m;
  try {
    json j = json::parse(is);
    m.command = j.at("command").get<std::string>();
    m.config = j.value("config", json::object());
    m.seeds = j.value("seeds", json::object());
    m.inputs = j.value("inputs", json::object());
    m.outputs = j.value("outputs", json::object());
    m.version = j.value("version", "");
    m.wall_seconds = j.value("wall_seconds", 0.0);
    m.exit_status = j.value("exit_status", 0);
  } catch (const json::exception& e) {
    throw DataError("bad manifest " + file.string() + ": " + e.what());
  }
  return m;
}

}  // namespace shapegan
