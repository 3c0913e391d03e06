// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepj/error.hpp"
#include "deepj/util/hash.hpp"

namespace deepj {

inline constexpr const char* kManifestFormat = "deepj-manifest";

// One per CLI run, written as `<command>.manifest.json` next to the outputs.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::uint64_t> seeds;
  // Path → SHA-256 of the bytes read or written.
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  std::map<std::string, double> seconds;
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"format", kManifestFormat}, {"command", m.command}, {"config", m.config}, {"seeds", m.seeds},
          {"inputs", m.inputs},        {"outputs", m.outputs}, {"seconds", m.seconds}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kManifestFormat) throw InputError("manifest: unknown format");
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.seconds = j.at("seconds").get<std::map<std::string, double>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest: ") + e.what());
  }
}

// Paths whose current contents no longer match the recorded hash,
// including files that have disappeared.
inline std::vector<std::string> stale_artifacts(const RunManifest& m) {
  std::vector<std::string> stale;
  for (const auto* group : {&m.inputs, &m.outputs})
    for (const auto& [path, hash] : *group) {
      try {
        if (sha256_file(path) != hash) stale.push_back(path);
      } catch (const MissingInputError&) {
        stale.push_back(path);
      }
    }
  return stale;
}

}  // namespace deepj
