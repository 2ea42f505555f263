// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "brt/error.hpp"
#include "brt/rng.hpp"
#include "brt/version.hpp"

namespace brt {

/// FNV-1a fingerprint of a file's bytes, hex-encoded.
inline std::string file_fingerprint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for hashing");
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 15];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    if (is.eof()) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

/// Run provenance, written into the output directory before any artifact so
/// partial runs are always identifiable. Contains no timestamps: identical
/// inputs yield identical manifests.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> inputs;  // label -> path
  std::map<std::string, uint64_t> seeds;
  std::string out_dir;

  void write() const {
    std::filesystem::create_directories(out_dir);
    nlohmann::json j = {{"command", command},
                        {"tool_version", kVersion},
                        {"out_dir", out_dir},
                        {"seeds", seeds}};
    nlohmann::json in = nlohmann::json::object();
    for (const auto& [label, path] : inputs)
      in[label] = {{"path", path}, {"fnv1a64", file_fingerprint(path)}};
    j["inputs"] = std::move(in);
    const std::string path = out_dir + "/manifest.json";
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError("failed writing '" + path + "'");
  }
};

}  // namespace brt
