#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "wm/graph.hpp"

namespace wm::io {

// Checkpoint layout shared by model and policy: <dir>/manifest.json holds
// the config plus an ordered parameter table (name, shape, dtype, byte
// offset); <dir>/params.bin is the concatenated raw little-endian binary32
// data in that order.

void ensure_dir(const std::string& dir);

// Writes manifest.json (extra merged with the generated parameter table) and
// params.bin for the given tensors.
void save_params(const std::string& dir, const std::vector<std::string>& names,
                 const std::vector<Graph::Ptr>& tensors, nlohmann::json extra);

nlohmann::json read_manifest(const std::string& dir);

// Validates the manifest's parameter table against (names, tensors) and
// loads params.bin into the tensors.
void load_params(const std::string& dir, const nlohmann::json& manifest, const std::vector<std::string>& names,
                 const std::vector<Graph::Ptr>& tensors);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace wm::io
