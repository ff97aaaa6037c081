#include "wm/io.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace wm::io {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

void save_params(const std::string& dir, const std::vector<std::string>& names,
                 const std::vector<Graph::Ptr>& tensors, nlohmann::json extra) {
  if (names.size() != tensors.size()) throw std::invalid_argument("save_params: name/tensor count mismatch");
  ensure_dir(dir);
  nlohmann::json table = nlohmann::json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < names.size(); ++i) {
    nlohmann::json rec;
    rec["name"] = names[i];
    rec["shape"] = tensors[i]->shape;
    rec["dtype"] = "f32";
    rec["offset"] = offset;
    table.push_back(rec);
    offset += static_cast<uint64_t>(tensors[i]->numel()) * sizeof(float);
  }
  extra["format_version"] = 1;
  extra["params"] = std::move(table);

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("cannot write " + dir + "/manifest.json");
  mf << extra.dump(2) << "\n";

  std::ofstream bin(dir + "/params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + dir + "/params.bin");
  for (const auto& t : tensors)
    bin.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(t->data.size() * sizeof(float)));
  if (!bin) throw std::runtime_error("short write to " + dir + "/params.bin");
}

nlohmann::json read_manifest(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("missing checkpoint manifest: " + dir + "/manifest.json");
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const std::exception& e) {
    throw std::invalid_argument("malformed manifest in " + dir + ": " + e.what());
  }
  return j;
}

void load_params(const std::string& dir, const nlohmann::json& manifest, const std::vector<std::string>& names,
                 const std::vector<Graph::Ptr>& tensors) {
  if (!manifest.contains("params")) throw std::invalid_argument("manifest has no parameter table: " + dir);
  const auto& table = manifest["params"];
  if (table.size() != names.size()) throw std::invalid_argument("parameter count mismatch in " + dir);
  std::ifstream bin(dir + "/params.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("missing checkpoint data: " + dir + "/params.bin");
  for (size_t i = 0; i < names.size(); ++i) {
    const auto& rec = table[i];
    if (rec["name"].get<std::string>() != names[i])
      throw std::invalid_argument("parameter name mismatch at index " + std::to_string(i) + " in " + dir);
    const auto shape = rec["shape"].get<std::vector<int64_t>>();
    if (shape != tensors[i]->shape)
      throw std::invalid_argument("parameter shape mismatch for " + names[i] + " in " + dir);
    bin.seekg(static_cast<std::streamoff>(rec["offset"].get<uint64_t>()));
    bin.read(reinterpret_cast<char*>(tensors[i]->data.data()),
             static_cast<std::streamsize>(tensors[i]->data.size() * sizeof(float)));
    if (!bin) throw std::runtime_error("short read from " + dir + "/params.bin");
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace wm::io
