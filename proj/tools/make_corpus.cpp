// Writes a deterministic synthetic text corpus plus a manifest the other
// tools can consume.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "wm/textgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic text corpus + manifest"};
  std::string out_dir = "corpus";
  uint64_t bytes = 2 * 1024 * 1024;
  uint64_t seed = 0;
  int files = 4;
  double train_frac = 0.8, val_frac = 0.1;
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--bytes", bytes, "total bytes across all files");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--files", files, "number of files to split the text into");
  app.add_option("--train-frac", train_frac, "train split fraction");
  app.add_option("--val-frac", val_frac, "val split fraction");
  CLI11_PARSE(app, argc, argv);

  std::filesystem::create_directories(out_dir);
  nlohmann::json manifest;
  manifest["files"] = nlohmann::json::array();
  const std::string text = wm::synth_text(bytes, seed);  // one stream, one lexicon
  const uint64_t per_file = bytes / static_cast<uint64_t>(files);
  for (int i = 0; i < files; ++i) {
    const std::string path = out_dir + "/part" + std::to_string(i) + ".txt";
    std::ofstream f(path, std::ios::binary);
    f << text.substr(static_cast<size_t>(i) * per_file, per_file);
    manifest["files"].push_back(path);
  }
  manifest["splits"] = {{"train", train_frac}, {"val", val_frac}, {"heldout", 1.0 - train_frac - val_frac}};
  manifest["seed"] = seed;
  const std::string mpath = out_dir + "/manifest.json";
  std::ofstream(mpath) << manifest.dump(2) << "\n";
  std::printf("wrote %d files (%llu bytes) and %s\n", files, static_cast<unsigned long long>(per_file * files),
              mpath.c_str());
  return 0;
}
