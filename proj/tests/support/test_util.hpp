#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vwsd/dataset.hpp"

namespace vwsd::testutil {

// Self-deleting unique temp directory.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    dir_ = std::filesystem::temp_directory_path() /
           ("vwsd_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  const std::filesystem::path& path() const { return dir_; }
  std::filesystem::path operator/(const std::string& name) const { return dir_ / name; }

 private:
  std::filesystem::path dir_;
};

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

// A well-formed data file with n samples, n distinct images per sample, plus
// matching gold (first candidate) and the image blobs.
struct FixtureDataset {
  std::filesystem::path data;
  std::filesystem::path gold;
  std::filesystem::path images;
};

inline FixtureDataset write_fixture_dataset(const std::filesystem::path& root, int n,
                                            bool with_gold = true) {
  std::string data;
  std::string gold;
  std::filesystem::create_directories(root / "images");
  for (int i = 0; i < n; ++i) {
    const std::string word = "word" + std::to_string(i);
    data += word + "\t" + word + " ctx" + std::to_string(i);
    for (int j = 0; j < kCandidatesPerSample; ++j) {
      const std::string id = "img_" + std::to_string(i) + "_" + std::to_string(j) + ".jpg";
      data += "\t" + id;
      write_file(root / "images" / id, "bytes:" + id);
    }
    data += "\n";
    gold += "img_" + std::to_string(i) + "_0.jpg\n";
  }
  FixtureDataset fixture;
  fixture.data = root / "data.tsv";
  fixture.gold = root / "gold.txt";
  fixture.images = root / "images";
  write_file(fixture.data, data);
  if (with_gold) write_file(fixture.gold, gold);
  return fixture;
}

}  // namespace vwsd::testutil
