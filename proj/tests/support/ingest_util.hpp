#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "quadra/error.hpp"

namespace quadra::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("quadra-" + tag + "-" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

inline std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spill(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// One decoded record: label plus raw bytes in plane order.
struct RefRecord {
  int label = -1;
  std::vector<std::uint8_t> pixels;
};

// Reads records straight from the stream, one field at a time.
inline std::vector<RefRecord> reference_mnist(const fs::path& dir, const std::string& prefix,
                                              std::size_t count) {
  std::ifstream img(dir / (prefix + "-images-idx3-ubyte"), std::ios::binary);
  std::ifstream lbl(dir / (prefix + "-labels-idx1-ubyte"), std::ios::binary);
  auto u32 = [](std::ifstream& s) {
    unsigned char b[4];
    s.read(reinterpret_cast<char*>(b), 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  };
  if (u32(img) != 2051 || u32(lbl) != 2049) return {};
  const std::uint32_t n = u32(img);
  const std::uint32_t rows = u32(img), cols = u32(img);
  if (u32(lbl) != n) return {};
  std::vector<RefRecord> out;
  for (std::size_t i = 0; i < count && i < n; ++i) {
    RefRecord r;
    r.label = lbl.get();
    r.pixels.resize(std::size_t{rows} * cols);
    img.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<RefRecord> reference_cifar(const fs::path& file, std::size_t count) {
  std::ifstream in(file, std::ios::binary);
  std::vector<RefRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    RefRecord r;
    r.label = in.get();
    r.pixels.resize(3072);
    in.read(reinterpret_cast<char*>(r.pixels.data()), 3072);
    if (!in) break;
    out.push_back(std::move(r));
  }
  return out;
}

/// Writes the six CIFAR-10 batch files (10000 records each) with random
/// pixels and labels.
inline void write_synthetic_cifar(const fs::path& dir, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> names = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                    "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"};
  std::vector<std::uint8_t> buf(10000 * 3073);
  for (const auto& name : names) {
    for (std::size_t r = 0; r < 10000; ++r) {
      buf[r * 3073] = static_cast<std::uint8_t>(rng() % 10);
      for (std::size_t k = 1; k < 3073; k += 8) {
        std::uint64_t w = rng();
        for (std::size_t j = 0; j < 8 && k + j < 3073; ++j, w >>= 8) {
          buf[r * 3073 + k + j] = static_cast<std::uint8_t>(w);
        }
      }
    }
    spill(dir / name, buf);
  }
}

/// Runs `fn` and returns the reported offset, or -1 when nothing was thrown.
inline long long ingestion_offset(const std::function<void()>& fn, std::string* file = nullptr) {
  try {
    fn();
  } catch (const IngestionError& e) {
    if (file) *file = e.file();
    return static_cast<long long>(e.offset());
  }
  return -1;
}

}  // namespace quadra::testing
