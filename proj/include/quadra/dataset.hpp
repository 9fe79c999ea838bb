#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "quadra/tensor.hpp"

namespace quadra {

/// Undecoded samples as stored on disk: N×C×H×W bytes in plane order.
struct RawImages {
  std::string id;     // mnist | cifar10
  std::string split;  // train | test
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::vector<std::string> files;  // files read, in order
};

/// IDX files: {train,t10k}-{images-idx3,labels-idx1}-ubyte.
RawImages read_mnist(const std::string& dir, const std::string& split);
/// Binary batches data_batch_{1..5}.bin / test_batch.bin, either in `dir`
/// or in `dir`/cifar-10-batches-bin.
RawImages read_cifar10(const std::string& dir, const std::string& split);

struct Standardization {
  std::vector<double> mean;  // per channel, on the [0,1] scale
  std::vector<double> std;
};

/// Population mean/std per channel after scaling to [0,1].
Standardization channel_stats(const RawImages& raw);

struct Dataset {
  std::string id;
  std::string split;
  Tensor images;  // N×C×H×W (or N×F for flat toy data)
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

Dataset standardize(const RawImages& raw, const Standardization& norm);

struct DatasetPair {
  Dataset train, test;
  Standardization norm;
  std::vector<std::pair<std::string, std::uint64_t>> checksums;  // file name, FNV-1a 64
};

DatasetPair load_mnist(const std::string& dir);
DatasetPair load_cifar10(const std::string& dir);
DatasetPair load_dataset(const std::string& id, const std::string& dir);

/// Rows `indices` of `ds` as a batch tensor plus labels.
Tensor gather_images(const Dataset& ds, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);
/// First `count` samples (all if count ≥ size).
Dataset head(const Dataset& ds, std::size_t count);

/// Two linearly separable classes in the plane (margin 0.1 around x0 + 0.5·x1 = 0).
Dataset make_toy_2d(std::size_t n, std::uint64_t seed);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t file_checksum(const std::string& path);

}  // namespace quadra
