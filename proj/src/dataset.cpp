#include "quadra/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "quadra/error.hpp"

namespace quadra {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void need(const std::string& file, const std::vector<std::uint8_t>& b, std::size_t end) {
  if (b.size() < end) throw IngestionError(file, b.size(), "truncated; expected " +
                                           std::to_string(end) + " bytes");
}

void expect_magic(const std::string& file, const std::vector<std::uint8_t>& b,
                  std::uint32_t magic) {
  for (std::size_t i = 0; i < 4 && i < b.size(); ++i) {
    const auto want = static_cast<std::uint8_t>(magic >> (8 * (3 - i)));
    if (b[i] != want) throw IngestionError(file, i, "bad magic number (expected " +
                                                        std::to_string(magic) + ")");
  }
  need(file, b, 4);
}

void expect_dim(const std::string& file, const std::vector<std::uint8_t>& b, std::size_t off,
                std::uint32_t want, const char* what) {
  const std::uint32_t got = be32(b, off);
  if (got != want) {
    throw IngestionError(file, off, std::string(what) + " is " + std::to_string(got) +
                                        ", expected " + std::to_string(want));
  }
}

void expect_exact(const std::string& file, const std::vector<std::uint8_t>& b, std::size_t end) {
  need(file, b, end);
  if (b.size() > end) throw IngestionError(file, end, "unexpected trailing bytes");
}

void check_label(const std::string& file, std::uint8_t v, std::size_t off) {
  if (v > 9) throw IngestionError(file, off, "label " + std::to_string(v) + " is not in 0..9");
}

}  // namespace

RawImages read_mnist(const std::string& dir, const std::string& split) {
  std::string prefix;
  if (split == "train") {
    prefix = "train";
  } else if (split == "test") {
    prefix = "t10k";
  } else {
    throw InputError("cli", "split must be train or test, got '" + split + "'");
  }
  const std::string img_name = prefix + "-images-idx3-ubyte";
  const std::string lbl_name = prefix + "-labels-idx1-ubyte";
  const auto img = read_bytes((fs::path(dir) / img_name).string());
  const auto lbl = read_bytes((fs::path(dir) / lbl_name).string());

  expect_magic(img_name, img, 0x00000803);
  need(img_name, img, 16);
  const std::uint32_t n = be32(img, 4);
  expect_dim(img_name, img, 8, 28, "row count");
  expect_dim(img_name, img, 12, 28, "column count");
  expect_exact(img_name, img, 16 + std::size_t{n} * 784);

  expect_magic(lbl_name, lbl, 0x00000801);
  need(lbl_name, lbl, 8);
  expect_dim(lbl_name, lbl, 4, n, "label count");
  expect_exact(lbl_name, lbl, 8 + std::size_t{n});

  RawImages raw;
  raw.id = "mnist";
  raw.split = split;
  raw.n = n;
  raw.c = 1;
  raw.h = raw.w = 28;
  raw.pixels.assign(img.begin() + 16, img.end());
  raw.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    check_label(lbl_name, lbl[8 + i], 8 + i);
    raw.labels[i] = lbl[8 + i];
  }
  raw.files = {img_name, lbl_name};
  return raw;
}

RawImages read_cifar10(const std::string& dir, const std::string& split) {
  std::vector<std::string> names;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else if (split == "test") {
    names.push_back("test_batch.bin");
  } else {
    throw InputError("cli", "split must be train or test, got '" + split + "'");
  }
  fs::path base(dir);
  if (!fs::exists(base / names[0]) && fs::exists(base / "cifar-10-batches-bin" / names[0])) {
    base /= "cifar-10-batches-bin";
  }
  constexpr std::size_t kRecord = 3073, kPerFile = 10000;
  RawImages raw;
  raw.id = "cifar10";
  raw.split = split;
  raw.c = 3;
  raw.h = raw.w = 32;
  raw.n = kPerFile * names.size();
  raw.pixels.reserve(raw.n * 3072);
  raw.labels.reserve(raw.n);
  for (const auto& name : names) {
    const auto b = read_bytes((base / name).string());
    expect_exact(name, b, kRecord * kPerFile);
    for (std::size_t r = 0; r < kPerFile; ++r) {
      const std::size_t off = r * kRecord;
      check_label(name, b[off], off);
      raw.labels.push_back(b[off]);
      raw.pixels.insert(raw.pixels.end(), b.begin() + off + 1, b.begin() + off + kRecord);
    }
    raw.files.push_back(name);
  }
  return raw;
}

Standardization channel_stats(const RawImages& raw) {
  Standardization s;
  const std::size_t plane = raw.h * raw.w;
  for (std::size_t c = 0; c < raw.c; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < raw.n; ++i) {
      const std::uint8_t* p = raw.pixels.data() + (i * raw.c + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double count = static_cast<double>(raw.n * plane);
    const double mean = count > 0 ? sum / count : 0.0;
    const double var = count > 0 ? std::max(sq / count - mean * mean, 0.0) : 0.0;
    s.mean.push_back(mean);
    s.std.push_back(var > 0 ? std::sqrt(var) : 1.0);
  }
  return s;
}

Dataset standardize(const RawImages& raw, const Standardization& norm) {
  if (norm.mean.size() != raw.c) throw InputError("cli", "standardization channel count mismatch");
  const std::size_t plane = raw.h * raw.w;
  std::vector<double> v(raw.pixels.size());
  for (std::size_t i = 0; i < raw.n * raw.c; ++i) {
    const std::size_t c = i % raw.c;
    for (std::size_t k = 0; k < plane; ++k) {
      v[i * plane + k] = (raw.pixels[i * plane + k] / 255.0 - norm.mean[c]) / norm.std[c];
    }
  }
  Dataset ds;
  ds.id = raw.id;
  ds.split = raw.split;
  ds.images = Tensor({raw.n, raw.c, raw.h, raw.w}, std::move(v));
  ds.labels = raw.labels;
  return ds;
}

namespace {

DatasetPair finish(RawImages train, RawImages test, const std::string& dir) {
  DatasetPair p;
  p.norm = channel_stats(train);
  p.train = standardize(train, p.norm);
  p.test = standardize(test, p.norm);
  for (const auto* r : {&train, &test}) {
    for (const auto& f : r->files) {
      fs::path path = fs::path(dir) / f;
      if (!fs::exists(path)) path = fs::path(dir) / "cifar-10-batches-bin" / f;
      p.checksums.emplace_back(f, file_checksum(path.string()));
    }
  }
  return p;
}

}  // namespace

DatasetPair load_mnist(const std::string& dir) {
  return finish(read_mnist(dir, "train"), read_mnist(dir, "test"), dir);
}

DatasetPair load_cifar10(const std::string& dir) {
  return finish(read_cifar10(dir, "train"), read_cifar10(dir, "test"), dir);
}

DatasetPair load_dataset(const std::string& id, const std::string& dir) {
  if (id == "mnist") return load_mnist(dir);
  if (id == "cifar10") return load_cifar10(dir);
  throw ConfigError("unknown dataset '" + id + "'");
}

Tensor gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t row = ds.images.size() / ds.size();
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  std::vector<double> v(indices.size() * row);
  const double* src = ds.images.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw InputError("trainer", "sample index out of range");
    std::copy(src + indices[i] * row, src + (indices[i] + 1) * row, v.begin() + i * row);
  }
  return Tensor::unchecked(std::move(shape), std::move(v));
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.labels.at(i));
  return out;
}

Dataset head(const Dataset& ds, std::size_t count) {
  count = std::min(count, ds.size());
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  Dataset out;
  out.id = ds.id;
  out.split = ds.split;
  out.images = gather_images(ds, idx);
  out.labels = gather_labels(ds, idx);
  return out;
}

Dataset make_toy_2d(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v;
  Dataset ds;
  ds.id = "toy2d";
  ds.split = "train";
  while (ds.labels.size() < n) {
    const double a = u(rng), b = u(rng);
    const double s = a + 0.5 * b;
    if (std::abs(s) < 0.1) continue;
    v.push_back(a);
    v.push_back(b);
    ds.labels.push_back(s > 0 ? 1 : 0);
  }
  ds.images = Tensor({n, 2}, std::move(v));
  return ds;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t file_checksum(const std::string& path) { return fnv1a64(read_bytes(path)); }

}  // namespace quadra
