#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "quadra/dataset.hpp"
#include "quadra/error.hpp"
#include "support/ingest_util.hpp"

using namespace quadra;
using namespace quadra::testing;

namespace {

const fs::path kMnist = QUADRA_MNIST_DIR;

bool have_mnist() { return fs::exists(kMnist / "t10k-images-idx3-ubyte"); }

#define REQUIRE_MNIST() \
  if (!have_mnist()) GTEST_SKIP() << "MNIST not found in " << kMnist

void expect_matches_reference(const RawImages& raw, const std::vector<RefRecord>& ref,
                              std::size_t first = 0) {
  const std::size_t rec = raw.c * raw.h * raw.w;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ASSERT_EQ(raw.labels[first + i], ref[i].label) << "record " << first + i;
    const std::vector<std::uint8_t> got(raw.pixels.begin() + (first + i) * rec,
                                        raw.pixels.begin() + (first + i + 1) * rec);
    ASSERT_EQ(got, ref[i].pixels) << "record " << first + i;
  }
}

// Copies the MNIST test split, applies `mutate` to one of its files and
// returns the offset the reader reports.
long long mnist_mutation(const std::string& which,
                         const std::function<void(std::vector<std::uint8_t>&)>& mutate,
                         std::string* file = nullptr) {
  TempDir dir("mnist-mut");
  for (const char* f : {"t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"}) {
    fs::copy_file(kMnist / f, dir.path() / f);
  }
  auto bytes = slurp(dir.path() / which);
  mutate(bytes);
  spill(dir.path() / which, bytes);
  return ingestion_offset([&] { read_mnist(dir.str(), "test"); }, file);
}

const std::string kImages = "t10k-images-idx3-ubyte";
const std::string kLabels = "t10k-labels-idx1-ubyte";

}  // namespace

TEST(Mnist, SplitSizes) {
  REQUIRE_MNIST();
  const auto train = read_mnist(kMnist.string(), "train");
  const auto test = read_mnist(kMnist.string(), "test");
  EXPECT_EQ(train.n, 60000u);
  EXPECT_EQ(test.n, 10000u);
  EXPECT_EQ(train.pixels.size(), 60000u * 784);
  EXPECT_EQ(std::set<int>(test.labels.begin(), test.labels.end()).size(), 10u);
  EXPECT_EQ(test.c, 1u);
  EXPECT_EQ(test.h, 28u);
}

TEST(Mnist, FirstRecordsMatchReferenceParser) {
  REQUIRE_MNIST();
  for (auto [split, prefix] : {std::pair{"train", "train"}, std::pair{"test", "t10k"}}) {
    const auto raw = read_mnist(kMnist.string(), split);
    const auto ref = reference_mnist(kMnist, prefix, 100);
    ASSERT_EQ(ref.size(), 100u);
    expect_matches_reference(raw, ref);
  }
}

TEST(Mnist, MutationsReportExactOffsets) {
  REQUIRE_MNIST();
  std::string file;
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b[3] = 0x04; }, &file), 3);
  EXPECT_EQ(file, kImages);
  EXPECT_EQ(mnist_mutation(kLabels, [](auto& b) { b[2] = 0x09; }, &file), 2);
  EXPECT_EQ(file, kLabels);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b.resize(16 + 784 * 5 + 10); }), 16 + 784 * 5 + 10);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b.resize(10); }), 10);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b.resize(2); }), 2);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b.push_back(0); }), 16 + 10000 * 784);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b[11] = 27; }), 8);
  EXPECT_EQ(mnist_mutation(kImages, [](auto& b) { b[15] = 29; }), 12);
  EXPECT_EQ(mnist_mutation(kLabels, [](auto& b) { b[8 + 42] = 10; }), 8 + 42);
  EXPECT_EQ(mnist_mutation(kLabels, [](auto& b) { b[7] = 0x0f; }), 4);
  EXPECT_EQ(mnist_mutation(kLabels, [](auto& b) { b.pop_back(); }), 8 + 9999);
  // Untouched copy loads.
  EXPECT_EQ(mnist_mutation(kImages, [](auto&) {}), -1);
}

TEST(Mnist, StandardizationFromTrainSplit) {
  REQUIRE_MNIST();
  const auto p = load_mnist(kMnist.string());
  ASSERT_EQ(p.norm.mean.size(), 1u);
  EXPECT_NEAR(p.norm.mean[0], 0.1307, 1e-4);
  EXPECT_NEAR(p.norm.std[0], 0.3081, 1e-4);
  double sum = 0, sq = 0;
  for (double v : p.train.images.data()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(p.train.images.size());
  EXPECT_NEAR(sum / n, 0.0, 1e-9);
  EXPECT_NEAR(sq / n, 1.0, 1e-9);
  const auto raw = read_mnist(kMnist.string(), "test");
  for (std::size_t i : {0ul, 300ul, 784ul * 10 + 400}) {
    EXPECT_DOUBLE_EQ(p.test.images[i], (raw.pixels[i] / 255.0 - p.norm.mean[0]) / p.norm.std[0]);
  }
  ASSERT_EQ(p.checksums.size(), 4u);
  EXPECT_EQ(p.checksums[0].first, "train-images-idx3-ubyte");
  EXPECT_EQ(p.checksums[3].second, fnv1a64(slurp(kMnist / "t10k-labels-idx1-ubyte")));
}

TEST(Mnist, MissingFilesAndBadSplit) {
  EXPECT_THROW(read_mnist("/nonexistent", "test"), IoError);
  EXPECT_THROW(read_mnist(kMnist.string(), "valid"), InputError);
  EXPECT_THROW(load_dataset("svhn", kMnist.string()), ConfigError);
}

class Cifar : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cifar");
    write_synthetic_cifar(dir_->path(), 17);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  // Copy of the synthetic set with one file mutated.
  long long mutation(const std::string& which,
                     const std::function<void(std::vector<std::uint8_t>&)>& mutate,
                     const std::string& split, std::string* file = nullptr) {
    TempDir d("cifar-mut");
    for (const auto& e : fs::directory_iterator(dir_->path())) {
      fs::create_symlink(e.path(), d.path() / e.path().filename());
    }
    fs::remove(d.path() / which);
    auto bytes = slurp(dir_->path() / which);
    mutate(bytes);
    spill(d.path() / which, bytes);
    return ingestion_offset([&] { read_cifar10(d.str(), split); }, file);
  }

  static TempDir* dir_;
};

TempDir* Cifar::dir_ = nullptr;

TEST_F(Cifar, FirstRecordsMatchReferenceParser) {
  const auto train = read_cifar10(dir_->str(), "train");
  const auto test = read_cifar10(dir_->str(), "test");
  EXPECT_EQ(train.n, 50000u);
  EXPECT_EQ(test.n, 10000u);
  expect_matches_reference(train, reference_cifar(dir_->path() / "data_batch_1.bin", 100));
  expect_matches_reference(test, reference_cifar(dir_->path() / "test_batch.bin", 100));
  // Batches are concatenated in order.
  expect_matches_reference(train, reference_cifar(dir_->path() / "data_batch_2.bin", 100), 10000);
  expect_matches_reference(train, reference_cifar(dir_->path() / "data_batch_5.bin", 100), 40000);
}

TEST_F(Cifar, AcceptsExtractedSubdirectory) {
  TempDir d("cifar-sub");
  fs::create_directory(d.path() / "cifar-10-batches-bin");
  for (const auto& e : fs::directory_iterator(dir_->path())) {
    fs::create_symlink(e.path(), d.path() / "cifar-10-batches-bin" / e.path().filename());
  }
  const auto raw = read_cifar10(d.str(), "test");
  expect_matches_reference(raw, reference_cifar(dir_->path() / "test_batch.bin", 100));
}

TEST_F(Cifar, MutationsReportExactOffsets) {
  std::string file;
  EXPECT_EQ(mutation("data_batch_3.bin", [](auto& b) { b[7 * 3073] = 10; }, "train", &file), 7 * 3073);
  EXPECT_EQ(file, "data_batch_3.bin");
  EXPECT_EQ(mutation("test_batch.bin", [](auto& b) { b[9999 * 3073] = 255; }, "test"), 9999 * 3073);
  EXPECT_EQ(mutation("test_batch.bin", [](auto& b) { b.resize(b.size() - 1); }, "test"), 30730000 - 1);
  EXPECT_EQ(mutation("data_batch_5.bin", [](auto& b) { b.push_back(1); }, "train", &file), 30730000);
  EXPECT_EQ(file, "data_batch_5.bin");
  EXPECT_EQ(mutation("test_batch.bin", [](auto& b) { b.clear(); }, "test"), 0);
  // A pixel byte may take any value.
  EXPECT_EQ(mutation("test_batch.bin", [](auto& b) { b[1] = 255; }, "test"), -1);
}

TEST_F(Cifar, ChannelStatisticsAndChecksums) {
  const auto p = load_cifar10(dir_->str());
  ASSERT_EQ(p.norm.mean.size(), 3u);
  const auto raw = read_cifar10(dir_->str(), "train");
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < raw.n; i += 1) {
      for (std::size_t k = 0; k < 1024; ++k) {
        const double v = raw.pixels[(i * 3 + c) * 1024 + k] / 255.0;
        sum += v;
        sq += v * v;
        ++count;
      }
    }
    const double mean = sum / count;
    EXPECT_NEAR(p.norm.mean[c], mean, 1e-12);
    EXPECT_NEAR(p.norm.std[c], std::sqrt(sq / count - mean * mean), 1e-12);
  }
  ASSERT_EQ(p.checksums.size(), 6u);
  EXPECT_EQ(p.checksums[5].first, "test_batch.bin");
  EXPECT_EQ(p.checksums[5].second, file_checksum((dir_->path() / "test_batch.bin").string()));
}

TEST(Checksum, KnownVectors) {
  auto h = [](const std::string& s) {
    return fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  };
  EXPECT_EQ(h(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(h("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(h("foobar"), 0x85944171f73967e8ull);
}

TEST(Toy2d, SeparableWithMargin) {
  const auto ds = make_toy_2d(500, 3);
  ASSERT_EQ(ds.size(), 500u);
  EXPECT_EQ(ds.images.shape(), (Shape{500, 2}));
  int ones = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double s = ds.images[2 * i] + 0.5 * ds.images[2 * i + 1];
    EXPECT_GE(std::abs(s), 0.1);
    EXPECT_EQ(ds.labels[i], s > 0 ? 1 : 0);
    ones += ds.labels[i];
  }
  EXPECT_GT(ones, 150);
  EXPECT_LT(ones, 350);
  EXPECT_EQ(make_toy_2d(500, 3).images.to_vector(), ds.images.to_vector());
}

TEST(Batches, GatherAndHead) {
  const auto ds = make_toy_2d(10, 1);
  const std::vector<std::size_t> idx = {9, 0, 9};
  const auto x = gather_images(ds, idx);
  EXPECT_EQ(x.shape(), (Shape{3, 2}));
  EXPECT_EQ(x[0], ds.images[18]);
  EXPECT_EQ(x[3], ds.images[1]);
  EXPECT_EQ(gather_labels(ds, idx), (std::vector<int>{ds.labels[9], ds.labels[0], ds.labels[9]}));
  const std::vector<std::size_t> bad = {10};
  EXPECT_THROW(gather_images(ds, bad), InputError);
  EXPECT_EQ(head(ds, 4).size(), 4u);
  EXPECT_EQ(head(ds, 40).size(), 10u);
}
