#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "quadra/error.hpp"
#include "quadra/trainer.hpp"

namespace quadra {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

std::vector<NamedTensor> checkpoint_tensors(const ModelParams& p) {
  auto all = named_parameters(p);
  auto buf = named_buffers(p);
  all.insert(all.end(), buf.begin(), buf.end());
  return all;
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

}  // namespace

void save_checkpoint(const ModelConfig& cfg, const ModelParams& params, const std::string& path) {
  std::string blob;
  json tensors = json::array();
  for (const auto& t : checkpoint_tensors(params)) {
    tensors.push_back({{"layer", t.layer}, {"role", t.role}, {"shape", t.value.shape()},
                       {"offset", blob.size()}});
    put_u64(blob, t.value.bytes());
    blob.append(reinterpret_cast<const char*>(t.value.ptr()), t.value.bytes());
  }
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(blob.data()),
                                            blob.size());
  json manifest = {{"format", "quadra-checkpoint"},
                   {"version", 1},
                   {"config", serialize_config(cfg)},
                   {"blob_bytes", blob.size()},
                   {"blob_fnv1a64", fnv1a64(bytes)},
                   {"tensors", tensors}};
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path, "cannot open for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError(path, "write failed");
  }
  const std::string mpath = path + ".json";
  std::ofstream out(mpath, std::ios::binary);
  if (!out) throw IoError(mpath, "cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(mpath, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::vector<std::uint8_t> blob;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, "cannot open checkpoint");
    blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const std::string mpath = path + ".json";
  json manifest;
  {
    std::ifstream in(mpath, std::ios::binary);
    if (!in) throw IoError(mpath, "cannot open manifest");
    try {
      manifest = json::parse(in);
    } catch (const json::exception& e) {
      throw IntegrityError("trainer", mpath + ": malformed manifest: " + e.what());
    }
  }
  auto fail = [&](const std::string& what) { return IntegrityError("trainer", path + ": " + what); };
  Checkpoint ck;
  std::vector<NamedTensor> expected;
  try {
    if (manifest.at("format") != "quadra-checkpoint") throw fail("not a checkpoint manifest");
    if (manifest.at("blob_bytes").get<std::uint64_t>() != blob.size()) {
      throw fail("blob is " + std::to_string(blob.size()) + " bytes, manifest says " +
                 manifest.at("blob_bytes").dump());
    }
    if (manifest.at("blob_fnv1a64").get<std::uint64_t>() != fnv1a64(blob)) {
      throw fail("blob checksum does not match the manifest");
    }
    try {
      ck.cfg = parse_config(manifest.at("config").get<std::string>());
    } catch (const ParseError& e) {
      throw fail(std::string("embedded config: ") + e.what());
    }
    ck.params = init_model(ck.cfg, 0);
    expected = checkpoint_tensors(ck.params);
    const auto& list = manifest.at("tensors");
    if (list.size() != expected.size()) {
      throw fail("manifest lists " + std::to_string(list.size()) + " tensors, config needs " +
                 std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& e = list[i];
      auto& want = expected[i];
      const std::string name = want.layer + "." + want.role;
      if (e.at("layer") != want.layer || e.at("role") != want.role) {
        throw fail("tensor " + std::to_string(i) + " is " + e.at("layer").get<std::string>() + "." +
                   e.at("role").get<std::string>() + ", expected " + name);
      }
      if (e.at("shape").get<Shape>() != want.value.shape()) {
        throw fail(name + " has shape " + e.at("shape").dump() + ", config needs " +
                   shape_str(want.value.shape()));
      }
      const auto off = e.at("offset").get<std::uint64_t>();
      std::uint64_t len = 0;
      if (off + 8 > blob.size()) throw fail(name + " offset past the end of the blob");
      std::memcpy(&len, blob.data() + off, 8);
      if (len != want.value.bytes() || off + 8 + len > blob.size()) {
        throw fail(name + " length prefix does not match its shape");
      }
      std::vector<double> v(want.value.size());
      std::memcpy(v.data(), blob.data() + off + 8, len);
      want.value = Tensor(want.value.shape(), std::move(v));
    }
  } catch (const json::exception& e) {
    throw fail(std::string("malformed manifest: ") + e.what());
  }
  const std::size_t n_params = named_parameters(ck.params).size();
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < n_params; ++i) values.push_back(expected[i].value);
  assign_parameters(ck.params, values);
  std::size_t k = n_params;
  for (auto& st : ck.params.layers) {
    if (st.gamma.empty()) continue;
    st.running_mean = expected[k++].value;
    st.running_var = expected[k++].value;
  }
  return ck;
}

}  // namespace quadra
