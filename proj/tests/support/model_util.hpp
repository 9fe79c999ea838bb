#pragma once

#include <random>
#include <string>

#include "quadra/config.hpp"
#include "quadra/dataset.hpp"
#include "support/test_util.hpp"

namespace quadra::testing {

inline std::string source_path(const std::string& rel) {
  return std::string(QUADRA_SOURCE_DIR) + "/" + rel;
}

inline QuadraticLayerSpec fc(NeuronFamily f, std::size_t in, std::size_t out, bool bn = false,
                             bool relu = false) {
  QuadraticLayerSpec s;
  s.family = f;
  s.kind = LayerKind::FC;
  s.in = in;
  s.out = out;
  s.batchnorm = bn;
  s.activation = relu ? Activation::Relu : Activation::None;
  return s;
}

inline QuadraticLayerSpec conv(NeuronFamily f, std::size_t in, std::size_t out, std::size_t k,
                               std::size_t stride, std::size_t pad, bool bn = false,
                               bool relu = false, LayerKind kind = LayerKind::Conv) {
  QuadraticLayerSpec s = fc(f, in, out, bn, relu);
  s.kind = kind;
  s.kernel = k;
  s.stride = stride;
  s.pad = pad;
  return s;
}

/// Config whose head is sized from the chain.
inline ModelConfig make_config(std::vector<QuadraticLayerSpec> layers, const std::string& dataset,
                               std::size_t classes = 10) {
  ModelConfig cfg;
  cfg.name = "test";
  cfg.layers = std::move(layers);
  cfg.train.dataset = dataset;
  cfg.head.classes = classes;
  cfg.head.in = 1;
  Shape cur = dataset_input_shape(dataset);
  for (const auto& s : cfg.layers) {
    if (s.kind == LayerKind::FC) {
      cur = {s.out};
    } else {
      Shape y = output_shape(s, {1, cur[0], cur[1], cur[2]});
      cur = {y[1], y[2], y[3]};
    }
  }
  cfg.head.in = shape_numel(cur);
  validate_config(cfg);
  return cfg;
}

/// Random images of the dataset's shape with uniform labels.
inline Dataset random_dataset(const std::string& id, std::size_t n, std::uint64_t seed,
                              std::size_t classes = 10) {
  std::mt19937_64 rng(seed);
  Shape s{n};
  for (auto d : dataset_input_shape(id)) s.push_back(d);
  Dataset ds;
  ds.id = id;
  ds.split = "train";
  ds.images = random_tensor(rng, s);
  std::uniform_int_distribution<int> lab(0, static_cast<int>(classes) - 1);
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(lab(rng));
  return ds;
}

}  // namespace quadra::testing
