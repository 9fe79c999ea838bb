#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadra/neuron.hpp"

namespace quadra {

struct HeadSpec {
  std::size_t in = 1;
  std::size_t classes = 10;

  bool operator==(const HeadSpec&) const = default;
};

struct TrainSpec {
  std::size_t epochs = 1;
  std::size_t batch = 64;
  double lr = 0.1;
  std::uint64_t seed = 0;
  std::string dataset = "mnist";

  bool operator==(const TrainSpec&) const = default;
};

/// Line-oriented model description:
///
///   model <name>
///   layer <fc|conv|dwconv> family=<tag> in= out= k= s= p= bn=<0|1> act=<none|relu>
///   head fc in= classes=
///   train epochs= batch= lr= seed= dataset=<mnist|cifar10>
///
/// An fc layer (or the head) after a conv layer sees the flattened C·H·W map.
struct ModelConfig {
  std::string name;
  std::vector<QuadraticLayerSpec> layers;
  HeadSpec head;
  TrainSpec train;

  bool operator==(const ModelConfig&) const = default;
};

/// Per-sample input shape: mnist 1×28×28, cifar10 3×32×32, toy2d 2.
Shape dataset_input_shape(const std::string& dataset);

/// Per-sample shape entering each layer (index layers.size() is the head input,
/// already flattened). Throws ConfigError naming the two layers that disagree.
std::vector<Shape> chain_shapes(const ModelConfig& cfg);
void validate_config(const ModelConfig& cfg);

/// Throws ParseError carrying the 1-based line number.
ModelConfig parse_config(const std::string& text);
std::string serialize_config(const ModelConfig& cfg);

/// File helpers; I/O failures raise IoError.
ModelConfig load_config(const std::string& path);
void save_config(const ModelConfig& cfg, const std::string& path);

std::string format_double(double v);

}  // namespace quadra
