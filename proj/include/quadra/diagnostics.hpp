#pragma once

#include <string>
#include <vector>

#include "quadra/model.hpp"

namespace quadra {

inline constexpr double kNearZero = 1e-8;

struct GradientStats {
  std::size_t epoch = 0;
  std::string layer;
  std::string role;
  double mean = 0.0;
  double std = 0.0;  // population
  double max_abs = 0.0;
  double l2 = 0.0;
  double near_zero = 0.0;  // fraction of entries with |g| < kNearZero
};

GradientStats gradient_stats(const Tensor& g, std::size_t epoch, const std::string& layer,
                             const std::string& role);
std::vector<GradientStats> collect_gradient_stats(const std::vector<NamedTensor>& grads,
                                                  std::size_t epoch);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable gradient_stats_table(const std::vector<GradientStats>& stats);

/// RFC 4180: CRLF line ends; fields with comma, quote, CR or LF are quoted.
std::string to_csv(const CsvTable& table);
CsvTable parse_csv(const std::string& text);
void emit_csv(const CsvTable& table, const std::string& path);

struct AttentionMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0,1]
  std::size_t layer = 0;
  std::size_t image = 0;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Output of layer `layer` (after batch-norm and activation) for one image,
/// eval mode. `image` is C×H×W or 1×C×H×W.
Tensor layer_activation(const ModelConfig& cfg, const ModelParams& params, const Tensor& image,
                        std::size_t layer);

/// Channel mean of |activation| at a conv layer, resized to the input H×W and
/// scaled so its maximum is 1 (an all-zero map is left at zero).
AttentionMap activation_attention(const ModelConfig& cfg, const ModelParams& params,
                                  const Tensor& image, std::size_t layer, std::size_t image_id);

/// Half-pixel-centre bilinear resize of an h×w grid.
std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t h, std::size_t w,
                                    std::size_t out_h, std::size_t out_w);
void normalize_max(AttentionMap& map);

/// "P2" ASCII graymap, maxval 255, pixel = round(value·255).
std::string to_pgm(const AttentionMap& map);
AttentionMap parse_pgm(const std::string& text);
void emit_pgm(const AttentionMap& map, const std::string& path);

}  // namespace quadra
