#include "quadra/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "quadra/error.hpp"

namespace quadra {

GradientStats gradient_stats(const Tensor& g, std::size_t epoch, const std::string& layer,
                             const std::string& role) {
  GradientStats s;
  s.epoch = epoch;
  s.layer = layer;
  s.role = role;
  const auto d = g.data();
  if (d.empty()) return s;
  double sum = 0.0, sq = 0.0;
  std::size_t small = 0;
  for (double v : d) {
    sum += v;
    sq += v * v;
    s.max_abs = std::max(s.max_abs, std::abs(v));
    if (std::abs(v) < kNearZero) ++small;
  }
  const double n = static_cast<double>(d.size());
  s.mean = sum / n;
  double var = 0.0;
  for (double v : d) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  s.l2 = std::sqrt(sq);
  s.near_zero = static_cast<double>(small) / n;
  return s;
}

std::vector<GradientStats> collect_gradient_stats(const std::vector<NamedTensor>& grads,
                                                  std::size_t epoch) {
  std::vector<GradientStats> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(gradient_stats(g.value, epoch, g.layer, g.role));
  return out;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

CsvTable gradient_stats_table(const std::vector<GradientStats>& stats) {
  CsvTable t;
  t.header = {"epoch", "layer", "role", "mean", "std", "max_abs", "l2", "near_zero_fraction"};
  for (const auto& s : stats) {
    t.rows.push_back({std::to_string(s.epoch), s.layer, s.role, num(s.mean), num(s.std),
                      num(s.max_abs), num(s.l2), num(s.near_zero)});
  }
  return t;
}

namespace {

std::string csv_field(const std::string& f) {
  if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void csv_row(std::ostringstream& os, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) os << ',';
    os << csv_field(row[i]);
  }
  os << "\r\n";
}

}  // namespace

std::string to_csv(const CsvTable& table) {
  std::ostringstream os;
  csv_row(os, table.header);
  for (const auto& r : table.rows) {
    if (r.size() != table.header.size()) {
      throw InputError("diagnostics", "CSV row width does not match the header");
    }
    csv_row(os, r);
  }
  return os.str();
}

CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw InputError("diagnostics", "unterminated quoted CSV field");
  if (any) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  CsvTable t;
  if (records.empty()) return t;
  t.header = std::move(records.front());
  t.rows.assign(std::make_move_iterator(records.begin() + 1), std::make_move_iterator(records.end()));
  return t;
}

namespace {

void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(path, "write failed");
}

}  // namespace

void emit_csv(const CsvTable& table, const std::string& path) { write_text(to_csv(table), path); }

Tensor layer_activation(const ModelConfig& cfg, const ModelParams& params, const Tensor& image,
                        std::size_t layer) {
  if (layer >= cfg.layers.size()) {
    throw InputError("diagnostics", "layer index " + std::to_string(layer) + " out of range (" +
                                        std::to_string(cfg.layers.size()) + " layers)");
  }
  Tensor x = image;
  if (x.rank() == 3 || x.rank() == 1) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    x = x.reshape(s);
  }
  if (x.dim(0) != 1) throw InputError("diagnostics", "expected a single image");
  ModelConfig prefix = cfg;
  prefix.layers.resize(layer + 1);
  ModelParams p;
  p.layers.assign(params.layers.begin(), params.layers.begin() + static_cast<long>(layer) + 1);
  Tape tape(false);
  // The head is irrelevant here; give it a shape that fits the prefix.
  const Shape last = chain_shapes(cfg).at(layer + 1);
  prefix.head.in = shape_numel(last);
  p.head_w = Tensor::zeros({prefix.head.classes, prefix.head.in});
  p.head_b = Tensor::zeros({prefix.head.classes});
  auto rec = record_model(tape, prefix, p, x, BackpropMode::Auto, false);
  return tape.value(rec.layer_outputs.back());
}

std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t h, std::size_t w,
                                    std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& lo,
                  std::size_t& hi, double& frac) {
    double c = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(in - 1));
    lo = static_cast<std::size_t>(std::floor(c));
    hi = std::min(lo + 1, in - 1);
    frac = c - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, h, out_h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, w, out_w, x0, x1, fx);
      const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
      const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
      out[y * out_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

void normalize_max(AttentionMap& map) {
  double m = 0.0;
  for (double v : map.values) m = std::max(m, v);
  if (m <= 0.0) return;
  for (double& v : map.values) v /= m;
}

AttentionMap activation_attention(const ModelConfig& cfg, const ModelParams& params,
                                  const Tensor& image, std::size_t layer, std::size_t image_id) {
  if (layer < cfg.layers.size() && cfg.layers[layer].kind == LayerKind::FC) {
    throw InputError("diagnostics", "layer " + std::to_string(layer) + " is fc and has no spatial map");
  }
  const Tensor a = layer_activation(cfg, params, image, layer);
  const std::size_t c = a.dim(1), h = a.dim(2), w = a.dim(3);
  std::vector<double> mean(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < h * w; ++k) mean[k] += std::abs(a[ch * h * w + k]);
  }
  for (double& v : mean) v /= static_cast<double>(c);
  const Shape in = image.shape();
  AttentionMap map;
  map.height = in[in.size() - 2];
  map.width = in[in.size() - 1];
  map.values = resize_bilinear(mean, h, w, map.height, map.width);
  map.layer = layer;
  map.image = image_id;
  normalize_max(map);
  return map;
}

std::string to_pgm(const AttentionMap& map) {
  std::ostringstream os;
  os << "P2\n" << map.width << ' ' << map.height << "\n255\n";
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = std::clamp(map.at(y, x), 0.0, 1.0);
      os << (x ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

AttentionMap parse_pgm(const std::string& text) {
  std::istringstream is(text);
  std::string magic;
  is >> magic;
  if (magic != "P2") throw InputError("diagnostics", "not a P2 graymap");
  // Skip '#' comments between header tokens.
  auto next = [&]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] != '#') return tok;
      std::string rest;
      std::getline(is, rest);
    }
    throw InputError("diagnostics", "truncated graymap");
  };
  AttentionMap map;
  map.width = std::stoul(next());
  map.height = std::stoul(next());
  const double maxval = std::stod(next());
  if (maxval <= 0) throw InputError("diagnostics", "bad maxval");
  map.values.resize(map.width * map.height);
  for (auto& v : map.values) v = std::stod(next()) / maxval;
  return map;
}

void emit_pgm(const AttentionMap& map, const std::string& path) { write_text(to_pgm(map), path); }

}  // namespace quadra
