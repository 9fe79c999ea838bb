#include "quadra/config.hpp"

#include <charconv>
#include <system_error>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "quadra/error.hpp"

namespace quadra {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

// Error text without its "component: " prefix.
std::string bare(const Error& e) {
  const std::string what = e.what();
  return what.substr(e.component().size() + 2);
}

std::string layer_name(std::size_t i) { return "layer " + std::to_string(i); }

/// key=value fields of one line, rejecting unknown and duplicate keys.
class Fields {
 public:
  Fields(int line, const std::vector<std::string>& words, std::size_t first,
         const std::vector<std::string>& allowed)
      : line_(line) {
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (std::size_t i = first; i < words.size(); ++i) {
      const auto eq = words[i].find('=');
      if (eq == std::string::npos || eq == 0) {
        throw ParseError(line, "expected key=value, got '" + words[i] + "'");
      }
      std::string key = words[i].substr(0, eq);
      if (!ok.count(key)) throw ParseError(line, "unknown key '" + key + "'");
      if (!values_.emplace(key, words[i].substr(eq + 1)).second) {
        throw ParseError(line, "duplicate key '" + key + "'");
      }
    }
    for (const auto& k : allowed) {
      if (!values_.count(k)) throw ParseError(line, "missing key '" + k + "'");
    }
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }

  std::size_t size(const std::string& key) const {
    const std::string& v = str(key);
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw ParseError(line_, key + " must be a non-negative integer, got '" + v + "'");
    }
    return out;
  }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
      throw ParseError(line_, key + " must be a number, got '" + v + "'");
    }
    return out;
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "0") return false;
    if (v == "1") return true;
    throw ParseError(line_, key + " must be 0 or 1, got '" + v + "'");
  }

 private:
  int line_;
  std::map<std::string, std::string> values_;
};

}  // namespace

// Shortest round-trip text; plain decimal unless that gets long (0.0007, not 7e-04).
std::string format_double(double v) {
  char buf[512];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed);
  if (ec == std::errc() && ptr - buf <= 24) return std::string(buf, ptr);
  auto [p2, ec2] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p2);
}

Shape dataset_input_shape(const std::string& dataset) {
  if (dataset == "mnist") return {1, 28, 28};
  if (dataset == "cifar10") return {3, 32, 32};
  if (dataset == "toy2d") return {2};
  throw ConfigError("unknown dataset '" + dataset + "'");
}

namespace {

// `at` tracks the consumer being checked (layers.size() for the head).
std::vector<Shape> chain_impl(const ModelConfig& cfg, std::size_t& at) {
  std::vector<Shape> shapes;
  Shape cur = dataset_input_shape(cfg.train.dataset);
  std::string prev = "input";
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    at = i;
    const auto& s = cfg.layers[i];
    validate(s);
    if (s.kind == LayerKind::FC) {
      const std::size_t flat = shape_numel(cur);
      if (flat != s.in) {
        throw ConfigError(prev + " produces " + std::to_string(flat) + " features but " +
                          layer_name(i) + " expects in=" + std::to_string(s.in));
      }
      shapes.push_back({flat});
      cur = {s.out};
    } else {
      if (cur.size() != 3) {
        throw ConfigError(layer_name(i) + " is " + kind_tag(s.kind) + " but " + prev +
                          " produces flat features");
      }
      if (cur[0] != s.in) {
        throw ConfigError(prev + " produces " + std::to_string(cur[0]) + " channels but " +
                          layer_name(i) + " expects in=" + std::to_string(s.in));
      }
      shapes.push_back(cur);
      Shape batched{1, cur[0], cur[1], cur[2]};
      Shape y;
      try {
        y = output_shape(s, batched);
      } catch (const DimensionError& e) {
        throw ConfigError(layer_name(i) + ": " + e.what());
      }
      cur = {y[1], y[2], y[3]};
    }
    prev = layer_name(i);
  }
  at = cfg.layers.size();
  const std::size_t flat = shape_numel(cur);
  if (flat != cfg.head.in) {
    throw ConfigError(prev + " produces " + std::to_string(flat) + " features but head expects in=" +
                      std::to_string(cfg.head.in));
  }
  if (cfg.head.classes < 2) throw ConfigError("head needs at least 2 classes");
  shapes.push_back({flat});
  return shapes;
}

}  // namespace

std::vector<Shape> chain_shapes(const ModelConfig& cfg) {
  std::size_t at = 0;
  return chain_impl(cfg, at);
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.name.empty()) throw ConfigError("model name is empty");
  if (cfg.train.batch == 0) throw ConfigError("batch must be positive");
  if (!(cfg.train.lr > 0.0)) throw ConfigError("lr must be positive");
  chain_shapes(cfg);
}

ModelConfig parse_config(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool seen_model = false, seen_head = false, seen_train = false;
  std::vector<int> layer_lines;
  int head_line = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto words = split_ws(line);
    if (words.empty() || words[0][0] == '#') continue;
    const std::string& kw = words[0];
    if (kw == "model") {
      if (seen_model) throw ParseError(lineno, "duplicate model line");
      if (words.size() != 2) throw ParseError(lineno, "expected 'model <name>'");
      cfg.name = words[1];
      seen_model = true;
      continue;
    }
    if (!seen_model) throw ParseError(lineno, "config must start with 'model <name>'");
    if (kw == "layer") {
      if (seen_head) throw ParseError(lineno, "layer after head; the head must be last");
      if (words.size() < 2) throw ParseError(lineno, "expected 'layer <kind> ...'");
      Fields f(lineno, words, 2, {"family", "in", "out", "k", "s", "p", "bn", "act"});
      QuadraticLayerSpec s;
      try {
        s.kind = parse_kind(words[1]);
        s.family = parse_family(f.str("family"));
      } catch (const ConfigError& e) {
        throw ParseError(lineno, bare(e));
      }
      s.in = f.size("in");
      s.out = f.size("out");
      s.kernel = f.size("k");
      s.stride = f.size("s");
      s.pad = f.size("p");
      s.batchnorm = f.flag("bn");
      const std::string& act = f.str("act");
      if (act == "none") {
        s.activation = Activation::None;
      } else if (act == "relu") {
        s.activation = Activation::Relu;
      } else {
        throw ParseError(lineno, "act must be none or relu, got '" + act + "'");
      }
      try {
        validate(s);
      } catch (const ConfigError& e) {
        throw ParseError(lineno, bare(e));
      }
      cfg.layers.push_back(s);
      layer_lines.push_back(lineno);
    } else if (kw == "head") {
      if (seen_head) throw ParseError(lineno, "duplicate head line");
      if (words.size() < 2 || words[1] != "fc") throw ParseError(lineno, "expected 'head fc ...'");
      Fields f(lineno, words, 2, {"in", "classes"});
      cfg.head.in = f.size("in");
      cfg.head.classes = f.size("classes");
      seen_head = true;
      head_line = lineno;
    } else if (kw == "train") {
      if (seen_train) throw ParseError(lineno, "duplicate train line");
      Fields f(lineno, words, 1, {"epochs", "batch", "lr", "seed", "dataset"});
      cfg.train.epochs = f.size("epochs");
      cfg.train.batch = f.size("batch");
      cfg.train.lr = f.real("lr");
      cfg.train.seed = f.size("seed");
      cfg.train.dataset = f.str("dataset");
      if (cfg.train.dataset != "mnist" && cfg.train.dataset != "cifar10") {
        throw ParseError(lineno, "dataset must be mnist or cifar10, got '" + cfg.train.dataset + "'");
      }
      if (cfg.train.batch == 0) throw ParseError(lineno, "batch must be positive");
      if (!(cfg.train.lr > 0.0)) throw ParseError(lineno, "lr must be positive");
      seen_train = true;
    } else {
      throw ParseError(lineno, "unknown directive '" + kw + "'");
    }
  }
  if (!seen_model) throw ParseError(lineno, "missing 'model <name>' line");
  if (!seen_head) throw ParseError(lineno, "missing head line");
  if (!seen_train) throw ParseError(lineno, "missing train line");
  // Shape chain: report at the line of the consumer that disagrees.
  std::size_t at = 0;
  try {
    chain_impl(cfg, at);
  } catch (const ConfigError& e) {
    throw ParseError(at < layer_lines.size() ? layer_lines[at] : head_line, bare(e));
  }
  return cfg;
}

std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "model " << cfg.name << "\n";
  for (const auto& s : cfg.layers) {
    os << "layer " << kind_tag(s.kind) << " family=" << family_tag(s.family) << " in=" << s.in
       << " out=" << s.out << " k=" << s.kernel << " s=" << s.stride << " p=" << s.pad
       << " bn=" << (s.batchnorm ? 1 : 0)
       << " act=" << (s.activation == Activation::Relu ? "relu" : "none") << "\n";
  }
  os << "head fc in=" << cfg.head.in << " classes=" << cfg.head.classes << "\n";
  os << "train epochs=" << cfg.train.epochs << " batch=" << cfg.train.batch
     << " lr=" << format_double(cfg.train.lr) << " seed=" << cfg.train.seed
     << " dataset=" << cfg.train.dataset << "\n";
  return os.str();
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open config");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void save_config(const ModelConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot write config");
  out << serialize_config(cfg);
  if (!out) throw IoError(path, "write failed");
}

}  // namespace quadra
