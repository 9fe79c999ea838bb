#include "quadra/autobuild.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "quadra/error.hpp"
#include "quadra/log.hpp"

namespace quadra {

ModelConfig replace_layers(const ModelConfig& cfg, NeuronFamily family) {
  ModelConfig out = cfg;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& s = cfg.layers[i];
    if (s.family != NeuronFamily::FirstOrder) {
      throw InputError("autobuild", "replace_layers expects a first-order config; layer " +
                                        std::to_string(i) + " is " + family_tag(s.family));
    }
    auto& r = out.layers[i];
    r.family = family;
    if (is_quadratic(family)) r.batchnorm = true;
    try {
      validate(r);
    } catch (const ConfigError& e) {
      throw ConfigError("layer " + std::to_string(i) + " (" + kind_tag(s.kind) + "): cannot use " +
                        family_tag(family) + ": " +
                        std::string(e.what()).substr(e.component().size() + 2));
    }
  }
  validate_config(out);
  return out;
}

double ri_value(double p_mpar, double p_tlat, double delta_acc, double eps_acc) {
  return p_mpar * p_tlat / std::max(delta_acc, eps_acc);
}

bool removable(const ModelConfig& cfg, std::size_t layer) {
  return cfg.layers.size() >= 2 && layer < cfg.layers.size();
}

namespace {

std::uint64_t total_params(const ModelConfig& cfg) { return parameter_count(cfg); }

std::uint64_t head_macs(const ModelConfig& cfg) { return cfg.head.in * cfg.head.classes; }

std::uint64_t total_macs(const ModelConfig& cfg) {
  const auto shapes = chain_shapes(cfg);
  std::uint64_t n = head_macs(cfg);
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) n += count_macs(cfg.layers[i], shapes[i]);
  return n;
}

std::string describe(const QuadraticLayerSpec& s) {
  std::ostringstream os;
  os << family_tag(s.family) << ' ' << kind_tag(s.kind) << ' ' << s.in << "->" << s.out;
  if (s.kind != LayerKind::FC) os << " k" << s.kernel << " s" << s.stride << " p" << s.pad;
  return os.str();
}

Ablated finetune(Ablated ab, const EvalSets& sets, const RIOptions& opt) {
  if (opt.finetune_epochs == 0) return ab;
  TrainOptions t;
  t.mode = opt.mode;
  t.epochs = opt.finetune_epochs;
  t.gradient_stats = false;
  auto r = train(ab.cfg, ab.params, *sets.train, nullptr, t);
  if (r.diverged) warn("autobuild", "fine-tuning diverged: " + r.divergence);
  ab.params = std::move(r.params);
  return ab;
}

void check_sets(const EvalSets& sets) {
  if (!sets.train || !sets.eval) throw InputError("autobuild", "fine-tune and evaluation sets are required");
}

struct Measured {
  RIRow row;
  Ablated model;
};

Measured measure(const ModelConfig& cfg, const ModelParams& params, const EvalSets& sets,
                 std::size_t layer, double full_acc, const RIOptions& opt) {
  if (!removable(cfg, layer)) {
    throw InputError("autobuild", "layer " + std::to_string(layer) + " is not removable");
  }
  Measured m;
  m.row.layer = layer;
  m.row.p_mpar = param_share(cfg, layer);
  m.row.p_tlat = mac_share(cfg, layer);
  m.model = finetune(ablate(cfg, params, layer, cfg.train.seed + 1000 + layer), sets, opt);
  m.row.full_acc = full_acc;
  m.row.ablated_acc = evaluate(m.model.cfg, m.model.params, *sets.eval);
  m.row.delta_acc = full_acc - m.row.ablated_acc;
  m.row.ri = ri_value(m.row.p_mpar, m.row.p_tlat, m.row.delta_acc, opt.eps_acc);
  return m;
}

// Highest RI first; equal RI puts the deeper layer first.
void rank(std::vector<Measured>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const Measured& a, const Measured& b) {
    if (a.row.ri != b.row.ri) return a.row.ri > b.row.ri;
    return a.row.layer > b.row.layer;
  });
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].row.rank = i + 1;
}

// An adapter that replaces itself would let the greedy loop spin forever.
bool shrinks(const ModelConfig& cfg, std::size_t layer) {
  const auto& s = cfg.layers[layer];
  if (s.in == s.out && s.stride == 1) return true;
  QuadraticLayerSpec a = s;
  a.family = NeuronFamily::FirstOrder;
  a.kind = s.kind == LayerKind::FC ? LayerKind::FC : LayerKind::Conv;
  a.kernel = 1;
  a.pad = 0;
  return count_params(a).total() < count_params(s).total();
}

std::vector<Measured> measure_all(const ModelConfig& cfg, const ModelParams& params,
                                  const EvalSets& sets, double full_acc, const RIOptions& opt) {
  std::vector<Measured> rows;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    if (!removable(cfg, i) || !shrinks(cfg, i)) continue;
    try {
      rows.push_back(measure(cfg, params, sets, i, full_acc, opt));
    } catch (const InputError& e) {
      warn("autobuild", std::string("skipping layer ") + std::to_string(i) + ": " + e.what());
    }
  }
  rank(rows);
  return rows;
}

}  // namespace

double param_share(const ModelConfig& cfg, std::size_t layer) {
  return static_cast<double>(count_params(cfg.layers.at(layer)).total()) /
         static_cast<double>(total_params(cfg));
}

double mac_share(const ModelConfig& cfg, std::size_t layer) {
  const auto shapes = chain_shapes(cfg);
  return static_cast<double>(count_macs(cfg.layers.at(layer), shapes[layer])) /
         static_cast<double>(total_macs(cfg));
}

Ablated ablate(const ModelConfig& cfg, const ModelParams& params, std::size_t layer,
               std::uint64_t seed) {
  if (!removable(cfg, layer)) {
    throw InputError("autobuild", "layer " + std::to_string(layer) + " is not removable");
  }
  const auto& s = cfg.layers[layer];
  Ablated ab;
  ab.cfg = cfg;
  ab.cfg.layers.erase(ab.cfg.layers.begin() + static_cast<long>(layer));
  ab.adapter = s.in != s.out || s.stride != 1;
  if (ab.adapter) {
    QuadraticLayerSpec a;
    a.family = NeuronFamily::FirstOrder;
    a.kind = s.kind == LayerKind::FC ? LayerKind::FC : LayerKind::Conv;
    a.in = s.in;
    a.out = s.out;
    a.kernel = 1;
    a.stride = s.kind == LayerKind::FC ? 1 : s.stride;
    a.pad = 0;
    a.batchnorm = s.batchnorm;
    a.activation = s.activation;
    ab.cfg.layers.insert(ab.cfg.layers.begin() + static_cast<long>(layer), a);
  }
  try {
    validate_config(ab.cfg);
  } catch (const ConfigError& e) {
    throw InputError("autobuild", "removing layer " + std::to_string(layer) +
                                      " breaks the shape chain: " + e.what());
  }
  ab.params = init_model(ab.cfg, seed);
  for (std::size_t i = 0, j = 0; i < cfg.layers.size(); ++i) {
    if (i == layer) {
      if (ab.adapter) ++j;
      continue;
    }
    ab.params.layers[j++] = params.layers[i];
  }
  ab.params.head_w = params.head_w;
  ab.params.head_b = params.head_b;
  return ab;
}

RIRow compute_ri(const ModelConfig& cfg, const ModelParams& params, const EvalSets& sets,
                 std::size_t layer, const RIOptions& opt) {
  check_sets(sets);
  const double full = evaluate(cfg, params, *sets.eval);
  auto m = measure(cfg, params, sets, layer, full, opt);
  // Rank within the full report is not known for a single row.
  m.row.rank = 0;
  return m.row;
}

std::vector<RIRow> ri_report(const ModelConfig& cfg, const ModelParams& params,
                             const EvalSets& sets, const RIOptions& opt) {
  check_sets(sets);
  const double full = evaluate(cfg, params, *sets.eval);
  std::vector<RIRow> out;
  for (auto& m : measure_all(cfg, params, sets, full, opt)) out.push_back(m.row);
  return out;
}

ReduceResult reduce(const ModelConfig& cfg, const ModelParams& params, const EvalSets& sets,
                    double budget, const RIOptions& opt) {
  check_sets(sets);
  if (budget < 0) throw InputError("autobuild", "accuracy budget must be non-negative");
  ReduceResult r;
  r.cfg = cfg;
  r.params = params;
  r.initial_acc = evaluate(cfg, params, *sets.eval);
  double current = r.initial_acc;
  for (std::size_t iter = 1;; ++iter) {
    auto rows = measure_all(r.cfg, r.params, sets, current, opt);
    std::vector<RIRow> report;
    for (const auto& m : rows) report.push_back(m.row);
    r.reports.push_back(report);
    if (rows.empty()) {
      r.stop_reason = "no removable layer left";
      break;
    }
    const Measured& best = rows.front();
    const double drop = r.initial_acc - best.row.ablated_acc;
    if (drop > budget) {
      r.stop_reason = "removing layer " + std::to_string(best.row.layer) +
                      " would drop accuracy by " + std::to_string(drop) + " (budget " +
                      std::to_string(budget) + ")";
      break;
    }
    RemovalStep step;
    step.iteration = iter;
    step.layer = best.row.layer;
    step.description = describe(r.cfg.layers[best.row.layer]);
    step.ri = best.row.ri;
    step.acc_after = best.row.ablated_acc;
    step.cumulative_drop = drop;
    step.adapter = best.model.adapter;
    r.log.push_back(step);
    r.cfg = best.model.cfg;
    r.params = best.model.params;
    current = best.row.ablated_acc;
  }
  r.final_acc = current;
  return r;
}

CsvTable ri_table(const std::vector<RIRow>& rows, std::size_t iteration) {
  CsvTable t;
  t.header = {"iteration", "layer", "p_mpar", "p_tlat", "delta_acc", "ri", "rank", "full_acc",
              "ablated_acc"};
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(iteration), std::to_string(r.layer), num(r.p_mpar),
                      num(r.p_tlat), num(r.delta_acc), num(r.ri), std::to_string(r.rank),
                      num(r.full_acc), num(r.ablated_acc)});
  }
  return t;
}

CsvTable removal_table(const std::vector<RemovalStep>& log) {
  CsvTable t;
  t.header = {"iteration", "layer", "description", "ri", "acc_after", "cumulative_drop", "adapter"};
  for (const auto& s : log) {
    std::ostringstream ri, acc, drop;
    ri.precision(17);
    acc.precision(17);
    drop.precision(17);
    ri << s.ri;
    acc << s.acc_after;
    drop << s.cumulative_drop;
    t.rows.push_back({std::to_string(s.iteration), std::to_string(s.layer), s.description, ri.str(),
                      acc.str(), drop.str(), s.adapter ? "1" : "0"});
  }
  return t;
}

}  // namespace quadra
