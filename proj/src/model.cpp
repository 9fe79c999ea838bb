#include "quadra/model.hpp"

#include <cmath>
#include <random>

#include "quadra/error.hpp"

namespace quadra {

std::string mode_tag(BackpropMode m) { return m == BackpropMode::Auto ? "auto" : "hybrid"; }

BackpropMode parse_mode(const std::string& tag) {
  if (tag == "auto") return BackpropMode::Auto;
  if (tag == "hybrid") return BackpropMode::Hybrid;
  throw ConfigError("mode must be auto or hybrid, got '" + tag + "'");
}

std::string layer_label(std::size_t index) { return "layer" + std::to_string(index); }

ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  std::mt19937_64 rng(seed);
  ModelParams p;
  for (const auto& s : cfg.layers) {
    LayerState st;
    st.params = init_params(s, rng);
    if (s.batchnorm) {
      st.gamma = Tensor::full({s.out}, 1.0);
      st.beta = Tensor::zeros({s.out});
      st.running_mean = Tensor::zeros({s.out});
      st.running_var = Tensor::full({s.out}, 1.0);
    }
    p.layers.push_back(std::move(st));
  }
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cfg.head.in)));
  std::vector<double> w(cfg.head.classes * cfg.head.in);
  for (auto& v : w) v = dist(rng);
  p.head_w = Tensor({cfg.head.classes, cfg.head.in}, std::move(w));
  p.head_b = Tensor::zeros({cfg.head.classes});
  return p;
}

namespace {

template <typename Fn>
void for_each_param(const ModelParams& p, Fn&& fn) {
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& st = p.layers[i];
    for (const auto& [role, t] : st.params) fn(layer_label(i), role_name(role), t);
    if (!st.gamma.empty()) {
      fn(layer_label(i), "gamma", st.gamma);
      fn(layer_label(i), "beta", st.beta);
    }
  }
  fn("head", "W", p.head_w);
  fn("head", "b", p.head_b);
}

}  // namespace

std::vector<NamedTensor> named_parameters(const ModelParams& p) {
  std::vector<NamedTensor> out;
  for_each_param(p, [&](const std::string& l, const std::string& r, const Tensor& t) {
    out.push_back({l, r, t});
  });
  return out;
}

void assign_parameters(ModelParams& p, const std::vector<Tensor>& values) {
  std::size_t k = 0;
  auto take = [&](Tensor& slot) {
    if (k >= values.size() || values[k].shape() != slot.shape()) {
      throw IntegrityError("trainer", "parameter list does not match the model");
    }
    slot = values[k++];
  };
  for (auto& st : p.layers) {
    for (auto& [role, t] : st.params) take(t);
    if (!st.gamma.empty()) {
      take(st.gamma);
      take(st.beta);
    }
  }
  take(p.head_w);
  take(p.head_b);
  if (k != values.size()) throw IntegrityError("trainer", "too many parameter values");
}

std::vector<NamedTensor> named_buffers(const ModelParams& p) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    if (p.layers[i].gamma.empty()) continue;
    out.push_back({layer_label(i), "running_mean", p.layers[i].running_mean});
    out.push_back({layer_label(i), "running_var", p.layers[i].running_var});
  }
  return out;
}

std::uint64_t parameter_count(const ModelConfig& cfg) {
  std::uint64_t n = 0;
  for (const auto& s : cfg.layers) n += count_params(s).total();
  return n + cfg.head.classes * cfg.head.in + cfg.head.classes;
}

void check_mode_support(const ModelConfig& cfg, BackpropMode mode) {
  if (mode != BackpropMode::Hybrid) return;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto f = cfg.layers[i].family;
    if (is_quadratic(f) && !find_symbolic(f)) {
      throw ConfigError(layer_label(i) + ": no closed-form backward registered for " +
                        family_tag(f));
    }
  }
}

RecordedModel record_model(Tape& tape, const ModelConfig& cfg, const ModelParams& params,
                           const Tensor& x, BackpropMode mode, bool training) {
  check_mode_support(cfg, mode);
  if (params.layers.size() != cfg.layers.size()) {
    throw IntegrityError("trainer", "parameters do not match the config");
  }
  RecordedModel rec;
  Var h = tape.constant(x, "input");
  auto flatten = [&](Var v) {
    const Shape& s = tape.value(v).shape();
    if (s.size() == 2) return v;
    return ops::reshape(tape, v, {s[0], shape_numel(s) / s[0]});
  };
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& spec = cfg.layers[i];
    const auto& st = params.layers[i];
    ScopeGuard scope(tape, layer_label(i));
    ParamVars pv;
    for (const auto& [role, t] : st.params) {
      pv[role] = tape.parameter(t, layer_label(i) + "." + role_name(role));
      rec.params.push_back(pv[role]);
    }
    if (spec.kind == LayerKind::FC) h = flatten(h);
    if (mode == BackpropMode::Hybrid && is_quadratic(spec.family)) {
      h = record_symbolic(tape, spec, pv, h);
    } else {
      h = auto_forward(tape, spec, pv, h).y;
    }
    ops::BatchNormStats stats;
    std::size_t count = 0;
    if (spec.batchnorm) {
      Var g = tape.parameter(st.gamma, layer_label(i) + ".gamma");
      Var b = tape.parameter(st.beta, layer_label(i) + ".beta");
      rec.params.push_back(g);
      rec.params.push_back(b);
      const Shape& hs = tape.value(h).shape();
      count = shape_numel(hs) / hs[1];
      if (training) {
        h = ops::batchnorm_train(tape, h, g, b, kBatchNormEps, &stats);
      } else {
        h = ops::batchnorm_eval(tape, h, g, b, st.running_mean, st.running_var, kBatchNormEps);
      }
    }
    if (spec.activation == Activation::Relu) h = ops::relu(tape, h);
    rec.bn_stats.push_back(std::move(stats));
    rec.bn_counts.push_back(count);
    rec.layer_outputs.push_back(h);
  }
  ScopeGuard scope(tape, "head");
  h = flatten(h);
  Var w = tape.parameter(params.head_w, "head.W");
  Var b = tape.parameter(params.head_b, "head.b");
  rec.params.push_back(w);
  rec.params.push_back(b);
  rec.logits = ops::add_bias(tape, ops::linear(tape, h, w), b);
  return rec;
}

Tensor predict(const ModelConfig& cfg, const ModelParams& params, const Tensor& x) {
  Tape tape(false);
  auto rec = record_model(tape, cfg, params, x, BackpropMode::Auto, false);
  return tape.value(rec.logits);
}

void update_running_stats(ModelParams& params, const RecordedModel& rec) {
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& st = params.layers[i];
    if (st.gamma.empty()) continue;
    const auto& s = rec.bn_stats.at(i);
    const double m = static_cast<double>(rec.bn_counts.at(i));
    const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
    std::vector<double> mean(st.running_mean.size()), var(st.running_var.size());
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = (1.0 - kBatchNormMomentum) * st.running_mean[c] + kBatchNormMomentum * s.mean[c];
      var[c] = (1.0 - kBatchNormMomentum) * st.running_var[c] +
               kBatchNormMomentum * s.var[c] * unbias;
    }
    st.running_mean = Tensor(st.running_mean.shape(), std::move(mean));
    st.running_var = Tensor(st.running_var.shape(), std::move(var));
  }
}

}  // namespace quadra
