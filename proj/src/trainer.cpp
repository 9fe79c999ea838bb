#include "quadra/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "quadra/error.hpp"
#include "quadra/log.hpp"

namespace quadra {

double cosine_lr(std::size_t epoch, double lr0, std::size_t t_max, double eta_min) {
  if (t_max == 0) throw InputError("trainer", "t_max must be positive");
  if (epoch > t_max) {
    warn("trainer", "epoch " + std::to_string(epoch) + " is past t_max " + std::to_string(t_max) +
                        "; using eta_min");
    return eta_min;
  }
  const double c = std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(t_max));
  return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + c);
}

OptimizerState make_optimizer(const ModelParams& params, double lr0, std::size_t t_max) {
  OptimizerState s;
  s.lr0 = lr0;
  s.t_max = t_max;
  for (const auto& p : named_parameters(params)) s.velocity.push_back(Tensor::zeros(p.value.shape()));
  return s;
}

void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              const std::vector<std::string>& names, OptimizerState& state, double lr) {
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw IntegrityError("trainer", "optimizer state does not match the parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.velocity[i].shape() != params[i].shape()) {
      throw DimensionError("gradient " + shape_str(grads[i].shape()) + " for parameter " +
                           shape_str(params[i].shape()));
    }
    if (!grads[i].all_finite()) {
      throw NumericError("trainer", "non-finite gradient for " +
                                        (i < names.size() ? names[i] : std::to_string(i)));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto p = params[i].data();
    const auto g = grads[i].data();
    const auto v = state.velocity[i].data();
    std::vector<double> nv(p.size()), np(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
      nv[k] = state.momentum * v[k] + g[k] + state.weight_decay * p[k];
      np[k] = p[k] - lr * nv[k];
    }
    state.velocity[i] = Tensor::unchecked(params[i].shape(), std::move(nv));
    params[i] = Tensor::unchecked(params[i].shape(), std::move(np));
  }
}

void sgd_step(ModelParams& params, const std::vector<Tensor>& grads, OptimizerState& state,
              double lr) {
  std::vector<Tensor> values;
  std::vector<std::string> names;
  for (auto& p : named_parameters(params)) {
    values.push_back(p.value);
    names.push_back(p.layer + "." + p.role);
  }
  sgd_step(values, grads, names, state, lr);
  assign_parameters(params, values);
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.ptr() + i * k;
    const auto best = static_cast<int>(std::max_element(row, row + k) - row);
    if (best == labels[i]) ++correct;
  }
  return correct;
}

}  // namespace

StepResult hybrid_backward(const ModelConfig& cfg, const ModelParams& params, const Tensor& x,
                           std::span<const int> labels, BackpropMode mode) {
  Tape tape;
  auto rec = record_model(tape, cfg, params, x, mode, true);
  Var loss;
  {
    ScopeGuard scope(tape, "loss");
    loss = ops::softmax_cross_entropy(tape, rec.logits, labels);
  }
  StepResult r;
  r.loss = tape.value(loss).item();
  r.correct = count_correct(tape.value(rec.logits), labels);
  r.grads = tape.backward(loss, rec.params);
  r.ledger = tape.ledger();
  r.bn_stats = std::move(rec.bn_stats);
  r.bn_counts = std::move(rec.bn_counts);
  return r;
}

double evaluate(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds,
                std::size_t batch) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t end = std::min(ds.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = gather_labels(ds, idx);
    correct += count_correct(predict(cfg, params, gather_images(ds, idx)), labels);
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

TrainResult train(const ModelConfig& cfg, ModelParams init, const Dataset& train_set,
                  const Dataset* test_set, const TrainOptions& opt) {
  validate_config(cfg);
  check_mode_support(cfg, opt.mode);
  const std::size_t epochs = opt.epochs ? opt.epochs : cfg.train.epochs;
  const std::size_t t_max = opt.t_max ? opt.t_max : std::max<std::size_t>(epochs, 1);
  OptimizerState state = make_optimizer(init, cfg.train.lr, t_max);
  state.momentum = opt.momentum;
  state.weight_decay = opt.weight_decay;
  state.eta_min = opt.eta_min;

  TrainResult out;
  out.params = std::move(init);
  const std::size_t n = train_set.size();
  const std::size_t bs = cfg.train.batch;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const double lr = cosine_lr(epoch - 1, state.lr0, t_max, state.eta_min);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.train.seed + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    std::uint64_t peak = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      // A single-sample batch has no batch statistics.
      if (end - start < 2) break;
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = gather_images(train_set, idx);
      const auto labels = gather_labels(train_set, idx);
      StepResult step;
      try {
        step = hybrid_backward(cfg, out.params, x, labels, opt.mode);
        if (!std::isfinite(step.loss)) {
          throw NumericError("trainer", "non-finite loss");
        }
        ModelParams next = out.params;
        sgd_step(next, step.grads, state, lr);
        RecordedModel stats;
        stats.bn_stats = step.bn_stats;
        stats.bn_counts = step.bn_counts;
        update_running_stats(next, stats);
        out.params = std::move(next);
      } catch (const NumericError& e) {
        out.diverged = true;
        out.divergence = "epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(start / bs + 1) + ": " + e.what();
        warn("trainer", "training halted: " + out.divergence);
        return out;
      }
      loss_sum += step.loss * static_cast<double>(end - start);
      seen += end - start;
      correct += step.correct;
      peak = std::max(peak, step.ledger.peak_cached());
      const bool last = end == n || n - end < 2;
      if (last && opt.gradient_stats) {
        auto named = named_parameters(out.params);
        for (std::size_t i = 0; i < named.size(); ++i) named[i].value = step.grads[i];
        auto rows = collect_gradient_stats(named, epoch);
        out.gradient_stats.insert(out.gradient_stats.end(), rows.begin(), rows.end());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    rec.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    rec.test_acc = test_set ? evaluate(cfg, out.params, *test_set, opt.eval_batch) : 0.0;
    rec.peak_cached = peak;
    out.history.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return out;
}

CsvTable history_table(const std::vector<EpochRecord>& history) {
  CsvTable t;
  t.header = {"epoch", "lr", "train_loss", "train_acc", "test_acc", "peak_cached_bytes"};
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  for (const auto& r : history) {
    t.rows.push_back({std::to_string(r.epoch), num(r.lr), num(r.train_loss), num(r.train_acc),
                      num(r.test_acc), std::to_string(r.peak_cached)});
  }
  return t;
}

}  // namespace quadra
