#include <map>
#include <set>

#include "quadra/error.hpp"
#include "quadra/trainer.hpp"

namespace quadra {

namespace {

// Replays record_model + softmax loss + backward on shapes, issuing the same
// ledger events as Tape: a node retains only when some input needs a
// gradient, each storage block is charged to the first node retaining it,
// parameter storage is never charged.
class ShapeTape {
 public:
  struct V {
    std::size_t node = 0;
    std::size_t storage = 0;
    Shape shape;
    bool grad = false;
  };
  struct Ret {
    std::size_t storage;
    std::uint64_t bytes;
  };

  void set_scope(std::string s) { scope_ = std::move(s); }

  V constant(const Shape& s) { return push_leaf(s, false, false); }

  V parameter(const Shape& s) {
    V v = push_leaf(s, true, true);
    params_.insert(v.storage);
    ledger_.set_parameter_bytes(ledger_.parameter_bytes() + bytes(s));
    return v;
  }

  Ret fresh(const Shape& s) { return {next_storage_++, bytes(s)}; }
  static Ret ret(const V& v) { return {v.storage, bytes(v.shape)}; }

  /// `out` is the node's value; `retained` is built after `out` exists so it
  /// may refer to it.
  template <typename Fn>
  V op(const char* name, std::initializer_list<V> inputs, const Shape& out_shape, Fn&& retained,
       const V* alias = nullptr) {
    V out;
    out.node = nodes_.size();
    out.shape = out_shape;
    out.storage = alias ? alias->storage : next_storage_++;
    for (const auto& in : inputs) out.grad = out.grad || in.grad;
    Node n;
    n.scope = scope_;
    n.op = name;
    if (out.grad) {
      for (const Ret& r : retained(out)) {
        if (params_.count(r.storage) || owned_.count(r.storage)) continue;
        owned_.insert(r.storage);
        n.owned.push_back(r.bytes);
        ledger_.cache(scope_, r.bytes, "forward:" + scope_ + ":" + name);
      }
    }
    nodes_.push_back(std::move(n));
    return out;
  }

  MemoryLedger backward() {
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const Node& n = nodes_[i];
      for (auto b : n.owned) ledger_.release(n.scope, b, "backward:" + n.scope + ":" + n.op);
      if (n.param) ledger_.add_gradient(n.param_bytes, "gradient:" + n.tag);
    }
    return ledger_;
  }

  void tag_last(std::string tag) { nodes_.back().tag = std::move(tag); }

 private:
  struct Node {
    std::string scope, op, tag;
    std::vector<std::uint64_t> owned;
    bool param = false;
    std::uint64_t param_bytes = 0;
  };

  static std::uint64_t bytes(const Shape& s) { return shape_numel(s) * sizeof(double); }

  V push_leaf(const Shape& s, bool grad, bool param) {
    V v;
    v.node = nodes_.size();
    v.storage = next_storage_++;
    v.shape = s;
    v.grad = grad;
    Node n;
    n.scope = scope_;
    n.op = param ? "parameter" : "constant";
    n.param = param;
    n.param_bytes = bytes(s);
    nodes_.push_back(std::move(n));
    return v;
  }

  std::string scope_;
  std::vector<Node> nodes_;
  std::set<std::size_t> params_, owned_;
  std::size_t next_storage_ = 0;
  MemoryLedger ledger_;
};

using V = ShapeTape::V;
using Ret = std::vector<ShapeTape::Ret>;

struct LayerSim {
  ShapeTape& t;
  const QuadraticLayerSpec& s;

  V linear(const V& x, const V& w) {
    const Shape out{x.shape[0], w.shape[0]};
    return t.op("linear", {x, w}, out, [&](const V& o) { return Ret{t.ret(x), t.ret(w), t.ret(o)}; });
  }
  V conv(const V& x, const V& w) {
    const Shape out = output_shape(s, x.shape);
    const Shape cols{out[0] * out[2] * out[3], x.shape[1] * s.kernel * s.kernel};
    return t.op("conv2d", {x, w}, out,
                [&](const V& o) { return Ret{t.fresh(cols), t.ret(w), t.ret(o)}; });
  }
  V depthwise(const V& x, const V& w) {
    const Shape out = output_shape(s, x.shape);
    return t.op("depthwise_conv2d", {x, w}, out,
                [&](const V& o) { return Ret{t.ret(x), t.ret(w), t.ret(o)}; });
  }
  V add_bias(const V& x, const V& b) {
    return t.op("add_bias", {x, b}, x.shape, [&](const V& o) { return Ret{t.ret(o)}; });
  }
  V add(const V& a, const V& b) {
    return t.op("add", {a, b}, a.shape, [&](const V& o) { return Ret{t.ret(o)}; });
  }
  V hadamard(const V& a, const V& b) {
    return t.op("hadamard", {a, b}, a.shape,
                [&](const V& o) { return Ret{t.ret(a), t.ret(b), t.ret(o)}; });
  }
  V reshape(const V& x, const Shape& shape) {
    return t.op("reshape", {x}, shape, [&](const V& o) { return Ret{t.ret(o)}; }, &x);
  }
  V branch(const V& x, const V& w, const V& b) {
    V z;
    switch (s.kind) {
      case LayerKind::FC: z = linear(x, w); break;
      case LayerKind::Conv: z = conv(x, w); break;
      case LayerKind::Depthwise: z = depthwise(x, w); break;
    }
    return add_bias(z, b);
  }
  V bilinear(const V& x, const V& wq) {
    V w2 = reshape(wq, {s.out * s.in, s.in});
    V z = linear(x, w2);
    const Shape out{x.shape[0], s.out};
    return t.op("contract_groups", {x, z}, out,
                [&](const V& o) { return Ret{t.ret(x), t.ret(z), t.ret(o)}; });
  }

  V auto_forward(const std::map<Role, V>& p, const V& x) {
    using R = Role;
    switch (s.family) {
      case NeuronFamily::FirstOrder: return branch(x, p.at(R::Wa), p.at(R::ba));
      case NeuronFamily::T1Pure: return add_bias(bilinear(x, p.at(R::Wq)), p.at(R::bq));
      case NeuronFamily::T1Full: {
        V q = bilinear(x, p.at(R::Wq));
        return add(q, branch(x, p.at(R::Wb), p.at(R::bb)));
      }
      case NeuronFamily::T1And2: {
        V q = bilinear(x, p.at(R::Wq));
        V sq = hadamard(x, x);
        return add(q, branch(sq, p.at(R::Wb), p.at(R::bb)));
      }
      case NeuronFamily::T2: return branch(hadamard(x, x), p.at(R::Wa), p.at(R::ba));
      case NeuronFamily::T3: {
        V a = branch(x, p.at(R::Wa), p.at(R::ba));
        return hadamard(a, a);
      }
      case NeuronFamily::T4: {
        V a = branch(x, p.at(R::Wa), p.at(R::ba));
        V b = branch(x, p.at(R::Wb), p.at(R::bb));
        return hadamard(a, b);
      }
      case NeuronFamily::T2And4: {
        V a = branch(x, p.at(R::Wa), p.at(R::ba));
        V b = branch(x, p.at(R::Wb), p.at(R::bb));
        V sq = hadamard(x, x);
        V c = branch(sq, p.at(R::Wc), p.at(R::bc));
        return add(hadamard(a, b), c);
      }
      case NeuronFamily::Proposed: {
        V a = branch(x, p.at(R::Wa), p.at(R::ba));
        V b = branch(x, p.at(R::Wb), p.at(R::bb));
        V c = branch(x, p.at(R::Wc), p.at(R::bc));
        return add(hadamard(a, b), c);
      }
    }
    throw IntegrityError("trainer", "unknown family");
  }

  V symbolic(const std::map<Role, V>& p, const V& x) {
    const SymbolicRule* rule = find_symbolic(s.family);
    if (!rule) throw ConfigError("no closed-form backward registered for " + family_tag(s.family));
    const Shape out = output_shape(s, x.shape);
    // Inputs: x and every parameter; all parameters need gradients.
    V any_param = p.begin()->second;
    return t.op("quadratic_layer", {x, any_param}, out, [&](const V&) {
      Ret r;
      for (CacheSlot slot : rule->cache) r.push_back(slot == CacheSlot::X ? t.ret(x) : t.fresh(out));
      return r;
    });
  }
};

}  // namespace

MemoryLedger simulate_ledger(const ModelConfig& cfg, std::size_t batch, BackpropMode mode) {
  validate_config(cfg);
  check_mode_support(cfg, mode);
  if (batch == 0) return {};
  ShapeTape t;
  Shape in{batch};
  for (auto d : dataset_input_shape(cfg.train.dataset)) in.push_back(d);
  V h = t.constant(in);
  ShapeTape* tp = &t;
  auto flatten = [tp](const V& v) {
    if (v.shape.size() == 2) return v;
    LayerSim sim{*tp, QuadraticLayerSpec{}};
    return sim.reshape(v, {v.shape[0], shape_numel(v.shape) / v.shape[0]});
  };
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& spec = cfg.layers[i];
    t.set_scope(layer_label(i));
    std::map<Role, V> p;
    // LayerParams is a std::map, so parameters appear in Role order.
    std::vector<Role> roles = family_roles(spec.family);
    std::sort(roles.begin(), roles.end());
    for (Role r : roles) {
      p[r] = t.parameter(param_shape(spec, r));
      t.tag_last(layer_label(i) + "." + role_name(r));
    }
    if (spec.kind == LayerKind::FC) h = flatten(h);
    LayerSim sim{t, spec};
    h = mode == BackpropMode::Hybrid && is_quadratic(spec.family) ? sim.symbolic(p, h)
                                                                   : sim.auto_forward(p, h);
    if (spec.batchnorm) {
      V g = t.parameter({spec.out});
      t.tag_last(layer_label(i) + ".gamma");
      V b = t.parameter({spec.out});
      t.tag_last(layer_label(i) + ".beta");
      const V x = h;
      h = t.op("batchnorm", {x, g, b}, x.shape, [&](const V& o) {
        return Ret{t.fresh(x.shape), ShapeTape::ret(g), t.fresh({x.shape[1]}), ShapeTape::ret(o)};
      });
    }
    if (spec.activation == Activation::Relu) {
      h = t.op("relu", {h}, h.shape, [&](const V& o) { return Ret{ShapeTape::ret(o)}; });
    }
  }
  t.set_scope("head");
  h = flatten(h);
  V w = t.parameter({cfg.head.classes, cfg.head.in});
  t.tag_last("head.W");
  V b = t.parameter({cfg.head.classes});
  t.tag_last("head.b");
  LayerSim head{t, QuadraticLayerSpec{}};
  V logits = head.add_bias(head.linear(h, w), b);
  t.set_scope("loss");
  t.op("softmax_cross_entropy", {logits}, {1}, [&](const V& o) {
    return Ret{t.fresh(logits.shape), ShapeTape::ret(o)};
  });
  return t.backward();
}

MemoryProfile profile_memory(const ModelConfig& cfg, std::size_t batch, std::uint64_t budget) {
  MemoryProfile p;
  p.auto_ledger = simulate_ledger(cfg, batch, BackpropMode::Auto);
  p.hybrid_ledger = simulate_ledger(cfg, batch, BackpropMode::Hybrid);
  const auto a = p.auto_ledger.peak_cached(), h = p.hybrid_ledger.peak_cached();
  p.saving = a ? 1.0 - static_cast<double>(h) / static_cast<double>(a) : 0.0;
  p.budget = budget;
  p.auto_over_budget = budget && a > budget;
  p.hybrid_over_budget = budget && h > budget;
  return p;
}

}  // namespace quadra
