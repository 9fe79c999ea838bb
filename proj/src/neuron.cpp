#include "quadra/neuron.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <numbers>

#include "quadra/error.hpp"
#include "quadra/kernels.hpp"
#include "quadra/ops.hpp"

namespace quadra {

namespace k = quadra::kernels;

namespace {

struct FamilyInfo {
  NeuronFamily family;
  const char* tag;
  std::vector<Role> roles;
  std::vector<CacheSlot> cache;
};

const std::vector<FamilyInfo>& family_table() {
  using R = Role;
  using C = CacheSlot;
  static const std::vector<FamilyInfo> table = {
      {NeuronFamily::FirstOrder, "first_order", {R::Wa, R::ba}, {C::X}},
      {NeuronFamily::T1Full, "t1_full", {R::Wq, R::Wb, R::bb}, {C::X}},
      {NeuronFamily::T1Pure, "t1_pure", {R::Wq, R::bq}, {C::X}},
      {NeuronFamily::T2, "t2", {R::Wa, R::ba}, {C::X}},
      {NeuronFamily::T3, "t3", {R::Wa, R::ba}, {C::X}},
      {NeuronFamily::T4, "t4", {R::Wa, R::ba, R::Wb, R::bb}, {C::X, C::A, C::B}},
      {NeuronFamily::T1And2, "t1and2", {R::Wq, R::Wb, R::bb}, {C::X}},
      {NeuronFamily::T2And4, "t2and4", {R::Wa, R::ba, R::Wb, R::bb, R::Wc, R::bc},
       {C::X, C::A, C::B}},
      {NeuronFamily::Proposed, "proposed", {R::Wa, R::ba, R::Wb, R::bb, R::Wc, R::bc},
       {C::X, C::A, C::B}},
  };
  return table;
}

const FamilyInfo& info(NeuronFamily f) {
  for (const auto& e : family_table()) {
    if (e.family == f) return e;
  }
  throw ConfigError("unknown neuron family");
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::vector<const void*> param_ids(NeuronFamily f, const LayerParams& params) {
  std::vector<const void*> ids;
  for (Role r : info(f).roles) ids.push_back(params.at(r).storage_id());
  return ids;
}

void check_params(const QuadraticLayerSpec& spec, const LayerParams& params) {
  for (Role r : info(spec.family).roles) {
    auto it = params.find(r);
    if (it == params.end()) {
      throw InputError("quadneuron", family_tag(spec.family) + " layer is missing " + role_name(r));
    }
    if (it->second.shape() != param_shape(spec, r)) {
      throw DimensionError(role_name(r) + " has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(param_shape(spec, r)));
    }
  }
  if (params.size() != info(spec.family).roles.size()) {
    throw InputError("quadneuron", "unexpected extra parameters for " + family_tag(spec.family));
  }
}

void check_input(const QuadraticLayerSpec& spec, const Shape& x) {
  const std::size_t rank = spec.kind == LayerKind::FC ? 2 : 4;
  if (x.size() != rank || x[1] != spec.in) {
    throw DimensionError(kind_tag(spec.kind) + " layer with in=" + std::to_string(spec.in) +
                         " cannot take input " + shape_str(x));
  }
}

// ---- AUTO graph ----

Var branch(Tape& t, const QuadraticLayerSpec& s, Var in, Var w, Var b) {
  Var z;
  switch (s.kind) {
    case LayerKind::FC: z = ops::linear(t, in, w); break;
    case LayerKind::Conv: z = ops::conv2d(t, in, w, s.stride, s.pad); break;
    case LayerKind::Depthwise: z = ops::depthwise_conv2d(t, in, w, s.stride, s.pad); break;
  }
  return ops::add_bias(t, z, b);
}

Var bilinear(Tape& t, const QuadraticLayerSpec& s, Var x, Var wq) {
  Var w2 = ops::reshape(t, wq, {s.out * s.in, s.in});
  Var z = ops::linear(t, x, w2);
  return ops::contract_groups(t, x, z);
}

// ---- closed-form pieces mirroring the AUTO rules ----

struct BranchGrad {
  Tensor dw;
  Tensor db;
  std::optional<Tensor> din;
};

Tensor branch_value(const QuadraticLayerSpec& s, const Tensor& in, const Tensor& w,
                    const Tensor& b) {
  Tensor z;
  switch (s.kind) {
    case LayerKind::FC: z = k::matmul_nt(in, w); break;
    case LayerKind::Conv: {
      const auto g = k::conv_geometry(in.shape(), w.dim(0), w.dim(2), s.stride, s.pad);
      z = k::conv2d_from_cols(k::im2col(in, g), w, g);
      break;
    }
    case LayerKind::Depthwise: z = k::depthwise_conv2d(in, w, s.stride, s.pad); break;
  }
  return k::add_bias(z, b);
}

BranchGrad branch_backward(const QuadraticLayerSpec& s, const Tensor& dout, const Tensor& in,
                           const Tensor& w, bool need_din) {
  BranchGrad r;
  r.db = k::bias_grad(dout);
  switch (s.kind) {
    case LayerKind::FC:
      if (need_din) r.din = k::matmul(dout, w);
      r.dw = k::matmul_tn(dout, in);
      break;
    case LayerKind::Conv: {
      const auto g = k::conv_geometry(in.shape(), w.dim(0), w.dim(2), s.stride, s.pad);
      if (need_din) r.din = k::conv2d_backward_input(dout, w, g);
      r.dw = k::conv2d_backward_weight(dout, k::im2col(in, g), g);
      break;
    }
    case LayerKind::Depthwise: {
      const auto g = k::conv_geometry(in.shape(), w.dim(0), w.dim(2), s.stride, s.pad);
      if (need_din) r.din = k::depthwise_backward_input(dout, w, g);
      r.dw = k::depthwise_backward_weight(dout, in, g);
      break;
    }
  }
  return r;
}

struct BilinearGrad {
  Tensor dwq;
  Tensor dx_contract;
  Tensor dx_linear;
};

BilinearGrad bilinear_backward(const QuadraticLayerSpec& s, const Tensor& dq, const Tensor& x,
                               const Tensor& wq, bool need_dx) {
  const Tensor w2 = wq.reshape({s.out * s.in, s.in});
  const Tensor z = k::matmul_nt(x, w2);
  auto cg = k::contract_groups_backward(dq, x, z);
  BilinearGrad r;
  if (need_dx) {
    r.dx_contract = std::move(cg.dx);
    r.dx_linear = k::matmul(cg.dz, w2);
  }
  r.dwq = k::matmul_tn(cg.dz, x).reshape(wq.shape());
  return r;
}

/// d(X∘X) routed back to X: u∘X + u∘X, as the tape accumulates it.
Tensor square_backward(const Tensor& u, const Tensor& x) {
  return k::add(k::hadamard(u, x), k::hadamard(u, x));
}

LayerGrads closed_form(const QuadraticLayerSpec& s, const LayerParams& p, const LayerCache& c,
                       const Tensor& dy, bool need_dx) {
  using R = Role;
  const Tensor& x = c.x;
  LayerGrads out;
  auto& g = out.params;
  switch (s.family) {
    case NeuronFamily::FirstOrder: {
      auto a = branch_backward(s, dy, x, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      out.dx = a.din;
      break;
    }
    case NeuronFamily::T1Pure: {
      g[R::bq] = k::bias_grad(dy);
      auto q = bilinear_backward(s, dy, x, p.at(R::Wq), need_dx);
      g[R::Wq] = q.dwq;
      if (need_dx) out.dx = k::add(q.dx_contract, q.dx_linear);
      break;
    }
    case NeuronFamily::T1Full: {
      auto b = branch_backward(s, dy, x, p.at(R::Wb), need_dx);
      auto q = bilinear_backward(s, dy, x, p.at(R::Wq), need_dx);
      g[R::Wq] = q.dwq;
      g[R::Wb] = b.dw;
      g[R::bb] = b.db;
      if (need_dx) out.dx = k::add(k::add(*b.din, q.dx_contract), q.dx_linear);
      break;
    }
    case NeuronFamily::T1And2: {
      const Tensor sq = k::hadamard(x, x);
      auto b = branch_backward(s, dy, sq, p.at(R::Wb), need_dx);
      auto q = bilinear_backward(s, dy, x, p.at(R::Wq), need_dx);
      g[R::Wq] = q.dwq;
      g[R::Wb] = b.dw;
      g[R::bb] = b.db;
      if (need_dx) {
        out.dx = k::add(k::add(square_backward(*b.din, x), q.dx_contract), q.dx_linear);
      }
      break;
    }
    case NeuronFamily::T2: {
      const Tensor sq = k::hadamard(x, x);
      auto a = branch_backward(s, dy, sq, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      if (need_dx) out.dx = square_backward(*a.din, x);
      break;
    }
    case NeuronFamily::T3: {
      const Tensor av = branch_value(s, x, p.at(R::Wa), p.at(R::ba));
      const Tensor t = k::hadamard(dy, av);
      auto a = branch_backward(s, k::add(t, t), x, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      out.dx = a.din;
      break;
    }
    case NeuronFamily::T4: {
      auto b = branch_backward(s, k::hadamard(dy, *c.a), x, p.at(R::Wb), need_dx);
      auto a = branch_backward(s, k::hadamard(dy, *c.b), x, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      g[R::Wb] = b.dw;
      g[R::bb] = b.db;
      if (need_dx) out.dx = k::add(*b.din, *a.din);
      break;
    }
    case NeuronFamily::T2And4: {
      const Tensor sq = k::hadamard(x, x);
      auto cc = branch_backward(s, dy, sq, p.at(R::Wc), need_dx);
      auto b = branch_backward(s, k::hadamard(dy, *c.a), x, p.at(R::Wb), need_dx);
      auto a = branch_backward(s, k::hadamard(dy, *c.b), x, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      g[R::Wb] = b.dw;
      g[R::bb] = b.db;
      g[R::Wc] = cc.dw;
      g[R::bc] = cc.db;
      if (need_dx) out.dx = k::add(k::add(square_backward(*cc.din, x), *b.din), *a.din);
      break;
    }
    case NeuronFamily::Proposed: {
      auto cc = branch_backward(s, dy, x, p.at(R::Wc), need_dx);
      auto b = branch_backward(s, k::hadamard(dy, *c.a), x, p.at(R::Wb), need_dx);
      auto a = branch_backward(s, k::hadamard(dy, *c.b), x, p.at(R::Wa), need_dx);
      g[R::Wa] = a.dw;
      g[R::ba] = a.db;
      g[R::Wb] = b.dw;
      g[R::bb] = b.db;
      g[R::Wc] = cc.dw;
      g[R::bc] = cc.db;
      if (need_dx) out.dx = k::add(k::add(*cc.din, *b.din), *a.din);
      break;
    }
  }
  return out;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<NeuronFamily, SymbolicRule> builtin_rules() {
  std::map<NeuronFamily, SymbolicRule> rules;
  for (const auto& e : family_table()) rules[e.family] = SymbolicRule{e.cache, closed_form};
  return rules;
}

std::map<NeuronFamily, SymbolicRule>& registry() {
  static std::map<NeuronFamily, SymbolicRule> rules = builtin_rules();
  return rules;
}

}  // namespace

std::string family_tag(NeuronFamily f) { return info(f).tag; }

NeuronFamily parse_family(const std::string& tag) {
  const std::string t = lower(tag);
  if (t == "t1") return NeuronFamily::T1Full;
  for (const auto& e : family_table()) {
    if (t == e.tag) return e.family;
  }
  throw ConfigError("unknown neuron family '" + tag + "'");
}

std::string kind_tag(LayerKind k) {
  switch (k) {
    case LayerKind::FC: return "fc";
    case LayerKind::Conv: return "conv";
    case LayerKind::Depthwise: return "dwconv";
  }
  return "?";
}

LayerKind parse_kind(const std::string& tag) {
  const std::string t = lower(tag);
  if (t == "fc") return LayerKind::FC;
  if (t == "conv") return LayerKind::Conv;
  if (t == "dwconv") return LayerKind::Depthwise;
  throw ConfigError("unknown layer kind '" + tag + "'");
}

std::string role_name(Role r) {
  switch (r) {
    case Role::Wa: return "Wa";
    case Role::ba: return "ba";
    case Role::Wb: return "Wb";
    case Role::bb: return "bb";
    case Role::Wc: return "Wc";
    case Role::bc: return "bc";
    case Role::Wq: return "Wq";
    case Role::bq: return "bq";
  }
  return "?";
}

bool is_quadratic(NeuronFamily f) { return f != NeuronFamily::FirstOrder; }

bool is_t1(NeuronFamily f) {
  return f == NeuronFamily::T1Full || f == NeuronFamily::T1Pure || f == NeuronFamily::T1And2;
}

const std::vector<Role>& family_roles(NeuronFamily f) { return info(f).roles; }

bool is_bias(Role r) { return r == Role::ba || r == Role::bb || r == Role::bc || r == Role::bq; }

void validate(const QuadraticLayerSpec& s) {
  if (s.in == 0 || s.out == 0) throw ConfigError("layer sizes must be positive");
  if (is_t1(s.family) && s.kind != LayerKind::FC) {
    throw ConfigError(family_tag(s.family) +
                      " needs a full n×n quadratic weight per neuron and is only supported "
                      "for fc layers, not " + kind_tag(s.kind));
  }
  if (s.kind == LayerKind::FC) {
    if (s.kernel != 1 || s.stride != 1 || s.pad != 0) {
      throw ConfigError("fc layers take k=1 s=1 p=0");
    }
    return;
  }
  if (s.kernel == 0 || s.stride == 0) throw ConfigError("kernel and stride must be positive");
  if (s.kind == LayerKind::Depthwise && s.in != s.out) {
    throw ConfigError("dwconv needs in == out, got in=" + std::to_string(s.in) +
                      " out=" + std::to_string(s.out));
  }
}

Shape param_shape(const QuadraticLayerSpec& s, Role r) {
  if (is_bias(r)) return {s.out};
  if (r == Role::Wq) return {s.out, s.in, s.in};
  switch (s.kind) {
    case LayerKind::FC: return {s.out, s.in};
    case LayerKind::Conv: return {s.out, s.in, s.kernel, s.kernel};
    case LayerKind::Depthwise: return {s.out, 1, s.kernel, s.kernel};
  }
  return {};
}

Shape output_shape(const QuadraticLayerSpec& s, const Shape& x) {
  check_input(s, x);
  if (s.kind == LayerKind::FC) return {x[0], s.out};
  const auto g = k::conv_geometry(x, s.out, s.kernel, s.stride, s.pad);
  return {x[0], s.out, g.out_height, g.out_width};
}

LayerParams init_params(const QuadraticLayerSpec& s, std::mt19937_64& rng) {
  validate(s);
  LayerParams p;
  for (Role r : family_roles(s.family)) {
    const Shape shape = param_shape(s, r);
    if (is_bias(r)) {
      p[r] = Tensor::zeros(shape);
      continue;
    }
    double fan_in = 0.0;
    if (r == Role::Wq) {
      fan_in = static_cast<double>(s.in * s.in);
    } else if (s.kind == LayerKind::Depthwise) {
      fan_in = static_cast<double>(s.kernel * s.kernel);
    } else {
      fan_in = static_cast<double>(s.in * s.kernel * s.kernel);
    }
    double stddev = std::sqrt(2.0 / fan_in);
    if (r == Role::Wb) stddev *= 0.1;
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng);
    p[r] = Tensor(shape, std::move(data));
  }
  return p;
}

ParamCount count_params(const QuadraticLayerSpec& s) {
  ParamCount c;
  for (Role r : family_roles(s.family)) {
    const auto n = shape_numel(param_shape(s, r));
    (is_bias(r) ? c.biases : c.weights) += n;
  }
  if (s.batchnorm) c.norm = 2 * s.out;
  return c;
}

std::uint64_t count_macs(const QuadraticLayerSpec& s, const Shape& x) {
  Shape batched{1};
  batched.insert(batched.end(), x.begin(), x.end());
  const Shape y = output_shape(s, batched);
  const std::uint64_t in_elems = shape_numel(x);
  const std::uint64_t out_elems = shape_numel(y);
  std::uint64_t branch = 0;
  switch (s.kind) {
    case LayerKind::FC: branch = s.out * s.in; break;
    case LayerKind::Conv: branch = out_elems * s.in * s.kernel * s.kernel; break;
    case LayerKind::Depthwise: branch = out_elems * s.kernel * s.kernel; break;
  }
  const std::uint64_t bilinear = s.out * (s.in * s.in + s.in);
  switch (s.family) {
    case NeuronFamily::FirstOrder: return branch;
    case NeuronFamily::T1Pure: return bilinear;
    case NeuronFamily::T1Full: return bilinear + branch;
    case NeuronFamily::T1And2: return bilinear + in_elems + branch;
    case NeuronFamily::T2: return in_elems + branch;
    case NeuronFamily::T3: return branch + out_elems;
    case NeuronFamily::T4: return 2 * branch + out_elems;
    case NeuronFamily::T2And4: return 3 * branch + in_elems + out_elems;
    case NeuronFamily::Proposed: return 3 * branch + out_elems;
  }
  return 0;
}

GraphVars auto_forward(Tape& t, const QuadraticLayerSpec& s, const ParamVars& p, Var x) {
  validate(s);
  check_input(s, t.value(x).shape());
  using R = Role;
  GraphVars g;
  switch (s.family) {
    case NeuronFamily::FirstOrder: g.y = branch(t, s, x, p.at(R::Wa), p.at(R::ba)); break;
    case NeuronFamily::T1Pure: g.y = ops::add_bias(t, bilinear(t, s, x, p.at(R::Wq)), p.at(R::bq)); break;
    case NeuronFamily::T1Full: {
      Var q = bilinear(t, s, x, p.at(R::Wq));
      g.y = ops::add(t, q, branch(t, s, x, p.at(R::Wb), p.at(R::bb)));
      break;
    }
    case NeuronFamily::T1And2: {
      Var q = bilinear(t, s, x, p.at(R::Wq));
      Var sq = ops::hadamard(t, x, x);
      g.y = ops::add(t, q, branch(t, s, sq, p.at(R::Wb), p.at(R::bb)));
      break;
    }
    case NeuronFamily::T2: g.y = branch(t, s, ops::hadamard(t, x, x), p.at(R::Wa), p.at(R::ba)); break;
    case NeuronFamily::T3:
      g.a = branch(t, s, x, p.at(R::Wa), p.at(R::ba));
      g.y = ops::hadamard(t, g.a, g.a);
      break;
    case NeuronFamily::T4:
      g.a = branch(t, s, x, p.at(R::Wa), p.at(R::ba));
      g.b = branch(t, s, x, p.at(R::Wb), p.at(R::bb));
      g.y = ops::hadamard(t, g.a, g.b);
      break;
    case NeuronFamily::T2And4: {
      g.a = branch(t, s, x, p.at(R::Wa), p.at(R::ba));
      g.b = branch(t, s, x, p.at(R::Wb), p.at(R::bb));
      Var sq = ops::hadamard(t, x, x);
      Var c = branch(t, s, sq, p.at(R::Wc), p.at(R::bc));
      g.y = ops::add(t, ops::hadamard(t, g.a, g.b), c);
      break;
    }
    case NeuronFamily::Proposed: {
      g.a = branch(t, s, x, p.at(R::Wa), p.at(R::ba));
      g.b = branch(t, s, x, p.at(R::Wb), p.at(R::bb));
      Var c = branch(t, s, x, p.at(R::Wc), p.at(R::bc));
      g.y = ops::add(t, ops::hadamard(t, g.a, g.b), c);
      break;
    }
  }
  return g;
}

ForwardResult forward(const QuadraticLayerSpec& s, const LayerParams& params, const Tensor& x) {
  validate(s);
  check_params(s, params);
  Tape t(false);
  ParamVars pv;
  for (const auto& [role, value] : params) pv[role] = t.constant(value);
  auto g = auto_forward(t, s, pv, t.constant(x));
  ForwardResult r;
  r.y = t.value(g.y);
  r.cache.family = s.family;
  r.cache.x = x;
  r.cache.param_ids = param_ids(s.family, params);
  for (CacheSlot slot : info(s.family).cache) {
    if (slot == CacheSlot::A) r.cache.a = t.value(g.a);
    if (slot == CacheSlot::B) r.cache.b = t.value(g.b);
  }
  return r;
}

LayerGrads symbolic_backward(const QuadraticLayerSpec& s, const LayerParams& params,
                             const LayerCache& cache, const Tensor& dy, bool need_dx) {
  validate(s);
  check_params(s, params);
  if (cache.family != s.family) {
    throw IntegrityError("quadneuron", "cache from a " + family_tag(cache.family) +
                                           " layer passed to a " + family_tag(s.family) + " layer");
  }
  check_input(s, cache.x.shape());
  if (cache.param_ids != param_ids(s.family, params)) {
    throw IntegrityError("quadneuron", "cache was produced with different parameter tensors");
  }
  const Shape y = output_shape(s, cache.x.shape());
  if (dy.shape() != y) {
    throw IntegrityError("quadneuron", "upstream gradient " + shape_str(dy.shape()) +
                                           " does not match layer output " + shape_str(y));
  }
  const SymbolicRule* rule = find_symbolic(s.family);
  if (!rule) {
    throw ConfigError("no closed-form backward registered for " + family_tag(s.family));
  }
  for (CacheSlot slot : rule->cache) {
    const std::optional<Tensor>& v = slot == CacheSlot::A ? cache.a : cache.b;
    if (slot != CacheSlot::X && (!v || v->shape() != y)) {
      throw IntegrityError("quadneuron", "cache lacks a declared branch value");
    }
  }
  return rule->backward(s, params, cache, dy, need_dx);
}

const SymbolicRule* find_symbolic(NeuronFamily f) {
  std::lock_guard lock(registry_mutex());
  auto it = registry().find(f);
  return it == registry().end() ? nullptr : &it->second;
}

void register_symbolic(NeuronFamily f, SymbolicRule rule) {
  std::lock_guard lock(registry_mutex());
  registry()[f] = std::move(rule);
}

void unregister_symbolic(NeuronFamily f) {
  std::lock_guard lock(registry_mutex());
  registry().erase(f);
}

void reset_symbolic_registry() {
  std::lock_guard lock(registry_mutex());
  registry() = builtin_rules();
}

Var record_symbolic(Tape& t, const QuadraticLayerSpec& s, const ParamVars& pv, Var x) {
  const SymbolicRule* rule = find_symbolic(s.family);
  if (!rule) throw ConfigError("no closed-form backward registered for " + family_tag(s.family));
  LayerParams params;
  std::vector<Var> inputs{x};
  for (Role r : family_roles(s.family)) {
    params[r] = t.value(pv.at(r));
    inputs.push_back(pv.at(r));
  }
  auto f = forward(s, params, t.value(x));
  const std::vector<CacheSlot> slots = rule->cache;
  NodeSpec spec;
  spec.op = OpKind::QuadraticLayer;
  spec.mode = NodeMode::Symbolic;
  spec.inputs = inputs;
  spec.tag = family_tag(s.family);
  for (CacheSlot slot : slots) {
    switch (slot) {
      case CacheSlot::X: spec.retained.push_back(f.cache.x); break;
      case CacheSlot::A: spec.retained.push_back(*f.cache.a); break;
      case CacheSlot::B: spec.retained.push_back(*f.cache.b); break;
    }
  }
  spec.value = std::move(f.y);
  spec.backward = [s, params, slots](const Tensor& dy, std::span<const Tensor> retained,
                                     std::span<const bool> needs) {
    LayerCache cache;
    cache.family = s.family;
    cache.param_ids = param_ids(s.family, params);
    for (std::size_t i = 0; i < slots.size(); ++i) {
      switch (slots[i]) {
        case CacheSlot::X: cache.x = retained[i]; break;
        case CacheSlot::A: cache.a = retained[i]; break;
        case CacheSlot::B: cache.b = retained[i]; break;
      }
    }
    auto g = symbolic_backward(s, params, cache, dy, needs[0]);
    std::vector<std::optional<Tensor>> d;
    d.push_back(needs[0] ? g.dx : std::nullopt);
    const auto& roles = family_roles(s.family);
    for (std::size_t i = 0; i < roles.size(); ++i) {
      if (needs[i + 1]) {
        d.push_back(g.params.at(roles[i]));
      } else {
        d.emplace_back();
      }
    }
    return d;
  };
  return t.record(std::move(spec));
}

PolynomialProbe polynomial_degree_probe(const std::vector<QuadraticLayerSpec>& layers,
                                        const std::vector<LayerParams>& params, double tolerance) {
  const std::size_t L = layers.size();
  if (L == 0 || L > 4 || params.size() != L) {
    throw InputError("quadneuron", "degree probe needs 1..4 layers with parameters");
  }
  for (const auto& s : layers) {
    if (s.kind != LayerKind::FC || s.batchnorm || s.activation != Activation::None) {
      throw InputError("quadneuron", "degree probe needs plain fc layers without activation");
    }
  }
  if (layers.front().in != 1 || layers.back().out != 1) {
    throw InputError("quadneuron", "degree probe needs a scalar input and output");
  }
  const std::size_t degree = std::size_t{1} << L;
  auto evaluate = [&](const std::vector<double>& xs) {
    Tensor h({xs.size(), 1}, xs);
    for (std::size_t i = 0; i < L; ++i) h = forward(layers[i], params[i], h).y;
    return h.to_vector();
  };
  std::vector<double> fit(degree + 1), held(degree);
  for (std::size_t i = 0; i <= degree; ++i) {
    fit[i] = std::cos(std::numbers::pi * (2.0 * i + 1.0) / (2.0 * (degree + 1)));
  }
  for (std::size_t i = 0; i < degree; ++i) {
    held[i] = std::cos(std::numbers::pi * (2.0 * i + 1.0) / (2.0 * degree));
  }
  const auto yf = evaluate(fit);
  const auto yh = evaluate(held);

  Eigen::MatrixXd V(degree + 1, degree + 1);
  Eigen::VectorXd rhs(degree + 1);
  for (std::size_t i = 0; i <= degree; ++i) {
    double p = 1.0;
    for (std::size_t j = 0; j <= degree; ++j, p *= fit[i]) V(i, j) = p;
    rhs(i) = yf[i];
  }
  const Eigen::VectorXd c = V.partialPivLu().solve(rhs);

  PolynomialProbe r;
  r.coefficients.assign(c.data(), c.data() + c.size());
  double scale = 1.0, worst = 0.0;
  for (double v : yh) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < degree; ++i) {
    double acc = 0.0;
    for (std::size_t j = degree + 1; j-- > 0;) acc = acc * held[i] + r.coefficients[j];
    worst = std::max(worst, std::abs(acc - yh[i]));
  }
  r.held_out_residual = worst / scale;
  if (r.held_out_residual > tolerance) {
    throw IntegrityError("quadneuron", "network output is not a polynomial of degree <= " +
                                           std::to_string(degree) + " (held-out residual " +
                                           std::to_string(r.held_out_residual) + ")");
  }
  return r;
}

}  // namespace quadra
