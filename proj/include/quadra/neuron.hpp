#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "quadra/tape.hpp"
#include "quadra/tensor.hpp"

namespace quadra {

enum class NeuronFamily {
  FirstOrder,
  T1Full,   // XᵀWqX + WbX
  T1Pure,   // XᵀWqX
  T2,       // Wa(X∘X)
  T3,       // (WaX)∘(WaX)
  T4,       // (WaX)∘(WbX)
  T1And2,   // XᵀWqX + Wb(X∘X)
  T2And4,   // (WaX)∘(WbX) + Wc(X∘X)
  Proposed, // (WaX)∘(WbX) + WcX
};

enum class LayerKind { FC, Conv, Depthwise };
enum class Activation { None, Relu };

/// Weight and bias slots. Every branch carries a bias.
enum class Role { Wa, ba, Wb, bb, Wc, bc, Wq, bq };

std::string family_tag(NeuronFamily f);  // lowercase, e.g. "proposed", "t1_full"
/// Accepts the tags above in any case; "t1" aliases t1_full. Throws ConfigError.
NeuronFamily parse_family(const std::string& tag);
std::string kind_tag(LayerKind k);  // fc | conv | dwconv
LayerKind parse_kind(const std::string& tag);
std::string role_name(Role r);
bool is_quadratic(NeuronFamily f);
bool is_t1(NeuronFamily f);

/// Roles in canonical order (weights and biases interleaved per branch).
const std::vector<Role>& family_roles(NeuronFamily f);
bool is_bias(Role r);

struct QuadraticLayerSpec {
  NeuronFamily family = NeuronFamily::FirstOrder;
  LayerKind kind = LayerKind::FC;
  std::size_t in = 1;
  std::size_t out = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool batchnorm = false;
  Activation activation = Activation::None;

  bool operator==(const QuadraticLayerSpec&) const = default;
};

/// Throws ConfigError for T1 outside FC, depthwise with in != out, FC with
/// spatial hyperparameters, or zero sizes.
void validate(const QuadraticLayerSpec& spec);

Shape param_shape(const QuadraticLayerSpec& spec, Role role);
/// Shape of the layer output for input shape `x` (DimensionError on mismatch).
Shape output_shape(const QuadraticLayerSpec& spec, const Shape& x);

using LayerParams = std::map<Role, Tensor>;

/// Kaiming fan-in normal for Wa/Wc/Wq, Kaiming × 0.1 for Wb, zero biases.
LayerParams init_params(const QuadraticLayerSpec& spec, std::mt19937_64& rng);

struct ParamCount {
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t norm = 0;  // batch-norm gamma + beta

  std::uint64_t total() const { return weights + biases + norm; }
};
ParamCount count_params(const QuadraticLayerSpec& spec);
/// Multiply-accumulates for one sample of shape `x` (without the batch axis).
std::uint64_t count_macs(const QuadraticLayerSpec& spec, const Shape& x);

/// Forward values retained for the closed-form backward. Which of A and B
/// are present depends on the family (see `declared_cache`).
struct LayerCache {
  NeuronFamily family = NeuronFamily::FirstOrder;
  Tensor x;
  std::optional<Tensor> a;  // Wa·X + ba
  std::optional<Tensor> b;  // Wb·X + bb
  // Parameter storages the cache was produced with; a mismatch means stale.
  std::vector<const void*> param_ids;
};

enum class CacheSlot { X, A, B };

struct LayerGrads {
  LayerParams params;
  std::optional<Tensor> dx;
};

struct ForwardResult {
  Tensor y;
  LayerCache cache;
};

/// Pure forward. Evaluates the same kernels in the same order as the AUTO
/// tape graph, so values are bit-identical to it.
ForwardResult forward(const QuadraticLayerSpec& spec, const LayerParams& params, const Tensor& x);

/// Closed-form gradients. Throws IntegrityError for a cache from another
/// family, another input shape or other parameter tensors.
LayerGrads symbolic_backward(const QuadraticLayerSpec& spec, const LayerParams& params,
                             const LayerCache& cache, const Tensor& dy, bool need_dx = true);

using SymbolicBackwardFn = std::function<LayerGrads(
    const QuadraticLayerSpec&, const LayerParams&, const LayerCache&, const Tensor&, bool)>;

struct SymbolicRule {
  std::vector<CacheSlot> cache;
  SymbolicBackwardFn backward;
};

/// Registered closed forms. Every family is registered at startup; tests may
/// remove or replace entries.
const SymbolicRule* find_symbolic(NeuronFamily f);
void register_symbolic(NeuronFamily f, SymbolicRule rule);
void unregister_symbolic(NeuronFamily f);
/// Restores the built-in registrations.
void reset_symbolic_registry();

using ParamVars = std::map<Role, Var>;

struct GraphVars {
  Var y;
  Var a;  // invalid when the family has no A branch
  Var b;
};

/// Records the layer as primitive AUTO ops.
GraphVars auto_forward(Tape& tape, const QuadraticLayerSpec& spec, const ParamVars& params, Var x);

/// Records the layer as one SYMBOLIC node retaining only the declared cache.
/// Throws ConfigError when no closed form is registered for the family.
Var record_symbolic(Tape& tape, const QuadraticLayerSpec& spec, const ParamVars& params, Var x);

struct PolynomialProbe {
  std::vector<double> coefficients;  // ascending powers, size 2^L + 1
  double held_out_residual = 0.0;    // max |p(x) − net(x)| / max(1, max|net(x)|)
};

/// Interpolates a scalar-in, scalar-out chain of layers (no activation, no
/// batch-norm, L ≤ 4) at 2^L+1 Chebyshev nodes and checks 2^L held-out
/// nodes. Throws IntegrityError when the residual exceeds `tolerance`.
PolynomialProbe polynomial_degree_probe(const std::vector<QuadraticLayerSpec>& layers,
                                        const std::vector<LayerParams>& params,
                                        double tolerance = 1e-8);

}  // namespace quadra
