#pragma once

// Feed-forward networks of elastic blocks. A block computes
//   z = W·a + b,  h = γ ⊙ z + β (frozen norm, optional),  a' = act(h) [+ a]
// Conv blocks use same padding and stride 1 on a fixed H×W grid, with
// activations flattened channel-major.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ecomp/elastic.hpp"
#include "ecomp/profile.hpp"

namespace ecomp {

enum class Activation { Identity, Relu, Gelu };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Global Lipschitz constants: 1 for Identity/ReLU; sup GELU' = 1.128904... at
// x = √2, rounded up.
double activation_lipschitz(Activation a);
double activate(Activation a, double x);
double activation_derivative(Activation a, double x);

struct FrozenNorm {
  Vector gamma;
  Vector beta;
};

struct Block {
  ElasticLayer layer;
  Activation act = Activation::Relu;
  std::optional<FrozenNorm> norm;
  bool residual = false;
  std::string name;
};

struct Network {
  std::size_t height = 1, width = 1;  // spatial grid for conv blocks
  std::vector<Block> blocks;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t block_in_dim(std::size_t l) const;
  std::size_t block_out_dim(std::size_t l) const;
  std::size_t spatial() const { return height * width; }
  // Throws on incompatible shapes, bad norms, residual dimension mismatch or
  // inconsistent tied groups.
  void validate() const;
};

Profile full_profile(const Network& net);
// Throws if ranks are out of range, bits invalid, or tied groups disagree.
void validate_profile(const Network& net, const Profile& p);

struct CompiledBlock {
  LayerOp op;
  Activation act = Activation::Relu;
  std::optional<FrozenNorm> norm;
  bool residual = false;
  std::size_t kh = 1, kw = 1;
};

struct CompiledNetwork {
  std::size_t height = 1, width = 1;
  std::vector<CompiledBlock> blocks;
};

CompiledNetwork compile(const Network& net, const Profile& p);
CompiledNetwork compile_full(const Network& net);

struct ForwardTrace {
  std::vector<Vector> inputs;   // a_{ℓ−1}
  std::vector<Vector> preacts;  // h_ℓ (after norm, before activation)
  std::vector<Vector> outputs;  // a_ℓ
  Vector logits;
};

// Staged linear map z = W a + b. Dense: (Vᵀa, σ⊙, U·); conv: 1×1, core, 1×1.
// `flops` is charged 2 per multiply-add and 1 per scaling.
Vector linear_apply(const CompiledBlock& b, std::span<const double> a, std::size_t height,
                    std::size_t width, std::uint64_t* flops = nullptr);
// Adjoint of the linear part (bias excluded).
Vector linear_adjoint(const CompiledBlock& b, std::span<const double> y, std::size_t height,
                      std::size_t width);

ForwardTrace forward(const CompiledNetwork& net, std::span<const double> x,
                     std::uint64_t* flops = nullptr);
ForwardTrace forward(const Network& net, std::span<const double> x, const Profile& p);
ForwardTrace forward_full(const Network& net, std::span<const double> x);

// ‖f̃_k(x) − f(x)‖₂
double logit_drift(const Network& net, std::span<const double> x, const Profile& p);
double logit_drift(const CompiledNetwork& full, const CompiledNetwork& compressed,
                   std::span<const double> x);

// Gain from a perturbation of block ℓ's pre-norm output to its block output:
// Lip(act)·max|γ|.
double entry_gain(const CompiledBlock& b);
// Upper bound on the Lipschitz constant of a whole block in its input:
// Lip(act)·‖diag(γ)W‖ (conv: √(hw)·‖diag(γ)·unfold(K)‖), plus 1 if residual.
double block_gain(const CompiledBlock& b);

// Guaranteed bound on the gain from block ℓ's pre-norm output to the logits:
// entry_gain(ℓ) times the product of later block gains. Each later gain is
// the maximum over the full weights and every profile in `tail_profiles`, so
// the bound also covers compressed tails of those profiles.
double exact_postlayer_lipschitz(const Network& net, std::size_t l,
                                 const std::vector<Profile>& tail_profiles = {});

// Jacobian-vector products of the map from block ℓ's pre-norm output to the
// logits, linearized at the trace.
Vector tail_jvp(const CompiledNetwork& net, const ForwardTrace& trace, std::size_t l,
                std::span<const double> dz);
Vector tail_vjp(const CompiledNetwork& net, const ForwardTrace& trace, std::size_t l,
                std::span<const double> dlogits);

// FNV-1a over the shapes and parameter bytes.
std::uint64_t fingerprint(const Network& net);

}  // namespace ecomp
